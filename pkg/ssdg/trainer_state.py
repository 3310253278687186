"""
训练状态管理模块

单个留一域折的可变训练状态：模型参数、优化器、伪标签选择器、clean set 以及随机数流。
"""

from typing import Dict, List, Optional

import numpy as np

from .model import ModelParams, SGDOptimizer, init_params
from .pseudo_label import PseudoLabelSelector
from .refine import CleanSet

# 随机数流在 SeedSequence.spawn 结果中的位置
STREAM_INIT = 0
STREAM_LABELED = 1
STREAM_UNLABELED = 2
STREAM_AUGMENT = 3
NUM_STREAMS = 4


class TrainState:
    """单折训练状态，同一时刻只有一个训练循环写入"""

    def __init__(
        self,
        params: ModelParams,
        optimizer: SGDOptimizer,
        selector: Optional[PseudoLabelSelector],
        rngs: List[np.random.Generator],
    ):
        self.params: ModelParams = params
        self.optimizer: SGDOptimizer = optimizer
        self.selector: Optional[PseudoLabelSelector] = selector  # 纯监督方法为 None
        self.rng_labeled: np.random.Generator = rngs[STREAM_LABELED]
        self.rng_unlabeled: np.random.Generator = rngs[STREAM_UNLABELED]
        self.rng_augment: np.random.Generator = rngs[STREAM_AUGMENT]

        self.clean_set: CleanSet = CleanSet.empty()  # 两次刷新之间缓存
        self.clean_labels: Dict[int, int] = {}  # 样本编号 -> 修正后伪标签
        self.global_step: int = 0  # 主训练阶段已完成的步数（不含预热）
        self.warmup_step: int = 0
        self.epoch: int = 0
        self.refresh_count: int = 0

    @property
    def has_clean_set(self) -> bool:
        return len(self.clean_set) > 0

    def set_clean_set(self, clean: CleanSet) -> None:
        self.clean_set = clean
        self.clean_labels = clean.label_map()
        self.refresh_count += 1


def spawn_streams(seed: int, fold: int) -> List[np.random.Generator]:
    """由 (seed, fold) 派生互相独立的随机数流：初始化、标注采样、未标注采样、数据增强"""
    children = np.random.SeedSequence([seed, fold]).spawn(NUM_STREAMS)
    return [np.random.default_rng(s) for s in children]


def create_train_state(
    input_dim: int,
    num_classes: int,
    hidden_layers,
    proj_dim: int,
    lr: float,
    momentum: float,
    selector: Optional[PseudoLabelSelector],
    seed: int,
    fold: int,
) -> TrainState:
    """
    创建单折训练状态

    参数初始化只依赖 (seed, fold)，与训练方法无关，不同方法在同一折上从相同参数出发。
    """
    rngs = spawn_streams(seed, fold)
    params = init_params(input_dim, num_classes, tuple(hidden_layers), proj_dim, seed=rngs[STREAM_INIT])
    return TrainState(params, SGDOptimizer(lr, momentum), selector, rngs)
