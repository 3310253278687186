"""
数据模型模块

包含样本/数据集容器、按类标注预算切分以及留一域（leave-one-domain-out）折构造。

未标注样本的真实标签只保存在 LabelOracle 中，训练代码只能拿到 TrainingView，
评估代码通过 LabelOracle 计算伪标签精度和目标域准确率。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class Example:
    """单个样本：特征向量 + 可选类别 + 域编号 + 全局唯一编号"""

    features: np.ndarray
    label: Optional[int]
    domain_id: int
    example_id: int

    def without_label(self) -> "Example":
        return Example(self.features, None, self.domain_id, self.example_id)


@dataclass
class DomainDataset:
    """多域数据集，domains[k] 为第 k 个域的全部样本"""

    domains: List[List[Example]]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"类别数必须 >= 2, 当前 {self.num_classes}")
        seen_ids = set()
        for domain_id, examples in enumerate(self.domains):
            if not examples:
                raise DataError(f"域 {domain_id} 没有任何样本（域编号必须从 0 连续编号）")
            for ex in examples:
                if ex.domain_id != domain_id:
                    raise DataError(f"样本 {ex.example_id} 的域编号 {ex.domain_id} 与所在位置 {domain_id} 不一致")
                if ex.features.shape != (self.feature_dim,):
                    raise DataError(
                        f"样本 {ex.example_id} 特征维度 {ex.features.shape} 与数据集维度 {self.feature_dim} 不一致"
                    )
                if ex.label is not None and not 0 <= ex.label < self.num_classes:
                    raise DataError(f"样本 {ex.example_id} 标签 {ex.label} 越界 [0, {self.num_classes})")
                if ex.example_id in seen_ids:
                    raise DataError(f"样本编号重复: {ex.example_id}")
                seen_ids.add(ex.example_id)

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def __len__(self) -> int:
        return sum(len(d) for d in self.domains)

    def all_examples(self) -> List[Example]:
        return [ex for domain in self.domains for ex in domain]


def stack_examples(examples: Sequence[Example], feature_dim: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    将样本列表堆叠为数组

    Returns:
        (features[n, d], labels[n]（无标签记为 -1）, example_ids[n])
    """
    if not examples:
        return (
            np.zeros((0, feature_dim), dtype=np.float64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )
    features = np.stack([ex.features for ex in examples]).astype(np.float64)
    labels = np.array([-1 if ex.label is None else ex.label for ex in examples], dtype=np.int64)
    ids = np.array([ex.example_id for ex in examples], dtype=np.int64)
    return features, labels, ids


@dataclass(frozen=True)
class DomainArrays:
    """单个源域的训练数组（未标注部分不含标签）"""

    domain_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_ids: np.ndarray


@dataclass(frozen=True)
class TrainingView:
    """训练代码可见的全部数据：各源域的标注集与去标签的未标注集"""

    domains: Tuple[DomainArrays, ...]
    num_classes: int
    feature_dim: int

    @property
    def domain_ids(self) -> List[int]:
        return [d.domain_id for d in self.domains]

    def unlabeled_pool(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """所有源域未标注样本拼接：(features, example_ids, domain_ids)"""
        xs = [d.unlabeled_x for d in self.domains]
        ids = [d.unlabeled_ids for d in self.domains]
        doms = [np.full(len(d.unlabeled_ids), d.domain_id, dtype=np.int64) for d in self.domains]
        return np.concatenate(xs), np.concatenate(ids), np.concatenate(doms)


class LabelOracle:
    """
    仅供评估使用的真实标签接口

    保存未标注样本被隐藏的标签和目标域样本，用来统计伪标签精度、clean set 准确率
    以及目标域准确率。训练路径不持有该对象。
    """

    def __init__(self, hidden_labels: Dict[int, int], target_x: np.ndarray, target_y: np.ndarray,
                 source_x: np.ndarray, source_y: np.ndarray):
        self._hidden_labels = dict(hidden_labels)
        self.target_x = target_x
        self.target_y = target_y
        self.source_x = source_x
        self.source_y = source_y

    def labels_for(self, example_ids: np.ndarray) -> np.ndarray:
        """按编号查询隐藏标签，未知记为 -1"""
        return np.array([self._hidden_labels.get(int(i), -1) for i in example_ids], dtype=np.int64)

    def count_correct(self, example_ids: np.ndarray, predicted: np.ndarray) -> Tuple[int, int]:
        """
        统计预测标签与隐藏标签一致的数量

        Returns:
            (正确数, 可核对数)，没有隐藏标签的样本不计入
        """
        truth = self.labels_for(example_ids)
        known = truth >= 0
        correct = int(np.sum(truth[known] == np.asarray(predicted)[known]))
        return correct, int(np.sum(known))


@dataclass
class SsdgSplit:
    """一个留一域折：源域标注/未标注集 + 目标域"""

    labeled: List[Example]
    unlabeled: List[Example]
    target: List[Example]
    held_out_domain: int
    source_domains: Tuple[int, ...]
    num_classes: int
    feature_dim: int
    _hidden_labels: Dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        labeled_ids = {ex.example_id for ex in self.labeled}
        unlabeled_ids = {ex.example_id for ex in self.unlabeled}
        if labeled_ids & unlabeled_ids:
            raise DataError("标注集与未标注集存在重复样本")
        for ex in self.labeled + self.unlabeled:
            if ex.domain_id == self.held_out_domain:
                raise DataError(f"目标域 {self.held_out_domain} 的样本 {ex.example_id} 出现在源域数据中")
        if any(ex.label is None for ex in self.labeled):
            raise DataError("标注集中存在无标签样本")
        # 未标注样本对外一律去掉标签，真实标签转存到 _hidden_labels
        stripped = []
        for ex in self.unlabeled:
            if ex.label is not None:
                self._hidden_labels[ex.example_id] = ex.label
                stripped.append(ex.without_label())
            else:
                stripped.append(ex)
        self.unlabeled = stripped

    def training_view(self) -> TrainingView:
        domains = []
        for domain_id in self.source_domains:
            lab = [ex for ex in self.labeled if ex.domain_id == domain_id]
            unl = [ex for ex in self.unlabeled if ex.domain_id == domain_id]
            lx, ly, lids = stack_examples(lab, self.feature_dim)
            ux, _, uids = stack_examples(unl, self.feature_dim)
            domains.append(DomainArrays(domain_id, lx, ly, lids, ux, uids))
        return TrainingView(tuple(domains), self.num_classes, self.feature_dim)

    def oracle(self) -> LabelOracle:
        target = [ex for ex in self.target if ex.label is not None]
        tx, ty, _ = stack_examples(target, self.feature_dim)
        ux, _, uids = stack_examples(self.unlabeled, self.feature_dim)
        uy = np.array([self._hidden_labels.get(int(i), -1) for i in uids], dtype=np.int64)
        known = uy >= 0
        return LabelOracle(self._hidden_labels, tx, ty, ux[known], uy[known])


def split_labels(
    examples: Sequence[Example],
    labels_per_class: Optional[int],
    seed: SeedLike,
    num_classes: Optional[int] = None,
) -> Tuple[List[Example], List[Example]]:
    """
    按类抽取标注样本

    Args:
        examples: 单个域的样本
        labels_per_class: 每类标注数量 n_L；None 表示全部有标签样本都作为标注集
        seed: 随机种子（整数或整数序列）
        num_classes: 类别数，未提供时按出现过的标签推断

    Returns:
        (labeled, unlabeled)，labeled 按样本编号排序，unlabeled 保持原顺序
    """
    if labels_per_class is not None and labels_per_class < 0:
        raise ConfigError(f"labels_per_class 不能为负: {labels_per_class}")

    if num_classes is None:
        classes = sorted({ex.label for ex in examples if ex.label is not None})
    else:
        classes = list(range(num_classes))

    rng = np.random.default_rng(seed)
    chosen_ids = set()
    for c in classes:
        members = [ex for ex in examples if ex.label == c]
        if labels_per_class is None:
            chosen_ids.update(ex.example_id for ex in members)
            continue
        if len(members) < labels_per_class:
            raise DataError(f"类别 {c} 只有 {len(members)} 个样本，少于每类标注数 {labels_per_class}")
        order = rng.permutation(len(members))[:labels_per_class]
        chosen_ids.update(members[i].example_id for i in order)

    labeled = sorted((ex for ex in examples if ex.example_id in chosen_ids), key=lambda ex: ex.example_id)
    unlabeled = [ex for ex in examples if ex.example_id not in chosen_ids]
    return labeled, unlabeled


def choose_sources(num_domains: int, target: int, num_sources: Optional[int], seed: int) -> Tuple[int, ...]:
    """为目标域选取源域；num_sources 为空时使用其余全部域"""
    others = [k for k in range(num_domains) if k != target]
    if num_sources is None or num_sources == len(others):
        return tuple(others)
    if not 1 <= num_sources <= len(others):
        raise ConfigError(f"源域数量 K={num_sources} 非法, 可选范围 [1, {len(others)}]")
    rng = np.random.default_rng([seed, target, len(others), num_sources])
    picked = rng.choice(len(others), size=num_sources, replace=False)
    return tuple(sorted(others[i] for i in picked))


def build_lodo_folds(
    dataset: DomainDataset,
    labels_per_class: Optional[int] = 10,
    seed: int = 0,
    num_sources: Optional[int] = None,
) -> List[SsdgSplit]:
    """
    构造留一域折

    第 k 折以域 k 为目标域，其余域（或其中按种子抽取的 num_sources 个）为源域。
    同一个域在不同折中的标注切分相同（种子只依赖 (seed, domain_id)）。

    Args:
        dataset: 多域数据集
        labels_per_class: 每个源域每类标注数；None 表示全标注（full_labels 基线）
        seed: 随机种子
        num_sources: 源域数量 K，None 为 n-1

    Returns:
        每个域一个 SsdgSplit
    """
    if dataset.num_domains < 2:
        raise ConfigError(f"留一域评估至少需要 2 个域, 当前 {dataset.num_domains}")

    per_domain = {}
    for domain_id, examples in enumerate(dataset.domains):
        per_domain[domain_id] = split_labels(
            examples, labels_per_class, [seed, domain_id], num_classes=dataset.num_classes
        )

    folds = []
    for target in range(dataset.num_domains):
        sources = choose_sources(dataset.num_domains, target, num_sources, seed)
        labeled = [ex for k in sources for ex in per_domain[k][0]]
        unlabeled = [ex for k in sources for ex in per_domain[k][1]]
        folds.append(
            SsdgSplit(
                labeled=labeled,
                unlabeled=unlabeled,
                target=list(dataset.domains[target]),
                held_out_domain=target,
                source_domains=sources,
                num_classes=dataset.num_classes,
                feature_dim=dataset.feature_dim,
            )
        )
        logger.info(
            "构造第 %s 折: 目标域=%s, 源域=%s, 标注=%s, 未标注=%s, 目标样本=%s",
            target, target, list(sources), len(labeled), len(unlabeled), len(dataset.domains[target]),
        )
    return folds
