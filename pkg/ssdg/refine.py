"""
噪声伪标签修正模块

在投影嵌入上做余弦相似度 kNN：
1. 每个样本取最相似的 K 个其他样本（相似度相同按样本编号从小到大），
   邻居伪标签多数投票得到修正标签，并计算邻居与自身伪标签一致的比例（agreement）
2. 每个伪标签类别内取 agreement 的 alpha 分位数作为门限，
   agreement >= 门限且修正标签等于原伪标签的样本进入 clean set
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractViolation, NumericError
from .threshold import PseudoLabelBatch

logger = logging.getLogger(__name__)

# agreement 是 1/K 的整数倍，门限比较留出浮点插值误差
CUTOFF_TOLERANCE = 1e-12


@dataclass(frozen=True)
class RefineConfig:
    k_neighbors: int = 10
    alpha: float = 0.5
    min_class_size: int = 2
    global_fractile: bool = False
    enabled: bool = True

    def validate(self) -> None:
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors 必须 >= 1: {self.k_neighbors}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha 必须在 (0, 1) 内: {self.alpha}")
        if self.min_class_size < 1:
            raise ConfigError(f"min_class_size 必须 >= 1: {self.min_class_size}")


@dataclass(frozen=True)
class KnnAggregate:
    corrected_labels: np.ndarray
    agreements: np.ndarray
    neighbors: np.ndarray


@dataclass(frozen=True)
class CleanSet:
    """修正后的可靠伪标签集合 P 及其补集"""

    member_ids: np.ndarray
    corrected_labels: np.ndarray
    agreements: np.ndarray
    complement_ids: np.ndarray
    cutoffs: Dict[int, float] = field(default_factory=dict)
    report: Optional[pd.DataFrame] = None

    @classmethod
    def empty(cls, complement_ids: Optional[np.ndarray] = None) -> "CleanSet":
        return cls(
            member_ids=np.zeros(0, dtype=np.int64),
            corrected_labels=np.zeros(0, dtype=np.int64),
            agreements=np.zeros(0),
            complement_ids=np.zeros(0, dtype=np.int64) if complement_ids is None else np.asarray(complement_ids),
        )

    def __len__(self) -> int:
        return len(self.member_ids)

    def label_map(self) -> Dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.member_ids, self.corrected_labels)}


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("余弦相似度的输入向量范数为 0")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms == 0):
        raise NumericError("存在范数为 0 的嵌入")
    unit = embeddings / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def knn_aggregate(
    embeddings: np.ndarray,
    pseudo_labels: np.ndarray,
    config: RefineConfig,
    example_ids: Optional[np.ndarray] = None,
) -> KnnAggregate:
    """
    kNN 邻居投票

    Args:
        embeddings: (n, d) 嵌入
        pseudo_labels: (n,) 伪标签
        config: RefineConfig，使用其中的 k_neighbors
        example_ids: 样本编号，用于相似度并列时排序；缺省为行号

    Returns:
        KnnAggregate(corrected_labels, agreements, neighbors[n, K]（行号）)
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    n = len(labels)
    k = config.k_neighbors
    if embeddings.shape[0] != n:
        raise ContractViolation("嵌入行数与伪标签数量不一致")
    if k >= n:
        raise ConfigError(f"k_neighbors={k} 必须小于样本数 {n}")
    ids = np.arange(n) if example_ids is None else np.asarray(example_ids, dtype=np.int64)

    sims = _similarity_matrix(embeddings)
    num_classes = int(labels.max()) + 1 if n else 0

    neighbors = np.empty((n, k), dtype=np.int64)
    corrected = np.empty(n, dtype=np.int64)
    agreements = np.empty(n, dtype=np.float64)
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        # 主键相似度降序，次键样本编号升序
        order = np.lexsort((ids, -row))
        nbr = order[:k]
        neighbors[i] = nbr
        votes = np.bincount(labels[nbr], minlength=num_classes)
        top = np.flatnonzero(votes == votes.max())
        corrected[i] = top[0] if len(top) == 1 else labels[i]
        agreements[i] = float(np.mean(labels[nbr] == labels[i]))

    return KnnAggregate(corrected, agreements, neighbors)


def select_clean(
    aggregates: KnnAggregate,
    pseudo_labels: np.ndarray,
    config: RefineConfig,
    example_ids: Optional[np.ndarray] = None,
) -> CleanSet:
    """
    按类 alpha 分位数筛选 clean set

    分位数使用线性插值；global_fractile=True 时所有参与类别共用一个门限。
    样本数少于 min_class_size 的伪标签类别不贡献成员。
    """
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    ids = np.arange(len(labels)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    if len(labels) == 0:
        return CleanSet.empty()

    agreements = aggregates.agreements
    consensus = aggregates.corrected_labels == labels

    classes, counts = np.unique(labels, return_counts=True)
    participating = {int(c) for c, cnt in zip(classes, counts) if cnt >= config.min_class_size}

    cutoffs: Dict[int, float] = {}
    if config.global_fractile and participating:
        pool = agreements[np.isin(labels, list(participating))]
        shared = float(np.quantile(pool, config.alpha))
        cutoffs = {c: shared for c in participating}
    else:
        for c in sorted(participating):
            cutoffs[c] = float(np.quantile(agreements[labels == c], config.alpha))

    member = np.zeros(len(labels), dtype=bool)
    for c, cutoff in cutoffs.items():
        in_class = labels == c
        member |= in_class & (agreements >= cutoff - CUTOFF_TOLERANCE) & consensus

    return CleanSet(
        member_ids=ids[member],
        corrected_labels=aggregates.corrected_labels[member],
        agreements=agreements[member],
        complement_ids=ids[~member],
        cutoffs=cutoffs,
        report=pd.DataFrame({
            "example_id": ids,
            "pseudo_label": labels,
            "corrected_label": aggregates.corrected_labels,
            "agreement": agreements,
            "selected": member.astype(int),
        }),
    )


def refine(
    embeddings: np.ndarray,
    batch: PseudoLabelBatch,
    config: RefineConfig,
    example_ids: Optional[np.ndarray] = None,
) -> CleanSet:
    """
    对阈值筛选后的伪标签样本做 kNN 修正并构造 clean set

    候选样本少于 K+1 时把 K 缩小到 候选数-1（并记录警告）；少于 2 个时返回空集合。

    Args:
        embeddings: 与 batch 逐行对齐的嵌入
        batch: 伪标签选择结果
        config: RefineConfig
        example_ids: 样本编号，缺省取 batch.example_ids，再缺省为行号

    Returns:
        仅覆盖被阈值选中样本的 CleanSet
    """
    config.validate()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(batch):
        raise ContractViolation("嵌入行数与伪标签 batch 不一致")
    if example_ids is None:
        example_ids = batch.example_ids if batch.example_ids is not None else np.arange(len(batch))
    example_ids = np.asarray(example_ids, dtype=np.int64)

    chosen = batch.selected
    cand_ids = example_ids[chosen]
    if len(cand_ids) < 2:
        return CleanSet.empty(cand_ids)

    effective = config
    if config.k_neighbors >= len(cand_ids):
        effective = RefineConfig(len(cand_ids) - 1, config.alpha, config.min_class_size, config.global_fractile)
        logger.warning("候选样本 %s 个, 不足 K+1, K 缩小为 %s", len(cand_ids), effective.k_neighbors)

    cand_labels = batch.pseudo_labels[chosen]
    aggregates = knn_aggregate(embeddings[chosen], cand_labels, effective, cand_ids)
    clean = select_clean(aggregates, cand_labels, effective, cand_ids)
    logger.debug("clean set: 候选=%s, 入选=%s, 门限=%s", len(cand_ids), len(clean), clean.cutoffs)
    return clean
