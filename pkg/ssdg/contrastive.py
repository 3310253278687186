"""
对比学习损失模块

supcon_loss：监督对比损失，同类样本互为正样本，其余为负样本；用于 clean set。
unsup_nce_loss：实例判别（NT-Xent），样本的另一增强视图为正样本；用于预热和未入选样本。
两者都返回对单位嵌入 z 的解析梯度。
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    warmup_epochs: int = 1

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature 必须 > 0: {self.temperature}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs 不能为负: {self.warmup_epochs}")


def _check_unit(z: np.ndarray, name: str) -> None:
    if z.ndim != 2:
        raise ContractViolation(f"{name} 必须是二维数组, 当前形状 {z.shape}")
    if len(z) and np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0)) > UNIT_NORM_TOLERANCE:
        raise ContractViolation(f"{name} 未归一化（范数偏离 1 超过 {UNIT_NORM_TOLERANCE}）")


def _row_softmax_excluding_self(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    对每行去掉对角元素后做 softmax

    Returns:
        (softmax 矩阵（对角为 0）, 每行 logsumexp)
    """
    n = logits.shape[0]
    masked = logits.copy()
    masked[np.arange(n), np.arange(n)] = -np.inf
    row_max = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - row_max)
    total = e.sum(axis=1, keepdims=True)
    return e / total, (row_max + np.log(total)).ravel()


def supcon_from_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, int]:
    """
    在相似度 logits（已除以温度）上计算监督对比损失

    loss_i = -(1/|P(i)|) * sum_{p in P(i)} [ s_ip - logsumexp_{a != i} s_ia ]
    total = sum_i loss_i / n，没有正样本的锚点贡献 0 但计入分母。

    Returns:
        (loss, dLoss/dLogits, 无正样本锚点数)
    """
    labels = np.asarray(labels)
    n = logits.shape[0]
    if n < 2:
        return 0.0, np.zeros_like(logits), n

    positives = labels[:, None] == labels[None, :]
    np.fill_diagonal(positives, False)
    num_pos = positives.sum(axis=1)
    has_pos = num_pos > 0

    soft, lse = _row_softmax_excluding_self(logits)
    pos_mean = np.where(has_pos, np.sum(np.where(positives, logits, 0.0), axis=1) / np.maximum(num_pos, 1), 0.0)
    per_anchor = np.where(has_pos, lse - pos_mean, 0.0)
    loss = float(per_anchor.sum() / n)

    weights = has_pos.astype(np.float64)
    grad = soft - positives / np.maximum(num_pos, 1)[:, None]
    grad = grad * (weights / n)[:, None]
    np.fill_diagonal(grad, 0.0)
    return loss, grad, int(np.sum(~has_pos))


def supcon_loss(embeddings: np.ndarray, labels: np.ndarray, temperature: float) -> Tuple[float, np.ndarray]:
    """
    监督对比损失

    Args:
        embeddings: (n, d) 单位嵌入
        labels: (n,) 类别（clean set 中为修正后的伪标签）
        temperature: 温度

    Returns:
        (loss, dLoss/dz)
    """
    z = np.asarray(embeddings, dtype=np.float64)
    _check_unit(z, "supcon 嵌入")
    if temperature <= 0:
        raise ConfigError(f"temperature 必须 > 0: {temperature}")
    logits = (z @ z.T) / temperature
    loss, d_logits, no_pos = supcon_from_logits(logits, labels)
    if no_pos:
        logger.debug("supcon: %s 个锚点没有正样本, 贡献为 0", no_pos)
    d_z = (d_logits + d_logits.T) @ z / temperature
    return loss, d_z


def unsup_nce_loss(
    anchors: np.ndarray,
    positives: np.ndarray,
    temperature: float,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    NT-Xent 实例判别损失（两视图对称）

    把 2N 个视图拼在一起，第 i 个视图的正样本是它的另一视图，其余 2N-2 个为负样本；
    loss = mean_i [ logsumexp_{j != i} s_ij - s_i,pos(i) ]。

    Returns:
        (loss, dLoss/dAnchors, dLoss/dPositives)
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.shape != p.shape:
        raise ContractViolation(f"锚点 {a.shape} 与正样本视图 {p.shape} 形状不一致")
    _check_unit(a, "nce 锚点")
    _check_unit(p, "nce 正样本视图")
    if temperature <= 0:
        raise ConfigError(f"temperature 必须 > 0: {temperature}")

    n = len(a)
    if n == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(p)
    if n == 1:
        logger.warning("nce: 只有 1 对样本, 没有负样本, 损失记为 0")
        return 0.0, np.zeros_like(a), np.zeros_like(p)

    views = np.concatenate([a, p])
    logits = views @ views.T / temperature
    m = 2 * n
    pos_index = np.concatenate([np.arange(n, m), np.arange(0, n)])

    soft, lse = _row_softmax_excluding_self(logits)
    loss = float(np.mean(lse - logits[np.arange(m), pos_index]))

    grad = soft.copy()
    grad[np.arange(m), pos_index] -= 1.0
    grad /= m
    d_views = (grad + grad.T) @ views / temperature
    return loss, d_views[:n], d_views[n:]
