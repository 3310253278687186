"""
类别-域感知自适应阈值模块

每个源域维护一份 EMA 状态：
- 全局阈值 tau_g：未标注 batch 平均最大置信度的 EMA，初始为 1/C
- 类别期望 E_t：batch 平均预测分布（完整概率向量）的 EMA，初始为 1/C
局部阈值 tau_g(c) = E_t(c) / max(E_t) * tau_g。
所有更新都返回新对象，控制器整体是对 batch 流的纯折叠。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

SHARED_KEY = -1


@dataclass(frozen=True)
class ThresholdConfig:
    ema_lambda: float = 0.999
    per_domain_thresholds: bool = True
    fixed_tau: float = 0.95

    def validate(self) -> None:
        if not 0 < self.ema_lambda < 1:
            raise ConfigError(f"ema_lambda 必须在 (0, 1) 内: {self.ema_lambda}")
        if not 0 < self.fixed_tau < 1:
            raise ConfigError(f"fixed_tau 必须在 (0, 1) 内: {self.fixed_tau}")


@dataclass(frozen=True)
class DomainThreshold:
    """单个域的阈值状态"""

    num_classes: int
    ema_lambda: float
    tau_g: float
    expectations: np.ndarray
    step: int = 0
    warnings: Tuple[str, ...] = ()

    @classmethod
    def initial(cls, num_classes: int, ema_lambda: float) -> "DomainThreshold":
        return cls(
            num_classes=num_classes,
            ema_lambda=ema_lambda,
            tau_g=1.0 / num_classes,
            expectations=np.full(num_classes, 1.0 / num_classes),
        )

    def _warn(self, message: str) -> "DomainThreshold":
        logger.warning(message)
        return replace(self, warnings=self.warnings + (message,))


def update_global(state: DomainThreshold, batch_confidences: np.ndarray) -> DomainThreshold:
    """
    tau_g <- lam * tau_g + (1 - lam) * mean(confidences)；t <- t + 1

    空 batch 时状态不变并记录警告。
    """
    conf = np.asarray(batch_confidences, dtype=np.float64)
    if conf.size == 0:
        return state._warn("update_global 收到空 batch, 阈值保持不变")
    lam = state.ema_lambda
    tau = lam * state.tau_g + (1.0 - lam) * float(conf.mean())
    return replace(state, tau_g=tau, step=state.step + 1)


def update_expectations(state: DomainThreshold, batch_distributions: np.ndarray) -> DomainThreshold:
    """E_t <- lam * E_t + (1 - lam) * batch 平均预测分布；不推进 t"""
    q = np.asarray(batch_distributions, dtype=np.float64)
    if q.size == 0:
        return state._warn("update_expectations 收到空 batch, 类别期望保持不变")
    if q.ndim != 2 or q.shape[1] != state.num_classes:
        raise ContractViolation(f"预测分布形状 {q.shape} 与类别数 {state.num_classes} 不一致")
    lam = state.ema_lambda
    expectations = lam * state.expectations + (1.0 - lam) * q.mean(axis=0)
    return replace(state, expectations=expectations)


def local_thresholds(state: DomainThreshold) -> np.ndarray:
    """
    MaxNorm 局部阈值：tau_g(c) = E_t(c) / max(E_t) * tau_g

    E_t 全为 0 时退化为所有类别使用 tau_g，并记录警告。
    """
    peak = float(np.max(state.expectations))
    if peak <= 0:
        logger.warning("类别期望全为 0, 局部阈值退化为全局阈值 %.6f", state.tau_g)
        return np.full(state.num_classes, state.tau_g)
    return state.expectations / peak * state.tau_g


@dataclass(frozen=True)
class PseudoLabelBatch:
    """一批未标注样本的伪标签选择结果，字段逐样本对齐"""

    distributions: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    thresholds: np.ndarray
    selected: np.ndarray
    domain_ids: np.ndarray
    example_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.pseudo_labels)

    @property
    def num_selected(self) -> int:
        return int(np.sum(self.selected))

    @property
    def yield_rate(self) -> float:
        return self.num_selected / len(self) if len(self) else 0.0

    @classmethod
    def concat(cls, batches: Iterable["PseudoLabelBatch"]) -> "PseudoLabelBatch":
        batches = list(batches)
        ids = None
        if batches and all(b.example_ids is not None for b in batches):
            ids = np.concatenate([b.example_ids for b in batches])
        return cls(
            distributions=np.concatenate([b.distributions for b in batches]),
            pseudo_labels=np.concatenate([b.pseudo_labels for b in batches]),
            confidences=np.concatenate([b.confidences for b in batches]),
            thresholds=np.concatenate([b.thresholds for b in batches]),
            selected=np.concatenate([b.selected for b in batches]),
            domain_ids=np.concatenate([b.domain_ids for b in batches]),
            example_ids=ids,
        )


def _label_batch(distributions, thresholds_per_class, domain_id, example_ids) -> PseudoLabelBatch:
    q = np.asarray(distributions, dtype=np.float64)
    if q.ndim != 2:
        raise ContractViolation(f"预测分布必须是二维数组, 当前形状 {q.shape}")
    pseudo = np.argmax(q, axis=1)
    conf = q.max(axis=1) if len(q) else np.zeros(0)
    per_sample = np.asarray(thresholds_per_class)[pseudo] if len(q) else np.zeros(0)
    return PseudoLabelBatch(
        distributions=q,
        pseudo_labels=pseudo,
        confidences=conf,
        thresholds=per_sample,
        selected=conf > per_sample,
        domain_ids=np.full(len(q), domain_id, dtype=np.int64),
        example_ids=None if example_ids is None else np.asarray(example_ids),
    )


def fixed_select(tau: float, distributions: np.ndarray, domain_id: int = SHARED_KEY,
                 example_ids: Optional[np.ndarray] = None) -> PseudoLabelBatch:
    """固定阈值选择：selected = max(q) > tau"""
    if not 0 < tau < 1:
        raise ConfigError(f"固定阈值必须在 (0, 1) 内: {tau}")
    q = np.asarray(distributions, dtype=np.float64)
    num_classes = q.shape[1] if q.ndim == 2 else 0
    return _label_batch(q, np.full(num_classes, tau), domain_id, example_ids)


@dataclass(frozen=True)
class ThresholdState:
    """
    全部源域的阈值状态

    per_domain=True 时每个源域独立维护 DomainThreshold；否则所有域共享 SHARED_KEY 下的一份。
    """

    domains: Tuple[int, ...]
    num_classes: int
    ema_lambda: float
    per_domain: bool = True
    states: Dict[int, DomainThreshold] = field(default_factory=dict)

    @classmethod
    def create(cls, domains: Iterable[int], num_classes: int, ema_lambda: float = 0.999,
               per_domain: bool = True) -> "ThresholdState":
        domains = tuple(int(d) for d in domains)
        keys = domains if per_domain else (SHARED_KEY,)
        states = {k: DomainThreshold.initial(num_classes, ema_lambda) for k in keys}
        return cls(domains, num_classes, ema_lambda, per_domain, states)

    def key_for(self, domain_id: int) -> int:
        if domain_id not in self.domains:
            raise ContractViolation(f"未知域 {domain_id}, 已知域 {list(self.domains)}")
        return domain_id if self.per_domain else SHARED_KEY

    def domain_state(self, domain_id: int) -> DomainThreshold:
        return self.states[self.key_for(domain_id)]

    def thresholds_for(self, domain_id: int) -> np.ndarray:
        return local_thresholds(self.domain_state(domain_id))

    def update(self, domain_id: int, batch_distributions: np.ndarray) -> "ThresholdState":
        """用该域本步弱增强视图的预测分布更新 tau_g 与 E_t，其余域的状态对象原样保留"""
        return self.update_step({domain_id: batch_distributions})

    def update_step(self, distributions_by_domain: Mapping[int, np.ndarray]) -> "ThresholdState":
        """
        用一步内各源域的预测分布更新阈值，每个状态每步只做一次 EMA

        共享模式下先把所有域的分布拼接成一个 batch，结果与域的顺序无关。
        """
        grouped: Dict[int, List[np.ndarray]] = {}
        for domain_id in sorted(distributions_by_domain):
            q = np.asarray(distributions_by_domain[domain_id], dtype=np.float64)
            if q.size == 0:
                q = np.zeros((0, self.num_classes))
            elif q.ndim != 2 or q.shape[1] != self.num_classes:
                raise ContractViolation(f"域 {domain_id} 的预测分布形状 {q.shape} 与类别数 {self.num_classes} 不一致")
            grouped.setdefault(self.key_for(domain_id), []).append(q)

        states = dict(self.states)
        for key, parts in grouped.items():
            q = np.concatenate(parts)
            confidences = q.max(axis=1) if q.size else np.zeros(0)
            states[key] = update_expectations(update_global(states[key], confidences), q)
        return replace(self, states=states)


def select(state: ThresholdState, distributions: np.ndarray, domain_id: int,
           example_ids: Optional[np.ndarray] = None) -> PseudoLabelBatch:
    """
    按该域的局部阈值选择伪标签

    selected = max(q_b) > tau_g(argmax(q_b))，argmax 并列时取最小类别编号；恰好等于阈值不选。
    """
    thresholds = state.thresholds_for(domain_id)
    return _label_batch(distributions, thresholds, domain_id, example_ids)
