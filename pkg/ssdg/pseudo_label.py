"""
伪标签选择器接口

训练循环只依赖 PseudoLabelSelector，不关心阈值是自适应的还是固定的。
"""

from abc import ABC, abstractmethod
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .threshold import (
    PseudoLabelBatch,
    ThresholdConfig,
    ThresholdState,
    fixed_select,
    local_thresholds,
    select,
)

METHOD_CAT = "cat"
METHOD_FIXMATCH = "fixmatch_baseline"
METHOD_SUPERVISED = "supervised_only"
METHOD_FULL_LABELS = "full_labels"
METHODS = (METHOD_CAT, METHOD_FIXMATCH, METHOD_SUPERVISED, METHOD_FULL_LABELS)


class PseudoLabelSelector(ABC):
    """
    Pseudo-label selector interface for decoupling the training loop from the thresholding rule.
    """

    @abstractmethod
    def select(self, distributions: np.ndarray, domain_id: int,
               example_ids: Optional[np.ndarray] = None) -> PseudoLabelBatch:
        """
        Select pseudo-labels for one domain's weak-view predictions.
        """
        pass

    @abstractmethod
    def observe(self, distributions_by_domain: Mapping[int, np.ndarray]) -> None:
        """
        Feed one step's weak-view predictions, keyed by source domain, back into the selector state.
        Called once per training step.
        """
        pass

    @abstractmethod
    def snapshot(self) -> Dict[int, dict]:
        """
        Current thresholds per domain: {domain_id: {"tau_g", "expectations", "thresholds"}}.
        """
        pass


class AdaptiveThresholdSelector(PseudoLabelSelector):
    """类别-域感知自适应阈值（CAT）"""

    def __init__(self, domains: Iterable[int], num_classes: int, config: ThresholdConfig):
        config.validate()
        self.state = ThresholdState.create(domains, num_classes, config.ema_lambda, config.per_domain_thresholds)

    def select(self, distributions, domain_id, example_ids=None) -> PseudoLabelBatch:
        return select(self.state, distributions, domain_id, example_ids)

    def observe(self, distributions_by_domain) -> None:
        self.state = self.state.update_step(distributions_by_domain)

    def snapshot(self) -> Dict[int, dict]:
        out = {}
        for domain_id in self.state.domains:
            ds = self.state.domain_state(domain_id)
            out[domain_id] = {
                "tau_g": ds.tau_g,
                "expectations": ds.expectations.tolist(),
                "thresholds": local_thresholds(ds).tolist(),
                "step": ds.step,
            }
        return out


class FixedThresholdSelector(PseudoLabelSelector):
    """固定阈值基线（FixMatch 风格），不随训练变化"""

    def __init__(self, domains: Iterable[int], num_classes: int, tau: float = 0.95):
        self.domains = tuple(domains)
        self.num_classes = num_classes
        self.tau = tau

    def select(self, distributions, domain_id, example_ids=None) -> PseudoLabelBatch:
        return fixed_select(self.tau, distributions, domain_id, example_ids)

    def observe(self, distributions_by_domain) -> None:
        return None

    def snapshot(self) -> Dict[int, dict]:
        return {
            d: {"tau_g": self.tau, "expectations": None, "thresholds": [self.tau] * self.num_classes, "step": None}
            for d in self.domains
        }


def create_selector(method: str, domains: Iterable[int], num_classes: int,
                    config: ThresholdConfig) -> Optional[PseudoLabelSelector]:
    """按训练方法创建选择器；纯监督方法不使用伪标签，返回 None"""
    method = method.lower()
    if method == METHOD_CAT:
        return AdaptiveThresholdSelector(domains, num_classes, config)
    if method == METHOD_FIXMATCH:
        return FixedThresholdSelector(domains, num_classes, config.fixed_tau)
    return None
