"""
特征空间数据增强模块

弱增强：加性高斯噪声；强增强：更大的高斯噪声 + 逐坐标随机置零。
随机数流由调用方持有并传入。
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.4
    strong_dropout: float = 0.2

    def validate(self) -> None:
        if self.weak_sigma < 0 or self.strong_sigma < 0:
            raise ConfigError("weak_sigma / strong_sigma 不能为负")
        if self.weak_sigma > 0 and self.strong_sigma > 0 and not self.weak_sigma < self.strong_sigma:
            raise ConfigError(
                f"弱增强噪声必须小于强增强噪声: weak_sigma={self.weak_sigma}, strong_sigma={self.strong_sigma}"
            )
        if not 0 <= self.strong_dropout < 1:
            raise ConfigError(f"strong_dropout 必须在 [0, 1) 内: {self.strong_dropout}")


class FeatureAugmenter:
    """对单个向量或按行的特征矩阵做弱/强增强，输出形状与输入相同"""

    def __init__(self, config: AugmentConfig):
        config.validate()
        self.config = config

    def weak(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.config.weak_sigma == 0:
            return x.copy()
        return x + rng.normal(0.0, self.config.weak_sigma, size=x.shape)

    def strong(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = x.copy()
        if self.config.strong_sigma > 0:
            out = out + rng.normal(0.0, self.config.strong_sigma, size=x.shape)
        if self.config.strong_dropout > 0:
            drop = rng.random(x.shape) < self.config.strong_dropout
            out[drop] = 0.0
        return out
