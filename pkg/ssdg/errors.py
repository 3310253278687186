"""
异常定义模块

训练引擎内所有可预期的失败都从 SsdgError 派生，CLI 据此映射退出码。
"""

from typing import Dict, Optional

import numpy as np


class SsdgError(Exception):
    """引擎异常基类"""


class ConfigError(SsdgError, ValueError):
    """配置非法（参数越界、未知配置项、域数量不足等）"""


class DataError(SsdgError, ValueError):
    """数据不满足前置条件（某类样本不足、域编号不连续等）"""


class ParseError(DataError):
    """CSV 解析失败，携带出错行号（从 1 开始，表头为第 1 行）"""

    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"第 {line} 行: {message}")

    def __reduce__(self):
        return type(self), (self.line, self.message)


class NumericError(SsdgError, ArithmeticError):
    """数值异常（NaN/Inf 输入、零范数向量）"""


class ContractViolation(SsdgError, ValueError):
    """调用方违反接口约定（形状不一致、嵌入未归一化、未知域等）"""


class TrainingAborted(NumericError):
    """训练中出现 NaN 损失，附带出错 batch 以便诊断"""

    def __init__(self, message: str, batch: Optional[Dict[str, np.ndarray]] = None):
        self.batch = batch or {}
        super().__init__(message)

    def __reduce__(self):
        return type(self), (self.args[0], self.batch)
