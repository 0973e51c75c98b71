"""引擎异常体系。

参数类异常继承 ValueError，蓝图中沿用 ``except ValueError`` 的处理方式即可。
"""

from __future__ import annotations

from typing import Any


class MlmcError(Exception):
    """所有引擎异常的基类"""


class InvalidArgumentError(MlmcError, ValueError):
    """输入参数非法（维度不符、非有限值、越界等）"""


class StateError(MlmcError):
    """调用时机不满足前置条件（如缺少试探样本）"""


class ConvergenceError(MlmcError):
    """迭代过程未在限定步数内收敛，携带最后一次迭代结果"""

    def __init__(self, message: str, last_iterate: Any = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class BiasTargetUnreachableError(ConvergenceError):
    """达到最大层数仍未满足偏差目标，携带部分估计结果"""

    def __init__(self, message: str, partial: Any = None):
        super().__init__(message, last_iterate=partial)
        self.partial = partial


class DegenerateObjectiveError(InvalidArgumentError):
    """样本中所有贡献均为 0，目标函数退化"""


class BracketError(MlmcError):
    """VaR 二分法无法建立有效区间"""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(InvalidArgumentError):
    """实验配置校验失败，field 为出错字段路径"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.reason = message
