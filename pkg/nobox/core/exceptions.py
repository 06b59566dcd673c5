"""
异常定义

每个异常携带命令行退出码：0 成功，1 配置校验错误，2 运行期失败，3 评估报告不完整。
"""
from typing import Any, Dict, List, Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_INCOMPLETE = 3


class NoBoxError(Exception):
    """所有业务异常的基类"""

    exit_code: int = EXIT_RUNTIME


class ConfigValidationError(NoBoxError, ValueError):
    """实验配置校验失败"""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []

    @classmethod
    def from_pydantic(cls, exc: Any) -> "ConfigValidationError":
        """把 pydantic 的 ValidationError 转换为带字段名的可读错误"""
        fields: List[str] = []
        lines: List[str] = []
        for err in exc.errors():
            loc = ".".join(str(part) for part in err.get("loc", ()))
            fields.append(loc)
            lines.append(f"{loc}: {err.get('msg')}")
        return cls("配置校验失败 - " + "; ".join(lines), fields=fields)


# ---------- 数据 ----------

class DataError(NoBoxError, ValueError):
    """数据加载与采样错误"""


class DataPathError(DataError):
    """路径不存在"""


class EmptyDatasetError(DataError):
    """目录中没有图像"""


class ImageDecodeError(DataError):
    """图像无法解码"""


class ChannelMismatchError(DataError):
    """通道数与期望不一致"""


class InvalidAuxiliarySizeError(DataError):
    """辅助集大小不是不小于 2 的偶数"""


class InsufficientImagesError(DataError):
    """某一类别的图像数量不足"""


class InvalidTargetError(DataError):
    """目标样本引用无效"""


class TransformError(NoBoxError, ValueError):
    """旋转 / 拼图变换的前置条件不满足"""


# ---------- 模型 ----------

class ShapeMismatchError(NoBoxError, ValueError):
    """输入形状与模型声明的形状不一致"""


class DecoderIndexError(NoBoxError, IndexError):
    """解码器下标越界"""


class SpecMismatchError(NoBoxError, ValueError):
    """检查点与模型规格不匹配"""


# ---------- 训练 ----------

class MechanismError(NoBoxError, ValueError):
    """训练机制与模型不兼容"""


# ---------- 攻击 ----------

class GuideError(NoBoxError, ValueError):
    """正负原型集合无效"""


class ZeroNormEmbeddingError(NoBoxError, ValueError):
    """嵌入向量范数为零，余弦相似度无定义"""


class FeasibilityError(NoBoxError, AssertionError):
    """对抗样本超出扰动预算或像素范围"""


# ---------- 评估 ----------

class EmptyEvaluationError(NoBoxError, ValueError):
    """评估样本为空"""


class VictimLoadError(NoBoxError):
    """受害者模型加载失败"""


class RemoteVictimError(NoBoxError):
    """远程受害者服务请求失败"""


class RemoteVictimAuthError(RemoteVictimError):
    """远程受害者服务鉴权失败"""


class RemoteVictimUnavailableError(RemoteVictimError):
    """服务端 5xx 或网络错误，可重试"""


class IncompleteReportError(NoBoxError):
    """评估报告不完整（部分样本未能评分）"""

    exit_code = EXIT_INCOMPLETE

    def __init__(self, message: str, report: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.report = report
