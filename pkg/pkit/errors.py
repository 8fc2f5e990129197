"""
异常定义 - pkit 结构化压缩工具包

参数/形状类错误继承 ValueError，数值运行期错误继承 RuntimeError
"""


class PkitError(Exception):
    """pkit 所有异常的基类"""


# ==================== 形状与参数 ====================

class ShapeMismatch(PkitError, ValueError):
    """矩阵维度不一致或不可整除"""


class RankTooLarge(PkitError, ValueError):
    """Kronecker 秩超过重排矩阵的最小维度"""


class NotDivisible(PkitError, ValueError):
    """维度不能被分块参数整除"""


class NoFeasibleShape(PkitError, ValueError):
    """找不到满足目标压缩比的整数分块"""


class UnsupportedStructure(PkitError, ValueError):
    """结构类型不支持当前操作"""


class ConfigError(PkitError, ValueError):
    """任务配置非法"""


class IdOutOfRange(PkitError, ValueError):
    """token id 超出词表范围"""


class ZeroVector(PkitError, ValueError):
    """RMSNorm 的输入向量范数为零"""


class NotSkew(PkitError, ValueError):
    """矩阵不是反对称矩阵"""


class NotOrthogonal(PkitError, ValueError):
    """矩阵不是正交矩阵"""


# ==================== 数值错误 ====================

class MinusOneEigenvalue(PkitError, RuntimeError):
    """I+Q 数值奇异，Cayley 逆变换不存在"""


class NotPsd(PkitError, RuntimeError):
    """相关矩阵存在显著负特征值"""


class NonFinite(PkitError, RuntimeError):
    """输入或中间结果包含 NaN/Inf"""


class NonFiniteObjective(NonFinite):
    """目标函数值不是有限数"""


class ZeroNormError(PkitError, ZeroDivisionError):
    """λ_in 平衡时分母范数为零"""


# ==================== 张量文件 ====================

class TensorFileError(PkitError):
    """张量文件读写错误基类"""


class BadMagic(TensorFileError, ValueError):
    """文件头魔数不是 PKTENSR1"""


class UnsupportedDtype(TensorFileError, ValueError):
    """不支持的 dtype 编码"""


class TruncatedPayload(TensorFileError, ValueError):
    """文件数据长度与维度不符"""


class TensorIoError(TensorFileError, OSError):
    """底层文件系统读写失败"""
