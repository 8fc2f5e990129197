"""
pkit - 结构化矩阵压缩工具包

正交旋转 + Kronecker / GS / 零块结构投影，对 RMSNorm 网络做逐层压缩
"""

__version__ = "0.1.0"
__description__ = "结构化矩阵与正交旋转的神经网络权重压缩工具包"

from .tools.compression_tools import CompressionTools

__all__ = ["CompressionTools", "__version__"]
