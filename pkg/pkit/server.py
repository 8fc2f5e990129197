"""
pkit MCP Server - 基于 FastMCP 的压缩工具服务

把命令行的各个命令以 MCP 工具的形式提供；数值计算放到线程中执行，不阻塞事件循环
"""

import asyncio
import json
import logging
from contextlib import asynccontextmanager
from typing import Any, AsyncIterator, Callable, Dict, Optional

from mcp.server.fastmcp import FastMCP

from .config import setup_logging
from .core.tensorfile import dumps_report
from .errors import PkitError
from .tools.compression_tools import DEFAULT_TOL, CompressionTools

setup_logging()
logger = logging.getLogger(__name__)


# 全局变量
compression_tools: Optional[CompressionTools] = None


@asynccontextmanager
async def server_lifespan(server: FastMCP) -> AsyncIterator[Dict[str, Any]]:
    """服务器生命周期管理"""
    global compression_tools

    logger.info("🚀 启动 pkit MCP 服务器...")
    compression_tools = CompressionTools()
    try:
        logger.info("✅ pkit MCP 服务器启动完成")
        yield {"compression_tools": compression_tools}
    finally:
        logger.info("✅ pkit MCP 服务器已关闭")


mcp = FastMCP("pkit", lifespan=server_lifespan)


def _tools() -> CompressionTools:
    return compression_tools or CompressionTools()


async def _call(name: str, fn: Callable[..., Dict[str, Any]], **kwargs: Any) -> str:
    """在线程中执行工具方法；错误以 JSON 返回而不是抛给客户端"""
    try:
        result = await asyncio.to_thread(fn, **kwargs)
        return dumps_report(result)
    except PkitError as e:
        logger.error(f"❌ {name} 失败: {e}")
        return json.dumps({"error": type(e).__name__, "message": str(e)}, ensure_ascii=False)


# ==================== 网络工具 ====================

@mcp.tool()
async def generate_network(
    out: str,
    seed: int = 0,
    vocab: int = 32,
    dim: int = 16,
    activations: str = "attention,relu",
    planted: Optional[str] = None,
    ratio: float = 0.25,
) -> str:
    """
    生成随机玩具网络并写入目录

    Args:
        out: 输出目录
        seed: 随机种子
        activations: 逗号分隔的块类型 (relu, gelu, attention)
        planted: 埋点结构类 (kron, gs, blockzero)，为空时生成普通随机网络
        ratio: 埋点结构的保留比例
    """
    return await _call(
        "generate_network", _tools().generate_network,
        out=out, seed=seed, vocab=vocab, dim=dim, activations=activations, planted=planted, ratio=ratio,
    )


@mcp.tool()
async def compress(
    net: str,
    out: str,
    config: Optional[str] = None,
    calib: Optional[str] = None,
    jobs: int = 1,
    fast: bool = False,
) -> str:
    """
    整网压缩，输出目录中包含压缩后的网络与 report.json

    Args:
        net: 网络目录
        out: 输出目录
        config: JobConfig JSON 文件路径
        calib: calibrate 生成的校准目录，为空时使用随机序列
        jobs: Frobenius 阶段的并行线程数
        fast: 缩小迭代预算
    """
    return await _call(
        "compress", _tools().compress, net=net, out=out, config=config, calib=calib, jobs=jobs, fast=fast,
    )


@mcp.tool()
async def verify_invariance(net: str, against: Optional[str] = None, tol: float = DEFAULT_TOL, seed: int = 0) -> str:
    """
    前向等价检查：against 为空时与随机旋转后的自身比较

    Args:
        net: 网络目录
        against: 对照网络目录
        tol: 最大相对偏差阈值
    """
    return await _call("verify_invariance", _tools().verify_invariance, net=net, against=against, tol=tol, seed=seed)


@mcp.tool()
async def calibrate(
    out: str,
    net: Optional[str] = None,
    tokens: Optional[str] = None,
    batches: int = 8,
    length: int = 16,
    seed: int = 0,
    activations_dir: Optional[str] = None,
    dim: Optional[int] = None,
) -> str:
    """
    采集校准统计

    Args:
        out: 输出目录
        net: 网络目录；只累加激活批次时可以为空
        tokens: 每行一个 token id 的文本文件，为空时使用随机序列
        activations_dir: 激活批次张量目录，给出时需要同时给出 dim
    """
    return await _call(
        "calibrate", _tools().calibrate,
        net=net, out=out, tokens=tokens, batches=batches, length=length, seed=seed,
        activations_dir=activations_dir, dim=dim,
    )


@mcp.tool()
async def report(path: str) -> str:
    """
    汇总 compress 写出的报告

    Args:
        path: report.json 或压缩输出目录
    """
    return await _call("report", _tools().report, path=path)


# ==================== 实验工具 ====================

@mcp.tool()
async def compare_rotated(kind: str = "kron", ratio: float = 0.25, seed: int = 0, iters: int = 50) -> str:
    """
    埋点网络上比较直接投影与旋转后投影的相对误差

    Args:
        kind: 结构类 (kron, gs, blockzero)
        ratio: 保留比例
        iters: Frobenius ALS 迭代次数
    """
    return await _call("compare_rotated", _tools().compare_rotated, kind=kind, ratio=ratio, seed=seed, iters=iters)


@mcp.tool()
async def slice_equivalence(d: int, seed: int = 0) -> str:
    """
    零块结构（λ_in = 0）与 PCA 切片闭式解的目标值比较

    Args:
        d: 保留维度
        seed: 随机种子
    """
    return await _call("slice_equivalence", _tools().slice_equivalence, d=d, seed=seed)


# ==================== 形状工具 ====================

@mcp.tool()
async def gs_shape(n: int, m: int, c: float, kl: Optional[int] = None, kr: Optional[int] = None) -> str:
    """
    按目标参数占比 c 选择 n×m 矩阵的 GS 分块

    Args:
        kl: 左因子块数，为空时使用默认值
        kr: 右因子块数，为空时使用默认值
    """
    return await _call("gs_shape", _tools().gs_shape, n=n, m=m, c=c, kl=kl, kr=kr)


@mcp.tool()
async def kron_shape(n: int, m: int, q: int, r: int, side: str = "left") -> str:
    """
    n×m 矩阵的 Kronecker 分块及参数占比

    Args:
        side: 被正交矩阵相乘的一侧 (left, right)
    """
    return await _call("kron_shape", _tools().kron_shape, n=n, m=m, q=q, r=r, side=side)


# ==================== 资源接口 ====================

@mcp.resource("help://tools")
def get_tools_help() -> str:
    """获取工具使用帮助"""
    help_info = {
        "网络": {
            "generate_network": "生成随机或埋点玩具网络",
            "compress": "Frobenius + 加权范数两阶段整网压缩",
            "verify_invariance": "检查两个网络（或随机旋转后）的前向等价",
            "calibrate": "采集各旋转点的相关矩阵与词频",
            "report": "汇总压缩报告",
        },
        "实验": {
            "compare_rotated": "直接投影与旋转后投影的误差对比",
            "slice_equivalence": "零块结构与 PCA 切片的等价检查",
        },
        "形状": {
            "gs_shape": "按参数占比选择 GS 分块",
            "kron_shape": "Kronecker 分块与参数占比",
        },
    }
    return json.dumps(help_info, ensure_ascii=False, indent=2)


if __name__ == "__main__":
    mcp.run()
