"""
分块形状选择 - pkit toymodel

按目标保留比例选择 Kronecker / GS 分块，比例用 Fraction 精确计算
"""

import logging
import math
from fractions import Fraction
from typing import Optional, Tuple

from ..config import StructureConfig
from ..core.structured import BlockZeroSpec, GSSpec, KronSpec, StructureSpec
from ..errors import ConfigError, NoFeasibleShape, NotDivisible

logger = logging.getLogger(__name__)

GS_TOLERANCE = 0.02

# (kl, kr) 默认值：方阵 / 长方阵 / 嵌入层
GS_DEFAULT_BLOCKS = {"square": (4, 2), "rectangular": (4, 8), "embedding": (1, 4)}


def kron_param_fraction(n: int, m: int, q: int, r: int) -> Fraction:
    """(q·r + n·m·r/q) / (n·m)"""
    return Fraction(q * r, n * m) + Fraction(r, q)


def choose_kron_shape(n: int, m: int, q: int, r: int, side: str = "left") -> Tuple[KronSpec, Fraction]:
    """
    n×m 矩阵的 Kronecker 分块：按 q 切分被正交矩阵相乘的那一侧

    side="left"（行被旋转）：A_i 为 q×1，B_i 为 (n/q)×m；
    side="right"（列被旋转）：A_i 为 1×q，B_i 为 n×(m/q)
    """
    if q < 1 or r < 1:
        raise NotDivisible(f"q、r 必须为正: q={q}, r={r}")
    if side == "left":
        if n % q:
            raise NotDivisible(f"行数 {n} 不能被 q={q} 整除")
        spec = KronSpec(r, q, 1, n // q, m)
    elif side == "right":
        if m % q:
            raise NotDivisible(f"列数 {m} 不能被 q={q} 整除")
        spec = KronSpec(r, 1, q, n, m // q)
    else:
        raise ConfigError(f"未知的切分侧: {side}")
    return spec, Fraction(spec.param_count(), n * m)


def choose_kron_for_fraction(n: int, m: int, keep: float, q: int = 4, side: str = "left") -> KronSpec:
    """给定保留比例时取 r ≈ keep·q（至少 1，且不超过重排矩阵的秩上限）"""
    r = max(1, round(keep * q))
    spec, _ = choose_kron_shape(n, m, q, r, side)
    limit = min(spec.m1 * spec.n1, spec.m2 * spec.n2)
    if spec.r > limit:
        spec = KronSpec(limit, spec.m1, spec.n1, spec.m2, spec.n2)
    return spec


def gs_param_fraction(spec: GSSpec) -> Fraction:
    """(kl·bl1·bl2 + kr·br1·br2) / (kl·kr·bl1·br2)"""
    rows, cols = spec.shape
    return Fraction(spec.param_count(), rows * cols)


def default_gs_blocks(n: int, m: int, embedding: bool = False) -> Tuple[int, int]:
    if embedding:
        return GS_DEFAULT_BLOCKS["embedding"]
    return GS_DEFAULT_BLOCKS["square" if n == m else "rectangular"]


def choose_gs_shape(
    n: int,
    m: int,
    c: float,
    kl: Optional[int] = None,
    kr: Optional[int] = None,
    embedding: bool = False,
    permutation: str = "stride",
) -> GSSpec:
    """
    参数占比约为 c 的 GS 规格

    bl1 = n/kl，br2 = m/kr，内维 s = kl·bl2 = kr·br1，占比 = s·(n/kl + m/kr)/(n·m)
    """
    if kl is None or kr is None:
        kl, kr = default_gs_blocks(n, m, embedding)
    if n % kl or m % kr:
        raise NotDivisible(f"{n}×{m} 不能按 kl={kl}, kr={kr} 分块")
    bl1, br2 = n // kl, m // kr
    step = math.lcm(kl, kr)

    ideal = c * n * m / (bl1 + br2)
    s = max(step, int(round(ideal / step)) * step)
    spec = GSSpec(kl, kr, bl1, s // kl, s // kr, br2, permutation)
    achieved = float(gs_param_fraction(spec))
    if abs(achieved - c) > GS_TOLERANCE:
        raise NoFeasibleShape(
            f"{n}×{m} 上无法以 kl={kl}, kr={kr} 达到占比 {c:.4f}（最接近 {achieved:.4f}）"
        )
    logger.debug(f"GS 形状 {n}×{m}: kl={kl}, kr={kr}, s={s}, 占比 {achieved:.4f}")
    return spec


def resolve_structure(
    config: StructureConfig,
    shape: Tuple[int, int],
    side: str,
    embedding: bool = False,
) -> StructureSpec:
    """把角色配置解析为具体的结构规格；side 表示被旋转的一侧（left=行，right=列）"""
    n, m = shape
    if config.kind == "none":
        return None

    if config.kind == "blockzero":
        if config.d is None:
            raise ConfigError("blockzero 需要 d")
        pattern = config.pattern
        if "pattern" not in config.model_fields_set:
            pattern = "zero-rows" if side == "left" else "zero-cols"
        return BlockZeroSpec(config.d, pattern)

    if config.kind == "kron":
        q = config.q or 4
        if config.r is not None:
            spec, _ = choose_kron_shape(n, m, q, config.r, side)
            return spec
        if config.keep_fraction is None:
            raise ConfigError("kron 需要 r 或 keep_fraction")
        return choose_kron_for_fraction(n, m, config.keep_fraction, q, side)

    explicit = (config.kl, config.kr, config.bl1, config.bl2, config.br1, config.br2)
    if all(v is not None for v in explicit):
        return GSSpec(*explicit, permutation=config.permutation)  # type: ignore[misc]
    if config.keep_fraction is None:
        raise ConfigError("gs 需要完整的分块参数或 keep_fraction")
    return choose_gs_shape(n, m, config.keep_fraction, config.kl, config.kr, embedding, config.permutation)
