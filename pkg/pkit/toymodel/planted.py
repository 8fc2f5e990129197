"""
埋点网络 - pkit toymodel

权重 = 结构化矩阵 × 随机正交矩阵：旋转后必然可被精确压缩，用于对比直接投影与旋转后投影
"""

import logging
from dataclasses import replace
from typing import List, Sequence, Tuple

import numpy as np

from ..config import JobConfig, StructureConfig, parse_job_config
from ..core.structured import (
    BlockZeroSpec,
    GSMatrix,
    GSSpec,
    KronSpec,
    KroneckerSum,
    StructureSpec,
    materialize,
)
from ..errors import ConfigError, UnsupportedStructure
from .network import ToyNetwork, random_network, random_rotations
from .pipeline import CompressionPlan, build_plan

logger = logging.getLogger(__name__)

PLANTED_CLASSES = ("kron", "gs", "blockzero")


def planted_config(kind: str, ratio: float, dim: int) -> JobConfig:
    """所有角色使用同一结构类；blockzero 的 d 取 round(ratio·dim)"""
    if kind not in PLANTED_CLASSES:
        raise UnsupportedStructure(f"未知的埋点结构类: {kind}")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"保留比例必须在 (0, 1] 内: {ratio}")

    if kind == "blockzero":
        role = StructureConfig(kind="blockzero", d=max(1, round(ratio * dim)))
    elif kind == "kron":
        role = StructureConfig(kind="kron", q=4, keep_fraction=ratio)
    else:
        role = StructureConfig(kind="gs", keep_fraction=ratio)
    return parse_job_config({
        "structure": {name: role.model_dump(exclude_unset=True) for name in ("in", "out", "embedding", "head")},
        # 埋点网络的嵌入层不需要按词频加权
        "embedding_weighting": "none",
    })


def random_structured(spec: StructureSpec, shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """spec 类中的随机元素（稠密形式），按元素均方根归一化"""
    rows, cols = shape
    if spec is None:
        value = rng.standard_normal(shape)
    elif isinstance(spec, KronSpec):
        value = materialize(KroneckerSum(
            rng.standard_normal((spec.r, spec.m1, spec.n1)),
            rng.standard_normal((spec.r, spec.m2, spec.n2)),
        ))
    elif isinstance(spec, GSSpec):
        p_left, perm, p_right = spec.permutations()
        value = materialize(GSMatrix(
            rng.standard_normal((spec.kl, spec.bl1, spec.bl2)),
            rng.standard_normal((spec.kr, spec.br1, spec.br2)),
            p_left, perm, p_right, spec.permutation,
        ))
    elif isinstance(spec, BlockZeroSpec):
        value = np.zeros(shape)
        if spec.pattern == "zero-cols":
            value[:, :spec.d] = rng.standard_normal((rows, spec.d))
        elif spec.pattern == "zero-rows":
            value[:spec.d, :] = rng.standard_normal((spec.d, cols))
        else:
            value[:spec.d, :spec.d] = rng.standard_normal((spec.d, spec.d))
    else:
        raise UnsupportedStructure(f"未知结构规格: {spec!r}")

    if value.shape != shape:
        raise UnsupportedStructure(f"规格 {spec!r} 的形状 {value.shape} 与 {shape} 不符")
    rms = np.sqrt(np.mean(value ** 2))
    return value / rms if rms > 0 else value


def planted_network(
    kind: str,
    ratio: float,
    vocab: int = 32,
    dim: int = 16,
    activations: Sequence[str] = ("attention", "relu"),
    seed: int = 0,
) -> Tuple[ToyNetwork, CompressionPlan, List[np.ndarray]]:
    """
    返回 (网络, 计划, 埋入的旋转)

    旋转点 ℓ：W_out = S_out·Q_ℓᵀ，W_in 的主列 = Q_ℓ·S_in（V 投影列保持随机稠密）
    """
    base = random_network(vocab=vocab, dim=dim, activations=activations, seed=seed)
    plan = build_plan(base, planted_config(kind, ratio, dim))
    rotations = random_rotations(base.n_sites, dim, seed + 1)
    rng = np.random.default_rng(seed + 2)
    scale = 1.0 / np.sqrt(dim)

    outs: List[np.ndarray] = []
    ins: List[np.ndarray] = []
    for site, q in zip(plan.sites, rotations):
        index = site.index
        w_out = base.w_emb if index == 0 else base.blocks[index - 1].w_out
        w_in = base.w_head if index == len(base.blocks) else base.blocks[index].w_in

        outs.append(random_structured(site.spec_out, w_out.shape, rng) @ q.T)

        planted_in = w_in.copy()
        cols = np.arange(w_in.shape[1])
        if site.dense_in_cols is not None:
            start, stop = site.dense_in_cols
            cols = np.concatenate([cols[:start], cols[stop:]])
        planted_in[:, cols] = q @ random_structured(site.spec_in, (dim, cols.size), rng) * scale
        ins.append(planted_in)

    blocks = [
        replace(block, w_in=ins[i], w_out=outs[i + 1] * scale)
        for i, block in enumerate(base.blocks)
    ]
    net = ToyNetwork(outs[0], blocks, ins[-1])
    structured = len(planted_sites(plan))
    logger.info(f"🧪 埋点网络: {kind}, 比例 {ratio}, {structured}/{len(plan.sites)} 个旋转点带结构")
    return net, plan, rotations


def planted_sites(plan: CompressionPlan) -> List[int]:
    return [s.index for s in plan.sites if s.spec_out is not None or s.spec_in is not None]
