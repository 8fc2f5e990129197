"""
逐层压缩流水线 - pkit toymodel

1. 各旋转点独立做 Frobenius ALS，得到 Q_init（线程池并行）
2. 用 Q_init 旋转网络，校准统计同步共轭
3. 各旋转点做加权 ALS（零块结构走 PCA 切片闭式解）
4. 以 Q_total = Q_init·Q_w 重组网络：结构化权重 + 反对称存储的跳连旋转
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import JobConfig
from ..core.als import (
    LayerProblem,
    LayerSolution,
    SolveReport,
    als_frobenius,
    als_weighted,
    assemble_in,
    compute_lambda_in,
    pca_slice,
    weighted_objective,
)
from ..core.calib import correlation_root, embedding_weight
from ..core.structured import BlockZeroSpec, StructureSpec, project, residual, spec_to_dict
from ..errors import PkitError
from .network import (
    CalibrationStats,
    ToyNetwork,
    max_relative_deviation,
    network_param_count,
    rotate_network,
)
from .shapes import resolve_structure

logger = logging.getLogger(__name__)


@dataclass
class SitePlan:
    """一个旋转点：out 侧（嵌入或块 ℓ 的 W_out）与 in 侧（块 ℓ+1 的 W_in 或输出头）"""

    index: int
    spec_out: StructureSpec
    spec_in: StructureSpec
    dense_in_cols: Optional[Tuple[int, int]] = None


@dataclass
class CompressionPlan:
    sites: List[SitePlan]
    config: JobConfig

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sites": [
                {
                    "index": s.index,
                    "out": spec_to_dict(s.spec_out),
                    "in": spec_to_dict(s.spec_in),
                    "dense_in_cols": list(s.dense_in_cols) if s.dense_in_cols else None,
                }
                for s in self.sites
            ],
        }


@dataclass
class SiteResult:
    index: int
    q_init: np.ndarray
    q_weighted: np.ndarray
    w_out_hat: Any
    w_in_hat: Any
    lambda_in: float = 1.0
    frobenius: Optional[SolveReport] = None
    weighted: Optional[SolveReport] = None
    objective: float = 0.0
    error: Optional[str] = None

    @property
    def flags(self) -> List[str]:
        out: List[str] = []
        for report in (self.frobenius, self.weighted):
            if report is not None:
                out.extend(report.flags)
        return sorted(set(out))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "lambda_in": self.lambda_in,
            "objective": self.objective,
            "frobenius": self.frobenius.to_dict() if self.frobenius else None,
            "weighted": self.weighted.to_dict() if self.weighted else None,
            "flags": self.flags,
            "error": self.error,
        }


# ==================== 计划 ====================

def _site_matrices(net: ToyNetwork, index: int) -> Tuple[np.ndarray, np.ndarray]:
    w_out = net.w_emb if index == 0 else net.blocks[index - 1].w_out
    w_in = net.w_head if index == len(net.blocks) else net.blocks[index].w_in
    return w_out, w_in


def build_plan(net: ToyNetwork, config: JobConfig) -> CompressionPlan:
    """按角色配置为每个旋转点解析结构规格；解析失败的点记为不压缩并告警"""
    sites = []
    for index in range(net.n_sites):
        w_out, w_in = _site_matrices(net, index)
        last = index == len(net.blocks)
        dense_cols = None
        if not last and not config.compress_values:
            dense_cols = net.blocks[index].values_cols

        in_shape = w_in.shape
        if dense_cols is not None:
            in_shape = (in_shape[0], in_shape[1] - (dense_cols[1] - dense_cols[0]))

        out_role = "embedding" if index == 0 else "out"
        in_role = "head" if last else "in"
        try:
            spec_out = resolve_structure(config.structure_for(out_role), w_out.shape, "right", embedding=index == 0)
        except PkitError as e:
            logger.warning(f"⚠️ 旋转点 {index} 的 {out_role} 结构无法解析，保持稠密: {e}")
            spec_out = None
        try:
            spec_in = resolve_structure(config.structure_for(in_role), in_shape, "left", embedding=last)
        except PkitError as e:
            logger.warning(f"⚠️ 旋转点 {index} 的 {in_role} 结构无法解析，保持稠密: {e}")
            spec_in = None
        sites.append(SitePlan(index, spec_out, spec_in, dense_cols))
    return CompressionPlan(sites, config)


# ==================== 并行执行 ====================

def _run_sites(fn: Callable[[int], SiteResult], count: int, jobs: int) -> List[SiteResult]:
    """有界线程池执行，结果按旋转点序号合并"""
    if jobs <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, range(count)))


# ==================== 主流程 ====================

def _frobenius_problem(net: ToyNetwork, site: SitePlan, weights: Optional[np.ndarray]) -> LayerProblem:
    w_out, w_in = _site_matrices(net, site.index)
    if weights is not None and site.index == 0:
        w_out = weights[:, None] * w_out
    if weights is not None and site.index == len(net.blocks):
        w_in = w_in * weights[None, :]
    return LayerProblem(
        w_out=w_out, w_in=w_in, spec_out=site.spec_out, spec_in=site.spec_in,
        dense_in_cols=site.dense_in_cols,
    )


def _weighted_problem(
    net: ToyNetwork, site: SitePlan, calib: CalibrationStats, config: JobConfig
) -> LayerProblem:
    w_out, w_in = _site_matrices(net, site.index)
    if site.index == 0:
        x_out = np.diag(embedding_weight(calib.tokens.counts, config.embedding_weighting))
    else:
        x_out = correlation_root(calib.inner[site.index - 1].sum)
    x_in = correlation_root(calib.normed[site.index].sum)
    problem = LayerProblem(
        w_out=w_out, w_in=w_in, spec_out=site.spec_out, spec_in=site.spec_in,
        x_out=x_out, x_in=x_in, dense_in_cols=site.dense_in_cols,
    )
    problem.lambda_in = compute_lambda_in(problem, config.lambda_in)
    return problem


def _pca_site(
    net: ToyNetwork, site: SitePlan, calib: CalibrationStats
) -> Tuple[np.ndarray, Any, Any, float]:
    """零块结构：Q 取残差流相关矩阵的主方向，目标为旋转后残差流在被切掉列上的能量"""
    assert isinstance(site.spec_out, BlockZeroSpec)
    w_out, w_in = _site_matrices(net, site.index)
    stream_root = correlation_root(calib.stream[site.index].sum)
    q, _ = pca_slice(stream_root, site.spec_out.d)
    rotated_stream = stream_root @ q
    tail = residual(rotated_stream, project(rotated_stream, BlockZeroSpec(site.spec_out.d, "zero-cols"))) ** 2
    out_hat = project(w_out @ q, site.spec_out)
    rotated_in = q.T @ w_in
    problem = LayerProblem(w_out=w_out, w_in=w_in, spec_in=site.spec_in, dense_in_cols=site.dense_in_cols)
    main_hat = project(rotated_in[:, problem.in_main_columns()], site.spec_in)
    return q, out_hat, assemble_in(problem, rotated_in, main_hat), tail


def compress_network(
    net: ToyNetwork,
    plan: CompressionPlan,
    calib: CalibrationStats,
    jobs: int = 1,
    holdout: Optional[Sequence[Sequence[int]]] = None,
) -> Tuple[ToyNetwork, Dict[str, Any]]:
    """
    整网压缩

    返回 (压缩后网络, 报告)；单个旋转点失败时该点保持旋转后的稠密权重，其余点照常完成
    """
    config = plan.config
    started = time.perf_counter()
    n = net.dim
    weights = None
    if config.embedding_weighting != "none":
        weights = embedding_weight(calib.tokens.counts, config.embedding_weighting)

    logger.info(f"🚀 开始压缩: {net.n_sites} 个旋转点, jobs={jobs}")

    # 阶段一：Frobenius 范数
    def frobenius_site(i: int) -> SiteResult:
        site = plan.sites[i]
        try:
            solution = als_frobenius(_frobenius_problem(net, site, weights), config.frobenius_iters)
            return SiteResult(i, solution.q, np.eye(n), None, None, frobenius=solution.report)
        except PkitError as e:
            logger.error(f"❌ 旋转点 {i} Frobenius 阶段失败: {e}")
            return SiteResult(i, np.eye(n), np.eye(n), None, None, error=f"frobenius: {e}")

    results = _run_sites(frobenius_site, net.n_sites, jobs)
    q_init = [r.q_init for r in results]
    rotated = rotate_network(net, q_init)
    rotated_calib = calib.rotated(q_init)
    logger.info("✅ Frobenius 阶段完成，网络已旋转")

    # 阶段二：加权范数
    def weighted_site(i: int) -> SiteResult:
        site = plan.sites[i]
        result = results[i]
        w_out, w_in = _site_matrices(rotated, i)
        try:
            if isinstance(site.spec_out, BlockZeroSpec):
                q, out_hat, in_hat, tail = _pca_site(rotated, site, rotated_calib)
                return replace(result, q_weighted=q, w_out_hat=out_hat, w_in_hat=in_hat, lambda_in=0.0, objective=tail)
            problem = _weighted_problem(rotated, site, rotated_calib, config)
            solution: LayerSolution = als_weighted(
                problem, config.weighted_iters, config.cg_iters, config.projection_iters, config.solver,
            )
            return replace(
                result,
                q_weighted=solution.q,
                w_out_hat=solution.w_out_hat,
                w_in_hat=solution.w_in_hat,
                lambda_in=problem.lambda_in,
                weighted=solution.report,
                objective=weighted_objective(problem, solution.q, solution.w_out_hat, solution.w_in_hat),
            )
        except PkitError as e:
            logger.error(f"❌ 旋转点 {i} 加权阶段失败: {e}")
            error = f"weighted: {e}" if result.error is None else result.error
            return replace(result, w_out_hat=w_out.copy(), w_in_hat=w_in.copy(), error=error)

    results = _run_sites(weighted_site, net.n_sites, jobs)

    # 阶段三：重组
    q_total = [r.q_init @ r.q_weighted for r in results]
    final = rotate_network(net, q_total)
    blocks = []
    for i, block in enumerate(final.blocks):
        skip_rotation = block.skip_rotation.to_skew() if block.skip_rotation is not None else None
        blocks.append(replace(
            block,
            w_in=results[i].w_in_hat,
            w_out=results[i + 1].w_out_hat,
            skip_rotation=skip_rotation,
        ))
    compressed = ToyNetwork(results[0].w_out_hat, blocks, results[-1].w_in_hat)

    original_params = network_param_count(net)
    compressed_params = network_param_count(compressed)
    report: Dict[str, Any] = {
        "plan": plan.to_dict(),
        "sites": [r.to_dict() for r in results],
        "params_original": original_params,
        "params_compressed": compressed_params,
        "param_fraction": compressed_params / original_params,
        "compression_ratio": 1.0 - compressed_params / original_params,
        "flags": sorted({f for r in results for f in r.flags}),
        "errors": [r.error for r in results if r.error],
        "wall_time": time.perf_counter() - started,
    }
    if holdout:
        report["forward_error"] = max_relative_deviation(net, compressed, holdout)

    logger.info(
        f"✅ 压缩完成: 参数 {original_params} → {compressed_params}，"
        f"压缩率 {report['compression_ratio']:.4f}"
    )
    return compressed, report

