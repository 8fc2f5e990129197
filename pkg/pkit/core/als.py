"""
外层交替优化 - pkit 核心组件

Frobenius 范数 ALS（结构投影 ↔ 堆叠 OPP）、加权范数 ALS（加权投影 ↔ WOPP）、
λ_in 平衡以及 PCA 切片等价性检验
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from ..config import SolverConfig
from ..errors import ShapeMismatch, ZeroNormError
from .procrustes import WoppProblem, solve_opp, solve_wopp
from .structured import (
    BlockZeroSpec,
    PartitionedMatrix,
    StructureSpec,
    materialize,
    project,
)
from .weighted import weighted_project

logger = logging.getLogger(__name__)


@dataclass
class LayerProblem:
    """
    一个旋转点上的成对权重

    w_out: d_out×n（右乘 Q），w_in: n×d_in（左乘 Qᵀ）；x_out / x_in 为相关矩阵平方根
    """

    w_out: np.ndarray
    w_in: np.ndarray
    spec_out: StructureSpec = None
    spec_in: StructureSpec = None
    x_out: Optional[np.ndarray] = None
    x_in: Optional[np.ndarray] = None
    lambda_in: float = 1.0
    dense_in_cols: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        self.w_out = np.asarray(self.w_out, dtype=np.float64)
        self.w_in = np.asarray(self.w_in, dtype=np.float64)
        if self.w_out.ndim != 2 or self.w_in.ndim != 2:
            raise ShapeMismatch("W_out 与 W_in 必须是二维矩阵")
        if self.w_out.shape[1] != self.w_in.shape[0]:
            raise ShapeMismatch(
                f"旋转维度不一致: W_out {self.w_out.shape} 与 W_in {self.w_in.shape}"
            )
        if self.lambda_in < 0:
            raise ShapeMismatch(f"λ_in 不能为负: {self.lambda_in}")
        if self.x_out is not None and self.x_out.shape != (self.w_out.shape[0],) * 2:
            raise ShapeMismatch(f"X_out {self.x_out.shape} 与 W_out 行数不匹配")
        if self.x_in is not None and self.x_in.shape != (self.n,) * 2:
            raise ShapeMismatch(f"X_in {self.x_in.shape} 与旋转维度 {self.n} 不匹配")
        if self.dense_in_cols is not None:
            start, stop = self.dense_in_cols
            if not 0 <= start <= stop <= self.w_in.shape[1]:
                raise ShapeMismatch(f"稠密列区间 {self.dense_in_cols} 越界")

    @property
    def n(self) -> int:
        return self.w_out.shape[1]

    def in_main_columns(self) -> np.ndarray:
        cols = np.arange(self.w_in.shape[1])
        if self.dense_in_cols is None:
            return cols
        start, stop = self.dense_in_cols
        return np.concatenate([cols[:start], cols[stop:]])

    def weight_out(self) -> np.ndarray:
        return np.eye(self.w_out.shape[0]) if self.x_out is None else self.x_out

    def weight_in(self) -> np.ndarray:
        return np.eye(self.n) if self.x_in is None else self.x_in


@dataclass
class SolveReport:
    frobenius: List[float] = field(default_factory=list)
    weighted: List[float] = field(default_factory=list)
    wopp: List[List[float]] = field(default_factory=list)
    projection: Dict[str, List[List[float]]] = field(default_factory=lambda: {"out": [], "in": []})
    residual_out: float = 0.0
    residual_in: float = 0.0
    wall_time: float = 0.0
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "frobenius": self.frobenius,
            "weighted": self.weighted,
            "wopp": self.wopp,
            "projection": self.projection,
            "residual_out": self.residual_out,
            "residual_in": self.residual_in,
            "wall_time": self.wall_time,
            "flags": sorted(set(self.flags)),
        }


@dataclass
class LayerSolution:
    q: np.ndarray
    w_out_hat: Any
    w_in_hat: Any
    report: SolveReport


# ==================== 工具 ====================

def _sq(m: np.ndarray) -> float:
    return float(np.linalg.norm(m) ** 2)


def assemble_in(problem: LayerProblem, rotated_in: np.ndarray, main_hat: Any) -> Any:
    if problem.dense_in_cols is None:
        return main_hat
    start, stop = problem.dense_in_cols
    return PartitionedMatrix(main_hat, rotated_in[:, start:stop].copy(), (start, stop))


def frobenius_objective(problem: LayerProblem, q: np.ndarray, out_hat: Any, in_hat: Any) -> float:
    """‖W_out Q − Ŵ_out‖² + ‖QᵀW_in − Ŵ_in‖²"""
    return _sq(problem.w_out @ q - materialize(out_hat)) + _sq(q.T @ problem.w_in - materialize(in_hat))


def weighted_objective(problem: LayerProblem, q: np.ndarray, out_hat: Any, in_hat: Any) -> float:
    """‖X_out(W_out Q − Ŵ_out)‖² + λ‖X_in(W_in − Q Ŵ_in)‖²（稠密列始终精确旋转，不计入）"""
    out_term = _sq(problem.weight_out() @ (problem.w_out @ q - materialize(out_hat)))
    w_in = problem.w_in[:, problem.in_main_columns()]
    in_term = _sq(problem.weight_in() @ (w_in - q @ materialize(_main_part(problem, in_hat))))
    return out_term + problem.lambda_in * in_term


def _project_frobenius(problem: LayerProblem, q: np.ndarray) -> Tuple[Any, Any]:
    rotated_in = q.T @ problem.w_in
    out_hat = project(problem.w_out @ q, problem.spec_out)
    main_hat = project(rotated_in[:, problem.in_main_columns()], problem.spec_in)
    return out_hat, assemble_in(problem, rotated_in, main_hat)


def _main_part(problem: LayerProblem, in_hat: Any) -> Any:
    return in_hat.main if isinstance(in_hat, PartitionedMatrix) else in_hat


# ==================== Frobenius ALS ====================

def als_frobenius(problem: LayerProblem, n_iters: int) -> LayerSolution:
    """Q 从 I 开始，交替结构投影与堆叠 [W_out; W_inᵀ] 的 OPP；最后在终点 Q 处再投影一次"""
    started = time.perf_counter()
    report = SolveReport()
    main_cols = problem.in_main_columns()
    stacked = np.vstack([problem.w_out, problem.w_in[:, main_cols].T])
    q = np.eye(problem.n)

    for it in range(n_iters):
        out_hat, in_hat = _project_frobenius(problem, q)
        report.frobenius.append(frobenius_objective(problem, q, out_hat, in_hat))

        target = np.vstack([materialize(out_hat), materialize(_main_part(problem, in_hat)).T])
        q = solve_opp(stacked.T, target.T).matrix.T
        report.frobenius.append(_sq(stacked @ q - target))
        logger.debug(f"Frobenius ALS 迭代 {it + 1}: {report.frobenius[-1]:.6e}")

    out_hat, in_hat = _project_frobenius(problem, q)
    report.frobenius.append(frobenius_objective(problem, q, out_hat, in_hat))
    report.residual_out = float(np.linalg.norm(problem.w_out @ q - materialize(out_hat)))
    report.residual_in = float(np.linalg.norm(q.T @ problem.w_in - materialize(in_hat)))
    report.wall_time = time.perf_counter() - started
    return LayerSolution(q, out_hat, in_hat, report)


# ==================== 加权 ALS ====================

def _project_weighted(
    problem: LayerProblem,
    q: np.ndarray,
    iters: int,
    warm: Tuple[Any, Any],
    options: SolverConfig,
    report: SolveReport,
) -> Tuple[Any, Any]:
    rotated_in = q.T @ problem.w_in
    x_in = q.T @ problem.weight_in() @ q
    out_hat, out_trace = weighted_project(
        problem.weight_out(), problem.w_out @ q, problem.spec_out, iters, warm[0], options, report.flags
    )
    main_hat, in_trace = weighted_project(
        x_in, rotated_in[:, problem.in_main_columns()], problem.spec_in, iters,
        _main_part(problem, warm[1]) if warm[1] is not None else None, options, report.flags,
    )
    report.projection["out"].append(out_trace)
    report.projection["in"].append(in_trace)
    return out_hat, assemble_in(problem, rotated_in, main_hat)


def als_weighted(
    problem: LayerProblem,
    n_iters: int,
    cg_iters: int,
    projection_iters: int = 10,
    options: Optional[SolverConfig] = None,
    init: Tuple[Any, Any] = (None, None),
) -> LayerSolution:
    """
    加权范数 ALS；调用方负责先用 Frobenius 阶段的 Q_init 旋转权重

    投影以上一轮结构化结果热启动，因此整体目标单调不增；n_iters = 0 时仅在 Q = I 处做加权投影
    """
    opts = options or SolverConfig()
    started = time.perf_counter()
    report = SolveReport()
    q = np.eye(problem.n)
    main_cols = problem.in_main_columns()

    out_hat, in_hat = _project_weighted(problem, q, projection_iters, init, opts, report)
    report.weighted.append(weighted_objective(problem, q, out_hat, in_hat))

    for it in range(n_iters):
        wopp = WoppProblem.joint(
            problem.weight_out(), problem.w_out, materialize(out_hat),
            problem.weight_in(), problem.w_in[:, main_cols],
            materialize(_main_part(problem, in_hat)), problem.lambda_in,
        )
        result = solve_wopp(wopp, q, cg_iters, opts)
        report.wopp.append(result.objectives)
        if result.line_search_failed:
            report.flags.append("line_search_failed")
        if result.iterations == 0:
            continue

        q = result.factor.matrix
        report.weighted.append(weighted_objective(problem, q, out_hat, in_hat))
        out_hat, in_hat = _project_weighted(problem, q, projection_iters, (out_hat, in_hat), opts, report)
        report.weighted.append(weighted_objective(problem, q, out_hat, in_hat))
        logger.debug(f"加权 ALS 迭代 {it + 1}: {report.weighted[-1]:.6e}")

    report.residual_out = float(np.linalg.norm(problem.weight_out() @ (problem.w_out @ q - materialize(out_hat))))
    report.residual_in = float(np.linalg.norm(problem.weight_in() @ (problem.w_in - q @ materialize(in_hat))))
    report.wall_time = time.perf_counter() - started
    return LayerSolution(q, out_hat, in_hat, report)


# ==================== λ_in ====================

def compute_lambda_in(problem: LayerProblem, mode: str) -> float:
    """one → 1；balanced → ‖X_out W_out‖² / ‖X_in W_in‖²"""
    if mode == "one":
        return 1.0
    if mode != "balanced":
        raise ShapeMismatch(f"未知的 λ_in 模式: {mode}")
    numerator = _sq(problem.weight_out() @ problem.w_out)
    denominator = _sq(problem.weight_in() @ problem.w_in)
    if denominator == 0.0:
        raise ZeroNormError("‖X_in W_in‖ 为零，无法平衡 λ_in")
    return numerator / denominator


# ==================== PCA 切片 ====================

@dataclass
class SliceEquivalence:
    objective_blockzero: float
    objective_pca: float
    gap: float
    q_pca: np.ndarray
    w_out_hat: np.ndarray
    w_skip_hat: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "objective_blockzero": self.objective_blockzero,
            "objective_pca": self.objective_pca,
            "gap": self.gap,
        }


def pca_slice(m: np.ndarray, d: int) -> Tuple[np.ndarray, float]:
    """Q 取 M 的右奇异向量；返回 (Q, Σ_{i>d} σ_i²)"""
    m = np.asarray(m, dtype=np.float64)
    if not 0 <= d <= m.shape[1]:
        raise ShapeMismatch(f"保留维度 d={d} 超出 [0, {m.shape[1]}]")
    _, s, vt = scipy.linalg.svd(m, full_matrices=True)
    return vt.T, float(np.sum(s[d:] ** 2))


def slicegpt_equivalence_check(
    x_out: np.ndarray,
    w_out: np.ndarray,
    x_skip: np.ndarray,
    d: int,
    n_iters: int = 500,
    q_prev: Optional[np.ndarray] = None,
) -> SliceEquivalence:
    """
    λ_in = 0、零列块结构下，闭式 PCA 切片与通用 Frobenius ALS 的目标值比较

    目标为 ‖(X_out W_out + X_skip) Q − (X_out Ŵ_out + X_skip Ŵ_skip)‖²，最优值等于 X_out W_out + X_skip 的奇异值尾部平方和
    """
    x_out, w_out, x_skip = (np.asarray(a, dtype=np.float64) for a in (x_out, w_out, x_skip))
    if x_out.shape[1] != w_out.shape[0] or x_skip.shape != (x_out.shape[0], w_out.shape[1]):
        raise ShapeMismatch(
            f"X_out {x_out.shape}、W_out {w_out.shape}、X_skip {x_skip.shape} 维度不一致"
        )
    n = w_out.shape[1]
    combined = x_out @ w_out + x_skip
    q, closed = pca_slice(combined, d)

    projector = np.zeros((n, n))
    projector[:d, :d] = np.eye(d)
    prev = np.eye(n) if q_prev is None else q_prev

    generic = als_frobenius(
        LayerProblem(w_out=combined, w_in=np.zeros((n, 0)), spec_out=BlockZeroSpec(d, "zero-cols"), lambda_in=0.0),
        n_iters,
    )
    value = generic.report.frobenius[-1]
    logger.info(f"🔍 PCA 切片: 闭式 {closed:.6e}，通用 {value:.6e}")
    return SliceEquivalence(
        objective_blockzero=value,
        objective_pca=closed,
        gap=abs(value - closed),
        q_pca=q,
        w_out_hat=w_out @ q @ projector,
        w_skip_hat=prev.T @ q @ projector,
    )
