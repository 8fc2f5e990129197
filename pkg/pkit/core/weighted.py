"""
加权范数投影 - pkit 核心组件

min ‖X(W − S)‖_F 在 Kronecker 和 / GS 矩阵类上的交替最小二乘：
每个半步都是精确的凸子问题，XᵀX 与 XᵀY 只计算一次
"""

import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, lsqr

from ..config import SolverConfig
from ..errors import NonFinite, ShapeMismatch, UnsupportedStructure
from .structured import (
    BlockZeroSpec,
    GSMatrix,
    GSSpec,
    KroneckerSum,
    KronSpec,
    StructureSpec,
    inverse_permutation,
    apply,
    gs_project,
    kron_project,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightedProblem:
    """‖Y − X·S‖²_F，其中 Y = X·W；gram = XᵀX，cross = XᵀY"""

    x: np.ndarray
    y: np.ndarray
    gram: np.ndarray
    cross: np.ndarray

    @classmethod
    def from_weight(cls, x: np.ndarray, w: np.ndarray) -> "WeightedProblem":
        x = np.asarray(x, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeMismatch(f"X {x.shape} 与 W {w.shape} 维度不匹配")
        if not (np.isfinite(x).all() and np.isfinite(w).all()):
            raise NonFinite("加权投影输入包含 NaN/Inf")
        y = x @ w
        return cls(x=x, y=y, gram=x.T @ x, cross=x.T @ y)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.x.shape[1], self.y.shape[1])

    def objective(self, s: Any) -> float:
        return float(np.linalg.norm(self.y - apply(s, self.x)) ** 2)


def _pinv(m: np.ndarray, rtol: float) -> np.ndarray:
    return scipy.linalg.pinv(m, atol=0.0, rtol=rtol)


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(m).all():
        raise NonFinite(f"{what} 包含 NaN/Inf")
    return m


# ==================== Kronecker ====================

def _solve_left_factor(
    fixed: np.ndarray, gram4: np.ndarray, cross4: np.ndarray, rtol: float
) -> np.ndarray:
    """
    固定右因子，求左因子的最小范数最优解

    fixed: r×p2×q2；gram4: (p1,p2,p1,p2)；cross4: (p1,p2,q1,q2)；返回 r×p1×q1
    """
    r = fixed.shape[0]
    p1, q1 = cross4.shape[0], cross4.shape[2]
    c = np.einsum("rbd,sed,abxe->rasx", fixed, fixed, gram4, optimize=True).reshape(r * p1, r * p1)
    d = np.einsum("rbd,abcd->rac", fixed, cross4, optimize=True).reshape(r * p1, q1)
    return _check_finite(_pinv(c, rtol) @ d, "Kronecker 半步解").reshape(r, p1, q1)


def _kron_dims(problem: WeightedProblem, spec: KronSpec) -> None:
    if problem.shape != spec.shape:
        raise ShapeMismatch(f"加权问题形状 {problem.shape} 与 Kronecker 规格 {spec.shape} 不符")


def kron_step_A(
    b: np.ndarray, problem: WeightedProblem, m1: int, n1: int, options: Optional[SolverConfig] = None
) -> np.ndarray:
    """固定 B 的精确最优 A = C⁺D"""
    opts = options or SolverConfig()
    r, m2, n2 = b.shape
    _kron_dims(problem, KronSpec(r, m1, n1, m2, n2))
    gram4 = problem.gram.reshape(m1, m2, m1, m2)
    cross4 = problem.cross.reshape(m1, m2, n1, n2)
    return _solve_left_factor(b, gram4, cross4, opts.pinv_rtol)


def kron_step_B(
    a: np.ndarray, problem: WeightedProblem, m2: int, n2: int, options: Optional[SolverConfig] = None
) -> np.ndarray:
    """固定 A 的精确最优 B：交换 Kronecker 因子顺序后复用 A 步"""
    opts = options or SolverConfig()
    r, m1, n1 = a.shape
    _kron_dims(problem, KronSpec(r, m1, n1, m2, n2))
    gram4 = problem.gram.reshape(m1, m2, m1, m2).transpose(1, 0, 3, 2)
    cross4 = problem.cross.reshape(m1, m2, n1, n2).transpose(1, 0, 3, 2)
    return _solve_left_factor(a, gram4, cross4, opts.pinv_rtol)


def kron_weighted_als(
    problem: WeightedProblem,
    init: KroneckerSum,
    iters: int,
    options: Optional[SolverConfig] = None,
) -> Tuple[KroneckerSum, List[float]]:
    """交替 A/B 半步；目标序列单调不增（增大的半步会被拒绝）"""
    spec = init.spec
    _kron_dims(problem, spec)
    current = init
    best = problem.objective(current)
    trace = [best]

    for it in range(iters):
        for half in ("A", "B"):
            if half == "A":
                candidate = KroneckerSum(kron_step_A(current.B, problem, spec.m1, spec.n1, options), current.B)
            else:
                candidate = KroneckerSum(current.A, kron_step_B(current.A, problem, spec.m2, spec.n2, options))
            value = problem.objective(candidate)
            if value <= best:
                current, best = candidate, value
            trace.append(best)
        logger.debug(f"Kronecker 加权 ALS 迭代 {it + 1}: {best:.6e}")

    return current, trace


# ==================== GS ====================

def _gs_reduced(problem: WeightedProblem, g: GSMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """X' = X·P_L，Y' = Y·P_Rᵀ，问题化为 ‖Y' − X' L P R‖"""
    if problem.shape != g.shape:
        raise ShapeMismatch(f"加权问题形状 {problem.shape} 与 GS 规格 {g.shape} 不符")
    return problem.x[:, inverse_permutation(g.p_left)], problem.y[:, g.p_right]


def gs_step_R(g: GSMatrix, problem: WeightedProblem, options: Optional[SolverConfig] = None) -> np.ndarray:
    """固定 L：R_j = (X L P)_j⁺ Y_j"""
    opts = options or SolverConfig()
    spec = g.spec
    x_red, y_red = _gs_reduced(problem, g)
    n = x_red.shape[0]
    xl = np.einsum("nib,ibc->nic", x_red.reshape(n, spec.kl, spec.bl1), g.L).reshape(n, spec.inner)
    xlp = xl[:, inverse_permutation(g.perm)]

    right = np.empty_like(g.R)
    for j in range(spec.kr):
        design = xlp[:, j * spec.br1:(j + 1) * spec.br1]
        target = y_red[:, j * spec.br2:(j + 1) * spec.br2]
        right[j] = _pinv(design, opts.pinv_rtol) @ target
    return _check_finite(right, "GS R 半步解")


def gs_step_L(
    g: GSMatrix,
    problem: WeightedProblem,
    options: Optional[SolverConfig] = None,
    flags: Optional[List[str]] = None,
) -> np.ndarray:
    """
    固定 R：min ‖Y − Σ_i X_i L_i (PR)_i‖

    先对 X_i 与 (PR)_iᵀ 做 QR，在正交因子上用 LSQR 求解，再回代 L_i = R_X⁺ Z_i (R_Pᵀ)⁺
    """
    opts = options or SolverConfig()
    spec = g.spec
    x_red, y_red = _gs_reduced(problem, g)
    n, cols = y_red.shape
    pr = scipy.linalg.block_diag(*g.R)[g.perm, :]

    qx, rx, qp, rp, sizes = [], [], [], [], []
    for i in range(spec.kl):
        q1, r1 = scipy.linalg.qr(x_red[:, i * spec.bl1:(i + 1) * spec.bl1], mode="economic")
        q2, r2 = scipy.linalg.qr(pr[i * spec.bl2:(i + 1) * spec.bl2, :].T, mode="economic")
        qx.append(q1)
        rx.append(r1)
        qp.append(q2)
        rp.append(r2)
        sizes.append((q1.shape[1], q2.shape[1]))

    offsets = np.cumsum([0] + [a * b for a, b in sizes])

    def matvec(z: np.ndarray) -> np.ndarray:
        z = np.ravel(z)
        out = np.zeros((n, cols))
        for i, (a, b) in enumerate(sizes):
            out += qx[i] @ z[offsets[i]:offsets[i + 1]].reshape(a, b) @ qp[i].T
        return out.ravel()

    def rmatvec(v: np.ndarray) -> np.ndarray:
        v = np.ravel(v).reshape(n, cols)
        return np.concatenate([(qx[i].T @ v @ qp[i]).ravel() for i in range(spec.kl)])

    operator = LinearOperator((n * cols, int(offsets[-1])), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)
    solution = lsqr(operator, y_red.ravel(), atol=opts.lsqr_tol, btol=opts.lsqr_tol, iter_lim=opts.lsqr_iters)
    z, istop = solution[0], solution[1]
    if istop == 7:
        logger.warning(f"⚠️ GS L 步的 LSQR 在 {opts.lsqr_iters} 步内未收敛")
        if flags is not None:
            flags.append("iterative_ls_did_not_converge")

    left = np.empty_like(g.L)
    for i, (a, b) in enumerate(sizes):
        zi = z[offsets[i]:offsets[i + 1]].reshape(a, b)
        left[i] = _pinv(rx[i], opts.pinv_rtol) @ zi @ _pinv(rp[i].T, opts.pinv_rtol)
    return _check_finite(left, "GS L 半步解")


def gs_weighted_als(
    problem: WeightedProblem,
    init: GSMatrix,
    iters: int,
    options: Optional[SolverConfig] = None,
    flags: Optional[List[str]] = None,
) -> Tuple[GSMatrix, List[float]]:
    """交替 R/L 半步；目标序列单调不增"""
    current = init
    best = problem.objective(current)
    trace = [best]

    for it in range(iters):
        for half in ("R", "L"):
            if half == "R":
                candidate = _with_factors(current, current.L, gs_step_R(current, problem, options))
            else:
                candidate = _with_factors(current, gs_step_L(current, problem, options, flags), current.R)
            value = problem.objective(candidate)
            if value <= best:
                current, best = candidate, value
            trace.append(best)
        logger.debug(f"GS 加权 ALS 迭代 {it + 1}: {best:.6e}")

    return current, trace


def _with_factors(g: GSMatrix, left: np.ndarray, right: np.ndarray) -> GSMatrix:
    return GSMatrix(left, right, g.p_left, g.perm, g.p_right, g.permutation)


# ==================== 统一入口 ====================

def weighted_project(
    x: np.ndarray,
    w: np.ndarray,
    spec: StructureSpec,
    iters: int,
    init: Any = None,
    options: Optional[SolverConfig] = None,
    flags: Optional[List[str]] = None,
) -> Tuple[Any, List[float]]:
    """加权范数投影；init 为空时用 Frobenius 投影初始化"""
    problem = WeightedProblem.from_weight(x, w)
    if spec is None:
        dense = np.array(w, dtype=np.float64)
        return dense, [problem.objective(dense)]
    if isinstance(spec, KronSpec):
        start = init if isinstance(init, KroneckerSum) else kron_project(w, spec)
        return kron_weighted_als(problem, start, iters, options)
    if isinstance(spec, GSSpec):
        start = init if isinstance(init, GSMatrix) else gs_project(w, spec)
        return gs_weighted_als(problem, start, iters, options, flags)
    if isinstance(spec, BlockZeroSpec):
        raise UnsupportedStructure("零块矩阵的加权投影走 PCA 切片路径")
    raise UnsupportedStructure(f"未知结构规格: {spec!r}")
