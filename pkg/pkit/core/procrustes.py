"""
正交矩阵工具 - pkit 核心组件

闭式 OPP、Cayley / 指数参数化、谱修正（行取反 + Householder）以及加权 Procrustes（WOPP）的共轭梯度求解器
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from ..config import SolverConfig
from ..errors import (
    MinusOneEigenvalue,
    NonFiniteObjective,
    NotOrthogonal,
    NotSkew,
    ShapeMismatch,
)
from .tensorfile import PathLike, read_json, read_tensor, write_json, write_tensor

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-8
SKEW_TOL = 1e-12
MINUS_ONE_TOL = 1e-8
SPECTRUM_MARGIN = 1e-6
# ‖K‖ 超过此值时把 Cayley 中心移到当前迭代点
RECENTER_NORM = 0.5


# ==================== 基础检查 ====================

def orthogonality_error(q: np.ndarray) -> float:
    """‖QᵀQ − I‖_F"""
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[0])))


def check_orthogonal(q: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ShapeMismatch(f"正交矩阵必须为方阵，实际形状 {q.shape}")
    err = orthogonality_error(q)
    if not err <= tol:
        raise NotOrthogonal(f"‖QᵀQ − I‖_F = {err:.3e} 超过容差 {tol:.0e}")
    return q


def check_skew(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeMismatch(f"反对称矩阵必须为方阵，实际形状 {k.shape}")
    if np.abs(k + k.T).max(initial=0.0) > SKEW_TOL * max(1.0, np.abs(k).max(initial=0.0)):
        raise NotSkew("K + Kᵀ ≠ 0")
    return k


def skew_to_upper(k: np.ndarray) -> np.ndarray:
    """严格上三角的 n(n−1)/2 个参数"""
    return k[np.triu_indices(k.shape[0], 1)].copy()


def skew_from_upper(values: np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != n * (n - 1) // 2:
        raise ShapeMismatch(f"参数个数 {values.size} 与 n={n} 不符")
    k = np.zeros((n, n))
    k[np.triu_indices(n, 1)] = values
    return k - k.T


# ==================== OPP ====================

def solve_opp(a: np.ndarray, b: np.ndarray) -> "OrthogonalFactor":
    """min_Q ‖QA − B‖_F，Q = UVᵀ，BAᵀ = UΣVᵀ（完整 SVD）"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatch(f"OPP 要求 A、B 同形，实际 {a.shape} vs {b.shape}")
    # orthogonal_procrustes 求 min ‖Aᵀ R − Bᵀ‖，Q = Rᵀ
    r, _ = scipy.linalg.orthogonal_procrustes(a.T, b.T)
    return OrthogonalFactor.from_dense(r.T)


def opp_objective(q: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(q @ a - b) ** 2)


# ==================== 参数化 ====================

def cayley(k: np.ndarray) -> np.ndarray:
    """Q = (I+K)(I−K)^{-1}"""
    k = check_skew(k)
    eye = np.eye(k.shape[0])
    # (I−K)^{-1} 与 (I+K) 可交换
    return scipy.linalg.solve(eye - k, eye + k)


def cayley_inverse(q: np.ndarray) -> np.ndarray:
    """K = (I+Q)^{-1}(Q−I)；I+Q 接近奇异时报错"""
    q = check_orthogonal(q)
    eye = np.eye(q.shape[0])
    smallest = scipy.linalg.svdvals(eye + q).min(initial=np.inf)
    if smallest < MINUS_ONE_TOL:
        raise MinusOneEigenvalue(f"I+Q 的最小奇异值 {smallest:.3e}，Q 含特征值 −1")
    k = scipy.linalg.solve(eye + q, q - eye)
    return 0.5 * (k - k.T)


def matrix_exponential_skew(k: np.ndarray) -> np.ndarray:
    """exp(K)，K 反对称时结果正交且 det = +1"""
    return scipy.linalg.expm(check_skew(k))


# ==================== 谱修正 ====================

def _transform(entry: Dict[str, Any], n: int) -> np.ndarray:
    if entry["kind"] == "negate_row":
        t = np.eye(n)
        t[entry["index"], entry["index"]] = -1.0
        return t
    v = np.asarray(entry["v"], dtype=np.float64)
    return np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)


def _near_minus_one_vectors(q: np.ndarray) -> List[np.ndarray]:
    """实 Schur 分解中特征值靠近 −1 的块对应的 Schur 向量"""
    t, z = scipy.linalg.schur(q, output="real")
    n = q.shape[0]
    vectors: List[np.ndarray] = []
    i = 0
    while i < n:
        if i + 1 < n and abs(t[i + 1, i]) > 1e-14:
            lam = np.linalg.eigvals(t[i:i + 2, i:i + 2])
            if np.abs(lam + 1.0).min() < SPECTRUM_MARGIN:
                vectors.extend([z[:, i], z[:, i + 1]])
            i += 2
        else:
            if abs(t[i, i] + 1.0) < SPECTRUM_MARGIN:
                vectors.append(z[:, i])
            i += 1
    return vectors


def spectrum_gap(q: np.ndarray) -> float:
    """min |λ+1|"""
    return float(np.abs(np.linalg.eigvals(q) + 1.0).min(initial=np.inf))


def fix_spectrum(q: np.ndarray) -> Tuple[np.ndarray, List[Dict[str, Any]]]:
    """
    把 Q 变换到 det = +1 且远离 −1 特征值

    返回 (Q', log)，Q' = T_k ⋯ T_1 Q；每个 T 都是对合矩阵，replay_fixes(log, Q') 还原 Q
    """
    q = check_orthogonal(q).copy()
    n = q.shape[0]
    log: List[Dict[str, Any]] = []

    for _ in range(2 * n + 2):
        if np.linalg.det(q) < 0:
            # 对角元最负的那一行取反：diag(1, −1) 一步变为 I
            row = int(np.argmin(np.diag(q)))
            q[row, :] *= -1.0
            log.append({"kind": "negate_row", "index": row})
            continue

        vectors = _near_minus_one_vectors(q)
        if not vectors:
            break
        for v in vectors:
            entry = {"kind": "householder", "v": v.tolist()}
            q = _transform(entry, n) @ q
            log.append(entry)
    else:
        logger.warning(f"⚠️ 谱修正达到最大轮数，min|λ+1| = {spectrum_gap(q):.3e}")

    if log:
        logger.debug(f"谱修正完成: {len(log)} 次变换")
    return q, log


def replay_fixes(log: Sequence[Dict[str, Any]], q_fixed: np.ndarray) -> np.ndarray:
    """T_1 ⋯ T_k Q'"""
    q = np.asarray(q_fixed, dtype=np.float64)
    n = q.shape[0]
    for entry in reversed(log):
        q = _transform(entry, n) @ q
    return q


# ==================== 正交因子 ====================

@dataclass(frozen=True)
class OrthogonalFactor:
    """正交矩阵：稠密形式，或 Cayley 反对称参数（严格上三角）加谱修正记录"""

    n: int
    dense: Optional[np.ndarray] = None
    skew: Optional[np.ndarray] = None
    fixes: Tuple[Dict[str, Any], ...] = field(default_factory=tuple)

    @classmethod
    def from_dense(cls, q: np.ndarray) -> "OrthogonalFactor":
        q = check_orthogonal(q)
        return cls(n=q.shape[0], dense=q)

    @classmethod
    def identity(cls, n: int) -> "OrthogonalFactor":
        return cls(n=n, dense=np.eye(n))

    @property
    def is_skew(self) -> bool:
        return self.skew is not None

    @property
    def matrix(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        q = cayley(skew_from_upper(self.skew, self.n))  # type: ignore[arg-type]
        return replay_fixes(self.fixes, q)

    def to_skew(self) -> "OrthogonalFactor":
        """谱修正后转为 n(n−1)/2 参数存储"""
        if self.is_skew:
            return self
        q_fixed, log = fix_spectrum(self.matrix)
        k = cayley_inverse(q_fixed)
        return OrthogonalFactor(n=self.n, skew=skew_to_upper(k), fixes=tuple(log))

    def param_count(self) -> int:
        return self.n * (self.n - 1) // 2 if self.is_skew else self.n * self.n

    def save(self, directory: PathLike) -> None:
        root = Path(directory)
        factor = self.to_skew()
        root.mkdir(parents=True, exist_ok=True)
        if factor.skew is not None and factor.skew.size:
            write_tensor(root / "skew.tensor", factor.skew)
        write_json(root / "orthogonal.json", {"n": factor.n, "fixes": list(factor.fixes)})

    @classmethod
    def load(cls, directory: PathLike) -> "OrthogonalFactor":
        root = Path(directory)
        note = read_json(root / "orthogonal.json")
        n = int(note["n"])
        path = root / "skew.tensor"
        skew = read_tensor(path) if path.exists() else np.zeros(0)
        return cls(n=n, skew=skew, fixes=tuple(note["fixes"]))


# ==================== WOPP ====================

@dataclass(frozen=True)
class WoppTerm:
    """weight · ‖left · Q · right − target‖²_F；right 为 None 表示单位阵"""

    left: np.ndarray
    target: np.ndarray
    right: Optional[np.ndarray] = None
    weight: float = 1.0


@dataclass(frozen=True)
class WoppProblem:
    n: int
    terms: Tuple[WoppTerm, ...]

    def __post_init__(self) -> None:
        for term in self.terms:
            if term.left.ndim != 2 or term.left.shape[1] != self.n:
                raise ShapeMismatch(f"left 列数应为 {self.n}，实际 {term.left.shape}")
            cols = self.n if term.right is None else term.right.shape[1]
            if term.right is not None and term.right.shape[0] != self.n:
                raise ShapeMismatch(f"right 行数应为 {self.n}，实际 {term.right.shape}")
            if term.target.shape != (term.left.shape[0], cols):
                raise ShapeMismatch(f"target 形状 {term.target.shape} 与 {(term.left.shape[0], cols)} 不符")
            if term.weight < 0:
                raise ShapeMismatch(f"项权重不能为负: {term.weight}")

    @classmethod
    def single(cls, c: np.ndarray, a: np.ndarray, b: np.ndarray) -> "WoppProblem":
        """‖C Q A − B‖²_F"""
        c, a, b = (np.asarray(m, dtype=np.float64) for m in (c, a, b))
        if not np.allclose(c, c.T, atol=1e-12, rtol=0):
            raise ShapeMismatch("C 必须对称")
        return cls(n=a.shape[0], terms=(WoppTerm(left=c, target=b, right=a),))

    @classmethod
    def joint(
        cls,
        c_out: np.ndarray,
        w_out: np.ndarray,
        w_out_hat: np.ndarray,
        c_in: np.ndarray,
        w_in: np.ndarray,
        w_in_hat: np.ndarray,
        lambda_in: float,
    ) -> "WoppProblem":
        """‖C_out(W_out Q − Ŵ_out)‖² + λ‖C_in(W_in − Q Ŵ_in)‖²"""
        n = w_out.shape[1]
        terms = [WoppTerm(left=c_out @ w_out, target=c_out @ w_out_hat)]
        if w_in.shape[1] > 0 and lambda_in > 0:
            terms.append(WoppTerm(left=c_in, target=c_in @ w_in, right=w_in_hat, weight=lambda_in))
        return cls(n=n, terms=tuple(terms))

    def objective(self, q: np.ndarray) -> float:
        return sum(t.weight * float(np.linalg.norm(self._residual(t, q)) ** 2) for t in self.terms)

    def gradient(self, q: np.ndarray) -> np.ndarray:
        """∂f/∂Q"""
        g = np.zeros((self.n, self.n))
        for t in self.terms:
            res = self._residual(t, q)
            back = res if t.right is None else res @ t.right.T
            g += 2.0 * t.weight * (t.left.T @ back)
        return g

    @staticmethod
    def _residual(t: WoppTerm, q: np.ndarray) -> np.ndarray:
        lq = t.left @ q
        return (lq if t.right is None else lq @ t.right) - t.target


def wopp_value_and_grad(
    problem: WoppProblem, q0: np.ndarray, k_vec: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Q = Q0·cayley(K) 处的目标值、对上三角参数的解析梯度与 Q"""
    n = problem.n
    eye = np.eye(n)
    k = skew_from_upper(k_vec, n)
    m = scipy.linalg.solve(eye - k, eye)
    q = q0 @ (2.0 * m - eye)
    f = problem.objective(q)
    e = 2.0 * m.T @ (q0.T @ problem.gradient(q)) @ m.T
    grad = (e - e.T)[np.triu_indices(n, 1)]
    return f, grad, q


@dataclass
class WoppResult:
    factor: OrthogonalFactor
    objectives: List[float]
    iterations: int
    line_search_failed: bool = False


def solve_wopp(
    problem: WoppProblem,
    q0: Optional[np.ndarray] = None,
    cg_iters: int = 500,
    options: Optional[SolverConfig] = None,
) -> WoppResult:
    """
    在 Q = Q0·cayley(K) 上用 PR+ 共轭梯度 + Armijo 回溯最小化 WOPP 目标

    K 从 0 开始，因此 cg_iters = 0 原样返回 Q0；目标序列严格不增。
    每次重启或 ‖K‖ > RECENTER_NORM 时令 Q0 ← Q、K ← 0，沿最速下降方向继续
    """
    opts = options or SolverConfig()
    n = problem.n
    q0 = check_orthogonal(np.eye(n) if q0 is None else q0)
    n_params = n * (n - 1) // 2

    k = np.zeros(n_params)
    f, g, q = wopp_value_and_grad(problem, q0, k)
    if not np.isfinite(f):
        raise NonFiniteObjective(f"WOPP 初始目标不是有限数: {f}")

    trace = [f]
    result = WoppResult(OrthogonalFactor(n=n, dense=q0), trace, 0)
    if cg_iters <= 0 or n_params == 0:
        return result

    d = -g
    f_prev: Optional[float] = None
    restart = max(n_params, 1)

    for it in range(cg_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.gtol * (1.0 + f):
            break

        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = -gnorm ** 2

        alpha = 1.0 / float(np.linalg.norm(d))
        if f_prev is not None:
            guess = 2.02 * (f - f_prev) / slope
            if np.isfinite(guess) and guess > 0:
                alpha = min(1.0, guess)

        accepted = False
        for _ in range(opts.max_backtracks):
            k_new = k + alpha * d
            f_new, g_new, q_new = wopp_value_and_grad(problem, q0, k_new)
            if np.isfinite(f_new) and f_new <= f + opts.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= opts.shrink

        if not accepted:
            if gnorm / (1.0 + f) > 1e-6:
                result.line_search_failed = True
                logger.warning(f"⚠️ WOPP 线搜索失败: 迭代 {it}, ‖g‖ = {gnorm:.3e}")
            break

        beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        if (it + 1) % restart == 0:
            beta = 0.0
        d = -g_new + beta * d
        f_prev, f, g, k, q = f, f_new, g_new, k_new, q_new
        if beta == 0.0 or float(np.linalg.norm(k)) > RECENTER_NORM:
            q0, k = q, np.zeros(n_params)
            _, g, _ = wopp_value_and_grad(problem, q0, k)
            d = -g
        trace.append(f)
        result.iterations = it + 1
        logger.debug(f"WOPP 迭代 {it + 1}: f = {f:.6e}, ‖g‖ = {gnorm:.3e}")

    result.factor = OrthogonalFactor(n=n, dense=q)
    return result
