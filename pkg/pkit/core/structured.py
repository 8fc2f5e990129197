"""
结构化矩阵类 - pkit 核心组件

Kronecker 积之和、GS 矩阵、单非零块矩阵：物化、乘法、参数计数与 Frobenius 范数下的精确投影
"""

import logging
from dataclasses import dataclass
from functools import singledispatch
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg

from ..errors import RankTooLarge, ShapeMismatch, UnsupportedStructure
from .tensorfile import PathLike, read_json, read_tensor, write_json, write_tensor

logger = logging.getLogger(__name__)

BLOCKZERO_PATTERNS = ("zero-cols", "zero-rows", "corner")


# ==================== 结构规格 ====================

@dataclass(frozen=True)
class KronSpec:
    """Σ_{i<r} A_i ⊗ B_i，A_i 为 m1×n1，B_i 为 m2×n2"""

    r: int
    m1: int
    n1: int
    m2: int
    n2: int

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.m1 * self.m2, self.n1 * self.n2)

    def param_count(self) -> int:
        return self.r * (self.m1 * self.n1 + self.m2 * self.n2)


@dataclass(frozen=True)
class GSSpec:
    """P_L (L P R) P_R：L 有 kl 个 bl1×bl2 块，R 有 kr 个 br1×br2 块"""

    kl: int
    kr: int
    bl1: int
    bl2: int
    br1: int
    br2: int
    permutation: str = "stride"

    def __post_init__(self) -> None:
        if min(self.kl, self.kr, self.bl1, self.bl2, self.br1, self.br2) <= 0:
            raise ShapeMismatch(f"GS 分块参数必须为正: {self}")
        if self.kl * self.bl2 != self.kr * self.br1:
            raise ShapeMismatch(
                f"GS 内维不一致: kl*bl2={self.kl * self.bl2} != kr*br1={self.kr * self.br1}"
            )
        if self.permutation not in ("stride", "identity"):
            raise UnsupportedStructure(f"未知的置换类型: {self.permutation}")

    @property
    def inner(self) -> int:
        return self.kl * self.bl2

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.kl * self.bl1, self.kr * self.br2)

    def param_count(self) -> int:
        return self.kl * self.bl1 * self.bl2 + self.kr * self.br1 * self.br2

    def permutations(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """返回 (p_left, perm, p_right) 索引数组；P = I[perm, :]"""
        rows, cols = self.shape
        s = self.inner
        if self.permutation == "identity":
            perm = np.arange(s)
        else:
            # 完美洗牌：L 的第 a 列接到 R 的第 a mod kr 个块
            a = np.arange(s)
            perm = (a % self.kr) * (s // self.kr) + a // self.kr
        return np.arange(rows), perm, np.arange(cols)


@dataclass(frozen=True)
class BlockZeroSpec:
    """只保留一个非零块：zero-cols 保留前 d 列，zero-rows 保留前 d 行，corner 保留左上 d×d"""

    d: int
    pattern: str = "zero-cols"

    def __post_init__(self) -> None:
        if self.d < 0:
            raise ShapeMismatch(f"保留维度 d 不能为负: {self.d}")
        if self.pattern not in BLOCKZERO_PATTERNS:
            raise UnsupportedStructure(f"未知的零块模式: {self.pattern}")


StructureSpec = Union[KronSpec, GSSpec, BlockZeroSpec, None]


# ==================== 结构化矩阵 ====================

@dataclass(frozen=True)
class KroneckerSum:
    A: np.ndarray  # r × m1 × n1
    B: np.ndarray  # r × m2 × n2

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def spec(self) -> KronSpec:
        _, m1, n1 = self.A.shape
        _, m2, n2 = self.B.shape
        return KronSpec(self.r, m1, n1, m2, n2)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.spec.shape


@dataclass(frozen=True)
class GSMatrix:
    L: np.ndarray  # kl × bl1 × bl2
    R: np.ndarray  # kr × br1 × br2
    p_left: np.ndarray
    perm: np.ndarray
    p_right: np.ndarray
    permutation: str = "stride"

    @property
    def spec(self) -> GSSpec:
        kl, bl1, bl2 = self.L.shape
        kr, br1, br2 = self.R.shape
        return GSSpec(kl, kr, bl1, bl2, br1, br2, self.permutation)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.spec.shape


@dataclass(frozen=True)
class BlockZero:
    core: np.ndarray
    shape: Tuple[int, int]
    pattern: str = "zero-cols"

    @property
    def d(self) -> int:
        return self.core.shape[0] if self.pattern == "zero-rows" else self.core.shape[1]


@dataclass(frozen=True)
class PartitionedMatrix:
    """列分块：dense_cols 区间保持稠密，其余列由 main 表示"""

    main: Any
    dense: np.ndarray
    dense_cols: Tuple[int, int]

    @property
    def shape(self) -> Tuple[int, int]:
        rows = self.dense.shape[0]
        return (rows, _shape_of(self.main)[1] + self.dense.shape[1])

    def main_columns(self) -> np.ndarray:
        start, stop = self.dense_cols
        total = self.shape[1]
        return np.concatenate([np.arange(start), np.arange(stop, total)])


def _shape_of(s: Any) -> Tuple[int, int]:
    if isinstance(s, np.ndarray):
        return s.shape  # type: ignore[return-value]
    return s.shape


# ==================== SVD 工具 ====================

def _fix_signs(u: np.ndarray, vt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """令每个左奇异向量绝对值最大的分量为正"""
    if u.size == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def truncated_svd(m: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """前 k 个奇异三元组（符号已规范化）"""
    u, s, vt = scipy.linalg.svd(m, full_matrices=False)
    u, vt = _fix_signs(u, vt)
    return u[:, :k], s[:k], vt[:k]


# ==================== Kronecker ====================

def _as_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatch(f"需要二维矩阵，实际维数 {w.ndim}")
    return w


def rearrange_kron(w: np.ndarray, m1: int, n1: int, m2: int, n2: int) -> np.ndarray:
    """(m1 m2)×(n1 n2) → (m1 n1)×(m2 n2)，使 A⊗B 变为 vec(A) vec(B)ᵀ"""
    w = _as_matrix(w)
    if w.shape != (m1 * m2, n1 * n2):
        raise ShapeMismatch(f"矩阵形状 {w.shape} 与分块 ({m1}·{m2})×({n1}·{n2}) 不符")
    return w.reshape(m1, m2, n1, n2).transpose(0, 2, 1, 3).reshape(m1 * n1, m2 * n2)


def kron_project(w: np.ndarray, spec: KronSpec) -> KroneckerSum:
    """Frobenius 范数下最优的 r 项 Kronecker 和（重排后截断 SVD）"""
    if spec.r < 1:
        raise RankTooLarge(f"秩必须为正: {spec.r}")
    if spec.r > min(spec.m1 * spec.n1, spec.m2 * spec.n2):
        raise RankTooLarge(
            f"秩 {spec.r} 超过重排矩阵的最小维度 {min(spec.m1 * spec.n1, spec.m2 * spec.n2)}"
        )

    rearranged = rearrange_kron(w, spec.m1, spec.n1, spec.m2, spec.n2)
    u, s, vt = truncated_svd(rearranged, spec.r)
    root = np.sqrt(s)
    a = (u * root).T.reshape(spec.r, spec.m1, spec.n1)
    b = (vt * root[:, None]).reshape(spec.r, spec.m2, spec.n2)
    return KroneckerSum(a, b)


# ==================== GS ====================

def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def gs_block_pairs(spec: GSSpec, perm: np.ndarray) -> Dict[Tuple[int, int], List[Tuple[int, int]]]:
    """按 (L 块, R 块) 分组的 (L 列, R 行) 配对，每个块的秩等于配对数"""
    pairs: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for a in range(spec.inner):
        b = int(perm[a])
        key = (a // spec.bl2, b // spec.br1)
        pairs.setdefault(key, []).append((a % spec.bl2, b % spec.br1))
    return pairs


def gs_project(
    w: np.ndarray,
    spec: GSSpec,
    permutations: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> GSMatrix:
    """固定置换下的最优 L、R：P_LᵀWP_Rᵀ 的每个块做截断 SVD"""
    w = _as_matrix(w)
    if w.shape != spec.shape:
        raise ShapeMismatch(f"矩阵形状 {w.shape} 与 GS 规格 {spec.shape} 不符")

    p_left, perm, p_right = permutations if permutations is not None else spec.permutations()
    core = w[inverse_permutation(p_left), :][:, p_right]

    left = np.zeros((spec.kl, spec.bl1, spec.bl2))
    right = np.zeros((spec.kr, spec.br1, spec.br2))
    for (i, j), matched in gs_block_pairs(spec, perm).items():
        block = core[i * spec.bl1:(i + 1) * spec.bl1, j * spec.br2:(j + 1) * spec.br2]
        u, s, vt = truncated_svd(block, len(matched))
        for k, (t, v) in enumerate(matched[: s.size]):
            root = np.sqrt(s[k])
            left[i][:, t] = u[:, k] * root
            right[j][v, :] = vt[k] * root

    return GSMatrix(left, right, p_left, perm, p_right, spec.permutation)


def gs_core(g: GSMatrix) -> np.ndarray:
    """L P R（未施加外层置换）"""
    lbd = scipy.linalg.block_diag(*g.L)
    rbd = scipy.linalg.block_diag(*g.R)
    return lbd[:, inverse_permutation(g.perm)] @ rbd


# ==================== 零块 ====================

def blockzero_project(w: np.ndarray, spec: BlockZeroSpec) -> BlockZero:
    """复制保留块，其余置零"""
    w = _as_matrix(w)
    rows, cols = w.shape
    d = spec.d
    if spec.pattern == "zero-cols":
        if d > cols:
            raise ShapeMismatch(f"d={d} 超过列数 {cols}")
        core = w[:, :d].copy()
    elif spec.pattern == "zero-rows":
        if d > rows:
            raise ShapeMismatch(f"d={d} 超过行数 {rows}")
        core = w[:d, :].copy()
    else:
        if d > min(rows, cols):
            raise ShapeMismatch(f"d={d} 超过矩阵尺寸 {w.shape}")
        core = w[:d, :d].copy()
    return BlockZero(core, (rows, cols), spec.pattern)


# ==================== 统一接口 ====================

def project(w: np.ndarray, spec: StructureSpec) -> Any:
    """投影到 spec 指定的结构类；spec 为 None 时原样返回稠密副本"""
    if spec is None:
        return _as_matrix(w).copy()
    if isinstance(spec, KronSpec):
        return kron_project(w, spec)
    if isinstance(spec, GSSpec):
        return gs_project(w, spec)
    if isinstance(spec, BlockZeroSpec):
        return blockzero_project(w, spec)
    raise UnsupportedStructure(f"未知结构规格: {spec!r}")


def spec_of(s: Any) -> StructureSpec:
    """结构化值对应的规格（稠密矩阵返回 None）"""
    if isinstance(s, np.ndarray):
        return None
    if isinstance(s, (KroneckerSum, GSMatrix)):
        return s.spec
    if isinstance(s, BlockZero):
        return BlockZeroSpec(s.d, s.pattern)
    raise UnsupportedStructure(f"无法推断规格: {type(s).__name__}")


@singledispatch
def materialize(s: Any) -> np.ndarray:
    raise UnsupportedStructure(f"无法物化类型 {type(s).__name__}")


@materialize.register
def _(s: np.ndarray) -> np.ndarray:
    return s


@materialize.register
def _(s: KroneckerSum) -> np.ndarray:
    spec = s.spec
    return np.einsum("rab,rcd->acbd", s.A, s.B).reshape(spec.shape)


@materialize.register
def _(s: GSMatrix) -> np.ndarray:
    return gs_core(s)[s.p_left, :][:, inverse_permutation(s.p_right)]


@materialize.register
def _(s: BlockZero) -> np.ndarray:
    out = np.zeros(s.shape)
    r, c = s.core.shape
    out[:r, :c] = s.core
    return out


@materialize.register
def _(s: PartitionedMatrix) -> np.ndarray:
    rows, cols = s.shape
    out = np.empty((rows, cols))
    start, stop = s.dense_cols
    out[:, start:stop] = s.dense
    out[:, s.main_columns()] = materialize(s.main)
    return out


@singledispatch
def apply(s: Any, x: np.ndarray) -> np.ndarray:
    """X · S，不物化 S"""
    raise UnsupportedStructure(f"无法应用类型 {type(s).__name__}")


def _check_inner(x: np.ndarray, rows: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != rows:
        raise ShapeMismatch(f"输入形状 {x.shape} 与结构矩阵行数 {rows} 不匹配")
    return x


@apply.register
def _(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _check_inner(x, s.shape[0]) @ s


@apply.register
def _(s: KroneckerSum, x: np.ndarray) -> np.ndarray:
    spec = s.spec
    x = _check_inner(x, spec.m1 * spec.m2)
    y = np.einsum(
        "nij,rik,rjl->nkl", x.reshape(-1, spec.m1, spec.m2), s.A, s.B, optimize=True
    )
    return y.reshape(x.shape[0], spec.n1 * spec.n2)


@apply.register
def _(s: GSMatrix, x: np.ndarray) -> np.ndarray:
    spec = s.spec
    x = _check_inner(x, spec.shape[0])
    n = x.shape[0]
    y = x[:, inverse_permutation(s.p_left)]
    y = np.einsum("nib,ibc->nic", y.reshape(n, spec.kl, spec.bl1), s.L).reshape(n, spec.inner)
    y = y[:, inverse_permutation(s.perm)]
    y = np.einsum("nib,ibc->nic", y.reshape(n, spec.kr, spec.br1), s.R).reshape(n, -1)
    return y[:, inverse_permutation(s.p_right)]


@apply.register
def _(s: BlockZero, x: np.ndarray) -> np.ndarray:
    x = _check_inner(x, s.shape[0])
    out = np.zeros((x.shape[0], s.shape[1]))
    r, c = s.core.shape
    out[:, :c] = x[:, :r] @ s.core
    return out


@apply.register
def _(s: PartitionedMatrix, x: np.ndarray) -> np.ndarray:
    x = _check_inner(x, s.shape[0])
    out = np.empty((x.shape[0], s.shape[1]))
    start, stop = s.dense_cols
    out[:, start:stop] = x @ s.dense
    out[:, s.main_columns()] = apply(s.main, x)
    return out


@singledispatch
def param_count(s: Any) -> int:
    """可训练参数个数（置换为索引元数据，不计入）"""
    count = getattr(s, "param_count", None)
    if callable(count):
        return int(count())
    raise UnsupportedStructure(f"无法计数类型 {type(s).__name__}")


@param_count.register
def _(s: np.ndarray) -> int:
    return int(s.size)


@param_count.register
def _(s: KroneckerSum) -> int:
    return int(s.A.size + s.B.size)


@param_count.register
def _(s: GSMatrix) -> int:
    return int(s.L.size + s.R.size)


@param_count.register
def _(s: BlockZero) -> int:
    return int(s.core.size)


@param_count.register
def _(s: PartitionedMatrix) -> int:
    return param_count(s.main) + int(s.dense.size)


def compression_ratio(s: Any, orig_dims: Tuple[int, int]) -> float:
    """1 − params(s)/params(dense)"""
    rows, cols = orig_dims
    return 1.0 - param_count(s) / float(rows * cols)


def residual(w: np.ndarray, s: Any) -> float:
    """‖W − materialize(s)‖_F"""
    return float(np.linalg.norm(_as_matrix(w) - materialize(s)))


# ==================== 序列化 ====================

def spec_to_dict(spec: StructureSpec) -> Dict[str, Any]:
    if spec is None:
        return {"kind": "none"}
    if isinstance(spec, KronSpec):
        return {"kind": "kron", "r": spec.r, "m1": spec.m1, "n1": spec.n1, "m2": spec.m2, "n2": spec.n2}
    if isinstance(spec, GSSpec):
        return {
            "kind": "gs", "kl": spec.kl, "kr": spec.kr, "bl1": spec.bl1, "bl2": spec.bl2,
            "br1": spec.br1, "br2": spec.br2, "permutation": spec.permutation,
        }
    return {"kind": "blockzero", "d": spec.d, "pattern": spec.pattern}


def spec_from_dict(data: Dict[str, Any]) -> StructureSpec:
    fields = {k: v for k, v in data.items() if k != "kind"}
    kind = data.get("kind", "none")
    if kind == "none":
        return None
    if kind == "kron":
        return KronSpec(**fields)
    if kind == "gs":
        return GSSpec(**fields)
    if kind == "blockzero":
        return BlockZeroSpec(**fields)
    raise UnsupportedStructure(f"未知结构类型: {kind}")


def save_structured(directory: PathLike, s: Any) -> None:
    """写出 manifest.json 与各因子张量文件"""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {"shape": list(_shape_of(s))}

    if isinstance(s, np.ndarray):
        manifest["class"] = "dense"
        write_tensor(root / "W.tensor", s)
    elif isinstance(s, KroneckerSum):
        manifest.update({"class": "kron", "spec": spec_to_dict(s.spec)})
        write_tensor(root / "A.tensor", s.A)
        write_tensor(root / "B.tensor", s.B)
    elif isinstance(s, GSMatrix):
        manifest.update({
            "class": "gs", "spec": spec_to_dict(s.spec),
            "p_left": s.p_left.tolist(), "perm": s.perm.tolist(), "p_right": s.p_right.tolist(),
        })
        write_tensor(root / "L.tensor", s.L)
        write_tensor(root / "R.tensor", s.R)
    elif isinstance(s, BlockZero):
        manifest.update({"class": "blockzero", "pattern": s.pattern, "d": s.d})
        if s.core.size:
            write_tensor(root / "core.tensor", s.core)
    elif isinstance(s, PartitionedMatrix):
        manifest.update({"class": "partitioned", "dense_cols": list(s.dense_cols)})
        write_tensor(root / "dense.tensor", s.dense)
        save_structured(root / "main", s.main)
    else:
        raise UnsupportedStructure(f"无法序列化类型 {type(s).__name__}")

    write_json(root / "manifest.json", manifest)


def load_structured(directory: PathLike) -> Any:
    """save_structured 的逆操作"""
    root = Path(directory)
    manifest = read_json(root / "manifest.json")
    kind = manifest["class"]
    shape = tuple(manifest["shape"])

    if kind == "dense":
        return read_tensor(root / "W.tensor")
    if kind == "kron":
        return KroneckerSum(read_tensor(root / "A.tensor"), read_tensor(root / "B.tensor"))
    if kind == "gs":
        return GSMatrix(
            read_tensor(root / "L.tensor"), read_tensor(root / "R.tensor"),
            np.asarray(manifest["p_left"]), np.asarray(manifest["perm"]),
            np.asarray(manifest["p_right"]), manifest["spec"]["permutation"],
        )
    if kind == "blockzero":
        pattern, d = manifest["pattern"], manifest["d"]
        core_path = root / "core.tensor"
        if core_path.exists():
            core = read_tensor(core_path)
        else:
            core_shape = {"zero-cols": (shape[0], d), "zero-rows": (d, shape[1]), "corner": (d, d)}
            core = np.zeros(core_shape[pattern])
        return BlockZero(core, shape, pattern)  # type: ignore[arg-type]
    if kind == "partitioned":
        start, stop = manifest["dense_cols"]
        return PartitionedMatrix(load_structured(root / "main"), read_tensor(root / "dense.tensor"), (start, stop))
    raise UnsupportedStructure(f"未知结构类型: {kind}")
