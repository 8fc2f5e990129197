"""
玩具网络 - pkit toymodel

RMSNorm 残差网络：嵌入 → 若干块（MLP 或确定性注意力桩）→ 输出头。
块之间的 RMSNorm 没有可学习缩放，因此整网对正交旋转保持计算不变
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy.special

from ..core.calib import CorrelationAccumulator, TokenFrequency, count_tokens
from ..core.procrustes import OrthogonalFactor, check_orthogonal
from ..core.structured import apply, load_structured, param_count, save_structured
from ..core.tensorfile import PathLike, read_json, read_tensor, write_json, write_tensor
from ..errors import IdOutOfRange, NonFinite, ShapeMismatch, UnsupportedStructure, ZeroVector

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "gelu", "attention")


# ==================== 基本运算 ====================

def rmsnorm(x: np.ndarray) -> np.ndarray:
    """逐行 x/‖x‖₂"""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("RMSNorm 输入向量范数为零")
    return x / norms


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + scipy.special.erf(z / np.sqrt(2.0)))
    raise UnsupportedStructure(f"未知激活函数: {kind}")


def attention_stub(qkv: np.ndarray) -> np.ndarray:
    """单头因果注意力：softmax(q kᵀ/√a + mask)·v"""
    a = qkv.shape[1] // 3
    q, k, v = qkv[:, :a], qkv[:, a:2 * a], qkv[:, 2 * a:]
    scores = q @ k.T / np.sqrt(max(a, 1))
    scores = np.where(np.tril(np.ones_like(scores, dtype=bool)), scores, -np.inf)
    return scipy.special.softmax(scores, axis=1) @ v


# ==================== 网络结构 ====================

@dataclass
class ToyBlock:
    """x ← x·S + σ(RMSNorm(x) W_in + b_in) W_out + b_out"""

    w_in: Any  # n × h
    w_out: Any  # h' × n
    activation: str = "relu"
    b_in: Optional[np.ndarray] = None
    b_out: Optional[np.ndarray] = None
    skip: bool = True
    skip_rotation: Optional[OrthogonalFactor] = None

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise UnsupportedStructure(f"未知激活函数: {self.activation}")
        hidden = self.w_in.shape[1]
        if self.activation == "attention":
            if hidden % 3:
                raise ShapeMismatch(f"注意力桩的 W_in 列数 {hidden} 不是 3 的倍数")
            hidden //= 3
        if self.w_out.shape[0] != hidden:
            raise ShapeMismatch(f"W_out 行数 {self.w_out.shape[0]} 与隐藏维度 {hidden} 不符")

    @property
    def values_cols(self) -> Optional[tuple]:
        """注意力桩中 V 投影所占的 W_in 列区间"""
        if self.activation != "attention":
            return None
        a = self.w_in.shape[1] // 3
        return (2 * a, 3 * a)

    def inner(self, h: np.ndarray) -> np.ndarray:
        """W_out 的输入激活"""
        pre = apply(self.w_in, h)
        if self.b_in is not None:
            pre = pre + self.b_in
        if self.activation == "attention":
            return attention_stub(pre)
        return activate(pre, self.activation)

    def skip_matrix(self, n: int) -> Optional[np.ndarray]:
        if not self.skip:
            return None
        return np.eye(n) if self.skip_rotation is None else self.skip_rotation.matrix


@dataclass
class ToyNetwork:
    w_emb: Any  # V × n
    blocks: List[ToyBlock]
    w_head: Any  # n × V

    @property
    def vocab(self) -> int:
        return self.w_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.w_emb.shape[1]

    @property
    def n_sites(self) -> int:
        return len(self.blocks) + 1


@dataclass
class Activations:
    """一条序列前向时的中间量"""

    stream: List[np.ndarray] = field(default_factory=list)  # x_0 … x_L
    normed: List[np.ndarray] = field(default_factory=list)  # RMSNorm(x_ℓ)，即块 ℓ+1 或输出头的输入
    inner: List[np.ndarray] = field(default_factory=list)  # 块 ℓ 中 W_out 的输入
    skip: List[np.ndarray] = field(default_factory=list)  # x_{ℓ−1}·S_ℓ
    logits: Optional[np.ndarray] = None


def _one_hot(ids: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros((ids.size, vocab))
    out[np.arange(ids.size), ids] = 1.0
    return out


def _check_ids(ids: Sequence[int], vocab: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).ravel()
    if arr.size == 0:
        raise ShapeMismatch("token 序列不能为空")
    if arr.min() < 0 or arr.max() >= vocab:
        raise IdOutOfRange(f"token id 超出词表 [0, {vocab})")
    return arr


def trace_activations(net: ToyNetwork, token_ids: Sequence[int]) -> Activations:
    """前向一遍并记录每个旋转点的输入/输出激活"""
    ids = _check_ids(token_ids, net.vocab)
    acts = Activations()
    if isinstance(net.w_emb, np.ndarray):
        x = net.w_emb[ids]
    else:
        x = apply(net.w_emb, _one_hot(ids, net.vocab))
    acts.stream.append(x)

    for block in net.blocks:
        h = rmsnorm(x)
        acts.normed.append(h)
        z = block.inner(h)
        acts.inner.append(z)
        out = apply(block.w_out, z)
        if block.b_out is not None:
            out = out + block.b_out
        s = block.skip_matrix(net.dim)
        carried = np.zeros_like(x) if s is None else x @ s
        acts.skip.append(carried)
        x = carried + out
        acts.stream.append(x)

    h = rmsnorm(x)
    acts.normed.append(h)
    logits = apply(net.w_head, h)
    if not np.isfinite(logits).all():
        raise NonFinite("前向输出包含 NaN/Inf")
    acts.logits = logits
    return acts


def forward(net: ToyNetwork, token_ids: Sequence[int]) -> np.ndarray:
    """返回 T × V 的 logits"""
    return trace_activations(net, token_ids).logits  # type: ignore[return-value]


def max_relative_deviation(a: ToyNetwork, b: ToyNetwork, batches: Sequence[Sequence[int]]) -> float:
    """各序列 ‖logits_a − logits_b‖_F / ‖logits_a‖_F 的最大值"""
    worst = 0.0
    for ids in batches:
        ref = forward(a, ids)
        dev = np.linalg.norm(ref - forward(b, ids)) / max(np.linalg.norm(ref), 1e-300)
        worst = max(worst, float(dev))
    return worst


# ==================== 旋转 ====================

def _require_dense(m: Any, what: str) -> np.ndarray:
    if not isinstance(m, np.ndarray):
        raise UnsupportedStructure(f"{what} 已被结构化，不能再旋转")
    return m


def rotate_network(net: ToyNetwork, q_set: Sequence[np.ndarray]) -> ToyNetwork:
    """
    按旋转点 0..L 施加正交矩阵：

    W_emb → W_emb Q₀；块 ℓ 的 W_in → Q_{ℓ−1}ᵀW_in，W_out → W_out Q_ℓ，b_out → b_out Q_ℓ，
    跳连 S → Q_{ℓ−1}ᵀ S Q_ℓ；W_head → Q_Lᵀ W_head
    """
    if len(q_set) != net.n_sites:
        raise ShapeMismatch(f"需要 {net.n_sites} 个旋转矩阵，实际 {len(q_set)}")
    qs = [check_orthogonal(q) for q in q_set]
    for q in qs:
        if q.shape[0] != net.dim:
            raise ShapeMismatch(f"旋转矩阵维度 {q.shape} 与网络宽度 {net.dim} 不符")

    blocks = []
    for i, block in enumerate(net.blocks):
        before, after = qs[i], qs[i + 1]
        skip_rotation = None
        if block.skip:
            s = block.skip_matrix(net.dim)
            skip_rotation = OrthogonalFactor.from_dense(before.T @ s @ after)
        blocks.append(replace(
            block,
            w_in=before.T @ _require_dense(block.w_in, "W_in"),
            w_out=_require_dense(block.w_out, "W_out") @ after,
            b_out=None if block.b_out is None else block.b_out @ after,
            skip_rotation=skip_rotation,
        ))

    return ToyNetwork(
        w_emb=_require_dense(net.w_emb, "W_emb") @ qs[0],
        blocks=blocks,
        w_head=qs[-1].T @ _require_dense(net.w_head, "W_head"),
    )


# ==================== 校准 ====================

@dataclass
class CalibrationStats:
    """
    各旋转点的激活统计

    tokens：词频；inner[ℓ]：块 ℓ+1 中 W_out 输入的相关矩阵；
    normed[ℓ]：旋转点 ℓ 处 W_in（或输出头）输入的相关矩阵；stream[ℓ]：残差流 x_ℓ 的相关矩阵
    """

    tokens: TokenFrequency
    inner: List[CorrelationAccumulator]
    normed: List[CorrelationAccumulator]
    stream: List[CorrelationAccumulator]

    def rotated(self, q_set: Sequence[np.ndarray]) -> "CalibrationStats":
        """网络按 q_set 旋转后的统计量：x → xQ 时 XᵀX → QᵀXᵀXQ"""

        def conj(acc: CorrelationAccumulator, q: np.ndarray) -> CorrelationAccumulator:
            out = CorrelationAccumulator(acc.n)
            out.sum = q.T @ acc.sum @ q
            out.sum = 0.5 * (out.sum + out.sum.T)
            out.count = acc.count
            return out

        return CalibrationStats(
            tokens=self.tokens,
            inner=self.inner,
            normed=[conj(acc, q) for acc, q in zip(self.normed, q_set)],
            stream=[conj(acc, q) for acc, q in zip(self.stream, q_set)],
        )

    def save(self, directory: PathLike) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        write_json(root / "calibration.json", {
            "vocab": self.tokens.vocab,
            "counts": self.tokens.counts.tolist(),
            "sites": len(self.normed),
            "rows": self.tokens.total,
        })
        for name, accs in (("inner", self.inner), ("normed", self.normed), ("stream", self.stream)):
            for i, acc in enumerate(accs):
                write_tensor(root / f"{name}_{i}.tensor", acc.sum)

    @classmethod
    def load(cls, directory: PathLike) -> "CalibrationStats":
        root = Path(directory)
        meta = read_json(root / "calibration.json")
        tokens = TokenFrequency(int(meta["vocab"]), np.asarray(meta["counts"], dtype=np.int64))

        def read_all(name: str, count: int) -> List[CorrelationAccumulator]:
            accs = []
            for i in range(count):
                s = read_tensor(root / f"{name}_{i}.tensor")
                acc = CorrelationAccumulator(s.shape[0])
                acc.sum = s
                acc.count = int(meta["rows"])
                accs.append(acc)
            return accs

        sites = int(meta["sites"])
        return cls(tokens, read_all("inner", sites - 1), read_all("normed", sites), read_all("stream", sites))


def collect_calibration(net: ToyNetwork, token_batches: Sequence[Sequence[int]]) -> CalibrationStats:
    """对每条序列前向，累加各旋转点的相关矩阵与词频"""
    all_ids: List[int] = []
    inner = [CorrelationAccumulator(b.w_out.shape[0]) for b in net.blocks]
    normed = [CorrelationAccumulator(net.dim) for _ in range(net.n_sites)]
    stream = [CorrelationAccumulator(net.dim) for _ in range(net.n_sites)]

    for ids in token_batches:
        acts = trace_activations(net, ids)
        all_ids.extend(int(i) for i in ids)
        for acc, z in zip(inner, acts.inner):
            acc.add(z)
        for acc, h in zip(normed, acts.normed):
            acc.add(h)
        for acc, x in zip(stream, acts.stream):
            acc.add(x)

    logger.info(f"📊 校准完成: {len(token_batches)} 条序列，{len(all_ids)} 个 token")
    return CalibrationStats(count_tokens(all_ids, net.vocab), inner, normed, stream)


# ==================== 参数计数 ====================

def network_param_count(net: ToyNetwork) -> int:
    """权重矩阵参数（不含偏置）加上跳连旋转的存储参数"""
    total = param_count(net.w_emb) + param_count(net.w_head)
    for block in net.blocks:
        total += param_count(block.w_in) + param_count(block.w_out)
        if block.skip_rotation is not None:
            total += block.skip_rotation.param_count()
    return total


# ==================== 生成与序列化 ====================

def random_network(
    vocab: int = 32,
    dim: int = 16,
    activations: Sequence[str] = ("attention", "relu"),
    hidden: Optional[int] = None,
    seed: int = 0,
    biases: bool = False,
) -> ToyNetwork:
    """随机稠密网络；注意力块的 W_in 为 [W_q | W_k | W_v]"""
    rng = np.random.default_rng(seed)
    hidden = hidden or 2 * dim
    scale = 1.0 / np.sqrt(dim)

    blocks = []
    for kind in activations:
        h_in, h_out = (3 * dim, dim) if kind == "attention" else (hidden, hidden)
        blocks.append(ToyBlock(
            w_in=rng.standard_normal((dim, h_in)) * scale,
            w_out=rng.standard_normal((h_out, dim)) / np.sqrt(h_out),
            activation=kind,
            b_in=rng.standard_normal(h_in) * 0.1 if biases else None,
            b_out=rng.standard_normal(dim) * 0.1 if biases else None,
        ))

    return ToyNetwork(
        w_emb=rng.standard_normal((vocab, dim)),
        blocks=blocks,
        w_head=rng.standard_normal((dim, vocab)) * scale,
    )


def random_token_batches(vocab: int, count: int, length: int, seed: int) -> List[List[int]]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, size=length).tolist() for _ in range(count)]


def random_rotations(count: int, n: int, seed: int) -> List[np.ndarray]:
    """QR 得到的随机正交矩阵（det 可正可负）"""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        out.append(q * np.sign(np.diag(r)))
    return out


def save_network(net: ToyNetwork, directory: PathLike) -> None:
    """manifest.json + 每个权重一个结构化目录"""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    save_structured(root / "w_emb", net.w_emb)
    save_structured(root / "w_head", net.w_head)

    blocks_meta: List[Dict[str, Any]] = []
    for i, block in enumerate(net.blocks):
        base = root / f"block_{i}"
        save_structured(base / "w_in", block.w_in)
        save_structured(base / "w_out", block.w_out)
        if block.b_in is not None:
            write_tensor(base / "b_in.tensor", block.b_in)
        if block.b_out is not None:
            write_tensor(base / "b_out.tensor", block.b_out)
        if block.skip_rotation is not None:
            block.skip_rotation.save(base / "skip")
        blocks_meta.append({
            "activation": block.activation,
            "skip": block.skip,
            "b_in": block.b_in is not None,
            "b_out": block.b_out is not None,
            "skip_rotation": block.skip_rotation is not None,
        })

    write_json(root / "manifest.json", {
        "format": "pkit-toynet-1",
        "vocab": net.vocab,
        "dim": net.dim,
        "blocks": blocks_meta,
    })


def load_network(directory: PathLike) -> ToyNetwork:
    root = Path(directory)
    meta = read_json(root / "manifest.json")
    blocks = []
    for i, info in enumerate(meta["blocks"]):
        base = root / f"block_{i}"
        blocks.append(ToyBlock(
            w_in=load_structured(base / "w_in"),
            w_out=load_structured(base / "w_out"),
            activation=info["activation"],
            b_in=read_tensor(base / "b_in.tensor") if info["b_in"] else None,
            b_out=read_tensor(base / "b_out.tensor") if info["b_out"] else None,
            skip=info["skip"],
            skip_rotation=OrthogonalFactor.load(base / "skip") if info["skip_rotation"] else None,
        ))
    return ToyNetwork(load_structured(root / "w_emb"), blocks, load_structured(root / "w_head"))
