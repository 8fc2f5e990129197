"""
校准统计 - pkit 核心组件

分批累加相关矩阵 XᵀX、对称半正定平方根、词频直方图与嵌入层对角加权
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
import scipy.linalg

from ..errors import ConfigError, IdOutOfRange, NonFinite, NotPsd, ShapeMismatch, UnsupportedStructure
from .tensorfile import PathLike, read_tensor

logger = logging.getLogger(__name__)

PSD_CLAMP = 1e-10


class CorrelationAccumulator:
    """S = Σ X_iᵀX_i 的增量累加器（非线程安全，并行时每个 worker 一个再合并）"""

    def __init__(self, n: int):
        if n < 0:
            raise ShapeMismatch(f"维度不能为负: {n}")
        self.n = n
        self.sum = np.zeros((n, n))
        self.count = 0

    def add(self, batch: np.ndarray) -> "CorrelationAccumulator":
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.ndim != 2 or batch.shape[1] != self.n:
            raise ShapeMismatch(f"批次宽度 {batch.shape} 与维度 {self.n} 不符")
        if not np.isfinite(batch).all():
            raise NonFinite("校准批次包含 NaN/Inf")
        gram = batch.T @ batch
        # 保持精确对称
        self.sum += 0.5 * (gram + gram.T)
        self.count += batch.shape[0]
        return self

    def merge(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        if other.n != self.n:
            raise ShapeMismatch(f"无法合并维度 {self.n} 与 {other.n} 的累加器")
        self.sum += other.sum
        self.count += other.count
        return self

    @classmethod
    def merged(cls, parts: Sequence["CorrelationAccumulator"], n: int) -> "CorrelationAccumulator":
        """按 worker 序号确定性地合并"""
        total = cls(n)
        for part in parts:
            total.merge(part)
        return total

    def root(self) -> np.ndarray:
        return correlation_root(self.sum)


def accumulate(acc: CorrelationAccumulator, batch: np.ndarray) -> CorrelationAccumulator:
    return acc.add(batch)


def correlation_root(s: np.ndarray) -> np.ndarray:
    """对称半正定平方根 R，R·R = S；微小负特征值截断为 0"""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatch(f"相关矩阵必须为方阵，实际 {s.shape}")
    if s.size == 0:
        return s.copy()

    sym = 0.5 * (s + s.T)
    values, vectors = scipy.linalg.eigh(sym)
    scale = float(np.linalg.norm(sym, 2))
    if values.min() < -PSD_CLAMP * scale:
        raise NotPsd(f"相关矩阵最小特征值 {values.min():.3e} 显著为负")
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    return 0.5 * (root + root.T)


# ==================== 词频 ====================

@dataclass(frozen=True)
class TokenFrequency:
    vocab: int
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def count_tokens(ids: Iterable[int], vocab: int) -> TokenFrequency:
    """精确直方图；等于 one-hot 输入的相关矩阵对角线"""
    arr = np.fromiter((int(i) for i in ids), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        bad = arr[(arr < 0) | (arr >= vocab)][0]
        raise IdOutOfRange(f"token id {bad} 超出词表大小 {vocab}")
    return TokenFrequency(vocab, np.bincount(arr, minlength=vocab).astype(np.int64))


EMBEDDING_WEIGHTINGS = ("sqrtD1", "logD1", "none")


def embedding_weight(counts: np.ndarray, mode: str) -> np.ndarray:
    """嵌入层/输出头的对角权重：√(D+1)、log(D+1) 或全 1"""
    d = np.asarray(counts, dtype=np.float64)
    if mode == "sqrtD1":
        return np.sqrt(d + 1.0)
    if mode == "logD1":
        return np.log(d + 1.0)
    if mode == "none":
        return np.ones_like(d)
    raise UnsupportedStructure(f"未知的嵌入加权方式: {mode}")


# ==================== 文件输入 ====================

def accumulate_directory(directory: PathLike, n: int) -> CorrelationAccumulator:
    """按文件名顺序累加目录下所有 .tensor 批次"""
    acc = CorrelationAccumulator(n)
    files = sorted(Path(directory).glob("*.tensor"))
    for path in files:
        acc.add(read_tensor(path))
    logger.info(f"📊 已累加 {len(files)} 个批次，共 {acc.count} 行")
    return acc


def read_token_stream(path: PathLike) -> List[int]:
    """每行一个整数 id，空行忽略"""
    ids = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text:
            continue
        try:
            ids.append(int(text))
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno} 不是整数 id: {text!r}") from e
    return ids
