"""
张量文件读写 - pkit 核心组件

PKTENSR1 二进制格式（小端 f64、行主序）与 JSON 报告/清单的原子写入
"""

import json
import logging
import math
import os
import re
import shutil
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Union

import numpy as np

from ..errors import BadMagic, ShapeMismatch, TensorIoError, TruncatedPayload, UnsupportedDtype

logger = logging.getLogger(__name__)

MAGIC = b"PKTENSR1"
DTYPE_F64 = 0
_HEADER = struct.Struct("<8sBI")
_DIM = struct.Struct("<Q")

# json.dumps 把 \x00 转义为 \u0000
FLOAT_PLACEHOLDER = re.compile(r'"\\u0000F(\d+)\\u0000"')

PathLike = Union[str, os.PathLike]


def encode_tensor(array: np.ndarray) -> bytes:
    """把数组编码为 PKTENSR1 字节串"""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim not in (1, 2, 3):
        raise ShapeMismatch(f"张量维数必须为 1-3，实际为 {arr.ndim}")
    if arr.size == 0:
        raise ShapeMismatch("不能写入空张量")

    header = _HEADER.pack(MAGIC, DTYPE_F64, arr.ndim)
    dims = b"".join(_DIM.pack(d) for d in arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    return header + dims + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """解析 PKTENSR1 字节串"""
    if len(data) < _HEADER.size:
        raise TruncatedPayload(f"文件头不完整: {len(data)} 字节")

    magic, dtype, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"魔数错误: {magic!r}")
    if dtype != DTYPE_F64:
        raise UnsupportedDtype(f"不支持的 dtype 编码: {dtype}")
    if ndim not in (1, 2, 3):
        raise TruncatedPayload(f"非法维数: {ndim}")

    offset = _HEADER.size
    if len(data) < offset + ndim * _DIM.size:
        raise TruncatedPayload("维度字段不完整")
    dims = tuple(_DIM.unpack_from(data, offset + i * _DIM.size)[0] for i in range(ndim))
    offset += ndim * _DIM.size

    expected = 8 * math.prod(dims)
    if len(data) - offset != expected:
        raise TruncatedPayload(f"数据长度 {len(data) - offset} 与维度 {dims} 不符（应为 {expected}）")

    values = np.frombuffer(data, dtype="<f8", offset=offset, count=expected // 8)
    return values.astype(np.float64).reshape(dims)


def read_tensor(path: PathLike) -> np.ndarray:
    """读取张量文件"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise TensorIoError(f"读取 {path} 失败: {e}") from e
    return decode_tensor(data)


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    """原子写入张量文件"""
    atomic_write_bytes(path, encode_tensor(array))


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """先写临时文件再 rename，避免留下半个文件"""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as e:
        raise TensorIoError(f"写入 {path} 失败: {e}") from e


@contextmanager
def atomic_dir(path: PathLike) -> Iterator[Path]:
    """在临时目录中生成输出，成功后整体替换目标目录"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    if target.exists():
        shutil.rmtree(target)
    os.replace(staging, target)
    logger.debug(f"输出目录已提交: {target}")


# ==================== JSON ====================

def _float17(value: float) -> str:
    if not math.isfinite(value):
        return "null"
    text = format(value, ".17g")
    if not any(c in text for c in ".eE"):
        text += ".0"
    return text


def _freeze_floats(obj: Any, table: list) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, (float, np.floating)):
        table.append(_float17(float(obj)))
        return f"\x00F{len(table) - 1}\x00"
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _freeze_floats(obj.tolist(), table)
    if isinstance(obj, dict):
        return {str(k): _freeze_floats(v, table) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_freeze_floats(v, table) for v in obj]
    raise TypeError(f"无法序列化类型 {type(obj).__name__}")


def dumps_report(obj: Any) -> str:
    """确定性 JSON：键排序，浮点数固定 17 位有效数字"""
    table: list = []
    text = json.dumps(_freeze_floats(obj, table), ensure_ascii=False, indent=2, sort_keys=True)
    text = FLOAT_PLACEHOLDER.sub(lambda m: table[int(m.group(1))], text)
    return text + "\n"


def write_json(path: PathLike, obj: Any) -> None:
    """原子写入 JSON 报告"""
    atomic_write_bytes(path, dumps_report(obj).encode("utf-8"))


def read_json(path: PathLike) -> Any:
    """读取 UTF-8 JSON"""
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise TensorIoError(f"读取 {path} 失败: {e}") from e
