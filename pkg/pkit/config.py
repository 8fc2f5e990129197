"""
配置与日志 - pkit

JobConfig（pydantic v2，拒绝未知字段）、求解器参数与 PKIT_LOG 日志初始化
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_logging_ready = False


def setup_logging(level: Optional[str] = None) -> int:
    """按 PKIT_LOG 环境变量配置日志，重复调用只调整级别"""
    global _logging_ready
    name = (level or os.environ.get("PKIT_LOG", "info")).strip().lower()
    resolved = LOG_LEVELS.get(name)

    if not _logging_ready:
        logging.basicConfig(
            level=resolved or logging.INFO,
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        )
        _logging_ready = True
    logging.getLogger().setLevel(resolved or logging.INFO)

    if resolved is None:
        logger.warning(f"⚠️ 未知日志级别 PKIT_LOG={name}，使用 info")
        return logging.INFO
    return resolved


class SolverConfig(BaseModel):
    """CG 线搜索、迭代最小二乘与伪逆阈值"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    armijo_c: float = Field(1e-4, gt=0, lt=1)
    shrink: float = Field(0.5, gt=0, lt=1)
    max_backtracks: int = Field(60, ge=1)
    gtol: float = Field(1e-10, ge=0)
    lsqr_iters: int = Field(200, ge=1)
    lsqr_tol: float = Field(1e-12, ge=0)
    pinv_rtol: float = Field(1e-10, ge=0)


class StructureConfig(BaseModel):
    """单个角色（in/out/embedding/head）的结构类及其参数"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["kron", "gs", "blockzero", "none"] = "none"
    # kron
    r: Optional[int] = Field(None, ge=1)
    q: Optional[int] = Field(None, ge=1)
    # gs
    kl: Optional[int] = Field(None, ge=1)
    kr: Optional[int] = Field(None, ge=1)
    bl1: Optional[int] = Field(None, ge=1)
    bl2: Optional[int] = Field(None, ge=1)
    br1: Optional[int] = Field(None, ge=1)
    br2: Optional[int] = Field(None, ge=1)
    permutation: Literal["stride", "identity"] = "stride"
    # 按保留比例自动选形状（kron/gs）
    keep_fraction: Optional[float] = Field(None, gt=0, le=1)
    # blockzero
    d: Optional[int] = Field(None, ge=0)
    pattern: Literal["zero-cols", "zero-rows", "corner"] = "zero-cols"


Role = Literal["in", "out", "embedding", "head"]


class JobConfig(BaseModel):
    """一次压缩任务的完整配置"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    structure: Dict[Role, StructureConfig] = Field(default_factory=dict)
    frobenius_iters: int = Field(50, ge=0)
    weighted_iters: int = Field(1, ge=0)
    cg_iters: int = Field(500, ge=0)
    projection_iters: int = Field(10, ge=0)
    lambda_in: Literal["one", "balanced"] = "one"
    embedding_weighting: Literal["sqrtD1", "logD1", "none"] = "sqrtD1"
    compress_values: bool = False
    seed: int = Field(0, ge=0)
    solver: SolverConfig = Field(default_factory=SolverConfig)

    def structure_for(self, role: str) -> StructureConfig:
        return self.structure.get(role, StructureConfig())  # type: ignore[call-overload]

    def fast(self) -> "JobConfig":
        """CI 用的缩小预算版本"""
        return self.model_copy(update={
            "frobenius_iters": min(self.frobenius_iters, 10),
            "weighted_iters": min(self.weighted_iters, 1),
            "cg_iters": min(self.cg_iters, 50),
            "projection_iters": min(self.projection_iters, 3),
        })


def parse_job_config(data: Union[dict, str]) -> JobConfig:
    """从字典或 JSON 文本构建 JobConfig，校验失败转为 ConfigError"""
    try:
        if isinstance(data, str):
            return JobConfig.model_validate_json(data)
        return JobConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置非法: {e}") from e


def load_job_config(path: Union[str, os.PathLike]) -> JobConfig:
    """读取 UTF-8 JSON 配置文件"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"无法读取配置 {path}: {e}") from e
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置不是合法 JSON: {e}") from e
    config = parse_job_config(text)
    logger.info(f"📄 已加载配置: {path}")
    return config
