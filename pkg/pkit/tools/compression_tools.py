"""
压缩工具集 - pkit

每个命令一个方法，返回可直接序列化的字典；命令行与 MCP 服务器都委托给这里
"""

import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import JobConfig, load_job_config, parse_job_config
from ..core.als import LayerProblem, als_frobenius, slicegpt_equivalence_check
from ..core.calib import accumulate_directory, read_token_stream
from ..core.structured import spec_to_dict
from ..core.tensorfile import PathLike, atomic_dir, atomic_write_bytes, read_json, write_json, write_tensor
from ..errors import ConfigError, ShapeMismatch
from ..toymodel.network import (
    ACTIVATIONS,
    CalibrationStats,
    collect_calibration,
    load_network,
    max_relative_deviation,
    random_network,
    random_rotations,
    random_token_batches,
    rotate_network,
    save_network,
)
from ..toymodel.pipeline import build_plan, compress_network
from ..toymodel.planted import planted_network, planted_sites
from ..toymodel.shapes import choose_gs_shape, choose_kron_shape, gs_param_fraction

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
SLICE_TOL = 1e-6
PLANTED_JOB = "planted_job.json"


def _parse_activations(text: str) -> Tuple[str, ...]:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    unknown = [k for k in kinds if k not in ACTIVATIONS]
    if unknown:
        raise ConfigError(f"未知激活函数 {unknown}，可选 {list(ACTIVATIONS)}")
    return kinds


def _strip_timing(obj: Any) -> Any:
    """去掉 wall_time 字段，使报告只依赖输入与种子"""
    if isinstance(obj, dict):
        out = {}
        for key, value in obj.items():
            if key != "wall_time":
                out[key] = _strip_timing(value)
        return out
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _chunks(ids: Sequence[int], length: int) -> List[List[int]]:
    if length < 1:
        raise ConfigError(f"序列长度必须为正: {length}")
    return [list(ids[i:i + length]) for i in range(0, len(ids), length)]


class CompressionTools:
    """压缩工具集合类"""

    def __init__(self, fast: bool = False):
        self.fast = fast

    def _job(self, config: Optional[PathLike], fast: bool) -> JobConfig:
        job = load_job_config(config) if config is not None else parse_job_config({})
        return job.fast() if (fast or self.fast) else job

    # ==================== 网络生成与校准 ====================

    def generate_network(
        self,
        out: PathLike,
        seed: int = 0,
        vocab: int = 32,
        dim: int = 16,
        activations: str = "attention,relu",
        biases: bool = False,
        planted: Optional[str] = None,
        ratio: float = 0.25,
    ) -> Dict[str, Any]:
        """
        生成随机玩具网络

        Args:
            out: 输出目录
            planted: kron / gs / blockzero 时生成埋点网络，并写出对应的 planted_job.json
            ratio: 埋点结构的保留比例
        """
        kinds = _parse_activations(activations)
        summary: Dict[str, Any] = {"seed": seed, "vocab": vocab, "dim": dim, "activations": list(kinds)}

        with atomic_dir(out) as staging:
            if planted is None:
                net = random_network(vocab=vocab, dim=dim, activations=kinds, seed=seed, biases=biases)
            else:
                net, plan, _ = planted_network(planted, ratio, vocab=vocab, dim=dim, activations=kinds, seed=seed)
                write_json(staging / PLANTED_JOB, plan.config.model_dump(mode="json", exclude_unset=True))
                summary.update({"planted": planted, "ratio": ratio, "planted_sites": planted_sites(plan)})
            save_network(net, staging)

        logger.info(f"✅ 网络已写出: {out}")
        return summary

    def calibrate(
        self,
        net: Optional[PathLike],
        out: PathLike,
        tokens: Optional[PathLike] = None,
        batches: int = 8,
        length: int = 16,
        seed: int = 0,
        activations_dir: Optional[PathLike] = None,
        dim: Optional[int] = None,
    ) -> Dict[str, Any]:
        """
        采集校准统计

        有 activations_dir 时直接累加目录中的激活批次，写出 S.tensor 与其平方根 R.tensor；
        否则对网络前向（tokens 文件或随机序列）并写出各旋转点的统计
        """
        if activations_dir is not None:
            if dim is None:
                raise ConfigError("累加激活批次需要指定维度 dim")
            acc = accumulate_directory(activations_dir, dim)
            with atomic_dir(out) as staging:
                write_tensor(staging / "S.tensor", acc.sum)
                write_tensor(staging / "R.tensor", acc.root())
            return {"rows": acc.count, "dim": dim}

        if net is None:
            raise ConfigError("需要 --net 或激活批次目录")
        network = load_network(net)
        if tokens is not None:
            sequences = _chunks(read_token_stream(tokens), length)
        else:
            sequences = random_token_batches(network.vocab, batches, length, seed)

        stats = collect_calibration(network, sequences)
        with atomic_dir(out) as staging:
            stats.save(staging)
        return {"sequences": len(sequences), "tokens": stats.tokens.total, "sites": network.n_sites}

    # ==================== 压缩 ====================

    def compress(
        self,
        net: PathLike,
        out: PathLike,
        config: Optional[PathLike] = None,
        calib: Optional[PathLike] = None,
        jobs: int = 1,
        fast: bool = False,
        seed: Optional[int] = None,
        batches: int = 8,
        length: int = 16,
    ) -> Dict[str, Any]:
        """
        整网压缩，写出压缩后的网络与 report.json

        未给出校准目录时按种子生成随机校准序列；前向误差在另一组随机序列上评估
        """
        if jobs < 1:
            raise ConfigError(f"jobs 必须为正: {jobs}")
        job = self._job(config, fast)
        seed = job.seed if seed is None else seed
        network = load_network(net)

        if calib is not None:
            stats = CalibrationStats.load(calib)
        else:
            stats = collect_calibration(network, random_token_batches(network.vocab, batches, length, seed))
        holdout = random_token_batches(network.vocab, batches, length, seed + 1)

        plan = build_plan(network, job)
        compressed, report = compress_network(network, plan, stats, jobs=jobs, holdout=holdout)

        clean = _strip_timing(report)
        with atomic_dir(out) as staging:
            save_network(compressed, staging)
            write_json(staging / "report.json", clean)
        logger.info(f"📄 报告已写出: {Path(out) / 'report.json'}（耗时 {report['wall_time']:.2f}s）")
        return clean

    # ==================== 实验 ====================

    def verify_invariance(
        self,
        net: PathLike,
        against: Optional[PathLike] = None,
        tol: float = DEFAULT_TOL,
        seed: int = 0,
        batches: int = 8,
        length: int = 16,
    ) -> Dict[str, Any]:
        """
        前向等价检查

        有 against 时比较两个网络；否则与随机旋转后的自身比较
        """
        reference = load_network(net)
        if against is not None:
            other = load_network(against)
            mode = "against"
        else:
            other = rotate_network(reference, random_rotations(reference.n_sites, reference.dim, seed))
            mode = "random-rotation"
        if other.vocab != reference.vocab:
            raise ShapeMismatch(f"词表大小不一致: {reference.vocab} 与 {other.vocab}")

        deviation = max_relative_deviation(
            reference, other, random_token_batches(reference.vocab, batches, length, seed)
        )
        passed = deviation <= tol
        log = logger.info if passed else logger.warning
        log(f"{'✅' if passed else '⚠️'} 最大相对前向偏差 {deviation:.3e}（阈值 {tol:.1e}）")
        return {"mode": mode, "max_deviation": deviation, "tol": tol, "passed": passed}

    def compare_rotated(
        self,
        kind: str = "kron",
        ratio: float = 0.25,
        seed: int = 0,
        iters: int = 50,
        out: Optional[PathLike] = None,
        dim: int = 16,
        vocab: int = 32,
    ) -> Dict[str, Any]:
        """
        埋点网络上比较直接投影（Q = I）与 Frobenius ALS 旋转后投影的相对误差

        out 给出时写出 CSV：layer, err_direct, err_rotated
        """
        network, plan, _ = planted_network(kind, ratio, vocab=vocab, dim=dim, seed=seed)
        sites = planted_sites(plan)
        if not sites:
            raise ConfigError(f"{kind} 在比例 {ratio} 下没有可行的分块形状")

        rows = []
        for index in sites:
            site = plan.sites[index]
            w_out = network.w_emb if index == 0 else network.blocks[index - 1].w_out
            w_in = network.w_head if index == len(network.blocks) else network.blocks[index].w_in
            problem = LayerProblem(
                w_out=w_out, w_in=w_in, spec_out=site.spec_out, spec_in=site.spec_in,
                dense_in_cols=site.dense_in_cols,
            )
            scale = float(np.linalg.norm(w_out) ** 2 + np.linalg.norm(w_in) ** 2)

            direct = als_frobenius(problem, 0).report.frobenius[-1]
            solution = als_frobenius(problem, iters)
            rows.append({
                "layer": index,
                "err_direct": float(np.sqrt(direct / scale)),
                "err_rotated": float(np.sqrt(solution.report.frobenius[-1] / scale)),
            })
            logger.info(
                f"📊 旋转点 {index}: 直接 {rows[-1]['err_direct']:.4e} → 旋转后 {rows[-1]['err_rotated']:.4e}"
            )

        if out is not None:
            buffer = io.StringIO()
            writer = csv.DictWriter(buffer, fieldnames=["layer", "err_direct", "err_rotated"], lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({
                    "layer": row["layer"],
                    "err_direct": format(row["err_direct"], ".17g"),
                    "err_rotated": format(row["err_rotated"], ".17g"),
                })
            atomic_write_bytes(out, buffer.getvalue().encode("utf-8"))

        improved = all(r["err_rotated"] < r["err_direct"] for r in rows)
        return {"class": kind, "ratio": ratio, "seed": seed, "rows": rows, "improved": improved}

    def slice_equivalence(
        self,
        d: int,
        seed: int = 0,
        n: int = 6,
        samples: int = 12,
        iters: int = 500,
    ) -> Dict[str, Any]:
        """
        λ_in = 0 的零块结构与 PCA 切片闭式解的比较

        X_out W_out + X_skip 的奇异值前 d 个与其余之间留出间隔，使交替迭代收敛到全局最优
        """
        if not 0 <= d <= n:
            raise ShapeMismatch(f"保留维度 d={d} 超出 [0, {n}]")
        rng = np.random.default_rng(seed)
        x_out = rng.standard_normal((samples, n))
        w_out = rng.standard_normal((n, n)) / np.sqrt(n)

        u, _ = np.linalg.qr(rng.standard_normal((samples, n)))
        v, _ = np.linalg.qr(rng.standard_normal((n, n)))
        spectrum = np.concatenate([rng.uniform(2.0, 3.0, d), rng.uniform(0.1, 0.5, n - d)])
        x_skip = (u * spectrum) @ v.T - x_out @ w_out

        result = slicegpt_equivalence_check(x_out, w_out, x_skip, d, n_iters=iters)
        summary = result.to_dict()
        summary.update({"d": d, "seed": seed, "n": n, "tol": SLICE_TOL, "passed": result.gap < SLICE_TOL})
        return summary

    # ==================== 报告与形状 ====================

    def report(self, path: PathLike) -> Dict[str, Any]:
        """读取 compress 写出的 report.json，汇总各旋转点"""
        target = Path(path)
        data = read_json(target / "report.json" if target.is_dir() else target)
        sites = [
            {
                "index": s["index"],
                "objective": s["objective"],
                "lambda_in": s["lambda_in"],
                "flags": s["flags"],
                "error": s["error"],
            }
            for s in data.get("sites", [])
        ]
        return {
            "sites": sites,
            "params_original": data.get("params_original"),
            "params_compressed": data.get("params_compressed"),
            "compression_ratio": data.get("compression_ratio"),
            "forward_error": data.get("forward_error"),
            "flags": data.get("flags", []),
            "errors": data.get("errors", []),
        }

    def gs_shape(
        self,
        n: int,
        m: int,
        c: float,
        kl: Optional[int] = None,
        kr: Optional[int] = None,
        embedding: bool = False,
    ) -> Dict[str, Any]:
        spec = choose_gs_shape(n, m, c, kl, kr, embedding)
        fraction = gs_param_fraction(spec)
        return {"spec": spec_to_dict(spec), "param_fraction": float(fraction), "exact": str(fraction)}

    def kron_shape(self, n: int, m: int, q: int, r: int, side: str = "left") -> Dict[str, Any]:
        spec, fraction = choose_kron_shape(n, m, q, r, side)
        return {"spec": spec_to_dict(spec), "param_fraction": float(fraction), "exact": str(fraction)}

