"""
命令行入口 - pkit

退出码：0 成功；1 用法或配置错误；2 数值失败（求解被标记、等价检查未通过）
"""

import importlib
import logging
import sys
from pathlib import Path
from types import ModuleType
from typing import Any, Dict, List, Optional

import typer

from .config import setup_logging
from .core.tensorfile import dumps_report
from .errors import ConfigError, PkitError
from .tools.compression_tools import DEFAULT_TOL, CompressionTools

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

app = typer.Typer(
    name="pkit",
    help="结构化矩阵压缩工具包",
    add_completion=False,
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


def _emit(result: Dict[str, Any], failed: bool = False) -> int:
    typer.echo(dumps_report(result), nl=False)
    return EXIT_NUMERIC if failed else EXIT_OK


@app.command("gen-net")
def gen_net(
    out: Path = typer.Option(..., "--out", help="输出目录"),
    seed: int = typer.Option(0, "--seed", min=0),
    vocab: int = typer.Option(32, "--vocab", min=1),
    dim: int = typer.Option(16, "--dim", min=1),
    activations: str = typer.Option("attention,relu", "--activations", help="逗号分隔的块类型"),
    biases: bool = typer.Option(False, "--biases"),
    planted: Optional[str] = typer.Option(None, "--planted", help="kron / gs / blockzero"),
    ratio: float = typer.Option(0.25, "--ratio"),
) -> int:
    """生成随机（或埋点）玩具网络"""
    return _emit(CompressionTools().generate_network(out, seed, vocab, dim, activations, biases, planted, ratio))


@app.command()
def calibrate(
    out: Path = typer.Option(..., "--out"),
    net: Optional[Path] = typer.Option(None, "--net"),
    tokens: Optional[Path] = typer.Option(None, "--tokens", help="每行一个 token id 的文本文件"),
    batches: int = typer.Option(8, "--batches", min=1),
    length: int = typer.Option(16, "--length", min=1),
    seed: int = typer.Option(0, "--seed", min=0),
    activations_dir: Optional[Path] = typer.Option(None, "--activations", help="激活批次张量目录"),
    dim: Optional[int] = typer.Option(None, "--dim", min=1),
) -> int:
    """采集校准统计"""
    return _emit(CompressionTools().calibrate(net, out, tokens, batches, length, seed, activations_dir, dim))


@app.command()
def compress(
    net: Path = typer.Option(..., "--net"),
    out: Path = typer.Option(..., "--out"),
    config: Optional[Path] = typer.Option(None, "--config"),
    calib: Optional[Path] = typer.Option(None, "--calib"),
    jobs: int = typer.Option(1, "--jobs", min=1),
    fast: bool = typer.Option(False, "--fast", help="缩小迭代预算"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0),
) -> int:
    """整网压缩"""
    report = CompressionTools().compress(net, out, config, calib, jobs, fast, seed)
    return _emit(report, failed=bool(report["flags"] or report["errors"]))


@app.command("verify-invariance")
def verify_invariance(
    net: Path = typer.Option(..., "--net"),
    against: Optional[Path] = typer.Option(None, "--against"),
    tol: float = typer.Option(DEFAULT_TOL, "--tol", min=0.0),
    seed: int = typer.Option(0, "--seed", min=0),
) -> int:
    """前向等价检查"""
    result = CompressionTools().verify_invariance(net, against, tol, seed)
    return _emit(result, failed=not result["passed"])


@app.command("compare-rotated")
def compare_rotated(
    kind: str = typer.Option("kron", "--class"),
    ratio: float = typer.Option(0.25, "--ratio"),
    seed: int = typer.Option(0, "--seed", min=0),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV 输出路径"),
    fast: bool = typer.Option(False, "--fast"),
) -> int:
    """埋点网络上直接投影与旋转后投影的误差对比"""
    iters = 10 if fast else 50
    return _emit(CompressionTools().compare_rotated(kind, ratio, seed, iters, out))


@app.command("slice-equiv")
def slice_equiv(
    d: int = typer.Option(..., "--d", min=0),
    seed: int = typer.Option(0, "--seed", min=0),
) -> int:
    """零块结构与 PCA 切片闭式解的等价检查"""
    result = CompressionTools().slice_equivalence(d, seed)
    return _emit(result, failed=not result["passed"])


@app.command()
def report(path: Path = typer.Argument(..., help="report.json 或压缩输出目录")) -> int:
    """汇总压缩报告"""
    result = CompressionTools().report(path)
    return _emit(result, failed=bool(result["flags"] or result["errors"]))


@app.command("gs-shape")
def gs_shape(
    n: int = typer.Option(..., "--n", min=1),
    m: int = typer.Option(..., "--m", min=1),
    c: float = typer.Option(..., "--c"),
    kl: Optional[int] = typer.Option(None, "--kl", min=1),
    kr: Optional[int] = typer.Option(None, "--kr", min=1),
    embedding: bool = typer.Option(False, "--embedding"),
) -> int:
    """按目标参数占比选择 GS 分块"""
    return _emit(CompressionTools().gs_shape(n, m, c, kl, kr, embedding))


@app.command("kron-shape")
def kron_shape(
    n: int = typer.Option(..., "--n", min=1),
    m: int = typer.Option(..., "--m", min=1),
    q: int = typer.Option(..., "--q", min=1),
    r: int = typer.Option(..., "--r", min=1),
    side: str = typer.Option("left", "--side"),
) -> int:
    """Kronecker 分块及其参数占比"""
    return _emit(CompressionTools().kron_shape(n, m, q, r, side))


def click_exceptions(command: Any) -> ModuleType:
    """构建命令所用 click 的异常模块（独立安装的 click 或 typer 内置的副本）"""
    for klass in type(command).__mro__:
        package = klass.__module__.rpartition(".")[0]
        if package and package != "typer":
            return importlib.import_module(f"{package}.exceptions")
    return importlib.import_module("click.exceptions")


def run(argv: Optional[List[str]] = None) -> int:
    """执行一条命令并返回退出码"""
    setup_logging()
    args = list(sys.argv[1:] if argv is None else argv)
    command = typer.main.get_command(app)
    errors = click_exceptions(command)
    try:
        result = command.main(args=args, prog_name="pkit", standalone_mode=False)
    except errors.Exit as e:
        return e.exit_code
    except (errors.UsageError, errors.Abort) as e:
        typer.echo(f"用法错误: {e}", err=True)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        typer.echo(f"配置错误: {e}", err=True)
        return EXIT_USAGE
    except PkitError as e:
        logger.error(f"❌ 执行失败: {e}")
        typer.echo(f"执行失败: {e}", err=True)
        return EXIT_NUMERIC
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
