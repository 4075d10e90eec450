"""Command-line entry point for pose-agnostic anomaly detection."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from hybrid_pad.core.analysis.sweep import DEFAULT_FRACTIONS
from hybrid_pad.core.config import RunConfig, add_dataclass_arguments, load_config, overrides_from_args
from hybrid_pad.core.errors import HybridPadError, StageError
from hybrid_pad.core.splatting.train_config import TrainConfig
from hybrid_pad.core.utils import setup_logging
from hybrid_pad.pipeline import Pipeline

logger = logging.getLogger(__name__)

LOG_FILE = Path("hybrid_pad.log")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run config (JSON or key = value text)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Random seed")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Worker threads (default: all cores)")
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Single-threaded torch kernels and deterministic algorithms",
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrid-pad", description="Pose-agnostic anomaly detection with SfM localization and Gaussian splatting"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Build the sparse model and train the Gaussian cloud for one scene")
    p.add_argument("--scene", type=Path, help="Scene directory with a camera manifest")
    p.add_argument("--out", type=Path, help="Model bundle directory to write")
    _common(p)
    add_dataclass_arguments(p, TrainConfig, "train")

    p = sub.add_parser("infer", help="Localize, render and score every query")
    p.add_argument("--model", type=Path, help="Model bundle directory")
    p.add_argument("--queries", type=Path, help="Directory with queries.json or a test/ tree")
    p.add_argument("--out", type=Path, help="Output directory for maps and reports")
    _common(p)

    p = sub.add_parser("eval", help="Image AUROC, pixel AUROC and AUPRO of inference outputs")
    p.add_argument("--pred", type=Path, nargs="+", help="Inference output directories (one per object)")
    p.add_argument("--gt", type=Path, nargs="+", help="Ground-truth scene directories, same order as --pred")
    p.add_argument("--out", type=Path, help="Report directory (default: first --pred)")
    p.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=argparse.SUPPRESS, help="AUPRO FPR limit")
    _common(p)

    p = sub.add_parser("bench", help="Per-stage inference timing")
    p.add_argument("--model", type=Path, help="Model bundle directory")
    p.add_argument("--queries", type=Path, help="Query directory")
    p.add_argument("--reps", type=int, default=10, help="Timed repetitions after one warm-up query")
    p.add_argument("--out", type=Path, help="Report directory (default: the model directory)")
    _common(p)

    p = sub.add_parser("synth", help="Generate a synthetic scene directory")
    p.add_argument("--out", type=Path, help="Scene directory to write")
    _common(p)

    p = sub.add_parser("sweep", help="Sparse-view sweep: subsample, train, infer and evaluate per fraction and seed")
    p.add_argument("--scene", type=Path, help="Scene directory")
    p.add_argument("--out", type=Path, help="Sweep output directory")
    p.add_argument("--fractions", type=float, nargs="+", default=list(DEFAULT_FRACTIONS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    _common(p)
    add_dataclass_arguments(p, TrainConfig, "train")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    return build_parser().parse_args(argv)


def _overrides(args: argparse.Namespace) -> dict:
    overrides = overrides_from_args(args)
    for key in ("seed", "threads", "deterministic", "fpr_limit"):
        if key in vars(args):
            overrides[key] = getattr(args, key)
    return overrides


def _path(value: Optional[Path], cfg: RunConfig, key: str, must_exist: bool = True) -> Path:
    """CLI flag first, then `paths.<key>` from the config file."""
    path = value if value is not None else cfg.paths.get(key)
    if path is None:
        raise ValueError(f"Missing required path '--{key}' (or paths.{key} in the config)")
    if must_exist and not Path(path).exists():
        raise FileNotFoundError(f"{key} path does not exist: {path}")
    return Path(path)


def _paths(values: Optional[List[Path]], cfg: RunConfig, key: str) -> List[Path]:
    if values:
        return [_path(v, cfg, key) for v in values]
    return [_path(None, cfg, key)]


def run(args: argparse.Namespace, cfg: RunConfig) -> None:
    with Pipeline(cfg) as pipeline:
        if args.command == "train":
            pipeline.cmd_train(_path(args.scene, cfg, "scene"), _path(args.out, cfg, "out", must_exist=False))
        elif args.command == "infer":
            pipeline.cmd_infer(
                _path(args.model, cfg, "model"),
                _path(args.queries, cfg, "queries"),
                _path(args.out, cfg, "out", must_exist=False),
            )
        elif args.command == "eval":
            out = args.out if args.out is not None else cfg.paths.get("out")
            pipeline.cmd_eval(_paths(args.pred, cfg, "pred"), _paths(args.gt, cfg, "gt"), out)
        elif args.command == "bench":
            out = args.out if args.out is not None else cfg.paths.get("out")
            pipeline.cmd_bench(_path(args.model, cfg, "model"), _path(args.queries, cfg, "queries"), args.reps, out)
        elif args.command == "synth":
            pipeline.cmd_synth(_path(args.out, cfg, "out", must_exist=False))
        elif args.command == "sweep":
            pipeline.cmd_sweep(
                _path(args.scene, cfg, "scene"),
                _path(args.out, cfg, "out", must_exist=False),
                args.fractions,
                args.seeds,
            )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    args = parse_args(argv)
    setup_logging(args.debug, LOG_FILE)
    logger.info(f"Starting hybrid-pad {args.command}")
    logger.info(f"Log file: {LOG_FILE.absolute()}")

    try:
        cfg = load_config(args.config, _overrides(args))
        run(args, cfg)
        return 0
    except StageError as e:
        logger.error(f"Failed in stage '{e.stage}': {e.cause}")
        return 1
    except (HybridPadError, ValueError, FileNotFoundError) as e:
        logger.error(str(e))
        return 1
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
