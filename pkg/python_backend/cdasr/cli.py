"""
Command-line entry point
Subcommands: degrade, train, adapt, eval, analyze-domains, sweep-weights.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .config.env import config
from .models.reports import ImageScore
from .models.run_config import SUPPORTED_SCALES, EncoderSpec, LossWeights, RunConfig
from .services.checkpoint import Checkpoint, load_checkpoint, make_meta, save_checkpoint
from .services.data_pipeline import (
    PairedDataset,
    build_dataset,
    build_paired_dataset,
    invert_intensity,
    load_images,
    write_degraded,
)
from .services.meta_adapter import adapt
from .services.metrics_analysis import (
    bicubic_images,
    evaluate,
    evaluate_bicubic,
    evaluate_images,
    export_embeddings_2d,
    summarize,
)
from .services.trainer import Trainer
from .utils.csv_log import write_csv
from .utils.errors import CDASRError, RejectedInputError, ScaleMismatchError, TrainingDivergedError
from .utils.logger import bind_run, configure_logging, get_logger

logger = get_logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

PROTOCOLS = {"y": "y_channel_cropped", "rgb": "rgb_full"}
SWEEP_PERCEPTUAL = (0.05, 0.1, 0.2)
SWEEP_SEMANTIC = (0.005, 0.01, 0.02)
SUMMARY_ROW = "mean"


class UsageError(RejectedInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# Configuration ------------------------------------------------------------

def _set(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    node = tree
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults), then every flag that was given."""
    base = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    tree = base.model_dump(mode="json")

    overrides = {
        "data.hr_dir": getattr(args, "hr_dir", None),
        "data.lr_dir": getattr(args, "lr_dir", None),
        "data.target_dir": getattr(args, "target_dir", None),
        "network.scale": getattr(args, "scale", None),
        "output_dir": getattr(args, "out", None),
        "adapt.episodes": getattr(args, "episodes", None),
        "adapt.shots": getattr(args, "shots", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.max_steps": getattr(args, "max_steps", None),
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["train.seed"] = seed
        overrides["adapt.seed"] = seed
    protocol = getattr(args, "protocol", None)
    if protocol is not None:
        overrides["protocol"] = PROTOCOLS[protocol]
    for key, value in overrides.items():
        if value is not None:
            _set(tree, key, str(value) if isinstance(value, Path) else value)

    backend = getattr(args, "encoder", None)
    if backend is not None and backend != base.encoder.backend:
        spec = EncoderSpec.stub() if backend == "stub" else EncoderSpec()
        tree["encoder"] = spec.model_dump(mode="json")
        tree["network"]["clip_dim"] = spec.embed_dim

    return RunConfig.model_validate(tree)


def _run_dir(cfg: RunConfig) -> Path:
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.resolved.json")
    bind_run(run_dir=str(run_dir), scale=cfg.network.scale)
    return run_dir


def _require(value: Optional[Path], flag: str) -> Path:
    if value is None:
        raise UsageError(f"{flag} is required")
    return Path(value)


def _dataset(cfg: RunConfig, hr_dir: Optional[Path] = None, scale: Optional[int] = None) -> PairedDataset:
    hr = _require(hr_dir or cfg.data.hr_dir, "--hr-dir")
    scale = scale or cfg.network.scale
    if cfg.data.lr_dir is not None and hr_dir is None:
        return build_paired_dataset(hr, cfg.data.lr_dir, scale, cfg.data.domain_tag)
    return build_dataset(hr, scale)


def _load_matching(path: Path, cfg: RunConfig, scale_given: bool) -> Checkpoint:
    ckpt = load_checkpoint(path)
    stored = ckpt.network_cfg.scale
    if scale_given and stored != cfg.network.scale:
        raise ScaleMismatchError(cfg.network.scale, stored, "checkpoint scale")
    return ckpt


def _encoder_of(ckpt: Checkpoint, cfg: RunConfig) -> EncoderSpec:
    stored = ckpt.meta.extra.get("encoder")
    return EncoderSpec.model_validate(stored) if stored else cfg.encoder


# Commands -----------------------------------------------------------------

def cmd_degrade(args: argparse.Namespace) -> int:
    hr_dir = Path(args.hr_dir)
    ds = build_dataset(hr_dir, args.scale)
    manifest = write_degraded(ds, args.out, hr_dir)
    print(f"wrote {len(ds)} LR images to {manifest.parent} ({ds.skip_count} skipped)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = _run_dir(cfg)
    ds = _dataset(cfg)

    resume = None
    if args.resume:
        resume = _load_matching(Path(args.resume), cfg, scale_given=True)

    trainer = Trainer(
        ds,
        cfg.train,
        cfg.network,
        cfg.encoder,
        log_path=run_dir / "train_log.csv",
        checkpoint_dir=run_dir / "checkpoints",
        extra_meta={"env": config.describe()},
        on_step=lambda row: print(
            f"step {row.step} lr {row.lr:.3g} total {row.total:.6f} "
            f"pixel {row.pixel:.6f} perceptual {row.perceptual:.6f} semantic {row.semantic:.6f}"
        ),
    )
    try:
        result = trainer.run(resume=resume)
    except TrainingDivergedError as exc:
        (run_dir / "diagnostic.json").write_text(json.dumps(exc.snapshot, indent=2, default=str), encoding="utf-8")
        raise
    print(f"final checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ckpt = _load_matching(Path(args.checkpoint), cfg, scale_given=args.scale is not None)
    net_cfg = ckpt.network_cfg
    enc = _encoder_of(ckpt, cfg)
    run_dir = _run_dir(cfg)

    target = _require(cfg.data.target_dir or cfg.data.hr_dir, "--target-dir")
    ds = build_dataset(target, net_cfg.scale)
    if args.invert:
        ds = invert_intensity(ds)

    result = adapt(ckpt.params, ds, cfg.adapt, net_cfg, enc)
    write_csv(run_dir / "episodes.csv", ["episode", "support_loss_pre", "support_loss_post", "query_loss", "mean_alpha"], result.episode_log)

    meta = make_meta(
        net_cfg,
        enc.encoder_id,
        cfg.adapt.seed,
        ckpt.meta.step,
        cfg.adapt.weights.model_dump(),
        kind="adapt",
        extra={"encoder": enc.model_dump(mode="json"), "adapt": cfg.adapt.model_dump(mode="json"), "source": str(args.checkpoint)},
    )
    path = save_checkpoint(result.params, ckpt.optimizer, meta, run_dir / "adapted", alphas=result.state.alphas if result.episode_log else None)
    print(f"adapted checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = _run_dir(cfg)
    protocol = cfg.protocol

    if args.checkpoint:
        ckpt = _load_matching(Path(args.checkpoint), cfg, scale_given=args.scale is not None)
        ds = _dataset(cfg, scale=ckpt.network_cfg.scale)
        rows = evaluate_images(ckpt.params, ckpt.network_cfg, ds, protocol, _encoder_of(ckpt, cfg))
    else:
        ds = _dataset(cfg)
        rows = bicubic_images(ds, protocol)
    report = summarize(rows, protocol)
    baseline = evaluate_bicubic(ds, protocol)

    # per-image rows, then the mean over them
    mean = ImageScore(image=SUMMARY_ROW, psnr=report.psnr_db, ssim=report.ssim)
    write_csv(run_dir / "metrics.csv", ["image", "psnr", "ssim"], [*rows, mean])
    logger.info(
        "eval_finished",
        domain=ds.domain_tag,
        protocol=protocol,
        n_images=report.n_images,
        psnr_db=report.psnr_db,
        ssim=report.ssim,
        bicubic_psnr_db=baseline.psnr_db,
        bicubic_ssim=baseline.ssim,
    )
    print(
        f"{ds.domain_tag}: PSNR {report.psnr_db:.4f} dB, SSIM {report.ssim:.4f} over {report.n_images} images "
        f"(bicubic {baseline.psnr_db:.4f} dB, {baseline.ssim:.4f})"
    )
    return EXIT_OK


def _parse_datasets(specs: Sequence[str]) -> List[Tuple[str, Path]]:
    out = []
    for spec in specs:
        tag, sep, directory = spec.partition("=")
        if not sep or not tag or not directory:
            raise UsageError(f"--dataset expects TAG=DIR, got '{spec}'")
        out.append((tag, Path(directory)))
    return out


def cmd_analyze(args: argparse.Namespace) -> int:
    datasets: List[Tuple[str, Any]] = list(_parse_datasets(args.dataset))
    if not datasets:
        raise UsageError("at least one --dataset TAG=DIR is required")
    cfg = resolve_config(args)
    run_dir = _run_dir(cfg)
    if args.with_inverted:
        tag, directory = datasets[0]
        images, _ = load_images(directory)
        datasets.append((f"{tag}_inverted", [img.with_pixels(1.0 - img.pixels) for img in images]))

    report = export_embeddings_2d(datasets, cfg.encoder, seed=cfg.train.seed, kernel=args.kernel)
    write_csv(run_dir / "coords.csv", ["x", "y", "tag"], [{"x": x, "y": y, "tag": t} for x, y, t in report.coords_2d or []])
    tags = list(report.mmd_matrix or {})
    write_csv(run_dir / "mmd_matrix.csv", ["tag", *tags], [{"tag": a, **report.mmd_matrix[a]} for a in tags])
    (run_dir / "domain_gap.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(f"MMD ({report.kernel}) between the first two sets: {report.mmd:.6f}; projection: {report.reduction}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = _run_dir(cfg)
    ds = _dataset(cfg)
    rows = []
    for perceptual in args.perceptual:
        for semantic in args.semantic:
            weights = LossWeights(pixel=1.0, perceptual=perceptual, semantic=semantic)
            train_cfg = cfg.train.model_copy(update={"weights": weights})
            result = Trainer(ds, train_cfg, cfg.network, cfg.encoder).run()
            report = evaluate(result.params, cfg.network, ds, cfg.protocol, cfg.encoder)
            rows.append({"lambda_perc": perceptual, "lambda_sem": semantic, "psnr": report.psnr_db, "ssim": report.ssim})
            logger.info("sweep_cell_done", **rows[-1])
    write_csv(run_dir / "sweep.csv", ["lambda_perc", "lambda_sem", "psnr", "ssim"], rows)
    print(f"sweep of {len(rows)} cells written to {run_dir / 'sweep.csv'}")
    return EXIT_OK


# Parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, scale_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="run configuration JSON")
    p.add_argument("--scale", type=int, choices=SUPPORTED_SCALES, required=scale_required)
    p.add_argument("--out", type=Path, help="output / run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder", choices=["pretrained", "stub"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdasr", description="Semantic-aligned super-resolution with few-shot domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="write bicubic LR counterparts of an HR directory")
    p.add_argument("--hr-dir", type=Path, required=True)
    p.add_argument("--scale", type=int, choices=SUPPORTED_SCALES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_degrade)

    p = sub.add_parser("train", help="source-domain training")
    _common(p)
    p.add_argument("--hr-dir", type=Path)
    p.add_argument("--lr-dir", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("adapt", help="few-shot adaptation of a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--target-dir", "--hr-dir", dest="target_dir", type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--invert", action="store_true", help="adapt to the intensity-inverted target set")
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser("eval", help="PSNR / SSIM of a checkpoint (or bicubic) on a paired set")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--hr-dir", type=Path)
    p.add_argument("--lr-dir", type=Path)
    p.add_argument("--protocol", choices=sorted(PROTOCOLS))
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze-domains", help="embedding MMD matrix and 2-D projection")
    _common(p)
    p.add_argument("--dataset", action="append", default=[], metavar="TAG=DIR")
    p.add_argument("--with-inverted", action="store_true", help="add an intensity-inverted copy of the first set")
    p.add_argument("--kernel", default="linear", help="linear | rbf | rbf(<sigma>)")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("sweep-weights", help="grid over perceptual / semantic loss weights")
    _common(p)
    p.add_argument("--hr-dir", type=Path)
    p.add_argument("--lr-dir", type=Path)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--perceptual", type=float, nargs="+", default=list(SWEEP_PERCEPTUAL))
    p.add_argument("--semantic", type=float, nargs="+", default=list(SWEEP_SEMANTIC))
    p.add_argument("--protocol", choices=sorted(PROTOCOLS))
    p.set_defaults(handler=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except (RejectedInputError, ValidationError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        logger.error("command_rejected", error=str(exc))
        return EXIT_USAGE
    except (CDASRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        logger.error("command_failed", error=str(exc), error_type=type(exc).__name__)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
