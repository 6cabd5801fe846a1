"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs, existing outputs without --force), 3 training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, describe, file_hash, load_checkpoint
from .config import RunConfig, registry
from .probe import FeatureTable, ProbeResult, features_for, probe_table
from .trainer import DivergenceError, load_model, reconstruct, train
from .volume import VolumeDataset, VolumeFormatError, generate_synthetic, preprocess_dataset, read_volume, write_volume

PAPER_RATIOS = (0.55, 0.65, 0.75, 0.85, 0.95)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _keys_epilog() -> str:
    lines = ["config keys (desk preset default; origin in brackets):"]
    lines += [f"  {k.describe()}" for k in registry()]
    return "\n".join(lines)


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="key=value config file with [section] headers")
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                       help="base values before --config and --set (default: desk)")
        p.add_argument("--precision", choices=("f32", "f64"), help="overrides train.precision")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitaepp", description="3D masked autoencoder pretraining and linear probing")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    fmt = argparse.RawDescriptionHelpFormatter
    epi = _keys_epilog()

    p = sub.add_parser("gen-synthetic", help="write a synthetic two-class dataset", formatter_class=fmt)
    _add_common(p, config=False)
    p.add_argument("--n", type=int, default=64, help="number of volumes (default 64)")
    p.add_argument("--side", type=int, default=32, help="cube side in voxels (default 32)")
    p.add_argument("--channels", type=int, default=4, help="modalities per volume (default 4)")
    p.add_argument("--margin", type=float, default=0.1, help="class-1 lesion contrast gain (default 0.1)")

    p = sub.add_parser("preprocess", help="crop around the lesion mask and rescale to [0, 255]",
                       formatter_class=fmt, epilog=epi)
    _add_common(p)
    p.add_argument("--input", type=Path, required=True, help="raw dataset directory")
    p.add_argument("--side", type=int, help="crop side (default: model.input_side)")

    p = sub.add_parser("train", help="self-supervised pretraining", formatter_class=fmt, epilog=epi)
    _add_common(p)
    p.add_argument("--dataset", type=Path, help="preprocessed dataset (overrides train.dataset)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--max-epochs", type=int, help="stop after this many completed epochs")

    p = sub.add_parser("reconstruct", help="mask one volume and reconstruct it", formatter_class=fmt)
    _add_common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", type=Path, help=".vvol file")
    src.add_argument("--dataset", type=Path, help="dataset directory (use with --index)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.75, help="hidden fraction p (paper: 0.75)")

    p = sub.add_parser("extract-features", help="frozen CLS features to features.csv", formatter_class=fmt)
    _add_common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("probe", help="linear SVM probe on a feature table", formatter_class=fmt, epilog=epi)
    _add_common(p)
    p.add_argument("--features", type=Path, required=True, help="features.csv")

    p = sub.add_parser("sweep-mask-ratio", help="train and probe across masking ratios", formatter_class=fmt,
                       epilog=epi)
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--ratios", type=str, default=",".join(map(str, PAPER_RATIOS)),
                   help="comma-separated ratios (paper grid: 0.55,0.65,0.75,0.85,0.95)")
    p.add_argument("--seeds", type=str, default="0", help="comma-separated seeds (default 0)")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON", formatter_class=fmt)
    p.add_argument("checkpoint", type=Path)
    return parser


# -- helpers --------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.paper() if getattr(args, "preset", "desk") == "paper" else RunConfig.desk()
    try:
        if getattr(args, "config", None):
            if not args.config.is_file():
                raise DataError(f"config file not found: {args.config}")
            cfg = RunConfig.load(args.config, base=cfg)
        cfg = cfg.with_set(getattr(args, "sets", []))
        extra = []
        if getattr(args, "seed", None) is not None:
            extra.append(f"train.seed={args.seed}")
        if getattr(args, "precision", None):
            extra.append(f"train.precision={args.precision}")
        if getattr(args, "out", None):
            extra.append(f"train.out={args.out}")
        if getattr(args, "dataset", None):
            extra.append(f"train.dataset={args.dataset}")
        return cfg.with_set(extra)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"config error: {exc}") from None


def _prepare_out(out: Path | None, force: bool, names: list[str]) -> Path:
    if out is None:
        raise UsageError("--out is required")
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise DataError(f"{out / existing[0]} already exists (use --force to overwrite)")
    for n in existing:
        target = out / n
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _open_dataset(path: Path) -> VolumeDataset:
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    return VolumeDataset.open(path)


def write_sweep_csv(path, rows: list[tuple[float, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "seed", "auc"])
        for r, s, a in rows:
            w.writerow([repr(float(r)), int(s), repr(float(a))])
        for r in sorted({r for r, _, _ in rows}):
            vals = [a for rr, _, a in rows if rr == r]
            w.writerow([repr(float(r)), "mean", repr(float(np.mean(vals)))])


def read_sweep_csv(path) -> tuple[list[tuple[float, int, float]], dict[float, float]]:
    runs, means = [], {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            if row["seed"] == "mean":
                means[float(row["ratio"])] = float(row["auc"])
            else:
                runs.append((float(row["ratio"]), int(row["seed"]), float(row["auc"])))
    return runs, means


def _parse_list(text: str, kind, name: str) -> list:
    try:
        vals = [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad {name} list: {text!r}") from None
    if not vals:
        raise UsageError(f"empty {name} list")
    return vals


# -- commands ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    out = _prepare_out(args.out, args.force, ["manifest.jsonl", "volumes", "masks"])
    try:
        ds = generate_synthetic(args.n, args.side, args.seed or 0, out, channels=args.channels, margin=args.margin)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(ds)} volumes to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    src = _open_dataset(args.input)
    out = _prepare_out(args.out, args.force, ["manifest.jsonl", "volumes", "masks"])
    ds = preprocess_dataset(src, out, args.side or cfg.model.input_side)
    print(f"wrote {len(ds)} preprocessed volumes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.train.dataset:
        raise UsageError("train needs --dataset or train.dataset")
    if not Path(cfg.train.dataset).exists():
        raise DataError(f"dataset not found: {cfg.train.dataset}")
    if args.resume is None:
        _prepare_out(args.out or (Path(cfg.train.out) if cfg.train.out else None), args.force,
                     ["trainlog.csv", "checkpoints", "config.resolved"])
    else:
        Path(cfg.train.out).mkdir(parents=True, exist_ok=True)
    res = train(cfg, resume=args.resume, max_epochs=args.max_epochs,
                on_step=lambda r: print(f"epoch {r.epoch} step {r.step} lr {r.lr:.3g} total {r.total:.5f}",
                                        file=sys.stderr) if r.step % 10 == 0 else None)
    print(f"trained {res.epoch} epochs ({res.step} steps); checkpoint {res.checkpoint}")
    return 0


def cmd_reconstruct(args) -> int:
    if not 0 < args.mask_ratio < 1:
        raise UsageError(f"--mask-ratio must lie in (0, 1), got {args.mask_ratio}")
    if args.volume:
        if not args.volume.is_file():
            raise DataError(f"volume not found: {args.volume}")
        vol = read_volume(args.volume)
    else:
        ds = _open_dataset(args.dataset)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} out of range for {len(ds)} volumes")
        vol = ds.volume(args.index)
    out = _prepare_out(args.out, args.force, ["masked.vvol", "reconstruction.vvol"])
    masked, rec = reconstruct(args.checkpoint, vol, args.mask_ratio, args.seed or 0)
    write_volume(out / "masked.vvol", masked)
    write_volume(out / "reconstruction.vvol", rec)
    x = vol.voxels.astype(np.float64)
    print(json.dumps({"mse_reconstruction": float(np.mean((rec.voxels - x) ** 2)),
                      "mse_masked_input": float(np.mean((masked.voxels - x) ** 2))}))
    return 0


def cmd_extract_features(args) -> int:
    ds = _open_dataset(args.dataset)
    out = _prepare_out(args.out, args.force, ["features.csv"])
    params, cfg = load_model(args.checkpoint)
    table = features_for(params, cfg.model, ds.volumes(), cfg.train.precision, file_hash(args.checkpoint))
    table.to_csv(out / "features.csv")
    print(f"wrote {len(table)} feature rows to {out / 'features.csv'}")
    return 0


def cmd_probe(args) -> int:
    cfg = resolve_config(args)
    if not args.features.is_file():
        raise DataError(f"feature table not found: {args.features}")
    out = _prepare_out(args.out, args.force, ["probe.json"])
    table = FeatureTable.from_csv(args.features)
    probe_cfg = cfg.probe if args.seed is None else replace(cfg.probe, seed=args.seed)
    res = probe_table(table, probe_cfg)
    res.save(out / "probe.json")
    print(f"mean AUC {res.mean_auc:.4f}  sensitivity {res.mean_sensitivity:.4f}  "
          f"specificity {res.mean_specificity:.4f}")
    return 0


def run_sweep(cfg: RunConfig, dataset, ratios, seeds, out: Path | None = None) -> list[tuple[float, int, float]]:
    """Train and probe once per (ratio, seed); returns (ratio, seed, mean AUC) rows."""
    ds = dataset if isinstance(dataset, VolumeDataset) else _open_dataset(Path(dataset))
    vols = ds.volumes()
    rows = []
    for r in ratios:
        if not 0 < r < 1:
            raise UsageError(f"mask ratio must lie in (0, 1), got {r}")
    for r in ratios:
        for s in seeds:
            sub = str(out / f"p{r:g}_s{s}") if out else ""
            run = cfg.with_set([f"model.mask_ratio={r}", f"train.seed={s}", f"train.out={sub}"])
            res = train(run, vols)
            table = features_for(res.params, run.model, vols, run.train.precision)
            rows.append((r, s, probe_table(table, replace(run.probe, seed=s)).mean_auc))
    return rows


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    ratios = _parse_list(args.ratios, float, "ratio")
    seeds = _parse_list(args.seeds, int, "seed")
    for r in ratios:
        if not 0 < r < 1:
            raise UsageError(f"mask ratio must lie in (0, 1), got {r}")
    out = _prepare_out(args.out, args.force, ["sweep.csv", "config.resolved"])
    (out / "config.resolved").write_text(cfg.to_text())
    rows = run_sweep(cfg, args.dataset, ratios, seeds, out / "runs")
    write_sweep_csv(out / "sweep.csv", rows)
    print(f"wrote {len(rows)} runs to {out / 'sweep.csv'}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    info = describe(ck)
    info["config"] = ck.config_text
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "extract-features": cmd_extract_features,
    "probe": cmd_probe,
    "sweep-mask-ratio": cmd_sweep,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_usage().strip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        for row in exc.rows:
            print(f"  {row}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, VolumeFormatError, CheckpointError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
