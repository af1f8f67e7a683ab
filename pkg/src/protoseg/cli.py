"""Command-line front end.

Subcommands: synth, convert, train, ablate, eval, report. Exit codes are a
stable contract: 0 success, 1 user error (bad flags, bad files, bad config),
2 internal error. The PROTOSEG_DEVICE environment variable selects the
compute device when neither the config file nor --device does.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, parse_config_file, write_resolved
from .data import (
    DatasetError,
    DatasetManifest,
    SynthSpec,
    ingest_case,
    preprocess_slice,
    synthesize_dataset,
    write_case,
)
from .metrics import format_summary_table, write_records
from .trainer import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    LOG_NAME,
    VAL_LOG_NAME,
    TrainConfig,
    evaluate_checkpoint,
    fit,
    load_checkpoint,
    make_predictor,
    model_from_checkpoint,
)

log = logging.getLogger(__name__)

DEVICE_ENV = "PROTOSEG_DEVICE"
RUN_META_NAME = "run.json"
ABLATION_CSV = "ablation_summary.csv"
ABLATION_TABLE = "ablation_summary.txt"

# the six-configuration matrix: name, spcc, cpcc, w1, w2
ABLATION_ROWS = [
    ("seg", False, False, False, False),
    ("seg+spcc", True, False, False, False),
    ("seg+cpcc(w1,w2)", False, True, True, True),
    ("seg+spcc+cpcc", True, True, False, False),
    ("seg+spcc+cpcc(w1)", True, True, True, False),
    ("seg+spcc+cpcc(w1,w2)", True, True, True, True),
]


class UserError(Exception):
    """Bad input from the operator: reported, exit code 1."""


class Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (user error) instead of 2 on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--t-max", type=int, default=None, dest="t_max", help="total iterations")
    p.add_argument("--base-lr", type=float, default=None, dest="base_lr")
    p.add_argument("--image-size", type=int, default=None, dest="image_size")
    p.add_argument("--base-width", type=int, default=None, dest="base_width")
    p.add_argument("--labeled-per-batch", type=int, default=None, dest="labeled_per_batch")
    p.add_argument("--unlabeled-per-batch", type=int, default=None, dest="unlabeled_per_batch")
    p.add_argument(
        "--labeled-scans", type=int, default=None, dest="labeled_scans",
        help="override the manifest's labeled subset with a seeded draw of this many train cases",
    )
    p.add_argument("--eval-every", type=int, default=None, dest="eval_every")
    p.add_argument("--feature-tap", choices=("final", "penultimate"), default=None, dest="feature_tap")
    p.add_argument("--free-rotation", action="store_true", default=None, dest="free_rotation")
    p.add_argument("--no-spcc", action="store_false", default=None, dest="spcc",
                   help="disable the self-aware consistency branch")
    p.add_argument("--no-cpcc", action="store_false", default=None, dest="cpcc",
                   help="disable the cross-sample consistency branch")
    p.add_argument("--no-w1", action="store_false", default=None, dest="w1",
                   help="drop the stability weight from the cross-sample loss")
    p.add_argument("--no-w2", action="store_false", default=None, dest="w2",
                   help="drop the confidence weight from the cross-sample loss")
    p.add_argument("--abs-consistency", action="store_false", default=None, dest="squared_consistency",
                   help="use absolute instead of squared consistency gaps")
    p.add_argument("--device", default=None, help=f"compute device (default: ${DEVICE_ENV} or cpu)")


def build_parser() -> Parser:
    parser = Parser(prog="protoseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"protoseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset in the canonical format")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--labeled-ratio", type=float, default=0.1, dest="labeled_ratio")
    p.add_argument("--size", type=int, default=64, help="in-plane H0=W0 of generated volumes")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--slices-min", type=int, default=8, dest="slices_min")
    p.add_argument("--slices-max", type=int, default=12, dest="slices_max")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert a volume file into a canonical case directory")
    p.add_argument("--input", type=Path, required=True, help=".npy, .npz or .nii/.nii.gz volume")
    p.add_argument("--label", type=Path, default=None, help="matching label volume (same format)")
    p.add_argument("--out", type=Path, required=True, help="dataset root to place the case under")
    p.add_argument("--case-id", default=None, help="default: input file stem")
    p.add_argument("--spacing", type=float, nargs=3, default=None, metavar=("S", "H", "W"),
                   help="voxel spacing in mm (default: file header or 1 1 1)")
    p.add_argument("--class-count", type=int, default=None, dest="class_count",
                   help="default: inferred from the label, required when no label is given")
    p.add_argument("--split", choices=("train", "val", "test"), default=None,
                   help="also register the case in the dataset manifest under this split")
    p.add_argument("--labeled", action="store_true", help="mark the registered case as labeled")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", type=Path, required=True, help="dataset directory (contains manifest.json)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--stop-iteration", type=int, default=None, dest="stop_iteration",
                   help="halt after this many iterations (schedules still use t_max)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the six-row consistency/weighting ablation matrix")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="parent directory for the six run dirs")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a trained run on a labeled split")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, default=None, help="dataset directory (default: recorded in run.json)")
    p.add_argument("--split", default="test", help="split to score (default: test)")
    p.add_argument("--checkpoint", default="best", help="best, last, or a checkpoint path")
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="evaluate run(s) and render tables + figures")
    p.add_argument("--run", type=Path, required=True, nargs="+", help="one or more run directories")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", default="best")
    p.add_argument("--out", type=Path, default=None, help="report directory (default: <first run>/report)")
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_report)

    return parser


# ---------------------------------------------------------------- helpers


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Precedence: defaults < $PROTOSEG_DEVICE < config file < flags."""
    merged: dict[str, object] = {}
    env_device = os.environ.get(DEVICE_ENV)
    if env_device:
        merged["device"] = env_device
    if args.config is not None:
        merged.update(parse_config_file(args.config))
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for name in field_names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as err:
        raise UserError(f"invalid configuration: {err}") from err


def _load_manifest(data_dir: Path) -> DatasetManifest:
    return DatasetManifest.load(data_dir)


def _check_class_count(config: TrainConfig, manifest: DatasetManifest, explicit: bool) -> TrainConfig:
    if config.class_count == manifest.class_count:
        return config
    if explicit:
        raise UserError(
            f"class_count={config.class_count} conflicts with the dataset's {manifest.class_count}"
        )
    return dataclasses.replace(config, class_count=manifest.class_count)


def _class_count_was_explicit(args: argparse.Namespace) -> bool:
    if getattr(args, "class_count", None) is not None:
        return True
    if args.config is not None:
        return "class_count" in parse_config_file(args.config)
    return False


def _write_run_meta(run_dir: Path, data_dir: Path, command: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "dataset": str(Path(data_dir).resolve()),
        "argv": sys.argv[1:],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / RUN_META_NAME).write_text(json.dumps(meta, indent=2) + "\n")


def _dataset_for_run(run_dir: Path, override: Path | None) -> Path:
    if override is not None:
        return override
    meta_path = run_dir / RUN_META_NAME
    if not meta_path.exists():
        raise UserError(f"{run_dir} has no {RUN_META_NAME}; pass --data explicitly")
    dataset = Path(json.loads(meta_path.read_text())["dataset"])
    if not dataset.exists():
        raise UserError(f"dataset recorded for {run_dir} no longer exists: {dataset}; pass --data")
    return dataset


def _pick_checkpoint(run_dir: Path, which: str) -> Path:
    if which == "best":
        path = run_dir / BEST_CHECKPOINT
        if not path.exists():  # no eval happened yet; fall back
            path = run_dir / LAST_CHECKPOINT
    elif which == "last":
        path = run_dir / LAST_CHECKPOINT
    else:
        path = Path(which)
    if not path.exists():
        raise UserError(f"checkpoint not found: {path}")
    return path


# ------------------------------------------------------------- subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        case_count=args.cases,
        labeled_ratio=args.labeled_ratio,
        image_size=args.size,
        slices_min=args.slices_min,
        slices_max=args.slices_max,
        class_count=args.classes,
        noise=args.noise,
        seed=args.seed,
    )
    try:
        manifest = synthesize_dataset(args.out, spec)
    except (DatasetError, ValueError) as err:
        raise UserError(str(err)) from err
    print(
        f"wrote {len(manifest.cases)} cases to {args.out} "
        f"(train {len(manifest.split['train'])} / val {len(manifest.split['val'])} "
        f"/ test {len(manifest.split['test'])}; labeled: {', '.join(manifest.labeled_case_ids)})"
    )
    return 0


def _load_volume_file(path: Path, spacing: tuple | None):
    """Returns (array, spacing_or_None). Supports .npy, .npz, .nii, .nii.gz."""
    suffixes = "".join(path.suffixes[-2:])
    if path.suffix == ".npy":
        return np.load(path), spacing
    if path.suffix == ".npz":
        payload = np.load(path)
        if "image" not in payload:
            raise UserError(f"{path}: .npz input needs an 'image' array")
        file_spacing = tuple(float(x) for x in payload["spacing"]) if "spacing" in payload else None
        return payload["image"], spacing or file_spacing
    if suffixes.endswith((".nii", ".nii.gz")):
        try:
            import nibabel as nib
        except ImportError as err:
            raise UserError(
                "NIfTI input needs the optional nibabel dependency: pip install 'protoseg[nifti]'"
            ) from err
        img = nib.load(str(path))
        arr = np.asanyarray(img.dataobj)
        if arr.ndim != 3:
            raise UserError(f"{path}: expected a 3D volume, got shape {arr.shape}")
        zooms = img.header.get_zooms()[:3]
        # slice along the last header axis: (X, Y, Z) -> (S=Z, H=Y, W=X)
        return np.ascontiguousarray(arr.transpose(2, 1, 0)), spacing or (zooms[2], zooms[1], zooms[0])
    raise UserError(f"unsupported volume format: {path} (use .npy, .npz, .nii or .nii.gz)")


def cmd_convert(args: argparse.Namespace) -> int:
    if not args.input.exists():
        raise UserError(f"input not found: {args.input}")
    spacing = tuple(args.spacing) if args.spacing else None
    voxels, spacing = _load_volume_file(args.input, spacing)
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise UserError(f"{args.input}: expected a 3D volume, got shape {voxels.shape}")
    label = None
    if args.label is not None:
        if not args.label.exists():
            raise UserError(f"label not found: {args.label}")
        label, _ = _load_volume_file(args.label, None)
        label = np.asarray(label)
        if not np.issubdtype(label.dtype, np.integer):
            if not np.allclose(label, np.round(label)):
                raise UserError(f"{args.label}: label volume has non-integer values")
            label = np.round(label)
        label = label.astype(np.uint8)
    class_count = args.class_count
    if class_count is None:
        if label is None:
            raise UserError("--class-count is required when no label volume is given")
        class_count = int(label.max()) + 1
    case_id = args.case_id or args.input.name.split(".")[0]
    spacing = spacing or (1.0, 1.0, 1.0)
    try:
        case_dir = write_case(args.out, case_id, voxels, tuple(spacing), class_count, label)
        volume = ingest_case(case_dir)  # round-trip validation
    except DatasetError as err:
        raise UserError(str(err)) from err
    if args.split is not None:
        _register_case(args.out, case_id, volume.voxels.shape, tuple(spacing), class_count,
                       label is not None, args.split, args.labeled)
    print(f"wrote case {case_id!r} ({voxels.shape[0]} slices) to {case_dir}")
    return 0


def _register_case(root: Path, case_id: str, shape, spacing_mm, class_count: int,
                   has_label: bool, split: str, labeled: bool) -> None:
    from .data import CaseInfo

    manifest_path = Path(root) / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(root)
        if manifest.class_count != class_count:
            raise UserError(
                f"case class_count={class_count} conflicts with manifest's {manifest.class_count}"
            )
    else:
        manifest = DatasetManifest(root=root, class_count=class_count, cases=[],
                                   split={"train": [], "val": [], "test": []}, labeled_case_ids=[])
    if any(c.case_id == case_id for c in manifest.cases):
        raise UserError(f"case {case_id!r} is already in the manifest")
    if labeled and split != "train":
        raise UserError("--labeled only applies to --split train")
    if labeled and not has_label:
        raise UserError("--labeled requires a label volume")
    manifest.cases.append(CaseInfo(case_id=case_id, shape=tuple(shape),
                                   spacing_mm=spacing_mm, has_label=has_label))
    manifest.split.setdefault(split, []).append(case_id)
    if labeled:
        manifest.labeled_case_ids.append(case_id)
    manifest.validate()
    manifest.save()


def _run_training(config: TrainConfig, manifest: DatasetManifest, run_dir: Path,
                  resume: Path | None = None, stop_iteration: int | None = None):
    write_resolved(config, run_dir)
    result = fit(config, manifest, run_dir, resume_from=resume, stop_iteration=stop_iteration)
    return result


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args)
    manifest = _load_manifest(args.data)
    config = _check_class_count(config, manifest, _class_count_was_explicit(args))
    _write_run_meta(args.out, args.data, "train")
    result = _run_training(config, manifest, args.out, args.resume, args.stop_iteration)
    best = f"{result.best_val_dsc:.2f}" if result.best_val_dsc is not None else "n/a"
    print(f"finished at iteration {result.final_iteration}; best val DSC {best}")
    print(f"run artifacts in {result.run_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base = _resolve_train_config(args)
    manifest = _load_manifest(args.data)
    base = _check_class_count(base, manifest, _class_count_was_explicit(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for index, (name, spcc, cpcc, w1, w2) in enumerate(ABLATION_ROWS, start=1):
        config = dataclasses.replace(base, spcc=spcc, cpcc=cpcc, w1=w1, w2=w2)
        safe = name.replace("+", "_").replace("(", "_").replace(")", "").replace(",", "")
        run_dir = out_dir / f"row{index}_{safe}"
        print(f"[{index}/{len(ABLATION_ROWS)}] {name} -> {run_dir}", flush=True)
        _write_run_meta(run_dir, args.data, "ablate")
        row = {"row": name, "spcc": spcc, "cpcc": cpcc, "w1": w1, "w2": w2,
               "val_dsc": "", "val_assd": "", "status": "ok", "run_dir": str(run_dir)}
        try:
            result = _run_training(config, manifest, run_dir)
            row["val_dsc"] = f"{result.best_val_dsc:.4f}" if result.best_val_dsc is not None else ""
            if result.best_val_assd is not None:
                row["val_assd"] = f"{result.best_val_assd:.4f}"
        except Exception as err:  # record and keep going; the table marks the failure
            failures += 1
            row["status"] = f"failed: {err}"
            log.exception("ablation row %r failed", name)
        rows.append(row)
    csv_path = out_dir / ABLATION_CSV
    _write_ablation_csv(rows, csv_path)
    table = format_ablation_table(rows)
    (out_dir / ABLATION_TABLE).write_text(table + "\n")
    print(table)
    ok_rows = [r for r in rows if r["status"] == "ok" and r["val_dsc"]]
    if ok_rows:
        from .plots import plot_ablation

        plot_ablation(ok_rows, out_dir / "ablation.png")
    print(f"summary written to {csv_path}")
    if failures:
        print(f"{failures} row(s) failed", file=sys.stderr)
        return 2
    return 0


def _write_ablation_csv(rows: list[dict], path: Path) -> None:
    import csv as _csv

    with path.open("w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_ablation_table(rows: list[dict]) -> str:
    def mark(row: dict, key: str) -> str:
        if key in ("w1", "w2") and not row["cpcc"]:
            return "-"
        return "x" if row[key] else " "

    header = f"{'configuration':<22} {'spcc':^4} {'cpcc':^4} {'w1':^3} {'w2':^3} {'DSC':>7} {'ASSD':>7}  status"
    lines = [header, "-" * len(header)]
    for row in rows:
        dsc = f"{float(row['val_dsc']):7.2f}" if row["val_dsc"] else f"{'n/a':>7}"
        assd = f"{float(row['val_assd']):7.2f}" if row["val_assd"] else f"{'n/a':>7}"
        lines.append(
            f"{row['row']:<22} {mark(row, 'spcc'):^4} {mark(row, 'cpcc'):^4} "
            f"{mark(row, 'w1'):^3} {mark(row, 'w2'):^3} {dsc} {assd}  {row['status']}"
        )
    return "\n".join(lines)


def cmd_eval(args: argparse.Namespace) -> int:
    device = args.device or os.environ.get(DEVICE_ENV) or "cpu"
    checkpoint = _pick_checkpoint(args.run, args.checkpoint)
    data_dir = _dataset_for_run(args.run, args.data)
    manifest = _load_manifest(data_dir)
    results, summary, _ = evaluate_checkpoint(checkpoint, manifest, args.split, device)
    print(f"checkpoint: {checkpoint}")
    print(format_summary_table(summary, manifest.class_names))
    records = write_records(results, args.run / f"eval_{args.split}.csv")
    print(f"per-case records written to {records}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from . import plots

    device = args.device or os.environ.get(DEVICE_ENV) or "cpu"
    out_dir = args.out or (args.run[0] / "report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = []
    for run_dir in args.run:
        checkpoint = _pick_checkpoint(run_dir, args.checkpoint)
        data_dir = _dataset_for_run(run_dir, args.data)
        manifest = _load_manifest(data_dir)
        results, summary, config = evaluate_checkpoint(checkpoint, manifest, args.split, device)
        tag = run_dir.name
        print(f"== {tag} ({checkpoint.name}, split {args.split}) ==")
        print(format_summary_table(summary, manifest.class_names))
        write_records(results, out_dir / f"{tag}_{args.split}.csv")
        log_path = run_dir / LOG_NAME
        if log_path.exists():
            plots.plot_training_curves(log_path, out_dir / f"{tag}_losses.png")
        val_path = run_dir / VAL_LOG_NAME
        if val_path.exists():
            try:
                plots.plot_val_history(val_path, out_dir / f"{tag}_val.png")
            except ValueError:
                pass  # run ended before the first validation pass
        plots.plot_schedules(config.t_max, out_dir / f"{tag}_schedules.png", config.base_lr, config.poly_power)
        _render_overlays(plots, checkpoint, manifest, args.split, config, device,
                         out_dir / f"{tag}_overlay.png")
        labeled = config.labeled_scans or len(manifest.labeled_case_ids)
        sweep.append((labeled, summary.avg_dsc, tag))
    if len(sweep) > 1:
        _plot_ratio_sweep(sweep, out_dir / "ratio_sweep.png")
    print(f"report written to {out_dir}")
    return 0


def _render_overlays(plots_mod, checkpoint: Path, manifest: DatasetManifest, split: str,
                     config, device: str, out_path: Path) -> None:
    case_ids = manifest.split.get(split) or []
    if not case_ids:
        return
    volume = ingest_case(manifest.root / sorted(case_ids)[0])
    model = model_from_checkpoint(load_checkpoint(checkpoint, device)).to(device)
    predict = make_predictor(model, device)
    pre = [preprocess_slice(volume.voxels[s], None, config.image_size) for s in range(volume.voxels.shape[0])]
    images = np.stack([p.image for p in pre])
    probs = predict(images[:, None].astype(np.float32))
    predictions = probs.argmax(axis=1)
    labels = None
    if volume.label_voxels is not None:
        from scipy import ndimage

        labels = np.stack([
            ndimage.zoom(volume.label_voxels[s], np.array(images[0].shape) / np.array(volume.label_voxels[s].shape), order=0)
            for s in range(volume.label_voxels.shape[0])
        ])
    pick = np.unique(np.linspace(0, images.shape[0] - 1, 6, dtype=int))
    plots_mod.plot_overlays(images[pick], predictions[pick],
                            labels[pick] if labels is not None else None, out_path)


def _plot_ratio_sweep(sweep: list[tuple[int, float, str]], out_path: Path) -> None:
    import matplotlib.pyplot as plt

    sweep = sorted(sweep)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot([s[0] for s in sweep], [s[1] for s in sweep], marker="o", color="tab:blue")
    for labeled, dsc, tag in sweep:
        ax.annotate(tag, (labeled, dsc), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("labeled scans")
    ax.set_ylabel("test DSC (%)")
    ax.set_title("performance vs labeled data")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UserError, ConfigError, DatasetError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
