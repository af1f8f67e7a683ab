"""Volume-level evaluation: Dice overlap and average symmetric surface distance.

Slices are predicted independently, restacked into the original case volume
grid and scored per class against the stored labels. The background class is
excluded from reported metrics.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .data import DatasetManifest, DatasetError, ingest_case, preprocess_slice

log = logging.getLogger(__name__)

SURFACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


@dataclass
class ClassMetrics:
    class_index: int
    dsc: float  # percent
    assd: float | None  # mm; None when either surface is empty

    @property
    def defined(self) -> bool:
        return self.assd is not None


@dataclass
class CaseResult:
    case_id: str
    per_class: list[ClassMetrics]


@dataclass
class SplitSummary:
    """Per-class means over cases plus the class-averaged row."""

    class_indices: list[int]
    mean_dsc: list[float]
    mean_assd: list[float | None]
    avg_dsc: float
    avg_assd: float | None
    spacing_source: str  # "manifest" or "unit"


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice overlap in percent; two empty masks count as perfect agreement."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask.astype(bool)
    gt = gt_mask.astype(bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((pred & gt).sum()) / total


def binary_surface(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels: foreground with a 6-connected background neighbor
    (voxels outside the volume count as background)."""
    mask = mask.astype(bool)
    if not mask.any():
        return mask
    interior = ndimage.binary_erosion(mask, structure=SURFACE_STRUCTURE, border_value=0)
    return mask & ~interior


def assd(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    spacing_mm: Sequence[float] = (1.0, 1.0, 1.0),
) -> float | None:
    """Average symmetric surface distance in mm via anisotropic distance
    transforms; undefined (None, with a warning) when either surface is empty.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    if any(s <= 0 for s in spacing_mm):
        raise ValueError(f"voxel spacing must be positive, got {tuple(spacing_mm)}")
    pred_surface = binary_surface(pred_mask)
    gt_surface = binary_surface(gt_mask)
    if not pred_surface.any() or not gt_surface.any():
        warnings.warn("empty surface: average surface distance is undefined for this pair")
        return None
    dist_to_gt = ndimage.distance_transform_edt(~gt_surface, sampling=spacing_mm)
    dist_to_pred = ndimage.distance_transform_edt(~pred_surface, sampling=spacing_mm)
    forward = float(dist_to_gt[pred_surface].mean())
    backward = float(dist_to_pred[gt_surface].mean())
    return (forward + backward) / 2.0


def _restack_prediction(
    probs: np.ndarray, original_shape: tuple[int, int, int]
) -> np.ndarray:
    """Argmax slice predictions, resized back (nearest) to the case's original grid."""
    pred = probs.argmax(axis=1).astype(np.uint8)  # (S, t, t)
    s, h0, w0 = original_shape
    if pred.shape[1:] == (h0, w0):
        return pred
    factors = (h0 / pred.shape[1], w0 / pred.shape[2])
    return np.stack([ndimage.zoom(pred[i], factors, order=0) for i in range(s)])


def evaluate_split(
    predict: Callable[[np.ndarray], np.ndarray],
    manifest: DatasetManifest,
    split_name: str,
    target_size: int = 256,
) -> tuple[list[CaseResult], SplitSummary]:
    """Score every case of a split with a slice-batch predictor.

    predict maps a float32 (N, 1, t, t) stack of preprocessed slices to
    (N, C, t, t) class probabilities. Each case is predicted slice by slice,
    restacked to a 3D label volume and scored per foreground class with the
    case's voxel spacing.
    """
    case_ids = manifest.split.get(split_name, [])
    if not case_ids:
        raise DatasetError(f"split {split_name!r} is empty or missing")
    classes = list(range(1, manifest.class_count))
    results: list[CaseResult] = []
    unit_spacing = False
    for cid in sorted(case_ids):
        volume = ingest_case(manifest.root / cid)
        if volume.label_voxels is None:
            raise DatasetError(f"case {cid!r} has no labels; cannot evaluate split {split_name!r}")
        slices = np.stack(
            [preprocess_slice(volume.voxels[s], None, target_size).image for s in range(volume.voxels.shape[0])]
        )[:, None]
        probs = predict(slices.astype(np.float32))
        pred_volume = _restack_prediction(np.asarray(probs), volume.voxels.shape)
        spacing = volume.spacing_mm
        if spacing is None:
            spacing, unit_spacing = (1.0, 1.0, 1.0), True
        per_class = []
        for cls in classes:
            pred_mask = pred_volume == cls
            gt_mask = volume.label_voxels == cls
            per_class.append(
                ClassMetrics(cls, dice_score(pred_mask, gt_mask), assd(pred_mask, gt_mask, spacing))
            )
        results.append(CaseResult(cid, per_class))
    summary = summarize(results, classes)
    summary.spacing_source = "unit" if unit_spacing else "manifest"
    return results, summary


def summarize(results: list[CaseResult], class_indices: list[int]) -> SplitSummary:
    """Per-class means over cases; undefined surface distances are excluded."""
    mean_dsc, mean_assd = [], []
    for cls in class_indices:
        dscs = [m.dsc for r in results for m in r.per_class if m.class_index == cls]
        assds = [m.assd for r in results for m in r.per_class if m.class_index == cls and m.defined]
        skipped = len(dscs) - len(assds)
        if skipped:
            log.warning("class %d: %d case(s) with undefined surface distance excluded", cls, skipped)
        mean_dsc.append(float(np.mean(dscs)))
        mean_assd.append(float(np.mean(assds)) if assds else None)
    defined = [a for a in mean_assd if a is not None]
    return SplitSummary(
        class_indices=list(class_indices),
        mean_dsc=mean_dsc,
        mean_assd=mean_assd,
        avg_dsc=float(np.mean(mean_dsc)),
        avg_assd=float(np.mean(defined)) if defined else None,
        spacing_source="manifest",
    )


def _class_name(index: int, class_names: list[str] | None) -> str:
    if class_names and index < len(class_names):
        return class_names[index]
    return f"class {index}"


def format_summary_table(summary: SplitSummary, class_names: list[str] | None = None) -> str:
    """Plain-text table: one DSC/ASSD column pair per structure plus Avg."""
    headers = [_class_name(c, class_names) for c in summary.class_indices] + ["Avg"]
    dsc_row = [f"{v:.2f}" for v in summary.mean_dsc] + [f"{summary.avg_dsc:.2f}"]
    assd_row = [f"{v:.2f}" if v is not None else "undef" for v in summary.mean_assd]
    assd_row += [f"{summary.avg_assd:.2f}" if summary.avg_assd is not None else "undef"]
    width = max(len(h) for h in headers + dsc_row + assd_row) + 2
    lines = [
        "".join(h.rjust(width) for h in [""] + headers),
        "".join(v.rjust(width) for v in ["DSC (%)"] + dsc_row),
        "".join(v.rjust(width) for v in ["ASSD (mm)"] + assd_row),
    ]
    return "\n".join(lines)


def write_records(results: list[CaseResult], path: Path | str) -> Path:
    """Machine-readable per-case records (CSV: case_id, class, dsc, assd)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "class", "dsc_percent", "assd_mm"])
        for result in results:
            for m in result.per_class:
                writer.writerow(
                    [result.case_id, m.class_index, f"{m.dsc:.6g}", f"{m.assd:.6g}" if m.defined else ""]
                )
    return path
