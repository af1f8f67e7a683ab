"""Dataset ingestion, preprocessing, augmentation, batch composition and the
synthetic desk-scale dataset generator.

Canonical on-disk format: one directory per case holding
  image.raw  little-endian float32, C-order, shape S x H0 x W0
  label.raw  little-endian uint8, same order (optional)
  meta.json  {"shape": [S, H0, W0], "spacing_mm": [a, b, c], "class_count": C}
A dataset root contains the case directories plus manifest.json describing
the case-level train/val/test split and the labeled subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BatchConfig

MANIFEST_NAME = "manifest.json"
META_NAME = "meta.json"
IMAGE_RAW = "image.raw"
LABEL_RAW = "label.raw"
MINMAX_EPS = 1e-8


class DatasetError(ValueError):
    """Raised for malformed case directories, manifests or volume files."""


@dataclass
class CaseInfo:
    case_id: str
    shape: tuple[int, int, int]  # (S, H0, W0)
    spacing_mm: tuple[float, float, float]
    has_label: bool

    @property
    def slice_count(self) -> int:
        return self.shape[0]


@dataclass
class CaseVolume:
    """A full 3D case: S stacked 2D slices with optional integer labels."""

    case_id: str
    voxels: np.ndarray  # (S, H0, W0) float32
    spacing_mm: tuple[float, float, float]
    class_count: int
    label_voxels: np.ndarray | None = None  # (S, H0, W0) uint8, values < class_count

    @property
    def has_label(self) -> bool:
        return self.label_voxels is not None


@dataclass
class DatasetManifest:
    """Case inventory plus the case-level split and labeled subset."""

    root: Path
    class_count: int
    cases: list[CaseInfo]
    split: dict[str, list[str]]  # keys: train / val / test
    labeled_case_ids: list[str]
    class_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.validate()

    def validate(self) -> None:
        known = {c.case_id for c in self.cases}
        if len(known) != len(self.cases):
            raise DatasetError("duplicate case_id in manifest")
        seen: dict[str, str] = {}
        for name, ids in self.split.items():
            for cid in ids:
                if cid not in known:
                    raise DatasetError(f"split {name!r} references unknown case {cid!r}")
                if cid in seen:
                    raise DatasetError(f"case {cid!r} appears in both {seen[cid]!r} and {name!r} splits")
                seen[cid] = name
        train = set(self.split.get("train", ()))
        for cid in self.labeled_case_ids:
            if cid not in train:
                raise DatasetError(f"labeled case {cid!r} is not in the train split")

    def case(self, case_id: str) -> CaseInfo:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise DatasetError(f"unknown case {case_id!r}")

    @property
    def unlabeled_train_ids(self) -> list[str]:
        labeled = set(self.labeled_case_ids)
        return [cid for cid in self.split.get("train", ()) if cid not in labeled]

    @property
    def labeled_slice_count(self) -> int:
        return sum(self.case(cid).slice_count for cid in self.labeled_case_ids)

    @property
    def unlabeled_slice_count(self) -> int:
        return sum(self.case(cid).slice_count for cid in self.unlabeled_train_ids)

    def save(self, path: Path | None = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        payload = {
            "class_count": self.class_count,
            "class_names": self.class_names,
            "cases": [
                {
                    "case_id": c.case_id,
                    "shape": list(c.shape),
                    "spacing_mm": list(c.spacing_mm),
                    "has_label": c.has_label,
                }
                for c in self.cases
            ],
            "split": self.split,
            "labeled_case_ids": self.labeled_case_ids,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, root: Path | str) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise DatasetError(f"corrupt manifest {path}: {err}") from err
        cases = [
            CaseInfo(
                case_id=c["case_id"],
                shape=tuple(c["shape"]),
                spacing_mm=tuple(c["spacing_mm"]),
                has_label=bool(c["has_label"]),
            )
            for c in payload["cases"]
        ]
        return cls(
            root=path.parent,
            class_count=int(payload["class_count"]),
            cases=cases,
            split={k: list(v) for k, v in payload["split"].items()},
            labeled_case_ids=list(payload["labeled_case_ids"]),
            class_names=payload.get("class_names"),
        )


def write_case(
    root: Path | str,
    case_id: str,
    voxels: np.ndarray,
    spacing_mm: tuple[float, float, float],
    class_count: int,
    label_voxels: np.ndarray | None = None,
) -> Path:
    """Write one case in the canonical directory format; returns the case dir."""
    if voxels.ndim != 3:
        raise DatasetError(f"volume must be (S, H, W), got shape {voxels.shape}")
    case_dir = Path(root) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    voxels.astype("<f4").tofile(case_dir / IMAGE_RAW)
    if label_voxels is not None:
        if label_voxels.shape != voxels.shape:
            raise DatasetError(
                f"label shape {label_voxels.shape} does not match volume shape {voxels.shape}"
            )
        if int(label_voxels.max(initial=0)) >= class_count:
            raise DatasetError(
                f"label value {int(label_voxels.max())} exceeds class_count={class_count}"
            )
        label_voxels.astype("<u1").tofile(case_dir / LABEL_RAW)
    meta = {
        "shape": list(voxels.shape),
        "spacing_mm": list(spacing_mm),
        "class_count": class_count,
    }
    (case_dir / META_NAME).write_text(json.dumps(meta, indent=2) + "\n")
    return case_dir


def ingest_case(path: Path | str) -> CaseVolume:
    """Load one canonical case directory, validating shapes and label range."""
    case_dir = Path(path)
    meta_path = case_dir / META_NAME
    if not case_dir.is_dir() or not meta_path.exists():
        raise DatasetError(f"{case_dir} is not a canonical case directory (missing {META_NAME})")
    try:
        meta = json.loads(meta_path.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        class_count = int(meta["class_count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise DatasetError(f"corrupt metadata in {meta_path}: {err}") from err
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise DatasetError(f"{meta_path}: shape must be 3 positive ints, got {shape}")
    if any(s <= 0 for s in spacing):
        raise DatasetError(f"{meta_path}: voxel spacing must be positive, got {spacing}")
    expected = int(np.prod(shape))
    raw = np.fromfile(case_dir / IMAGE_RAW, dtype="<f4")
    if raw.size != expected:
        raise DatasetError(
            f"{case_dir / IMAGE_RAW}: expected {expected} float32 voxels for shape {shape}, found {raw.size}"
        )
    voxels = raw.reshape(shape)
    label = None
    label_path = case_dir / LABEL_RAW
    if label_path.exists():
        raw_label = np.fromfile(label_path, dtype="<u1")
        if raw_label.size != expected:
            raise DatasetError(
                f"{label_path}: expected {expected} uint8 voxels for shape {shape}, found {raw_label.size}"
            )
        label = raw_label.reshape(shape)
        peak = int(label.max())
        if peak >= class_count:
            raise DatasetError(f"{label_path}: label value {peak} >= class_count={class_count}")
    return CaseVolume(
        case_id=case_dir.name,
        voxels=voxels,
        spacing_mm=spacing,
        class_count=class_count,
        label_voxels=label,
    )


def one_hot_label(label: np.ndarray, class_count: int) -> np.ndarray:
    """Integer mask (H, W) -> one-hot (C, H, W) float32."""
    if int(label.max(initial=0)) >= class_count:
        raise DatasetError(f"label value {int(label.max())} >= class_count={class_count}")
    return (np.arange(class_count)[:, None, None] == label[None]).astype(np.float32)


@dataclass
class PreprocessedSlice:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: np.ndarray | None  # (C, H, W) one-hot float32
    constant_input: bool  # set when the raw slice had no intensity range


def preprocess_slice(
    slice2d: np.ndarray,
    label2d: np.ndarray | None = None,
    target_size: int = 256,
    class_count: int | None = None,
) -> PreprocessedSlice:
    """Resize to target_size (bilinear image, nearest label) and min-max
    normalize the image into [0, 1] per slice.

    A constant slice normalizes to all zeros and is flagged.
    """
    if not np.isfinite(slice2d).all():
        raise DatasetError("slice contains non-finite values")
    h0, w0 = slice2d.shape
    factors = (target_size / h0, target_size / w0)
    image = slice2d.astype(np.float32)
    if (h0, w0) != (target_size, target_size):
        image = ndimage.zoom(image, factors, order=1)
        assert image.shape == (target_size, target_size)
    lo, hi = float(image.min()), float(image.max())
    constant = hi - lo <= 0.0
    image = (image - lo) / (hi - lo + MINMAX_EPS)
    one_hot = None
    if label2d is not None:
        if class_count is None:
            raise DatasetError("class_count is required to one-hot encode a label")
        label = label2d
        if label.shape != (target_size, target_size):
            label = ndimage.zoom(label, (target_size / label.shape[0], target_size / label.shape[1]), order=0)
        one_hot = one_hot_label(label, class_count)
    return PreprocessedSlice(image=image.astype(np.float32), label=one_hot, constant_input=constant)


def augment(
    image: np.ndarray,
    label: np.ndarray | None,
    rng: np.random.Generator,
    free_rotation: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Random horizontal/vertical flips (p=0.5 each) and a random rotation,
    applied identically to image and label.

    Rotation is a multiple of 90 degrees by default so labels never need
    interpolation; free_rotation enables arbitrary angles with nearest-neighbor
    labels. The rng draw order is fixed (flip-h, flip-v, rotation) and does not
    depend on whether a label is present, keeping sampling streams aligned.
    """
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    if free_rotation:
        angle = float(rng.uniform(0.0, 360.0))
    else:
        quarter_turns = int(rng.integers(0, 4))

    def apply(arr: np.ndarray, order: int) -> np.ndarray:
        axes = (-2, -1)
        if flip_h:
            arr = np.flip(arr, axis=-1)
        if flip_v:
            arr = np.flip(arr, axis=-2)
        if free_rotation:
            arr = ndimage.rotate(arr, angle, axes=axes, reshape=False, order=order, mode="nearest")
        else:
            arr = np.rot90(arr, k=quarter_turns, axes=axes)
        return np.ascontiguousarray(arr)

    out_image = apply(image, order=1)
    out_label = apply(label, order=0) if label is not None else None
    return out_image, out_label


@dataclass
class Batch:
    """One composed training batch; labeled samples come first."""

    images: np.ndarray  # (B, 1, H, W) float32
    labels: np.ndarray  # (labeled_count, C, H, W) float32 one-hot
    labeled_count: int
    case_ids: list[str]
    slice_indices: list[int]

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]


class SlicePool:
    """Preprocessed 2D training slices split into labeled and unlabeled pools.

    Volumes are loaded and resized once; augmentation happens per draw.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        target_size: int = 256,
        labeled_case_ids: list[str] | None = None,
    ):
        self.manifest = manifest
        self.target_size = target_size
        self.class_count = manifest.class_count
        labeled_ids = list(labeled_case_ids if labeled_case_ids is not None else manifest.labeled_case_ids)
        train = set(manifest.split.get("train", ()))
        for cid in labeled_ids:
            if cid not in train:
                raise DatasetError(f"labeled case {cid!r} is not in the train split")
        labeled_set = set(labeled_ids)
        self.labeled: list[tuple[np.ndarray, np.ndarray, str, int]] = []
        self.unlabeled: list[tuple[np.ndarray, str, int]] = []
        for cid in manifest.split.get("train", ()):
            volume = ingest_case(manifest.root / cid)
            for s in range(volume.voxels.shape[0]):
                if cid in labeled_set:
                    if volume.label_voxels is None:
                        raise DatasetError(f"case {cid!r} is marked labeled but has no label volume")
                    prep = preprocess_slice(
                        volume.voxels[s], volume.label_voxels[s], target_size, self.class_count
                    )
                    self.labeled.append((prep.image, prep.label, cid, s))
                else:
                    prep = preprocess_slice(volume.voxels[s], None, target_size)
                    self.unlabeled.append((prep.image, cid, s))

    def compose_batch(
        self,
        rng: np.random.Generator,
        config: BatchConfig,
        augment_data: bool = True,
        free_rotation: bool = False,
        labeled_only: bool = False,
    ) -> Batch:
        """Draw labeled_per_batch + unlabeled_per_batch slices uniformly with
        replacement; labeled_only restricts the batch to the labeled pool
        (the supervised-baseline setting).
        """
        if not self.labeled:
            raise DatasetError("empty labeled pool: at least one labeled slice is required")
        n_lab = config.labeled_per_batch
        n_unlab = 0 if labeled_only else config.unlabeled_per_batch
        if n_unlab > 0 and not self.unlabeled:
            raise DatasetError("empty unlabeled pool but unlabeled_per_batch > 0")
        images, labels, case_ids, slice_indices = [], [], [], []
        for idx in rng.integers(0, len(self.labeled), size=n_lab):
            image, label, cid, s = self.labeled[int(idx)]
            if augment_data:
                image, label = augment(image, label, rng, free_rotation)
            images.append(image)
            labels.append(label)
            case_ids.append(cid)
            slice_indices.append(s)
        for idx in rng.integers(0, len(self.unlabeled), size=n_unlab):
            image, cid, s = self.unlabeled[int(idx)]
            if augment_data:
                image, _ = augment(image, None, rng, free_rotation)
            images.append(image)
            case_ids.append(cid)
            slice_indices.append(s)
        stacked = np.stack(images).astype(np.float32)[:, None]
        stacked_labels = (
            np.stack(labels).astype(np.float32)
            if labels
            else np.zeros((0, self.class_count, self.target_size, self.target_size), np.float32)
        )
        return Batch(
            images=stacked,
            labels=stacked_labels,
            labeled_count=n_lab,
            case_ids=case_ids,
            slice_indices=slice_indices,
        )


@dataclass
class SynthSpec:
    """Parameters of the synthetic blob dataset used for desk-scale runs."""

    case_count: int = 20
    labeled_ratio: float = 0.1
    image_size: int = 64
    slices_min: int = 8
    slices_max: int = 12
    class_count: int = 2
    noise: float = 0.5
    seed: int = 0
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    spacing_mm: tuple[float, float, float] = (5.0, 1.0, 1.0)
    contrast: tuple[float, float] = (0.3, 0.8)  # per-case blob contrast magnitude range
    bias: float = 0.6  # smooth intensity bias field amplitude


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)


def _synthesize_case(rng: np.random.Generator, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """One blob volume: low-contrast deformed ellipsoids over a smooth bias field."""
    s = int(rng.integers(spec.slices_min, spec.slices_max + 1))
    n = spec.image_size
    zz, yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, s), np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n), indexing="ij"
    )
    label = np.zeros((s, n, n), np.uint8)
    signal = np.zeros((s, n, n), np.float64)
    # per-case appearance: contrast magnitude/sign and noise level vary across
    # cases so a small labeled subset cannot cover the intensity distribution
    contrast_sign = 1.0 if rng.random() < 0.5 else -1.0
    for cls in range(1, spec.class_count):
        contrast = contrast_sign * rng.uniform(*spec.contrast)
        field = np.zeros((s, n, n), np.float64)
        for _ in range(int(rng.integers(1, 4))):
            center = rng.uniform([0.2, 0.25, 0.25], [0.8, 0.75, 0.75])
            radii = rng.uniform([0.25, 0.12, 0.12], [0.45, 0.3, 0.3])
            # low-frequency warp makes the blob boundary irregular
            warp = 0.12 * _smooth_noise(rng, (s, n, n), sigma=(1.0, n / 8, n / 8))
            dist = (
                ((zz - center[0]) / radii[0]) ** 2
                + ((yy - center[1]) / radii[1]) ** 2
                + ((xx - center[2]) / radii[2]) ** 2
            )
            field = np.maximum(field, np.exp(-dist) + warp)
        mask = field > np.exp(-1.0)  # inside the (warped) unit ellipsoid
        label[mask] = cls
        signal += contrast * np.where(mask, field, 0.0)
    bias = spec.bias * _smooth_noise(rng, (s, n, n), sigma=(2.0, n / 4, n / 4))
    noise_level = spec.noise * rng.uniform(0.6, 1.4)
    voxels = 0.5 + signal + bias + noise_level * rng.standard_normal((s, n, n))
    return voxels.astype(np.float32), label


def synthesize_dataset(out_dir: Path | str, spec: SynthSpec) -> DatasetManifest:
    """Generate a seeded blob dataset in the canonical format.

    The labeled subset is round(labeled_ratio * case_count) cases drawn from
    the train split; the split itself is a seeded case-level shuffle into
    train / val / test.
    """
    if spec.case_count < 3:
        raise DatasetError("need at least 3 cases to populate train/val/test splits")
    n_labeled = int(round(spec.labeled_ratio * spec.case_count))
    if n_labeled < 1:
        raise DatasetError(
            f"labeled_ratio={spec.labeled_ratio} yields zero labeled cases out of {spec.case_count}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_ids = [f"case_{i:03d}" for i in range(spec.case_count)]
    cases = []
    for i, cid in enumerate(case_ids):
        rng = np.random.default_rng([spec.seed, i])
        voxels, label = _synthesize_case(rng, spec)
        write_case(out_dir, cid, voxels, spec.spacing_mm, spec.class_count, label)
        cases.append(
            CaseInfo(cid, tuple(voxels.shape), spec.spacing_mm, has_label=True)
        )
    split_rng = np.random.default_rng([spec.seed, spec.case_count])
    order = [str(cid) for cid in split_rng.permutation(case_ids)]
    n_test = int(round(spec.test_fraction * spec.case_count))
    n_val = int(round(spec.val_fraction * spec.case_count))
    test_ids, val_ids, train_ids = order[:n_test], order[n_test : n_test + n_val], order[n_test + n_val :]
    if not train_ids or not val_ids or not test_ids:
        raise DatasetError("split fractions leave an empty train/val/test split")
    if n_labeled > len(train_ids):
        raise DatasetError(f"{n_labeled} labeled cases requested but train split has {len(train_ids)}")
    labeled_ids = sorted(train_ids[:n_labeled])
    manifest = DatasetManifest(
        root=out_dir,
        class_count=spec.class_count,
        cases=cases,
        split={"train": sorted(train_ids), "val": sorted(val_ids), "test": sorted(test_ids)},
        labeled_case_ids=labeled_ids,
    )
    manifest.save()
    return manifest
