"""Training loop: forward the batch, build prototypes, compute the three loss
branches, optimize with SGD under the poly learning-rate policy, checkpoint
and log.

Every run directory is self-describing: resolved config, line-delimited
training log, validation history and checkpoints live side by side.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .core import BatchConfig, probability_deviation
from .data import Batch, DatasetManifest, SlicePool
from .losses import (
    LossReport,
    LossToggles,
    cpcc_loss,
    spcc_loss,
    supervised_loss,
    total_loss,
    warmup_lambda,
)
from .metrics import SplitSummary, evaluate_split
from .prototypes import (
    batch_prototypes,
    cosine_similarity_map,
    cross_sample_prediction,
    self_aware_prediction,
    similarity_stack,
)
from .uncertainty import confidence_weight, normalized_entropy, stability_weight, vote_probability
from .unet import UNet

log = logging.getLogger(__name__)

LOG_NAME = "training_log.csv"
LOG_HEADER = ["iteration", "lr", "lambda", "seg", "spcc", "cpcc", "total"]
VAL_LOG_NAME = "val_history.csv"
VAL_HEADER = ["iteration", "val_dsc", "val_assd"]
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
POSTMORTEM_CHECKPOINT = "postmortem.pt"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """A loss component became non-finite; the offending iteration was checkpointed."""


@dataclass
class TrainConfig:
    """Full training recipe. Desk-scale defaults; the full-scale recipe uses
    t_max=30000, 12+12 batches, image_size=256 and base_width=64."""

    t_max: int = 1000
    base_lr: float = 0.1
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    class_count: int = 2
    base_width: int = 16
    feature_tap: str = "final"
    image_size: int = 64
    seed: int = 1337
    spcc: bool = True
    cpcc: bool = True
    w1: bool = True
    w2: bool = True
    squared_consistency: bool = True
    label_prototypes: bool = False  # build labeled samples' prototypes from ground truth instead of predictions
    free_rotation: bool = False
    eval_every: int = 100
    checkpoint_every: int = 100
    labeled_scans: int | None = None  # override the manifest's labeled subset size
    device: str = "cpu"
    check_invariants: bool = True

    def __post_init__(self) -> None:
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def toggles(self) -> LossToggles:
        return LossToggles(spcc=self.spcc, cpcc=self.cpcc, w1=self.w1, w2=self.w2)

    def batch_config(self, embed_dim: int) -> BatchConfig:
        return BatchConfig(
            labeled_per_batch=self.labeled_per_batch,
            unlabeled_per_batch=self.unlabeled_per_batch,
            class_count=self.class_count,
            embed_dim=embed_dim,
        )

    @property
    def supervised_only(self) -> bool:
        return not (self.spcc or self.cpcc)


@dataclass
class StepStats:
    """Side observations from a training step, used by invariant checks."""

    max_probability_deviation: float = 0.0

    def track(self, values: Tensor) -> None:
        self.max_probability_deviation = max(self.max_probability_deviation, probability_deviation(values))


@dataclass
class FitResult:
    run_dir: Path
    final_iteration: int
    best_val_dsc: float | None
    best_val_assd: float | None
    history: list[tuple[int, float, float | None]]
    last_checkpoint: Path
    best_checkpoint: Path | None
    stats: StepStats


def poly_lr(t: int, t_max: int, base_lr: float = 0.1, power: float = 0.9) -> float:
    """Polynomial decay base_lr * (1 - t/t_max)^power."""
    if not 0 <= t <= t_max:
        raise ValueError(f"iteration {t} outside [0, {t_max}]")
    return base_lr * (1.0 - t / t_max) ** power


def build_model(config: TrainConfig) -> UNet:
    return UNet(
        class_count=config.class_count,
        base_width=config.base_width,
        feature_tap=config.feature_tap,
    )


def build_optimizer(model: UNet, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _batch_to_tensors(batch: Batch, device: str) -> tuple[Tensor, Tensor]:
    images = torch.from_numpy(batch.images).to(device)
    labels = torch.from_numpy(batch.labels).to(device)
    return images, labels


def train_step(
    model: UNet,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    t: int,
    config: TrainConfig,
    stats: StepStats | None = None,
) -> LossReport:
    """One optimizer update.

    Per sample: forward -> prototypes -> similarity stack -> self-aware and
    cross-sample predictions -> vote entropy and the two weight maps -> loss
    branches -> warmup-weighted total -> backward -> SGD step. The supervised
    branch consumes only the labeled entries (which come first in the batch);
    both consistency branches consume every sample.
    """
    model.train()
    lr = poly_lr(t, config.t_max, config.base_lr, config.poly_power)
    for group in optimizer.param_groups:
        group["lr"] = lr
    images, labels = _batch_to_tensors(batch, config.device)
    out = model(images)
    probs = out.prob
    seg_losses = [supervised_loss(probs[k], labels[k]) for k in range(batch.labeled_count)]
    spcc_losses: list[Tensor] = []
    cpcc_losses: list[Tensor] = []
    squared = config.squared_consistency
    track = stats is not None and config.check_invariants
    if config.spcc or config.cpcc:
        # the prototypical branch only produces constant targets and weights,
        # so it runs detached from the autograd graph
        with torch.no_grad():
            feats = out.feat.detach()
            proto_source = probs.detach()
            if config.label_prototypes and batch.labeled_count:
                proto_source = proto_source.clone()
                proto_source[: batch.labeled_count] = labels
            protos = batch_prototypes(proto_source, feats)
            if config.cpcc:  # the full B-map stacks are only needed cross-sample
                stacks = [similarity_stack(feats, protos, k) for k in range(batch.batch_size)]
                p_self = [self_aware_prediction(s.self_map) for s in stacks]
            else:
                p_self = [
                    self_aware_prediction(cosine_similarity_map(feats[k], protos[k]))
                    for k in range(batch.batch_size)
                ]
        for k in range(batch.batch_size):
            if config.spcc:
                spcc_losses.append(spcc_loss(p_self[k], probs[k], squared))
            if config.cpcc:
                with torch.no_grad():
                    p_cross = cross_sample_prediction(stacks[k])
                    w1 = None
                    if config.w1:
                        votes = vote_probability(stacks[k])
                        w1 = stability_weight(normalized_entropy(votes))
                        if track:
                            stats.track(votes)
                    w2 = confidence_weight(p_self[k]) if config.w2 else None
                    if track:
                        stats.track(p_cross)
                cpcc_losses.append(cpcc_loss(p_cross, probs[k], w1, w2, squared))
        if track:
            with torch.no_grad():
                for k in range(batch.batch_size):
                    stats.track(p_self[k])
    if track:
        with torch.no_grad():
            stats.track(probs)
    total, report = total_loss(seg_losses, spcc_losses, cpcc_losses, t, config.t_max, config.toggles())
    for name, value in (("seg", report.seg), ("spcc", report.spcc), ("cpcc", report.cpcc)):
        if not np.isfinite(value):
            raise NonFiniteLossError(f"{name} loss became non-finite at iteration {t}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return report


def _rng_payload(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


def save_checkpoint(
    path: Path,
    model: UNet,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    iteration: int,
    rng: np.random.Generator,
    best_val_dsc: float | None,
    best_val_assd: float | None,
) -> Path:
    payload = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.config(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "train_config": dataclasses.asdict(config),
        "iteration": iteration,
        "rng": _rng_payload(rng),
        "best_val_dsc": best_val_dsc,
        "best_val_assd": best_val_assd,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str, map_location: str = "cpu") -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location=map_location, weights_only=False)


def model_from_checkpoint(payload: dict) -> UNet:
    model = UNet(**payload["architecture"])
    model.load_state_dict(payload["model"])
    return model


def make_predictor(model: UNet, device: str = "cpu", batch_size: int = 16):
    """Wrap a model as a numpy slice-stack predictor for evaluation."""

    def predict(images: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        chunks = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                x = torch.from_numpy(images[start : start + batch_size]).to(device)
                chunks.append(model(x).prob.cpu().numpy())
        if was_training:
            model.train()
        return np.concatenate(chunks)

    return predict


def _resolve_labeled_ids(manifest: DatasetManifest, config: TrainConfig) -> list[str] | None:
    """Apply the labeled_scans override: a seeded draw of that many train cases."""
    if config.labeled_scans is None:
        return None
    train_ids = list(manifest.split.get("train", ()))
    if not 1 <= config.labeled_scans <= len(train_ids):
        raise ValueError(
            f"labeled_scans={config.labeled_scans} outside [1, {len(train_ids)}] train cases"
        )
    order = np.random.default_rng(config.seed).permutation(train_ids)
    return sorted(order[: config.labeled_scans].tolist())


def _format_row(values: list) -> list[str]:
    return [v if isinstance(v, str) else f"{v:.10g}" for v in values]


def fit(
    config: TrainConfig,
    manifest: DatasetManifest,
    run_dir: Path | str,
    resume_from: Path | str | None = None,
    stop_iteration: int | None = None,
) -> FitResult:
    """Run (or resume) training for config.t_max iterations.

    Periodically evaluates the val split, keeping the best checkpoint by mean
    DSC alongside the last. With identical seeds two runs produce identical
    logs, and a resumed run continues the uninterrupted trajectory bit for bit
    because model, optimizer and data-order RNG state are all checkpointed.

    stop_iteration halts the session early (schedules still use t_max), which
    is how an interrupted run is simulated and resumed.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = build_model(config).to(config.device)
    optimizer = build_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    start_t = 0
    best_val_dsc: float | None = None
    best_val_assd: float | None = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, map_location=config.device)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng"]["numpy"]
        torch.set_rng_state(payload["rng"]["torch"])
        start_t = payload["iteration"]
        best_val_dsc = payload["best_val_dsc"]
        best_val_assd = payload["best_val_assd"]
        log.info("resumed from %s at iteration %d", resume_from, start_t)

    labeled_ids = _resolve_labeled_ids(manifest, config)
    pool = SlicePool(manifest, target_size=config.image_size, labeled_case_ids=labeled_ids)
    batch_config = config.batch_config(embed_dim=model.embed_dim)
    predictor = make_predictor(model, config.device)
    stats = StepStats()
    history: list[tuple[int, float, float | None]] = []

    log_path = run_dir / LOG_NAME
    val_path = run_dir / VAL_LOG_NAME
    log_mode = "a" if resume_from is not None and log_path.exists() else "w"
    last_path = run_dir / LAST_CHECKPOINT
    best_path = run_dir / BEST_CHECKPOINT

    with log_path.open(log_mode, newline="") as log_fh, val_path.open(log_mode, newline="") as val_fh:
        log_writer = csv.writer(log_fh)
        val_writer = csv.writer(val_fh)
        if log_mode == "w":
            log_writer.writerow(LOG_HEADER)
            val_writer.writerow(VAL_HEADER)
        final_t = start_t
        for t in range(start_t, config.t_max):
            batch = pool.compose_batch(
                rng,
                batch_config,
                free_rotation=config.free_rotation,
                labeled_only=config.supervised_only,
            )
            try:
                report = train_step(model, optimizer, batch, t, config, stats)
            except NonFiniteLossError:
                save_checkpoint(
                    run_dir / POSTMORTEM_CHECKPOINT, model, optimizer, config, t, rng,
                    best_val_dsc, best_val_assd,
                )
                raise
            lr = poly_lr(t, config.t_max, config.base_lr, config.poly_power)
            log_writer.writerow(
                _format_row([report.iteration, lr, report.lambda_t, report.seg, report.spcc, report.cpcc, report.total])
            )
            steps_done = t + 1
            final_t = steps_done
            if config.eval_every and steps_done % config.eval_every == 0:
                _, summary = evaluate_split(predictor, manifest, "val", config.image_size)
                history.append((steps_done, summary.avg_dsc, summary.avg_assd))
                val_writer.writerow(
                    _format_row([steps_done, summary.avg_dsc, summary.avg_assd if summary.avg_assd is not None else ""])
                )
                if best_val_dsc is None or summary.avg_dsc > best_val_dsc:
                    best_val_dsc, best_val_assd = summary.avg_dsc, summary.avg_assd
                    save_checkpoint(best_path, model, optimizer, config, steps_done, rng, best_val_dsc, best_val_assd)
                log.info(
                    "iter %d/%d total %.4f val DSC %.2f", steps_done, config.t_max, report.total, summary.avg_dsc
                )
            if (config.checkpoint_every and steps_done % config.checkpoint_every == 0) or steps_done == config.t_max:
                save_checkpoint(last_path, model, optimizer, config, steps_done, rng, best_val_dsc, best_val_assd)
            if stop_iteration is not None and steps_done >= stop_iteration:
                save_checkpoint(last_path, model, optimizer, config, steps_done, rng, best_val_dsc, best_val_assd)
                log.info("stopping early at iteration %d (t_max %d)", steps_done, config.t_max)
                break

    return FitResult(
        run_dir=run_dir,
        final_iteration=final_t,
        best_val_dsc=best_val_dsc,
        best_val_assd=best_val_assd,
        history=history,
        last_checkpoint=last_path,
        best_checkpoint=best_path if best_path.exists() else None,
        stats=stats,
    )


def read_training_log(path: Path | str) -> dict[str, np.ndarray]:
    """Load a line-delimited training log into column arrays."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty training log: {path}")
    return {
        key: np.array([float(r[key]) if r[key] not in ("", None) else np.nan for r in rows])
        for key in rows[0]
    }


def evaluate_checkpoint(
    checkpoint_path: Path | str,
    manifest: DatasetManifest,
    split_name: str,
    device: str = "cpu",
) -> tuple[list, SplitSummary, TrainConfig]:
    """Load a checkpoint and score a labeled split with it."""
    payload = load_checkpoint(checkpoint_path, map_location=device)
    model = model_from_checkpoint(payload).to(device)
    config = TrainConfig(**payload["train_config"])
    predictor = make_predictor(model, device)
    results, summary = evaluate_split(predictor, manifest, split_name, config.image_size)
    return results, summary, config
