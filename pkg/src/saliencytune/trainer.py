"""Per-sample fine-tuning on simultaneous label and explanation feedback.

Each step follows the two-forward-pass scheme: a frozen copy of the model
supplies the detached channel weights, a second pass on the live model
supplies the activations the loss differentiates through, and one plain
gradient-descent update is applied. When feedback lacks a label the step
runs explanation-only (effective lambda 1); when it lacks a mask the step
degenerates to pure classification (effective lambda 0) and never touches
mask data.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .backend import ClassifierBackend
from .data import DEFAULT_CLASSES, FeedbackRecord, ImageSample
from .errors import ConfigError, InputError, NumericError
from .explainer import (
    align_resolution,
    channel_weights,
    hard_threshold,
    normalize,
    saliency,
    soft_threshold,
)
from .losses import (
    DEGENERATE_EXPLANATION_PENALTY,
    LossBreakdown,
    classification_loss,
    combined_loss,
    explanation_loss,
)
from .metrics import MetricsReport, evaluate, format_float, report_from_counts
from .losses import jaccard_index

log = logging.getLogger(__name__)

HISTORY_CSV_BASE_COLUMNS = ("epoch", "split")
HISTORY_CSV_TAIL_COLUMNS = ("avg_sensitivity", "avg_jaccard", "jaccard_sd", "l_cls", "l_exp", "l_total")


@dataclass
class TrainingConfig:
    """All hyperparameters of one fine-tuning job."""

    lam: float = 0.3
    learning_rate: float = 0.01
    epochs: int = 10
    threshold: float = 0.5
    temperature: float = 0.05
    seed: int = 0
    batch_size: int = 1
    selection_criterion: str = "composite"  # composite | val_avg_jaccard | val_accuracy
    optimizer: str = "sgd"  # sgd | adam (opt-in)
    clip_norm: Optional[float] = 5.0
    shuffle: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.selection_criterion not in ("composite", "val_avg_jaccard", "val_accuracy"):
            raise ConfigError(f"unknown selection_criterion {self.selection_criterion!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive or None, got {self.clip_norm}")

    def to_json(self) -> dict:
        return {
            "lambda": self.lam,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "threshold": self.threshold,
            "temperature": self.temperature,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "selection_criterion": self.selection_criterion,
            "optimizer": self.optimizer,
            "clip_norm": self.clip_norm,
            "shuffle": self.shuffle,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TrainingConfig":
        payload = dict(payload)
        if "lambda" in payload:
            payload["lam"] = payload.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class StepLog:
    """What happened in one fine-tuning step."""

    step: int
    sample_id: str
    loss: LossBreakdown
    lambda_effective: float
    predicted_class: str
    jaccard: Optional[float] = None
    degenerate: bool = False
    mask_read: bool = False

    def __post_init__(self):
        for v in (self.loss.l_cls, self.loss.l_exp, self.loss.l_total):
            if isinstance(v, torch.Tensor):
                v = v.detach()
            if not np.isfinite(float(v)):
                raise NumericError("step log holds a non-finite loss")


@dataclass
class EpochRecord:
    epoch: int
    val_report: MetricsReport
    criterion_value: float
    train_report: Optional[MetricsReport] = None
    mean_l_cls: Optional[float] = None
    mean_l_exp: Optional[float] = None
    mean_l_total: Optional[float] = None


@dataclass
class ModelCheckpoint:
    """In-memory frozen parameter set selected on validation."""

    state_dict: "OrderedDict[str, torch.Tensor]"
    epoch: int
    criterion_value: float

    def apply_to(self, backend: ClassifierBackend) -> None:
        backend.load_state(self.state_dict)


@dataclass
class TrainingHistory:
    steps: list[StepLog] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def mask_reads(self) -> int:
        return sum(1 for s in self.steps if s.mask_read)

    def to_csv(self, path, classes: Sequence[str] = DEFAULT_CLASSES) -> None:
        import csv

        columns = (
            list(HISTORY_CSV_BASE_COLUMNS)
            + ["accuracy"]
            + [f"sens_{c}" for c in classes]
            + list(HISTORY_CSV_TAIL_COLUMNS)
        )
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for rec in self.epochs:
                if rec.train_report is not None or rec.mean_l_total is not None:
                    row = {"epoch": rec.epoch, "split": "train"}
                    if rec.train_report is not None:
                        row.update(rec.train_report.csv_fields(classes))
                    row["l_cls"] = format_float(rec.mean_l_cls)
                    row["l_exp"] = format_float(rec.mean_l_exp)
                    row["l_total"] = format_float(rec.mean_l_total)
                    writer.writerow(row)
                row = {"epoch": rec.epoch, "split": "val"}
                row.update(rec.val_report.csv_fields(classes))
                writer.writerow(row)


@dataclass
class SliceResult:
    slice_index: int
    checkpoint: ModelCheckpoint
    report: MetricsReport
    history: TrainingHistory


def _effective_lambda(feedback: FeedbackRecord, lam: float) -> float:
    if feedback.corrected_label is None and feedback.corrected_mask is None:
        raise InputError("feedback carries neither a label nor a mask")
    if feedback.corrected_label is None:
        return 1.0
    if feedback.corrected_mask is None:
        return 0.0
    return lam


def _sample_loss(
    backend: ClassifierBackend,
    snapshot,
    sample: ImageSample,
    feedback: FeedbackRecord,
    config: TrainingConfig,
    classes: Sequence[str],
    step_index: int,
) -> StepLog:
    """Build the differentiable combined loss for one sample.

    Returns a StepLog whose ``loss.l_total`` still carries the graph; the
    caller reduces over the batch and applies the update.
    """
    lam_eff = _effective_lambda(feedback, config.lam)
    x = backend.to_input_tensor(sample.image)
    logits, acts = backend.forward_tensors(x)
    probs = torch.softmax(logits[0], dim=0)
    predicted = int(probs.detach().argmax())

    if feedback.corrected_label is not None:
        if feedback.corrected_label not in classes:
            raise InputError(f"feedback label {feedback.corrected_label!r} not in {list(classes)}")
        target_index = classes.index(feedback.corrected_label)
        l_cls = classification_loss(probs, target_index)
    else:
        l_cls = 0.0

    l_exp = 0.0
    jaccard = None
    degenerate = False
    mask_read = False
    if lam_eff > 0.0:
        explain_class = (
            target_index if feedback.corrected_label is not None else snapshot.predict(sample.image)
        )
        grad = snapshot.class_score_gradient(sample.image, explain_class)
        weights = channel_weights(grad, class_index=explain_class)
        nsal = normalize(saliency(acts[0], weights))
        mask_read = True
        truth = align_resolution(feedback.corrected_mask, nsal.resolution)
        if nsal.degenerate:
            l_exp = torch.tensor(DEGENERATE_EXPLANATION_PENALTY, dtype=torch.float64)
            degenerate = True
            log.debug("sample %s: degenerate all-zero saliency, fixed penalty applied", sample.id)
        else:
            soft = soft_threshold(nsal, config.threshold, config.temperature)
            l_exp = explanation_loss(soft, truth)
        jaccard = jaccard_index(hard_threshold(nsal, config.threshold), truth)

    breakdown = combined_loss(l_cls, l_exp, lam_eff)
    return StepLog(
        step=step_index,
        sample_id=sample.id,
        loss=breakdown,
        lambda_effective=lam_eff,
        predicted_class=classes[predicted],
        jaccard=jaccard,
        degenerate=degenerate,
        mask_read=mask_read,
    )


def _apply_update(backend: ClassifierBackend, total: torch.Tensor, config: TrainingConfig, optimizer) -> None:
    if not np.isfinite(float(total.detach())):
        backend.module.zero_grad(set_to_none=True)
        raise NumericError("non-finite loss; step aborted without update")
    backend.module.zero_grad(set_to_none=True)
    if not total.requires_grad:
        # Every sample in the batch hit the fixed degenerate penalty: the
        # loss is a constant, the gradient is zero, the step is a no-op.
        backend.training_step += 1
        return
    total.backward()
    params = [p for p in backend.module.parameters() if p.grad is not None]
    if config.clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
    if optimizer is not None:
        optimizer.step()
    else:
        with torch.no_grad():
            for p in params:
                p -= config.learning_rate * p.grad
    backend.module.zero_grad(set_to_none=True)
    backend.training_step += 1


def _finetune_batch(
    backend: ClassifierBackend,
    batch: Sequence[tuple[ImageSample, FeedbackRecord]],
    config: TrainingConfig,
    classes: Sequence[str],
    step_index: int,
    optimizer=None,
) -> list[StepLog]:
    """One update over a batch: a single snapshot serves every sample in it."""
    needs_snapshot = any(_effective_lambda(fb, config.lam) > 0.0 for _, fb in batch)
    snapshot = backend.snapshot() if needs_snapshot else None
    logs = []
    totals = []
    for offset, (sample, feedback) in enumerate(batch):
        entry = _sample_loss(
            backend, snapshot, sample, feedback, config, classes, step_index + offset
        )
        logs.append(entry)
        totals.append(entry.loss.l_total)
    mean_total = sum(totals) / len(totals)
    _apply_update(backend, mean_total, config, optimizer)
    for entry in logs:
        entry.loss = entry.loss.as_floats()
    return logs


def finetune_step(
    backend: ClassifierBackend,
    sample: ImageSample,
    feedback: FeedbackRecord,
    config: TrainingConfig,
    classes: Sequence[str] = DEFAULT_CLASSES,
    optimizer=None,
) -> StepLog:
    """One snapshot, two forward passes, one gradient-descent update."""
    return _finetune_batch(backend, [(sample, feedback)], config, classes, backend.training_step, optimizer)[0]


def _criterion_value(config: TrainingConfig, report: MetricsReport) -> float:
    mode = config.selection_criterion
    if mode == "composite":
        mode = "val_avg_jaccard" if config.lam > 0 else "val_accuracy"
    if mode == "val_avg_jaccard":
        if report.avg_jaccard is None:
            log.warning("no masks in validation set; selection falls back to accuracy")
            return report.accuracy
        return report.avg_jaccard
    return report.accuracy


def _check_disjoint(feedback_set, validation_set, allow_duplicate_leakage: bool) -> None:
    """Overlap is judged on original ids, so a duplicate counts as its source.

    ``allow_duplicate_leakage`` downgrades duplicate-vs-duplicate overlap to
    a warning; the upsample-before-split order needs this, since copies of
    one original can land on both sides. Identical instance ids on both
    sides always raise.
    """
    exact = {s.id for s, _ in feedback_set} & {s.id for s in validation_set}
    if exact:
        raise InputError(f"samples appear in both feedback and validation: {sorted(exact)[:5]}")
    feedback_ids = {s.effective_id for s, _ in feedback_set}
    val_ids = {s.effective_id for s in validation_set}
    overlap = feedback_ids & val_ids
    if not overlap:
        return
    if allow_duplicate_leakage:
        log.warning(
            "duplicate leakage: %d originals have copies on both sides of "
            "the feedback/validation boundary", len(overlap)
        )
        return
    raise InputError(
        f"feedback and validation sets overlap on original ids {sorted(overlap)[:5]}"
    )


def finetune(
    backend: ClassifierBackend,
    feedback_set: Sequence[tuple[ImageSample, FeedbackRecord]],
    validation_set: Sequence[ImageSample],
    config: TrainingConfig,
    classes: Sequence[str] = DEFAULT_CLASSES,
    allow_duplicate_leakage: bool = False,
) -> tuple[ModelCheckpoint, TrainingHistory]:
    """Epoch loop over per-sample steps with validation-based selection.

    Every epoch ends with a validation evaluation; the checkpoint with the
    best selection criterion (ties keep the earliest, including the
    untouched starting model as epoch 0) is returned. The live backend is
    left at its final-epoch state; apply the checkpoint to restore the best.
    """
    if not feedback_set:
        raise InputError("feedback set is empty")
    _check_disjoint(feedback_set, validation_set, allow_duplicate_leakage)

    history = TrainingHistory()
    val0 = evaluate(backend, validation_set, config.threshold, classes)
    best_value = _criterion_value(config, val0)
    best = ModelCheckpoint(backend.state_clone(), epoch=0, criterion_value=best_value)
    history.epochs.append(EpochRecord(epoch=0, val_report=val0, criterion_value=best_value))

    optimizer = None
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(backend.module.parameters(), lr=config.learning_rate)

    rng = np.random.default_rng(config.seed)
    pairs = list(feedback_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs)) if config.shuffle else np.arange(len(pairs))
        epoch_logs: list[StepLog] = []
        for at in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[at : at + config.batch_size]]
            epoch_logs.extend(
                _finetune_batch(
                    backend, batch, config, classes, backend.training_step, optimizer
                )
            )
        history.steps.extend(epoch_logs)

        confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for entry, (sample, feedback) in zip(
            epoch_logs, (pairs[i] for i in order)
        ):
            if feedback.corrected_label is not None:
                confusion[
                    classes.index(feedback.corrected_label),
                    classes.index(entry.predicted_class),
                ] += 1
        jaccards = [e.jaccard for e in epoch_logs if e.jaccard is not None]
        train_report = (
            report_from_counts(confusion, classes, jaccards, config.threshold)
            if confusion.sum() > 0
            else None
        )

        val_report = evaluate(backend, validation_set, config.threshold, classes)
        value = _criterion_value(config, val_report)
        history.epochs.append(
            EpochRecord(
                epoch=epoch,
                val_report=val_report,
                criterion_value=value,
                train_report=train_report,
                mean_l_cls=float(np.mean([e.loss.l_cls for e in epoch_logs])),
                mean_l_exp=float(np.mean([e.loss.l_exp for e in epoch_logs])),
                mean_l_total=float(np.mean([e.loss.l_total for e in epoch_logs])),
            )
        )
        if value > best_value:
            best_value = value
            best = ModelCheckpoint(backend.state_clone(), epoch=epoch, criterion_value=value)
    history.best_epoch = best.epoch
    return best, history


def sliced_finetune(
    backend: ClassifierBackend,
    slices: Sequence[Sequence[tuple[ImageSample, FeedbackRecord]]],
    validation_set: Sequence[ImageSample],
    config: TrainingConfig,
    classes: Sequence[str] = DEFAULT_CLASSES,
    test_set: Sequence[ImageSample] | None = None,
    allow_duplicate_leakage: bool = False,
) -> list[SliceResult]:
    """Sequential fine-tuning over disjoint feedback slices.

    Each slice starts from the previous slice's best checkpoint; after
    selection the model is evaluated on the test set (validation set when
    none is given) and the report appended. Earlier slices are never
    revisited.
    """
    # Disjointness is per instance: an upsampled pool legitimately spreads
    # duplicates of one original across slices, but no instance repeats.
    seen: set[str] = set()
    for chunk in slices:
        ids = {s.id for s, _ in chunk}
        if ids & seen:
            raise InputError("slices are not pairwise disjoint")
        seen.update(ids)

    eval_set = test_set if test_set is not None else validation_set
    results: list[SliceResult] = []
    for index, chunk in enumerate(slices):
        if not chunk:
            log.warning("slice %d is empty, skipped", index)
            continue
        checkpoint, history = finetune(
            backend, chunk, validation_set, config, classes, allow_duplicate_leakage
        )
        checkpoint.apply_to(backend)
        report = evaluate(backend, eval_set, config.threshold, classes)
        results.append(
            SliceResult(slice_index=index, checkpoint=checkpoint, report=report, history=history)
        )
    return results
