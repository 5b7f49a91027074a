"""Config-driven experiment runs: full-pool ablation and sliced simulation.

A run pretrains one shared baseline on labels only, then fine-tunes an
independent copy per requested loss mode (``cls`` lambda 0, ``exp`` lambda 1,
``combined`` the configured lambda) and writes diffable CSV tables plus
curve plots. All artifact bytes are deterministic under fixed seeds;
timestamps live only in the sidecar manifest.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__ as package_version
from .backend import ClassifierBackend, build_reference_cnn
from .data import (
    DEFAULT_CLASSES,
    FeedbackRecord,
    feedback_pairs,
    generate_synthetic_dataset,
    load_dataset,
    make_slices,
    prepare_pools,
)
from .errors import ConfigError, DataLoadError, InputError
from .metrics import MetricsReport, evaluate, format_float
from .trainer import TrainingConfig, finetune, sliced_finetune

log = logging.getLogger(__name__)

LOSS_MODES = ("cls", "exp", "combined")
RESULTS_FILE = "results.csv"
CURVES_FILE = "curves.csv"
MANIFEST_FILE = "manifest.json"
PLOT_FILES = ("accuracy_vs_slice.png", "jaccard_vs_slice.png")


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs; mirrors the CLI flags."""

    dataset_path: Optional[str] = None
    synthetic_n: Optional[int] = 600
    mode: str = "full"  # full | sliced
    losses: tuple[str, ...] = LOSS_MODES
    slices: int = 10
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pretrain_epochs: int = 5
    fidelity_split: bool = False
    out_dir: str = "out"

    def __post_init__(self):
        if isinstance(self.losses, str):
            self.losses = tuple(p for p in self.losses.split(",") if p)
        self.losses = tuple(self.losses)
        if not self.losses:
            raise ConfigError("select at least one loss mode")
        unknown = [m for m in self.losses if m not in LOSS_MODES]
        if unknown:
            raise ConfigError(f"unknown loss modes {unknown}; pick from {list(LOSS_MODES)}")
        if len(set(self.losses)) != len(self.losses):
            raise ConfigError(f"duplicate loss modes in {self.losses}")
        if self.mode not in ("full", "sliced"):
            raise ConfigError(f"mode must be full or sliced, got {self.mode!r}")
        if self.dataset_path is None and self.synthetic_n is None:
            raise ConfigError("need a dataset: --dataset PATH or --synthetic N")
        if self.dataset_path is not None and self.synthetic_n is not None:
            raise ConfigError("give either --dataset or --synthetic, not both")
        if self.slices < 1:
            raise ConfigError(f"slices must be at least 1, got {self.slices}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"pretrain_epochs must be nonnegative, got {self.pretrain_epochs}")

    def to_json(self) -> dict:
        return {
            "dataset_path": self.dataset_path,
            "synthetic_n": self.synthetic_n,
            "mode": self.mode,
            "losses": list(self.losses),
            "slices": self.slices,
            "training": self.training.to_json(),
            "pretrain_epochs": self.pretrain_epochs,
            "fidelity_split": self.fidelity_split,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        if "training" in payload and isinstance(payload["training"], dict):
            payload["training"] = TrainingConfig.from_json(payload["training"])
        if "losses" in payload and payload["losses"] is not None:
            payload["losses"] = tuple(payload["losses"])
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        return cls(**payload)

    def lambda_for(self, loss_mode: str) -> float:
        return {"cls": 0.0, "exp": 1.0}.get(loss_mode, self.training.lam)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """Write atomically: the file is complete or absent, never truncated."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def _metric_columns(classes: Sequence[str]) -> list[str]:
    return (
        ["accuracy"]
        + [f"sens_{c}" for c in classes]
        + ["avg_sensitivity", "avg_jaccard", "jaccard_sd"]
    )


def _result_row(run: str, lam, report: MetricsReport, classes) -> dict:
    row = {"run": run, "lambda": "" if lam is None else format_float(lam)}
    row.update(report.csv_fields(classes))
    row["n_samples"] = report.n_samples
    return row


def _pretrain(backend: ClassifierBackend, pool, validation, config: ExperimentConfig, classes):
    """Label-only warm-up: gives every loss mode the same starting classifier.

    A warm-up is not a model-selection problem, so the final epoch's
    parameters are kept (no early stop on validation).
    """
    if config.pretrain_epochs == 0:
        return
    warmup = replace(
        config.training,
        lam=0.0,
        epochs=config.pretrain_epochs,
        selection_criterion="val_accuracy",
    )
    label_only = [
        (s, FeedbackRecord(sample_id=s.id, corrected_label=s.label, source="simulated"))
        for s in pool
    ]
    finetune(backend, label_only, validation, warmup, classes, config.fidelity_split)


def _load_samples(config: ExperimentConfig):
    if config.dataset_path is not None:
        return load_dataset(config.dataset_path)
    return generate_synthetic_dataset(config.synthetic_n, seed=config.training.seed)


def _run(config: ExperimentConfig) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = list(DEFAULT_CLASSES)
    samples = _load_samples(config)
    pool, validation, test = prepare_pools(
        samples, seed=config.training.seed, fidelity=config.fidelity_split
    )
    log.info("pool %d / val %d / test %d", len(pool), len(validation), len(test))

    in_channels = samples[0].image.shape[2]
    backend = build_reference_cnn(
        num_classes=len(classes), in_channels=in_channels, seed=config.training.seed
    )
    _pretrain(backend, pool, validation, config, classes)
    baseline_report = evaluate(backend, test, config.training.threshold, classes)

    result_rows = [_result_row("baseline", None, baseline_report, classes)]
    curve_rows: list[dict] = []
    artifacts = [RESULTS_FILE]

    if config.mode == "sliced":
        schedule = make_slices(pool, config.slices, seed=config.training.seed)
        by_id = {s.id: s for s in pool}
        slice_pairs = [feedback_pairs([by_id[i] for i in ids]) for ids in schedule.slices]

    for loss_mode in config.losses:
        run_cfg = replace(config.training, lam=config.lambda_for(loss_mode))
        run_backend = backend.clone()
        if config.mode == "full":
            checkpoint, _ = finetune(
                run_backend,
                feedback_pairs(pool),
                validation,
                run_cfg,
                classes,
                config.fidelity_split,
            )
            checkpoint.apply_to(run_backend)
            report = evaluate(run_backend, test, run_cfg.threshold, classes)
        else:
            slice_results = sliced_finetune(
                run_backend,
                slice_pairs,
                validation,
                run_cfg,
                classes,
                test_set=test,
                allow_duplicate_leakage=config.fidelity_split,
            )
            for res in slice_results:
                row = {
                    "run": loss_mode,
                    "lambda": format_float(run_cfg.lam),
                    "slice": res.slice_index,
                }
                row.update(res.report.csv_fields(classes))
                curve_rows.append(row)
            report = slice_results[-1].report
        result_rows.append(_result_row(loss_mode, run_cfg.lam, report, classes))
        log.info("run %s done: %s", loss_mode, report.to_json())

    _write_csv(
        out / RESULTS_FILE,
        ["run", "lambda"] + _metric_columns(classes) + ["n_samples"],
        result_rows,
    )
    if config.mode == "sliced":
        _write_csv(
            out / CURVES_FILE,
            ["run", "lambda", "slice"] + _metric_columns(classes),
            curve_rows,
        )
        artifacts.append(CURVES_FILE)
        artifacts.extend(emit_plots(out / CURVES_FILE, out))

    _write_manifest(out, config, artifacts, len(pool), len(validation), len(test))


def _write_manifest(out: Path, config, artifacts, n_pool, n_val, n_test) -> None:
    import torch

    manifest = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "package_version": package_version,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "config": config.to_json(),
        "split_sizes": {"pool": n_pool, "validation": n_val, "test": n_test},
        "artifacts": sorted(set(artifacts)),
    }
    tmp = out / (MANIFEST_FILE + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, out / MANIFEST_FILE)


def emit_plots(curves_path, out_dir=None) -> list[str]:
    """Render accuracy-vs-slice and Jaccard-vs-slice PNGs, one line per run.

    Returns the written file names ([] for an empty CSV). The series drawn
    are exactly the parsed CSV columns, so a round trip through this parse
    reproduces the plotted values.
    """
    curves_path = Path(curves_path)
    out_dir = Path(out_dir) if out_dir is not None else curves_path.parent
    series = read_curves(curves_path)
    if not series:
        log.warning("no curve rows in %s; no plots emitted", curves_path)
        return []

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for metric, fname, title in (
        ("accuracy", PLOT_FILES[0], "Accuracy per slice"),
        ("avg_jaccard", PLOT_FILES[1], "Avg Jaccard per slice"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for run, points in sorted(series.items()):
            xs = [p["slice"] for p in points]
            ys = [p[metric] for p in points]
            if all(y is None for y in ys):
                continue
            ax.plot(xs, ys, marker="o", label=run)
        ax.set_xlabel("slice")
        ax.set_ylabel(metric)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / fname)
        plt.close(fig)
        written.append(fname)
    return written


def read_curves(curves_path) -> dict[str, list[dict]]:
    """Parse curves.csv into {run: [{slice, accuracy, avg_jaccard}, ...]}."""
    curves_path = Path(curves_path)
    if not curves_path.exists():
        return {}
    series: dict[str, list[dict]] = {}
    with open(curves_path, newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["run"], []).append(
                {
                    "slice": int(row["slice"]),
                    "accuracy": float(row["accuracy"]) if row["accuracy"] else None,
                    "avg_jaccard": float(row["avg_jaccard"]) if row["avg_jaccard"] else None,
                }
            )
    for points in series.values():
        points.sort(key=lambda p: p["slice"])
    return series


def run_experiment(config: ExperimentConfig) -> int:
    """0 on success, 2 on invalid configuration, 3 on dataset failure."""
    try:
        _run(config)
    except (ConfigError, InputError) as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    except DataLoadError as exc:
        log.error("dataset failure: %s", exc)
        return 3
    return 0
