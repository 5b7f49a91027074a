"""Command-line front end: experiment runs, plot rendering, the feedback service.

`saliencytune run` wires dataset preparation, pretraining and per-loss-mode
fine-tuning into one reproducible run; `plots` re-renders curve PNGs from an
existing curves.csv; `serve` starts the HTTP feedback service; `synth`
materializes the synthetic marker dataset on disk.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, SaliencyTuneError
from .experiment import ExperimentConfig, emit_plots, run_experiment
from .trainer import TrainingConfig

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saliencytune",
        description="Fine-tune image classifiers on label and explanation feedback.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full or sliced experiment")
    run.add_argument("--config", help="JSON file mirroring the experiment config")
    run.add_argument("--dataset", help="dataset directory (labels.csv + images/ + masks/)")
    run.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic samples")
    run.add_argument("--mode", choices=["full", "sliced"])
    run.add_argument("--slices", type=int, metavar="K")
    run.add_argument("--losses", help="comma list from {cls,exp,combined}")
    run.add_argument("--lambda", dest="lam", type=float, help="combined-loss balance in [0,1]")
    run.add_argument("--lr", type=float, help="learning rate")
    run.add_argument("--threshold", type=float, help="mask threshold in [0,1]")
    run.add_argument("--epochs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    run.add_argument("--fidelity-split", action="store_true", default=None)
    run.add_argument("--out", help="output directory (fallback: $SALIENCYTUNE_OUT, then ./out)")

    plots = sub.add_parser("plots", help="render PNG plots from a curves.csv")
    plots.add_argument("curves", help="path to curves.csv")
    plots.add_argument("--out", help="directory for the PNGs (default: beside the CSV)")

    serve = sub.add_parser("serve", help="start the HTTP feedback service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=None, help="fallback: $SALIENCYTUNE_PORT, then 8000")
    serve.add_argument(
        "--data-dir", default=None, help="fallback: $SALIENCYTUNE_DATA_DIR, then ./service-data"
    )

    synth = sub.add_parser("synth", help="write the synthetic marker dataset to disk")
    synth.add_argument("--n", type=int, default=600)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="target dataset directory")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    payload: dict = {}
    if args.config:
        with open(args.config) as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")

    training = dict(payload.get("training", {}))
    for key, value in (
        ("lambda", args.lam),
        ("learning_rate", args.lr),
        ("threshold", args.threshold),
        ("epochs", args.epochs),
        ("seed", args.seed),
    ):
        if value is not None:
            training[key] = value
    payload["training"] = training

    for key, value in (
        ("dataset_path", args.dataset),
        ("synthetic_n", args.synthetic),
        ("mode", args.mode),
        ("slices", args.slices),
        ("losses", args.losses),
        ("pretrain_epochs", args.pretrain_epochs),
        ("fidelity_split", args.fidelity_split),
    ):
        if value is not None:
            payload[key] = value

    if args.dataset is not None and args.synthetic is None:
        payload["synthetic_n"] = None
    if args.synthetic is not None and args.dataset is None:
        payload["dataset_path"] = None

    if args.out:
        payload["out_dir"] = args.out
    elif "out_dir" not in payload:
        payload["out_dir"] = os.environ.get("SALIENCYTUNE_OUT", "out")

    if isinstance(payload.get("losses"), str):
        payload["losses"] = tuple(p for p in payload["losses"].split(",") if p)
    return ExperimentConfig.from_json(payload)


def _cmd_run(args) -> int:
    try:
        config = _config_from_args(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    return run_experiment(config)


def _cmd_plots(args) -> int:
    written = emit_plots(args.curves, args.out)
    for name in written:
        print(name)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    port = args.port if args.port is not None else int(os.environ.get("SALIENCYTUNE_PORT", "8000"))
    data_dir = args.data_dir or os.environ.get("SALIENCYTUNE_DATA_DIR", "service-data")
    app = create_app(data_dir)
    uvicorn.run(app, host=args.host, port=port)
    return 0


def _cmd_synth(args) -> int:
    from .data import export_dataset, generate_synthetic_dataset

    samples = generate_synthetic_dataset(args.n, seed=args.seed)
    export_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "plots": _cmd_plots,
        "serve": _cmd_serve,
        "synth": _cmd_synth,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except SaliencyTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
