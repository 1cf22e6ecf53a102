"""Command-line driver: simulate, estimate-nl, train-dnn, evaluate, compare.

Options resolve as built-in defaults < --config JSON < explicit flags.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from dataio import load_dataset, load_model, save_dataset, save_model, write_json
from dataset import split_dataset
from errors import DatasetValidationError, WorklocError
from models import FeatureSpec, RunConfig, SplitInfo
from nested_logit import NestedLogitModel, estimate_nl, nl_log_likelihood
from neural_choice import train
from report import build_report, estimation_table, history_table, training_summary_table, write_table
from synthgen import OracleModel, simulate_dataset

logger = logging.getLogger("workloc.cli")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 4

DEFAULT_NAMES = {"estimate-nl": "DCM", "car": "DNN-Car", "all": "DNN-All"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option overrides (keys of the run configuration)")
    common.add_argument("--seed", type=int, help="Unsigned 64-bit seed")
    common.add_argument("--log-level", help="Logging level (default from WORKLOC_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(prog="workloc", description="Workplace location choice models")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="Generate a synthetic dataset")
    simulate.add_argument("--out", required=True, help="Output directory for the dataset files")

    estimate = sub.add_parser("estimate-nl", parents=[common], help="Estimate the nested logit model")
    estimate.add_argument("--data", required=True, help="Dataset directory")
    estimate.add_argument("--out", required=True, help="Model JSON path")
    estimate.add_argument("--split", type=float, help="Training fraction (default 0.75)")
    estimate.add_argument("--name", help="Model name used in reports")

    train_dnn = sub.add_parser("train-dnn", parents=[common], help="Train the neural choice model")
    train_dnn.add_argument("--data", required=True, help="Dataset directory")
    train_dnn.add_argument("--out", required=True, help="Model JSON path")
    train_dnn.add_argument("--mode", choices=["car", "all"], help="Input features (default car)")
    train_dnn.add_argument("--layers", help="Comma-separated hidden layer sizes, e.g. 100,150")
    train_dnn.add_argument("--lr", type=float, help="Adam learning rate")
    train_dnn.add_argument("--epochs", type=int, help="Training epochs")
    train_dnn.add_argument("--batch", type=int, help="Mini-batch size")
    train_dnn.add_argument("--weight-decay", type=float, help="L2 penalty on layer weights (default 0)")
    train_dnn.add_argument("--split", type=float, help="Training fraction (default 0.75)")
    train_dnn.add_argument("--name", help="Model name used in reports")

    for name, help_text in (("evaluate", "Evaluate one model"), ("compare", "Compare several models")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", required=True, help="Dataset directory")
        p.add_argument("--out", required=True, help="Report directory")
        if name == "evaluate":
            p.add_argument("--model", dest="models", nargs=1, required=True, help="Model JSON path")
        else:
            p.add_argument("--models", nargs="+", required=True, help="Model JSON paths (at least 2)")
        p.add_argument("--split", type=float, help="Training fraction (default 0.75)")
        p.add_argument("--draws", type=int, help="Sampled workplaces per individual (default 100)")
        p.add_argument("--timestamps", action="store_true", help="Record the creation time in the manifest")
    return parser


def _read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError as e:
        raise DatasetValidationError(f"{path}: file not found") from e
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"{path}, line {e.lineno}: {e.msg}") from e
    if not isinstance(payload, dict):
        raise DatasetValidationError(f"{path}: expected a JSON object")
    return payload


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the --config document and explicit flags into one RunConfig."""
    values: Dict[str, Any] = {}
    if args.config:
        values.update(_read_config_file(args.config))
    values["command"] = args.command
    values["config_path"] = args.config
    values["out"] = args.out
    values["data_dir"] = getattr(args, "data", None)
    values["model_paths"] = list(getattr(args, "models", None) or [])

    for flag in ("split", "mode", "draws"):
        value = getattr(args, flag, None)
        if value is not None:
            values[flag] = value
    if getattr(args, "timestamps", False):
        values["timestamps"] = True

    train_values = dict(values.get("train") or {})
    train_flags = (
        ("lr", "learning_rate"), ("epochs", "epochs"), ("batch", "batch_size"), ("weight_decay", "weight_decay"),
    )
    for flag, key in train_flags:
        value = getattr(args, flag, None)
        if value is not None:
            train_values[key] = value
    if getattr(args, "layers", None):
        try:
            train_values["hidden_sizes"] = [int(v) for v in args.layers.split(",")]
        except ValueError as e:
            raise DatasetValidationError(f"--layers must be comma-separated integers, got {args.layers!r}") from e

    if args.seed is not None:
        values["seed"] = args.seed
        train_values["seed"] = args.seed
        values["simulation"] = {**(values.get("simulation") or {}), "seed": args.seed}
    values["train"] = train_values

    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        source = args.config or "command line"
        raise DatasetValidationError(f"{source}: invalid configuration: {e}") from e


def _split(config: RunConfig) -> SplitInfo:
    return SplitInfo(fraction=config.split, seed=config.seed)


def cmd_simulate(config: RunConfig) -> int:
    out_dir = Path(config.out)
    simulation = config.simulation
    seed = simulation.seed if simulation.seed is not None else config.seed
    dataset = simulate_dataset(simulation, seed)
    paths = save_dataset(dataset, out_dir)

    oracle_path = out_dir / "oracle.json"
    save_model(OracleModel(simulation.oracle, dataset_fingerprint=dataset.fingerprint), oracle_path)
    provenance = {
        "seed": seed,
        "simulation": simulation.model_dump(mode="json"),
        "dataset_fingerprint": dataset.fingerprint,
        "files": [p.name for p in paths] + [oracle_path.name],
    }
    write_json(provenance, out_dir / "provenance.json")
    logger.info(f"Wrote dataset to {out_dir}")
    return EXIT_OK


def cmd_estimate_nl(config: RunConfig, name: Optional[str] = None) -> int:
    dataset = load_dataset(config.data_dir)
    split = _split(config)
    train_data, val_data = split_dataset(dataset, split.fraction, split.seed)
    result = estimate_nl(train_data, settings=config.lbfgs)
    update: Dict[str, Any] = {"split": split, "n_validation": val_data.n_individuals}
    if val_data.n_individuals:
        update["ll_validation"] = nl_log_likelihood(result.params, val_data)
    result = result.model_copy(update=update)

    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(NestedLogitModel(result.params, result=result, name=name or DEFAULT_NAMES["estimate-nl"]), out)
    write_table(estimation_table(result), out.with_suffix(".csv"))
    if not result.converged:
        logger.warning(f"Estimation did not converge; results written to {out} and flagged")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_train_dnn(config: RunConfig, name: Optional[str] = None) -> int:
    dataset = load_dataset(config.data_dir)
    split = _split(config)
    train_data, val_data = split_dataset(dataset, split.fraction, split.seed)
    feature_spec = FeatureSpec.for_mode(config.mode)
    model, history = train(train_data, val_data, feature_spec, config.train)
    model = replace(model, name=name or DEFAULT_NAMES[config.mode], split=split)
    logger.info(f"Training finished after {history.final_epoch} epochs in {history.wall_time_s:.1f}s")

    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    stem = out.with_suffix("")
    write_table(history_table(history), Path(f"{stem}.history.csv"))
    write_table(
        training_summary_table(feature_spec.input_dim, config.train, history, train_data, val_data),
        Path(f"{stem}.summary.csv"),
    )
    return EXIT_OK


def _cmd_report(config: RunConfig) -> int:
    # models and data load before anything is written
    models = [load_model(p) for p in config.model_paths]
    dataset = load_dataset(config.data_dir)
    split = _split(config)
    train_data, val_data = split_dataset(dataset, split.fraction, split.seed)
    build_report(
        models, train_data, val_data, Path(config.out), split,
        draws=config.draws, seed=config.seed, model_paths=config.model_paths, timestamps=config.timestamps,
    )
    return EXIT_OK


def cmd_evaluate(config: RunConfig) -> int:
    if len(config.model_paths) != 1:
        raise DatasetValidationError("evaluate takes exactly one model")
    return _cmd_report(config)


def cmd_compare(config: RunConfig) -> int:
    if len(config.model_paths) < 2:
        raise DatasetValidationError("compare needs at least 2 models")
    return _cmd_report(config)


COMMANDS: Dict[str, Callable[..., int]] = {
    "simulate": cmd_simulate,
    "estimate-nl": cmd_estimate_nl,
    "train-dnn": cmd_train_dnn,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def configure_logging(level: Optional[str]) -> None:
    level_name = (level or os.getenv("WORKLOC_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = resolve_config(args)
        handler = COMMANDS[config.command]
        if config.command in ("estimate-nl", "train-dnn"):
            return handler(config, name=args.name)
        return handler(config)
    except WorklocError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
