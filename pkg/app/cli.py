"""Command surface: train, search, eval, ablate-lr and analyze.

Diagnostics go to stderr through logging; stdout only carries JSON
summaries and artifact paths. Exit codes:

    0  success
    1  every seed of the run failed
    2  invalid configuration
    3  dataset missing or unreadable
    4  checkpoint does not fit the data or cannot be read
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from adapters.data_adapter import normalize
from domain.config import CCL_LR_GRID, TrainConfig
from domain.entities import Dataset, NormStats
from domain.exceptions import (
    ArchitectureMismatchError,
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    DatasetLengthError,
    DatasetMissingError,
    DimensionError,
    LabelError,
)
from domain.layers import weight_of
from domain.network import DualNetwork
from domain.tensor import Rng
from infrastructure.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from infrastructure.datasets import load_dataset
from infrastructure.metrics_repository import MetricsRepository
from infrastructure.settings import Settings, build_train_config, load_config_file
from use_cases.analysis import (
    cka_grid,
    collect_trace,
    count_flops,
    export_embeddings,
    weight_alignment,
    write_cka_json,
)
from use_cases.training import (
    build_network,
    evaluate,
    run_ablation_grid,
    run_experiment,
    run_search,
    summarize_results,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4

ANALYSES = ("cka", "weight_alignment", "flops", "embeddings")


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """``--key value`` (or ``--key=value``) pairs; dashes in keys become underscores"""
    overrides: Dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise ConfigError(f"override '{token}' has no value")
        overrides[key.replace("-", "_")] = value
    return overrides


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _data_root(explicit: Optional[str], settings: Settings) -> str:
    root = explicit or settings.data_root
    if not root:
        raise DatasetMissingError("no data root: pass --data_root or set CCL_DATA_ROOT")
    return root


def _load_splits(config: TrainConfig, settings: Settings):
    root = _data_root(config.data_root, settings)
    return load_dataset(config.dataset, "train", root), load_dataset(config.dataset, "test", root)


def _check_architecture(config: TrainConfig, train_ds: Dataset) -> None:
    try:
        build_network(config, train_ds.sample_shape, train_ds.num_classes, Rng(0))
    except DimensionError as e:
        raise ConfigError(f"arch {config.arch} does not fit {config.dataset}: {e}") from e


def _build_config(config_path: Optional[str], overrides: Dict[str, str], settings: Settings) -> TrainConfig:
    file_values = load_config_file(config_path) if config_path else {}
    return build_train_config(file_values, overrides, settings)


def _checkpoint_hook(repo: MetricsRepository):
    def hook(seed: int, tag: str, net: DualNetwork, extra: dict) -> None:
        save_checkpoint(net, repo.checkpoint_path(seed, tag), extra)
    return hook


def cmd_train(config_path: Optional[str], overrides: Dict[str, str], settings: Optional[Settings] = None) -> int:
    settings = settings or Settings()
    config = _build_config(config_path, overrides, settings)
    train_ds, test_ds = _load_splits(config, settings)
    _check_architecture(config, train_ds)

    repo = MetricsRepository(config.out_dir, config.run_name)
    results = run_experiment(
        config, None, train_ds, test_ds,
        sink_factory=lambda cfg, seed: repo.open_sink(seed),
        checkpoint_hook=_checkpoint_hook(repo),
    )
    for result in results:
        repo.save_run_result(result)
    summary = summarize_results(results)
    summary_path = repo.save_summary(summary, results)
    _emit({
        "run_dir": str(repo.run_dir),
        "summary": str(summary_path),
        "metrics": [str(repo.metrics_path(r.seed)) for r in results if not r.failed],
        "mean_test_accuracy": summary["mean"],
        "std_test_accuracy": summary["std"],
        "failed_seeds": summary["failed_seeds"],
    })
    return EXIT_RUN_FAILED if summary["completed"] == 0 else EXIT_OK


def cmd_search(config_path: Optional[str], overrides: Dict[str, str], settings: Optional[Settings] = None) -> int:
    settings = settings or Settings()
    config = _build_config(config_path, overrides, settings)
    train_ds, test_ds = _load_splits(config, settings)
    _check_architecture(config, train_ds)

    repo = MetricsRepository(config.out_dir, f"{config.run_name}_search")
    outcome = run_search(config, train_ds, test_ds)
    best_summary = summarize_results(outcome.best_results) if outcome.best else None
    paths = repo.save_search(outcome.table, outcome.best, best_summary)
    _emit({
        "search": [str(p) for p in paths],
        "combinations": len(outcome.table),
        "best": outcome.best,
        "best_test_accuracy": best_summary["mean"] if best_summary else None,
    })
    return EXIT_OK if outcome.best else EXIT_RUN_FAILED


def cmd_ablate_lr(config_path: Optional[str], fw_grid: List[float], bw_grid: List[float],
                  overrides: Dict[str, str], settings: Optional[Settings] = None) -> int:
    settings = settings or Settings()
    if not fw_grid or not bw_grid:
        raise ConfigError("ablation grids must be non-empty")
    if any(v < 0 for v in [*fw_grid, *bw_grid]):
        raise ConfigError("learning rates must be non-negative")
    config = _build_config(config_path, overrides, settings)
    train_ds, test_ds = _load_splits(config, settings)
    _check_architecture(config, train_ds)

    repo = MetricsRepository(config.out_dir, f"{config.run_name}_ablation")
    matrix = run_ablation_grid(config, fw_grid, bw_grid, train_ds, test_ds)
    paths = repo.save_ablation(matrix)
    _emit({"matrix": [str(p) for p in paths], "shape": list(matrix.shape)})
    return EXIT_RUN_FAILED if matrix.isna().all().all() else EXIT_OK


def _prepared_eval_data(net: DualNetwork, extra: dict, dataset: Optional[str], split: str,
                        data_root: Optional[str], settings: Settings) -> Dataset:
    name = dataset or extra.get("config", {}).get("dataset")
    if not name:
        raise ConfigError("dataset unknown: pass --dataset")
    ds = load_dataset(name, split, _data_root(data_root, settings))
    check_compatible(net, ds.sample_shape, ds.num_classes)
    if "norm_mean" in extra:
        ds = normalize(ds, NormStats(extra["norm_mean"], extra["norm_std"]))
    dtype = weight_of(net.forward_layers[0]).dtype
    return Dataset(ds.images.astype(dtype), ds.labels, ds.num_classes, ds.split_tag, ds.name)


def cmd_eval(checkpoint: str, dataset: Optional[str], split: str = "test", data_root: Optional[str] = None,
             settings: Optional[Settings] = None) -> int:
    settings = settings or Settings()
    net, extra = load_checkpoint(checkpoint)
    ds = _prepared_eval_data(net, extra, dataset, split, data_root, settings)
    accuracy, ce = evaluate(net, ds)
    _emit({"checkpoint": str(checkpoint), "split": split, "samples": len(ds),
           "accuracy": accuracy, "cross_entropy": ce})
    return EXIT_OK


def cmd_analyze(checkpoint: str, dataset: Optional[str], which: str, out: Optional[str] = None,
                samples: Optional[int] = 1000, layers: Optional[List[int]] = None,
                trainers: Sequence[str] = ("ccl", "bp"), batch_size: int = 32,
                data_root: Optional[str] = None, settings: Optional[Settings] = None) -> int:
    settings = settings or Settings()
    if which not in ANALYSES:
        raise ConfigError(f"unknown analysis '{which}', expected one of {', '.join(ANALYSES)}")
    net, extra = load_checkpoint(checkpoint)
    out_dir = Path(out) if out else Path(checkpoint).parent / "analysis"
    stem = Path(checkpoint).name.replace(".ckpt", "")

    if which == "flops":
        reports = {kind: count_flops(net, kind, batch_size).to_dict() for kind in trainers}
        payload = {"batch_size": batch_size, "per_sample": reports}
        if "ccl" in reports and "bp" in reports:
            payload["ccl_bp_ratio"] = reports["ccl"]["total"] / reports["bp"]["total"]
        path = out_dir / f"{stem}.flops.json"
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))
        _emit({"flops": str(path), **({"ccl_bp_ratio": payload["ccl_bp_ratio"]} if "ccl_bp_ratio" in payload else {})})
        return EXIT_OK

    if which == "weight_alignment":
        cosines = weight_alignment(net)
        path = out_dir / f"{stem}.weight_alignment.json"
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"layers": list(range(1, net.num_layers + 1)), "cosine": cosines}, indent=2))
        _emit({"weight_alignment": str(path)})
        return EXIT_OK

    ds = _prepared_eval_data(net, extra, dataset, "test", data_root, settings)
    trace = collect_trace(net, ds, samples, weight_of(net.forward_layers[0]).dtype)
    if which == "cka":
        path = write_cka_json(cka_grid(trace, extra.get("step", 0)), out_dir / f"{stem}.cka.json")
        _emit({"cka": str(path)})
        return EXIT_OK

    indices = layers if layers else [net.num_layers - 1]
    path = export_embeddings(trace, indices, out_dir / f"{stem}.embeddings.csv")
    _emit({"embeddings": str(path)})
    return EXIT_OK


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: '{text}'") from e


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccl", description="Counter-current learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", allow_abbrev=False,
                           help="train one configuration over its seeds; extra --key value pairs override the config")
    train.add_argument("--config", help="key = value config file")

    search = sub.add_parser("search", allow_abbrev=False,
                            help="grid search over the trainer's search space, selected by validation accuracy")
    search.add_argument("--config", help="key = value config file")

    ablate = sub.add_parser("ablate-lr", allow_abbrev=False, help="forward x feedback learning-rate grid")
    ablate.add_argument("--config", help="key = value config file")
    ablate.add_argument("--fw-grid", type=_float_list, default=[0.0, *CCL_LR_GRID],
                        help="comma-separated forward learning rates")
    ablate.add_argument("--bw-grid", type=_float_list, default=[0.0, *CCL_LR_GRID],
                        help="comma-separated feedback learning rates")

    ev = sub.add_parser("eval", help="accuracy and cross-entropy of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--data-root")

    analyze = sub.add_parser("analyze", help="CKA, weight alignment, FLOPs or embeddings of a checkpoint")
    analyze.add_argument("which", choices=ANALYSES)
    analyze.add_argument("--checkpoint", required=True)
    analyze.add_argument("--dataset")
    analyze.add_argument("--data-root")
    analyze.add_argument("--out", help="output directory (default: next to the checkpoint)")
    analyze.add_argument("--samples", type=int, default=1000, help="evaluation samples for cka/embeddings")
    analyze.add_argument("--full-test-set", action="store_true", help="use every test sample for cka/embeddings")
    analyze.add_argument("--layers", type=_int_list, help="layer indices for embeddings")
    analyze.add_argument("--trainers", default="ccl,bp", help="trainer kinds for flops")
    analyze.add_argument("--batch-size", type=int, default=32)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    settings = Settings()
    try:
        if args.command in ("train", "search", "ablate-lr"):
            overrides = parse_overrides(extra)
            if args.command == "search":
                return cmd_search(args.config, overrides, settings)
            if args.command == "train":
                return cmd_train(args.config, overrides, settings)
            return cmd_ablate_lr(args.config, args.fw_grid, args.bw_grid, overrides, settings)
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.split, args.data_root, settings)
        return cmd_analyze(
            args.checkpoint, args.dataset, args.which, args.out,
            None if args.full_test_set else args.samples, args.layers,
            [t.strip() for t in args.trainers.split(",") if t.strip()], args.batch_size,
            args.data_root, settings,
        )
    except ConfigError as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except (DatasetMissingError, DatasetFormatError, DatasetLengthError, LabelError) as e:
        logger.error(f"dataset problem: {e}")
        return EXIT_DATA
    except (ArchitectureMismatchError, CheckpointError) as e:
        logger.error(f"checkpoint problem: {e}")
        return EXIT_MISMATCH
