"""Training loops for the four credit-assignment rules.

CCL trains both stacks from layer-local losses on one shared trace. BP runs
the exact reverse chain on the forward stack; FA runs the same chain through
fixed random matrices; DRTP hands every hidden layer a fixed random
projection of the label and never chains. All four share the optimizer, the
batch order of a seed and the evaluation plumbing.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from adapters.data_adapter import (
    augment,
    compute_norm_stats,
    iterate_batches,
    normalize,
    one_hot,
    split_train_val,
    subset,
)
from domain.config import (
    BP_FA_CLIP_GRID,
    BP_FA_LR_GRID,
    CCL_CLIP_GRID,
    CCL_LR_GRID,
    DRTP_LR_GRID,
    DRTP_PROJ_MEAN_GRID,
    DRTP_PROJ_STD_GRID,
    TrainConfig,
)
from domain.entities import CkaMatrix, Dataset, LocalLossReport, MetricsRecord, NormStats, RunResult
from domain.exceptions import CCLError, NonFiniteError, TrainingDivergedError
from domain.layers import init_weights, weight_of
from domain.losses import ccl_local_objective, cross_entropy
from domain.network import ActivationTrace, DualNetwork, build_cnn, build_mlp, forward_pass, run_dual
from domain.optimizer import OptimState, lr_effective, sgd_step
from domain.tensor import Rng, RngStream, Tensor
from use_cases.analysis import cka_grid, collect_trace

logger = logging.getLogger(__name__)

Batch = Tuple[Tensor, Tensor]
ParamGrads = Dict[str, Tensor]
MetricsSink = Callable[[MetricsRecord], None]
CheckpointHook = Callable[[int, str, DualNetwork, dict], None]

EVAL_BATCH = 1000
DRTP_MODES = ("target", "sign")


class TrainerKind(str, Enum):
    CCL = "ccl"
    BP = "bp"
    FA = "fa"
    DRTP = "drtp"


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _named(layer_index: int, grads: Dict[str, Tensor], out: ParamGrads) -> None:
    for name, g in grads.items():
        out[f"{layer_index}.{name}"] = g


def ccl_parameter_grads(net: DualNetwork, trace: ActivationTrace, act_grads) -> Tuple[ParamGrads, ParamGrads]:
    """Layer-local parameter gradients of both stacks.

    U_l only sees its own input a_{l-1} and the loss gradient on a_l; h_{l+1}
    only sees b_{l+1} and the gradient on b_l. Nothing crosses a layer.
    """
    forward: ParamGrads = {}
    for l in range(1, net.num_layers + 1):
        grads, _ = net.forward_layers[l - 1].backward(
            trace.forward_acts[l - 1], act_grads.forward[l], trace.forward_pre[l - 1])
        _named(l, grads, forward)
    feedback: ParamGrads = {}
    for l in range(net.num_layers):
        grads, _ = net.feedback_layers[l].backward(
            trace.feedback_compact[l + 1], act_grads.feedback[l], trace.feedback_pre_compact[l])
        _named(l + 1, grads, feedback)
    return forward, feedback


def bp_gradients(net: DualNetwork, x: Tensor, y: Tensor,
                 feedback_weights: Optional[Sequence[Optional[Tensor]]] = None) -> Tuple[float, ParamGrads]:
    """Cross-entropy and its reverse-mode gradients on the forward stack.

    ``feedback_weights[l - 1]`` replaces U_l when the error is passed down
    through layer l (feedback alignment); None keeps the true weights.
    """
    acts, pres = forward_pass(net, x)
    loss, grad = cross_entropy(acts[-1], y)
    grads: ParamGrads = {}
    for l in range(net.num_layers, 0, -1):
        fb = None if feedback_weights is None else feedback_weights[l - 1]
        layer_grads, grad = net.forward_layers[l - 1].backward(
            acts[l - 1], grad, pres[l - 1], feedback_weight=fb, need_input_grad=l > 1)
        _named(l, layer_grads, grads)
    return loss, grads


def drtp_gradients(net: DualNetwork, projections: Sequence[Tensor], x: Tensor, y: Tensor,
                   mode: str = "target") -> Tuple[float, ParamGrads]:
    """Output layer by cross-entropy; hidden layer l takes -(y P_l) / B (or its sign) as dL/da_l"""
    if mode not in DRTP_MODES:
        raise ValueError(f"unknown DRTP mode '{mode}'")
    acts, pres = forward_pass(net, x)
    loss, grad_logits = cross_entropy(acts[-1], y)
    batch = x.shape[0]
    depth = net.num_layers
    grads: ParamGrads = {}
    for l in range(1, depth):
        signal = y @ projections[l - 1]
        if mode == "sign":
            signal = np.sign(signal)
        grad_a = (-signal / batch).reshape(acts[l].shape).astype(acts[l].dtype, copy=False)
        layer_grads, _ = net.forward_layers[l - 1].backward(acts[l - 1], grad_a, pres[l - 1])
        _named(l, layer_grads, grads)
    layer_grads, _ = net.forward_layers[depth - 1].backward(acts[depth - 1], grad_logits, pres[depth - 1])
    _named(depth, layer_grads, grads)
    return loss, grads


def make_feedback_matrices(net: DualNetwork, rng: Rng, scheme: str = "kaiming_uniform",
                           dtype=np.float64) -> List[Optional[Tensor]]:
    """Fixed random stand-ins for U_2..U_L (layer 1 never passes an error down)"""
    mats: List[Optional[Tensor]] = [None]
    for layer in net.forward_layers[1:]:
        mats.append(weight_of(init_weights(layer, scheme, rng, dtype)))
    return mats


def make_projections(net: DualNetwork, rng: Rng, mean: float = 0.0, std: float = 0.1,
                     dtype=np.float64) -> List[Tensor]:
    """One fixed ``num_classes x D_l`` projection per hidden layer"""
    return [rng.normal(mean, std, (net.num_classes, d)).astype(dtype)
            for d in net.layer_dims[1:-1]]


def _check_loss(optim: OptimState, loss: float, what: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(optim.step_counter, f"{what} = {loss}")


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

@contextmanager
def _divergence_guard(optim: OptimState):
    """Re-raise a kernel's NaN/Inf as a divergence of the current step"""
    try:
        yield
    except NonFiniteError as e:
        raise TrainingDivergedError(optim.step_counter, str(e)) from e


def train_step_ccl(net: DualNetwork, batch: Batch, optim: OptimState, *,
                   regularizer_lambda: float = 1.0, flooding_threshold: Optional[float] = None,
                   flooding_metric: str = "sse", dedup: bool = True,
                   parallel: bool = False) -> LocalLossReport:
    x, y = batch
    optim.advance()
    with _divergence_guard(optim):
        trace = run_dual(net, x, y, parallel=parallel, dedup=dedup)
        report, act_grads = ccl_local_objective(trace, regularizer_lambda, flooding_threshold, flooding_metric)
        if not report.is_finite():
            raise TrainingDivergedError(
                optim.step_counter, f"alignment {report.alignment_losses}, output CE {report.output_ce}")
        forward, feedback = ccl_parameter_grads(net, trace, act_grads)
    sgd_step(optim, net.named_parameters("forward"), forward, "forward")
    sgd_step(optim, net.named_parameters("feedback"), feedback, "feedback")
    return report


def train_step_bp(net: DualNetwork, batch: Batch, optim: OptimState) -> float:
    x, y = batch
    optim.advance()
    with _divergence_guard(optim):
        loss, grads = bp_gradients(net, x, y)
    _check_loss(optim, loss, "cross-entropy")
    sgd_step(optim, net.named_parameters("forward"), grads, "forward")
    return loss


def train_step_fa(net: DualNetwork, feedback_mats: Sequence[Optional[Tensor]],
                  batch: Batch, optim: OptimState) -> float:
    x, y = batch
    optim.advance()
    with _divergence_guard(optim):
        loss, grads = bp_gradients(net, x, y, feedback_mats)
    _check_loss(optim, loss, "cross-entropy")
    sgd_step(optim, net.named_parameters("forward"), grads, "forward")
    return loss


def train_step_drtp(net: DualNetwork, projections: Sequence[Tensor], batch: Batch,
                    optim: OptimState, mode: str = "target") -> float:
    x, y = batch
    optim.advance()
    with _divergence_guard(optim):
        loss, grads = drtp_gradients(net, projections, x, y, mode)
    _check_loss(optim, loss, "cross-entropy")
    sgd_step(optim, net.named_parameters("forward"), grads, "forward")
    return loss


# ---------------------------------------------------------------------------
# Data and evaluation
# ---------------------------------------------------------------------------

@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset
    stats: Optional[NormStats] = None


def prepare_data(config: TrainConfig, train_ds: Dataset, test_ds: Dataset, seed: int) -> DataSplits:
    """Subset, split by seed, normalize with the training split's statistics, cast"""
    train, val = split_train_val(subset(train_ds, config.train_subset), config.val_fraction, seed)
    test = replace(subset(test_ds, config.test_subset), split_tag="test")
    stats = compute_norm_stats(train)
    dtype = np.dtype(config.dtype)
    cast = [replace(d, images=normalize(d, stats).images.astype(dtype, copy=False)) for d in (train, val, test)]
    return DataSplits(*cast, stats=stats)


def build_network(config: TrainConfig, input_shape: Tuple[int, ...], num_classes: int, rng: Rng) -> DualNetwork:
    dtype = np.dtype(config.dtype)
    if config.is_cnn:
        return build_cnn(tuple(input_shape), config.cnn_channels, num_classes, rng,
                         config.activation, config.init_scheme, dtype)
    dims = config.mlp_dims(math.prod(input_shape), num_classes)
    return build_mlp(dims, rng, config.activation, config.init_scheme, dtype)


def evaluate(net: DualNetwork, ds: Dataset, batch_size: int = EVAL_BATCH) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy) of the forward stack on ``ds``"""
    dtype = weight_of(net.forward_layers[0]).dtype
    correct, ce_sum = 0, 0.0
    for images, labels in iterate_batches(ds, batch_size):
        logits = forward_pass(net, images.astype(dtype, copy=False))[0][-1]
        ce, _ = cross_entropy(logits, one_hot(labels, ds.num_classes, dtype))
        ce_sum += ce * labels.shape[0]
        correct += int(np.sum(logits.argmax(axis=1) == labels))
    n = max(len(ds), 1)
    return correct / n, ce_sum / n


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """One seed's run: owns the network, the optimizer state and any fixed random matrices"""

    def __init__(self, config: TrainConfig, seed: int, input_shape: Tuple[int, ...], num_classes: int,
                 metrics_sink: Optional[MetricsSink] = None,
                 checkpoint_hook: Optional[CheckpointHook] = None):
        self.config = config
        self.seed = seed
        self.kind = TrainerKind(config.trainer)
        self.num_classes = num_classes
        self.metrics_sink = metrics_sink
        self.checkpoint_hook = checkpoint_hook
        self.rng = Rng(seed)
        self.dtype = np.dtype(config.dtype)
        self.net = build_network(config, input_shape, num_classes, self.rng.derive(RngStream.INIT))
        self.optim = OptimState.from_config(config)
        fixed_rng = self.rng.derive(RngStream.FEEDBACK)
        self.feedback_mats = None
        self.projections = None
        if self.kind is TrainerKind.FA:
            self.feedback_mats = make_feedback_matrices(self.net, fixed_rng, config.init_scheme, self.dtype)
        elif self.kind is TrainerKind.DRTP:
            self.projections = make_projections(self.net, fixed_rng, config.drtp_proj_mean,
                                                config.drtp_proj_std, self.dtype)
        self._started = 0.0
        self._alignment: List[List[float]] = []
        self._output_ce: List[float] = []

    def step(self, x: Tensor, y: Tensor) -> float:
        """One optimizer step on a batch; returns the rule's own training loss"""
        batch = (x, y)
        if self.kind is TrainerKind.CCL:
            cfg = self.config
            report = train_step_ccl(
                self.net, batch, self.optim,
                regularizer_lambda=cfg.regularizer_lambda,
                flooding_threshold=cfg.flooding_threshold if cfg.flooding_active else None,
                flooding_metric=cfg.flooding_metric,
                dedup=cfg.dedup_feedback,
                parallel=cfg.parallel_passes,
            )
            self._alignment.append(report.alignment_losses)
            self._output_ce.append(report.output_ce)
            return report.total
        if self.kind is TrainerKind.BP:
            return train_step_bp(self.net, batch, self.optim)
        if self.kind is TrainerKind.FA:
            return train_step_fa(self.net, self.feedback_mats, batch, self.optim)
        return train_step_drtp(self.net, self.projections, batch, self.optim, self.config.drtp_mode)

    def cka_snapshot(self, ds: Dataset) -> CkaMatrix:
        trace = collect_trace(self.net, ds, self.config.cka_samples, self.dtype)
        return cka_grid(trace, self.optim.step_counter)

    def _emit(self, epoch: int, split: str, accuracy: Optional[float] = None, loss: Optional[float] = None,
              alignment: Optional[List[float]] = None, output_ce: Optional[float] = None,
              cka: Optional[CkaMatrix] = None) -> None:
        if self.metrics_sink is None:
            return
        self.metrics_sink(MetricsRecord(
            seed=self.seed,
            step=self.optim.step_counter,
            epoch=epoch,
            split=split,
            accuracy=accuracy,
            loss=loss,
            alignment_losses=alignment or [],
            output_ce=output_ce,
            lr_eff_forward=lr_effective(self.optim, "forward"),
            lr_eff_feedback=lr_effective(self.optim, "feedback"),
            cka=cka.values.tolist() if cka is not None else None,
            wall_ms=(time.perf_counter() - self._started) * 1000.0,
        ))

    def _checkpoint_extra(self, data: DataSplits) -> dict:
        extra = {"config": self.config.echo(), "seed": self.seed, "step": self.optim.step_counter}
        if data.stats is not None:
            extra["norm_mean"] = data.stats.mean.tolist()
            extra["norm_std"] = data.stats.std.tolist()
        return extra

    def _tracks_cka(self) -> bool:
        return self.kind is TrainerKind.CCL and self.config.cka_samples > 0

    def fit(self, data: DataSplits) -> RunResult:
        cfg = self.config
        result = RunResult(seed=self.seed, config=cfg.echo())
        self._started = time.perf_counter()
        shuffle_rng = self.rng.derive(RngStream.SHUFFLE)
        augment_rng = self.rng.derive(RngStream.AUGMENT)

        if self.checkpoint_hook:
            self.checkpoint_hook(self.seed, "init", self.net, self._checkpoint_extra(data))
        if self._tracks_cka():
            result.cka_start = self.cka_snapshot(data.test)
            self._emit(0, "cka", cka=result.cka_start)

        for epoch in range(1, cfg.epochs + 1):
            losses: List[float] = []
            self._alignment, self._output_ce = [], []
            for images, labels in iterate_batches(data.train, cfg.batch_size, shuffle_rng):
                if cfg.augment:
                    images = augment(images, augment_rng)
                losses.append(self.step(images, one_hot(labels, self.num_classes, self.dtype)))
                if cfg.eval_interval and self.optim.step_counter % cfg.eval_interval == 0:
                    acc, ce = evaluate(self.net, data.val)
                    self._emit(epoch, "val", acc, ce)

            train_acc, _ = evaluate(self.net, data.train)
            val_acc, val_ce = evaluate(self.net, data.val)
            test_acc, test_ce = evaluate(self.net, data.test)
            train_loss = float(np.mean(losses))
            result.train_accuracy.append(train_acc)
            result.train_loss.append(train_loss)
            result.val_accuracy.append(val_acc)
            result.test_accuracy.append(test_acc)
            result.test_loss.append(test_ce)

            alignment = np.mean(self._alignment, axis=0).tolist() if self._alignment else None
            output_ce = float(np.mean(self._output_ce)) if self._output_ce else None
            self._emit(epoch, "train", train_acc, train_loss, alignment, output_ce)
            self._emit(epoch, "val", val_acc, val_ce)
            self._emit(epoch, "test", test_acc, test_ce)
            logger.info(
                f"seed {self.seed} epoch {epoch}/{cfg.epochs}: loss {train_loss:.4f}, "
                f"train acc {train_acc:.4f}, val acc {val_acc:.4f}, test acc {test_acc:.4f}, "
                f"lr {lr_effective(self.optim, 'forward'):.4g}"
            )

        result.final_test_accuracy = result.test_accuracy[-1]
        if self._tracks_cka():
            result.cka_end = self.cka_snapshot(data.test)
            self._emit(cfg.epochs, "cka", cka=result.cka_end)
        if self.checkpoint_hook:
            self.checkpoint_hook(self.seed, "final", self.net, self._checkpoint_extra(data))
        result.wall_clock_s = time.perf_counter() - self._started
        return result


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _run_seed(config: TrainConfig, seed: int, train_ds: Dataset, test_ds: Dataset,
              sink_factory, checkpoint_hook) -> RunResult:
    try:
        splits = prepare_data(config, train_ds, test_ds, seed)
        sink = sink_factory(config, seed) if sink_factory else None
        trainer = Trainer(config, seed, splits.train.sample_shape, train_ds.num_classes, sink, checkpoint_hook)
        logger.info(f"seed {seed}: {config.trainer} on {config.dataset}/{config.arch}, "
                    f"{len(splits.train)} training samples")
        return trainer.fit(splits)
    except (CCLError, FloatingPointError) as e:
        logger.error(f"seed {seed} failed: {e}")
        return RunResult(seed=seed, config=config.echo(), failed=True, error=str(e))


def run_experiment(config: TrainConfig, seeds: Optional[Sequence[int]], train_ds: Dataset, test_ds: Dataset,
                   sink_factory: Optional[Callable[[TrainConfig, int], MetricsSink]] = None,
                   checkpoint_hook: Optional[CheckpointHook] = None) -> List[RunResult]:
    """One RunResult per seed, in seed order; failed seeds are flagged, not raised"""
    seeds = list(config.seeds if seeds is None else seeds)

    def run(seed: int) -> RunResult:
        return _run_seed(config, seed, train_ds, test_ds, sink_factory, checkpoint_hook)

    if config.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]
    summary = summarize_results(results)
    logger.info(f"{config.run_name}: test accuracy {summary['mean']:.4f} +/- {summary['std']:.4f} "
                f"over {summary['completed']} seeds, {len(summary['failed_seeds'])} failed")
    return results


def summarize_results(results: Sequence[RunResult]) -> dict:
    finals = pd.Series([r.final_test_accuracy for r in results if not r.failed], dtype=float)
    return {
        "mean": float(finals.mean()) if len(finals) else float("nan"),
        "std": float(finals.std(ddof=0)) if len(finals) else float("nan"),
        "completed": int(len(finals)),
        "finals": finals.tolist(),
        "failed_seeds": [r.seed for r in results if r.failed],
    }


def run_ablation_grid(config: TrainConfig, fw_grid: Sequence[float], bw_grid: Sequence[float],
                      train_ds: Dataset, test_ds: Dataset,
                      sink_factory: Optional[Callable[[TrainConfig, int], MetricsSink]] = None) -> pd.DataFrame:
    """Mean final test accuracy for every (forward lr, feedback lr) pair; rows forward, columns feedback"""
    if not fw_grid or not bw_grid:
        raise ValueError("ablation grids must be non-empty")
    matrix = pd.DataFrame(
        index=pd.Index(list(fw_grid), name="lr_forward"),
        columns=pd.Index(list(bw_grid), name="lr_feedback"),
        dtype=float,
    )
    for fw in fw_grid:
        for bw in bw_grid:
            cell = TrainConfig.model_validate({
                **config.echo(),
                "lr_forward": fw,
                "lr_feedback": bw,
                "run_name": f"{config.run_name}_fw{fw}_bw{bw}",
            })
            results = run_experiment(cell, None, train_ds, test_ds, sink_factory)
            matrix.loc[fw, bw] = summarize_results(results)["mean"]
            logger.info(f"ablation fw {fw} / bw {bw}: {matrix.loc[fw, bw]:.4f}")
    return matrix


def hyperparameter_grid(trainer: str) -> List[Dict[str, float]]:
    """Every override combination of a trainer's MLP search space"""
    kind = TrainerKind(trainer)
    if kind is TrainerKind.CCL:
        axes = {"lr_forward": CCL_LR_GRID, "clip_norm": CCL_CLIP_GRID}
    elif kind is TrainerKind.DRTP:
        axes = {"lr_forward": DRTP_LR_GRID, "drtp_proj_mean": DRTP_PROJ_MEAN_GRID,
                "drtp_proj_std": DRTP_PROJ_STD_GRID}
    else:
        axes = {"lr_forward": BP_FA_LR_GRID, "clip_norm": BP_FA_CLIP_GRID}
    combos = [dict(zip(axes, values)) for values in itertools.product(*axes.values())]
    if kind is TrainerKind.CCL:
        for combo in combos:
            combo["lr_feedback"] = combo["lr_forward"]
    return combos


@dataclass
class SearchOutcome:
    """One row per combination plus the combination with the best mean validation accuracy"""

    table: pd.DataFrame
    best: Optional[Dict[str, float]]
    best_results: List[RunResult]


def run_search(config: TrainConfig, train_ds: Dataset, test_ds: Dataset,
               grid: Optional[Sequence[Dict[str, float]]] = None,
               sink_factory: Optional[Callable[[TrainConfig, int], MetricsSink]] = None) -> SearchOutcome:
    """Train every combination over the config's seeds and select by final validation accuracy.

    Test accuracy is recorded for every row but never used for the choice.
    """
    grid = hyperparameter_grid(config.trainer) if grid is None else list(grid)
    if not grid:
        raise ValueError("search grid must be non-empty")
    rows: List[dict] = []
    all_results: List[List[RunResult]] = []
    for i, combo in enumerate(grid):
        cell = TrainConfig.model_validate({**config.echo(), **combo, "run_name": f"{config.run_name}_search{i}"})
        results = run_experiment(cell, None, train_ds, test_ds, sink_factory)
        vals = pd.Series([r.val_accuracy[-1] for r in results if not r.failed and r.val_accuracy], dtype=float)
        summary = summarize_results(results)
        rows.append({
            **combo,
            "val_accuracy": float(vals.mean()) if len(vals) else float("nan"),
            "test_accuracy": summary["mean"],
            "test_std": summary["std"],
            "failed_seeds": len(summary["failed_seeds"]),
        })
        all_results.append(results)
        logger.info(f"search {i + 1}/{len(grid)} {combo}: val {rows[-1]['val_accuracy']:.4f}")

    table = pd.DataFrame(rows)
    if table["val_accuracy"].isna().all():
        logger.error("search: every combination failed")
        return SearchOutcome(table, None, [])
    best_index = int(table["val_accuracy"].idxmax())
    return SearchOutcome(table, dict(grid[best_index]), all_results[best_index])
