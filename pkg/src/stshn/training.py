"""Losses, Adam, the epoch loop and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import evaluation as ev
from .datapipe import CrimeTensor, Windows, binarize, make_windows, normalize
from .graphs import build_region_graph, build_shift_graph
from .model import Hyperparams, ModelParams, Topology, check_params, forward_graph, init_params

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CKPT_MAGIC = "stshn-ckpt v1"
MODES = ("classification", "regression")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# losses

def weight_penalty(params, lam: float) -> dc.Node | None:
    if lam == 0:
        return None
    terms = [dc.sum_over_axis(dc.mul(p, p)) for p in params.values() if isinstance(p, dc.Node)]
    return dc.scale(dc.add_n(terms), lam)


def _with_penalty(data_term: dc.Node, params, lam: float) -> dc.Node:
    penalty = weight_penalty(params or {}, lam)
    return data_term if penalty is None else dc.add(data_term, penalty)


def loss_classification(pred: dc.Node, target_counts, params=None, lam: float = 0.0) -> dc.Node:
    """Binary cross-entropy summed over cells, with predictions clamped to [1e-7, 1-1e-7]."""
    target = np.asarray(target_counts)
    if pred.shape != target.shape:
        raise dc.DimensionError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    y = binarize(target).astype(np.float64)
    p = dc.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = dc.mul(dc.log(p), dc.constant(y))
    neg = dc.mul(dc.log(dc.sub(dc.constant(1.0), p)), dc.constant(1.0 - y))
    data = dc.scale(dc.sum_over_axis(dc.add(pos, neg)), -1.0)
    return _with_penalty(data, params, lam)


def loss_regression(pred: dc.Node, target, params=None, lam: float = 0.0) -> dc.Node:
    """Squared error summed over cells; ``target`` is already in the model's (normalized) space."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise dc.DimensionError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    diff = dc.sub(pred, dc.constant(target))
    return _with_penalty(dc.sum_over_axis(dc.mul(diff, diff)), params, lam)


# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, frozen=()) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name in frozen:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        if m.shape != g.shape:
            raise dc.DimensionError(f"optimizer state for {name} has shape {m.shape}, gradient {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def learning_rate(base: float, decay: float, epoch: int) -> float:
    """Rate used during 0-based ``epoch``."""
    return base * decay ** epoch


# data binding

@dataclass
class ForecastData:
    """A normalized tensor plus its windows and graph topology."""

    counts: np.ndarray  # (R, T, C) raw counts
    x: np.ndarray  # (R, T, C) normalized
    mu: np.ndarray
    sigma: np.ndarray
    windows: Windows
    topo: Topology
    categories: list[str]

    @classmethod
    def from_tensor(cls, ct: CrimeTensor, hp: Hyperparams, split_ratio=(7, 1)) -> "ForecastData":
        region = build_region_graph(tuple(ct.grid_shape), hp.scale)
        topo = Topology.from_graphs(region, build_shift_graph(region))
        windows = make_windows(ct.shape[1], hp.window, split_ratio)
        return cls(ct.counts.astype(np.float64), normalize(ct), ct.mu, ct.sigma, windows, topo,
                   list(ct.categories))

    @property
    def n_regions(self) -> int:
        return self.counts.shape[0]

    @property
    def n_categories(self) -> int:
        return self.counts.shape[2]

    def window_input(self, t: int) -> np.ndarray:
        return self.x[:, self.windows.inputs(t), :]

    def target_counts(self, t: int) -> np.ndarray:
        return self.counts[:, t, :]

    def target_normalized(self, t: int) -> np.ndarray:
        return self.x[:, t, :]

    def to_counts(self, pred_normalized: np.ndarray) -> np.ndarray:
        return np.maximum(pred_normalized * self.sigma + self.mu, 0.0)


def window_loss(params, data: ForecastData, t: int, hp: Hyperparams, mode: str, lam: float) -> dc.Node:
    pred = forward_graph(data.window_input(t), params, hp, data.topo, mode).output
    if mode == "classification":
        return loss_classification(pred, data.target_counts(t), params, lam)
    return loss_regression(pred, data.target_normalized(t), params, lam)


def predict_windows(params: ModelParams, data: ForecastData, targets, hp: Hyperparams,
                    mode: str) -> np.ndarray:
    """Model output per target slot, (windows, R, C): probabilities or counts."""
    out = []
    for t in targets:
        y = forward_graph(data.window_input(int(t)), params, hp, data.topo, mode).output.value
        out.append(y if mode == "classification" else data.to_counts(y))
    return np.array(out).reshape(len(out), data.n_regions, data.n_categories)


def evaluate_model(params, data: ForecastData, targets, hp: Hyperparams, mode: str) -> ev.MetricsReport:
    targets = np.asarray(targets)
    pred = predict_windows(params, data, targets, hp, mode)
    truth = data.counts[:, targets, :].transpose(1, 0, 2)
    if mode == "classification":
        return ev.classification_report(pred, truth, data.categories)
    return ev.regression_report(pred, truth, data.categories)


# training loop

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "classification"
    epochs: int = 20
    learning_rate: float = 1e-3
    decay: float = 0.96
    weight_decay: float = 0.0
    seed: int = 0
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate <= 0 or not 0 < self.decay <= 1 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("need learning_rate > 0, 0 < decay <= 1, weight_decay >= 0, epochs >= 0")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int


def _val_metric(report: ev.MetricsReport, mode: str) -> float:
    return report.macro_f1 if mode == "classification" else report.mae


def _improves(metric: float, best: float, mode: str) -> bool:
    return metric > best if mode == "classification" else metric < best


def train(data: ForecastData, hp: Hyperparams, cfg: TrainConfig,
          params: ModelParams | None = None) -> TrainResult:
    """Batch-size-1 Adam over shuffled training windows; keeps the best validation epoch.

    Epoch 0 in the history is the untrained model, so ``epochs=0`` returns the
    initial parameters.
    """
    if data.windows.train.size == 0:
        raise ValueError("no training windows")
    if params is None:
        params = init_params(hp, data.n_regions, data.n_categories, cfg.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    check_params(params, hp, data.n_regions, data.n_categories)
    for name in cfg.frozen:
        if name not in params:
            raise ValueError(f"cannot freeze unknown parameter {name!r}")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    val = evaluate_model(params, data, data.windows.val, hp, cfg.mode)
    best_metric, best_epoch = _val_metric(val, cfg.mode), 0
    history = [{"epoch": 0, "train_loss": None, "val_metric": best_metric}]
    best = {k: v.copy() for k, v in params.items()}

    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg.learning_rate, cfg.decay, epoch)
        total = 0.0
        for t in rng.permutation(data.windows.train):
            leaves = {k: dc.variable(v) for k, v in params.items()}
            loss = window_loss(leaves, data, int(t), hp, cfg.mode, cfg.weight_decay)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1} at target slot {int(t)}")
            dc.backward(loss)
            adam_step(params, {k: n.grad for k, n in leaves.items()}, state, lr, cfg.frozen)
            total += value
        val = evaluate_model(params, data, data.windows.val, hp, cfg.mode)
        metric = _val_metric(val, cfg.mode)
        record = {"epoch": epoch + 1, "train_loss": total / data.windows.train.size, "val_metric": metric}
        history.append(record)
        log.info("epoch %d lr %.3g loss %.6f val %.6f", epoch + 1, lr, record["train_loss"], metric)
        if _improves(metric, best_metric, cfg.mode):
            best_metric, best_epoch = metric, epoch + 1
            best = {k: v.copy() for k, v in params.items()}
    return TrainResult(best, history, best_epoch)


# checkpoints

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    lines = [CKPT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        shape = ",".join(str(n) for n in arr.shape)
        values = " ".join("%.17g" % v for v in arr.reshape(-1))
        lines.append(f"param {name} {shape} {values}")
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        found = lines[0] if lines else "<empty>"
        raise CheckpointError(f"{path}: unsupported checkpoint version {found!r}, expected {CKPT_MAGIC!r}")
    if lines[-1] != "end":
        raise CheckpointError(f"{path}: checkpoint is truncated")
    meta: dict = {}
    params: ModelParams = {}
    for lineno, line in enumerate(lines[1:-1], start=2):
        kind, _, rest = line.partition(" ")
        try:
            if kind == "meta":
                meta = json.loads(rest)
            elif kind == "param":
                name, shape_txt, *values = rest.split(" ")
                shape = tuple(int(n) for n in shape_txt.split(",") if n)
                arr = np.array([float(v) for v in values], dtype=np.float64)
                if arr.size != int(np.prod(shape)):
                    raise CheckpointError(f"{path}: line {lineno}: {name} has {arr.size} values for shape {shape}")
                params[name] = arr.reshape(shape)
            else:
                raise CheckpointError(f"{path}: line {lineno}: unknown record {kind!r}")
        except ValueError as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: line {lineno}: malformed record ({exc})") from None
    return params, meta
