"""RAdam optimization loop with constant, DWA or multi-focal task weighting."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericalError, backward
from .losses import (CONVENTIONAL, MFL2, ConstantWeights, DwaState, MflParams, dwa_loss, dwa_update, event_bce,
                     event_focal, mfl_weight_diagnostics, scene_ce, scene_focal)

logger = logging.getLogger(__name__)

STRATEGIES = ("constant", "dwa", "mfl")


class DivergenceError(NumericalError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch

# ---------------------------------------------------------------------------
# RAdam


@dataclass
class RadamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def radam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One rectified-Adam update, in place on ``params`` (a list of arrays).

    While the approximated SMA length ``rho_t`` is at most 4 the variance
    estimate is unusable and the step is plain bias-corrected momentum.
    """
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p) for p in params]
        state.exp_avg_sq = [np.zeros_like(p) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("radam_step: non-finite gradient")
    b1, b2 = betas
    state.step += 1
    t = state.step
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    b2t = b2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bias1 = 1.0 - b1 ** t
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bias1
        if rho_t > 4.0:
            p -= lr * rect * mhat / (np.sqrt(v / (1.0 - b2t)) + eps)
        else:
            p -= lr * mhat
    return params, state


class RAdam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = RadamState()

    def step(self, grads):
        radam_step([p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps)

# ---------------------------------------------------------------------------
# configuration and logs


@dataclass
class TrainConfig:
    strategy: str = "constant"
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    standardize: bool = True
    clip_grad_norm: float | None = None
    weights: ConstantWeights = CONVENTIONAL
    mfl: MflParams = MFL2
    temperature: float = 1.0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.clip_grad_norm is not None and not self.clip_grad_norm > 0:
            raise ValueError("clip_grad_norm must be positive")
        return self

    def to_dict(self):
        return {
            "strategy": self.strategy, "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "seed": self.seed, "standardize": self.standardize,
            "clip_grad_norm": self.clip_grad_norm,
            "lambda_scene": self.weights.lambda_scene if self.strategy == "constant" else self.mfl.weights.lambda_scene,
            "lambda_event": self.weights.lambda_event if self.strategy == "constant" else self.mfl.weights.lambda_event,
            "eta": self.mfl.eta, "gamma": self.mfl.gamma, "zeta": self.mfl.zeta,
            "temperature": self.temperature,
        }


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_scene: float
    loss_event: float
    lambdas: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def series(self):
        """``(name, value)`` pairs in export order; non-finite diagnostics are skipped."""
        out = [("loss.total", self.loss_total), ("loss.scene", self.loss_scene), ("loss.event", self.loss_event)]
        out += [(f"dwa.lambda.{k}", v) for k, v in self.lambdas.items()]
        out += [(f"mfl.{k}", v) for k, v in self.diagnostics.items() if math.isfinite(v)]
        return out


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def series(self, name):
        return np.array([dict(r.series()).get(name, np.nan) for r in self.records])


def export_trajectory(log, path):
    """CSV with header ``epoch,series,value``; values printed with 12 significant digits."""
    if not log.records:
        raise ValueError("trajectory log is empty")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "series", "value"])
        for r in log.records:
            for name, value in r.series():
                w.writerow([r.epoch, name, f"{value:.12g}"])


def read_trajectory(path):
    """Parse an exported trajectory back into ``{series: {epoch: value}}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["series"], {})[int(row["epoch"])] = float(row["value"])
    return out

# ---------------------------------------------------------------------------
# standardization


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def standardize_features(features, stats=None):
    """Per-mel-bin standardization of ``(n, D, L)`` features; variance floored at 1e-8."""
    features = np.asarray(features, dtype=np.float64)
    if stats is None:
        mu = features.mean(axis=(0, 2))
        var = features.var(axis=(0, 2))
        stats = FeatureStats(mu, np.sqrt(np.maximum(var, 1e-8)))
    return (features - stats.mean[None, :, None]) / stats.std[None, :, None], stats

# ---------------------------------------------------------------------------
# training


def task_names(scene_labels, event_labels):
    return [f"scene:{s}" for s in scene_labels] + [f"event:{e}" for e in event_labels]


def _one_hot(idx, n):
    z = np.zeros((len(idx), n))
    z[np.arange(len(idx)), idx] = 1.0
    return z


def strategy_loss(config, out, z_scene, z_event, dwa_state=None):
    """``(total, scene component, event component, per-task losses or None)``."""
    ys, ye = out.scene, out.event
    if config.strategy == "constant":
        ls, le = scene_ce(ys, z_scene), event_bce(ye, z_event)
        w = config.weights
        return w.lambda_scene * ls + w.lambda_event * le, ls, le, None
    if config.strategy == "mfl":
        p = config.mfl
        ls, le = scene_focal(ys, z_scene, p.eta), event_focal(ye, z_event, p.gamma, p.zeta)
        return p.weights.lambda_scene * ls + p.weights.lambda_event * le, ls, le, None
    total, parts = dwa_loss(ys, z_scene, ye, z_event, dwa_state)
    n = ys.shape[-1]
    return total, float(parts[:n].sum()), float(parts[n:].sum()), parts


def fit(model, train_set, config, stats=None):
    """Train ``model`` in place on a :class:`~taskweight.features.FeatureSet`.

    Returns ``(model, log, stats)``; ``stats`` is the standardization used (None
    when ``config.standardize`` is off). Deterministic for a fixed config.
    """
    config.validate()
    x = train_set.features
    if config.standardize:
        x, stats = standardize_features(x, stats)
    n, m = train_set.n_scenes, train_set.n_events
    if model.arch.n_scenes != n or model.arch.n_events != m:
        raise ValueError(f"model predicts {model.arch.n_scenes} scenes/{model.arch.n_events} events, "
                         f"data has {n}/{m}")
    z_scene_all = _one_hot(train_set.scenes, n)
    z_event_all = train_set.rolls.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = RAdam(params, lr=config.learning_rate)
    names = task_names(train_set.scene_labels, train_set.event_labels)
    dwa = DwaState(n + m, config.temperature) if config.strategy == "dwa" else None
    log = TrajectoryLog()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        task_sum = np.zeros(n + m)
        batches = 0
        last = None
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            out = model.forward(x[idx], train=True)
            total, ls, le, parts = strategy_loss(config, out, z_scene_all[idx], z_event_all[idx], dwa)
            value = total.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            grads = backward(total, params)
            if config.clip_grad_norm is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if norm > config.clip_grad_norm:
                    grads = [g * (config.clip_grad_norm / norm) for g in grads]
            opt.step(grads)
            sums += (value, float(getattr(ls, "data", ls)), float(getattr(le, "data", le)))
            if parts is not None:
                task_sum += parts
            batches += 1
            last = (out, idx)
        means = sums / batches
        rec = EpochRecord(epoch, *means)
        if dwa is not None:
            rec.lambdas = dict(zip(names, dwa.weights.tolist()))
            dwa = dwa_update(dwa, task_sum / batches)
        if config.strategy == "mfl":
            out, idx = last
            d = mfl_weight_diagnostics(out.scene, out.event, config.mfl, z_scene_all[idx], z_event_all[idx])
            rec.diagnostics = _flatten_diagnostics(d, train_set.event_labels)
        rec.wall_time = time.perf_counter() - t0
        log.records.append(rec)
        logger.info("epoch %d loss %.6f (scene %.6f, event %.6f)", epoch, *means)
    return model, log, stats


def _flatten_diagnostics(d, event_labels):
    out = {"scene_avg": d.scene_avg, "event_active_avg": d.event_active_avg,
           "event_inactive_avg": d.event_inactive_avg}
    out.update({f"event.{lab}": float(v) for lab, v in zip(event_labels, d.per_event_avg)})
    if d.masked is not None:
        for k in ("scene_avg", "event_active_avg", "event_inactive_avg"):
            out[f"masked.{k}"] = d.masked[k]
        out.update({f"masked.event.{lab}": float(v) for lab, v in zip(event_labels, d.masked["per_event_avg"])})
    return out
