"""Scene/event losses, their focal variants, and dynamic weight averaging.

All loss functions accept a single clip (scene ``(N,)``, event ``(L, M)``) or
a batch with a leading axis; per-clip sums are averaged over the batch.
Posteriors are clamped to ``[1e-12, 1 - 1e-12]`` inside every log and power.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import LOG_FLOOR, Tensor, as_tensor, log, matmul, mean, power, sum_

CLAMP_HI = 1.0 - LOG_FLOOR


@dataclass(frozen=True)
class ConstantWeights:
    lambda_scene: float = 1.0
    lambda_event: float = 1.0

    def __post_init__(self):
        for name in ("lambda_scene", "lambda_event"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class MflParams:
    eta: float = 1.0
    gamma: float = 1.0
    zeta: float = 1.0
    weights: ConstantWeights = ConstantWeights()

    def __post_init__(self):
        for name in ("eta", "gamma", "zeta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


MFL1 = MflParams(1.0, 1.0, 1.0, ConstantWeights(1.0, 1.0))
MFL2 = MflParams(1.0, 1.0, 0.0625, ConstantWeights(0.001, 1.0))
CONVENTIONAL = ConstantWeights(0.001, 1.0)


def _check_one_hot(z):
    z = np.asarray(z, dtype=np.float64)
    if not (np.all((z == 0) | (z == 1)) and np.all(z.sum(axis=-1) == 1)):
        raise ValueError("scene targets must be one-hot along the class axis")
    return z


def _check_pair(y, z, what):
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"{what}: posterior shape {y.shape} != target shape {z.shape}")
    return z


def _batch_mean(per_clip):
    return mean(per_clip) if per_clip.ndim else per_clip


def _log_pair(y):
    """``log y`` and ``log(1 - y)`` with the posterior clamp."""
    return log(y), log(1.0 - y)


def scene_ce(y, z):
    y = as_tensor(y)
    z = _check_pair(y, _check_one_hot(z), "scene_ce")
    return _batch_mean(-sum_(log(y) * z, axis=-1))


def event_bce(y, z):
    y = as_tensor(y)
    z = _check_pair(y, z, "event_bce")
    ly, l1y = _log_pair(y)
    return _batch_mean(-sum_(ly * z + l1y * (1.0 - z), axis=(-2, -1)))


def mtl_constant_loss(scene_loss, event_loss, w):
    return w.lambda_scene * scene_loss + w.lambda_event * event_loss


def scene_focal(y, z, eta):
    y = as_tensor(y)
    z = _check_pair(y, _check_one_hot(z), "scene_focal")
    return _batch_mean(-sum_(power(1.0 - y, eta) * z * log(y), axis=-1))


def event_focal(y, z, gamma, zeta):
    y = as_tensor(y)
    z = _check_pair(y, z, "event_focal")
    ly, l1y = _log_pair(y)
    active = power(1.0 - y, gamma) * z * ly
    inactive = power(y, zeta) * (1.0 - z) * l1y
    return _batch_mean(-sum_(active + inactive, axis=(-2, -1)))


def mfl_loss(y_scene, z_scene, y_event, z_event, p):
    return (p.weights.lambda_scene * scene_focal(y_scene, z_scene, p.eta)
            + p.weights.lambda_event * event_focal(y_event, z_event, p.gamma, p.zeta))


@dataclass(frozen=True)
class DwaState:
    """Weights of ``n_tasks`` tasks; ``epoch`` is the epoch the weights apply to."""

    n_tasks: int
    temperature: float = 1.0
    epoch: int = 1
    prev_loss: np.ndarray | None = None  # L_k(t-1)
    prev2_loss: np.ndarray | None = None  # L_k(t-2)
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(self.n_tasks))


def dwa_weights(ratios, temperature):
    """``K exp(w_k / T) / sum_i exp(w_i / T)``, computed with a max shift."""
    w = np.asarray(ratios, dtype=np.float64) / temperature
    e = np.exp(w - w.max())
    return len(w) * e / e.sum()


def dwa_update(state, epoch_losses):
    """Record the finished epoch's per-task losses and compute the next epoch's weights."""
    if not state.temperature > 0:
        raise ValueError("temperature must be positive")
    losses = np.asarray(epoch_losses, dtype=np.float64)
    if losses.shape != (state.n_tasks,):
        raise ValueError(f"expected {state.n_tasks} task losses, got shape {losses.shape}")
    if not np.all(np.isfinite(losses)) or losses.min() < 0:
        raise ValueError("task losses must be finite and non-negative")
    prev2, prev = state.prev_loss, losses
    t = state.epoch + 1
    if t < 3 or prev2 is None:
        weights = np.ones(state.n_tasks)
    else:
        safe = prev2 >= 1e-12
        ratios = np.where(safe, prev / np.where(safe, prev2, 1.0), 1.0)
        weights = dwa_weights(ratios, state.temperature)
    return replace(state, epoch=t, prev_loss=prev, prev2_loss=prev2, weights=weights)


def dwa_task_losses(y_scene, z_scene, y_event, z_event):
    """Per-class partial losses as Tensors: scene ``(N,)`` and event ``(M,)``, batch-averaged."""
    y_scene, y_event = as_tensor(y_scene), as_tensor(y_event)
    z_scene = _check_pair(y_scene, _check_one_hot(z_scene), "dwa_loss")
    z_event = _check_pair(y_event, z_event, "dwa_loss")
    scene_parts = -(log(y_scene) * z_scene)
    ly, l1y = _log_pair(y_event)
    event_parts = -sum_(ly * z_event + l1y * (1.0 - z_event), axis=-2)
    if scene_parts.ndim > 1:
        scene_parts = mean(scene_parts, axis=0)
        event_parts = mean(event_parts, axis=0)
    return scene_parts, event_parts


def dwa_loss(y_scene, z_scene, y_event, z_event, state):
    """Class-weighted scene CE plus event BCE.

    Returns ``(total, task_losses)`` where ``task_losses`` is the length-(N+M)
    array of unweighted per-class partial losses, scene classes first.
    """
    y_scene = as_tensor(y_scene)
    n, m = y_scene.shape[-1], as_tensor(y_event).shape[-1]
    if state.n_tasks != n + m:
        raise ValueError(f"DWA state has {state.n_tasks} tasks, model has {n} scenes + {m} events")
    scene_parts, event_parts = dwa_task_losses(y_scene, z_scene, y_event, z_event)
    lam = np.asarray(state.weights, dtype=np.float64)
    total = matmul(scene_parts, lam[:n]) + matmul(event_parts, lam[n:])
    return total, np.concatenate([scene_parts.data, event_parts.data])


@dataclass
class MflDiagnostics:
    scene_avg: float
    event_active_avg: float
    event_inactive_avg: float
    per_event_avg: np.ndarray
    masked: dict | None = None


def mfl_weight_diagnostics(y_scene, y_event, p, z_scene=None, z_event=None):
    """Average focal weights of a batch.

    The unmasked averages run over every class/cell:
    ``mean (1 - y_n)^eta``, ``mean (1 - y_lm)^gamma``, ``mean y_lm^zeta`` and,
    per event class, ``mean_l (1 - y_l)^gamma``. With targets, ``masked``
    also holds the averages restricted to the true scene class, active cells
    and inactive cells (NaN where a mask is empty). Posteriors are not clamped.
    """
    ys = np.asarray(y_scene.data if isinstance(y_scene, Tensor) else y_scene, dtype=np.float64)
    ye = np.asarray(y_event.data if isinstance(y_event, Tensor) else y_event, dtype=np.float64)
    ws = (1.0 - ys) ** p.eta
    wa = (1.0 - ye) ** p.gamma
    wi = ye ** p.zeta
    m = ye.shape[-1]
    out = MflDiagnostics(float(ws.mean()), float(wa.mean()), float(wi.mean()), wa.reshape(-1, m).mean(axis=0))
    if z_scene is not None and z_event is not None:
        zs = np.asarray(z_scene, dtype=bool)
        ze = np.asarray(z_event, dtype=bool).reshape(-1, m)
        wa2, wi2 = wa.reshape(-1, m), wi.reshape(-1, m)
        with np.errstate(invalid="ignore", divide="ignore"):
            per = np.where(ze.sum(axis=0) > 0, (wa2 * ze).sum(axis=0) / ze.sum(axis=0), np.nan)
        out.masked = {
            "scene_avg": float(ws[zs].mean()) if zs.any() else float("nan"),
            "event_active_avg": float(wa2[ze].mean()) if ze.any() else float("nan"),
            "event_inactive_avg": float(wi2[~ze].mean()) if (~ze).any() else float("nan"),
            "per_event_avg": per,
        }
    return out
