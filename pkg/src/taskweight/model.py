"""Differentiable layers and the shared-trunk ASC/SED network.

Image tensors are ``(batch, channels, time, freq)``. Pool factors are
``(time, freq)``: the trunk pools frequency only so the event head still sees
every frame.

Checkpoint layout (little-endian)::

    4 bytes   magic b"TWCK"
    uint32    format version (1)
    uint64    header length H, then H bytes of UTF-8 JSON
              {"arch": {...}, "meta": {...}}
    uint32    tensor count, then per tensor:
              uint16 name length, name (UTF-8), uint8 ndim,
              ndim x uint64 shape, prod(shape) float64 row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import (NumericalError, ShapeError, Tensor, as_tensor, concat, leaky_relu, make_node, matmul,
                       max_, reshape, sigmoid, softmax, transpose)
from .autodiff import tanh as _tanh

CHECKPOINT_MAGIC = b"TWCK"
CHECKPOINT_VERSION = 1

# ---------------------------------------------------------------------------
# layers


def conv2d(x, kernels_, bias):
    """Same-padded stride-1 cross-correlation. ``x`` is ``(B, C, T, F)`` or ``(C, T, F)``."""
    x, w, b = as_tensor(x), as_tensor(kernels_), as_tensor(bias)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, k, k) with odd k, got {w.shape}")
    bsz, cin, t, f = x.shape
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernels expect {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    p = k // 2
    xpad = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = kernels.im2col(xpad, k)  # B, C*k*k, T*F
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols) + b.data[:, None]

    def vjp(g):
        g2 = g.reshape(bsz, cout, t * f)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2)
        gx = kernels.col2im(np.ascontiguousarray(gcols), cin, t, f, k)[:, :, p:p + t, p:p + f]
        return gx, gw, gb

    y = make_node(out.reshape(bsz, cout, t, f), (x, w, b), vjp, "conv2d")
    return reshape(y, y.shape[1:]) if unbatched else y


def max_pool2d(x, pool_t, pool_f):
    """Max over disjoint ``pool_t x pool_f`` windows; trailing remainders are dropped."""
    x = as_tensor(x)
    if pool_t < 1 or pool_f < 1:
        raise ValueError("pool factors must be >= 1")
    if pool_t == 1 and pool_f == 1:
        return x
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.shape[2] < pool_t or x.shape[3] < pool_f:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than pool {pool_t}x{pool_f}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(x.data), pool_t, pool_f)
    shape = x.shape
    y = make_node(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, shape, pool_t, pool_f),), "max_pool2d")
    return reshape(y, y.shape[1:]) if unbatched else y


@dataclass
class BatchNormState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    updates: int = 0

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm(x, gamma, beta, state, train=True):
    """Per-channel normalization over batch, time and frequency."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (-1, 1, 1)
    c = x.shape[1 if x.ndim == 4 else 0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: expected ({c},) scale/shift")
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
        state.updates += 1
    else:
        if state.updates == 0:
            raise RuntimeError("batch_norm: inference mode before any training step")
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    count = x.size // c

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        scale = (gamma.data * inv).reshape(shape)
        if train:
            gx = scale * (g - gb.reshape(shape) / count - xhat * gg.reshape(shape) / count)
        else:
            gx = scale * g
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), vjp, "batch_norm")


def activation(x, kind, slope=0.01, axis=-1):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return _tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def linear(x, weight, bias):
    """``x W^T + b`` with ``W`` of shape ``(out, in)``; applies over leading axes."""
    x, w, b = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, W {w.shape}, b {b.shape}")
    return matmul(x, transpose(w)) + b


def gru(x, w_ih, w_hh, b_ih, b_hh):
    """Single-direction GRU from a zero state over ``x`` of shape ``(B, L, I)`` or ``(L, I)``.

    Gate blocks in the weights are ordered (reset, update, candidate).
    """
    x = as_tensor(x)
    w_ih, w_hh, b_ih, b_hh = (as_tensor(a) for a in (w_ih, w_hh, b_ih, b_hh))
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    h = w_hh.shape[1]
    if (w_ih.shape != (3 * h, x.shape[2]) or w_hh.shape != (3 * h, h)
            or b_ih.shape != (3 * h,) or b_hh.shape != (3 * h,)):
        raise ShapeError(f"gru: input {x.shape} incompatible with W_ih {w_ih.shape}, W_hh {w_hh.shape}")
    xw = matmul(x, transpose(w_ih)) + b_ih  # B, L, 3H
    xw_t = np.ascontiguousarray(xw.data.transpose(1, 0, 2))
    whT = np.ascontiguousarray(w_hh.data.T)
    hs, r, z, n, hn = kernels.gru_forward(xw_t, whT, b_hh.data)
    out = hs[1:].transpose(1, 0, 2)

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2))
        dxw, dwhT, dbh = kernels.gru_backward(gt, hs, r, z, n, hn, whT)
        return dxw.transpose(1, 0, 2), dwhT.T, dbh

    y = make_node(np.ascontiguousarray(out), (xw, w_hh, b_hh), vjp, "gru")
    return reshape(y, y.shape[1:]) if unbatched else y


def bigru(x, forward_params, backward_params):
    """Bidirectional GRU; per-frame outputs are ``[forward, backward]`` concatenated.

    Each params argument is ``(w_ih, w_hh, b_ih, b_hh)``.
    """
    x = as_tensor(x)
    axis = x.ndim - 2
    rev = (slice(None),) * axis + (slice(None, None, -1),)
    fwd = gru(x, *forward_params)
    bwd = gru(x[rev], *backward_params)[rev]
    return concat([fwd, bwd], axis=-1)

# ---------------------------------------------------------------------------
# network


@dataclass
class ArchConfig:
    n_mels: int = 64
    shared_channels: tuple = (128, 128, 128)
    shared_freq_pools: tuple = (8, 2, 2)
    scene_channels: tuple = (256, 256)
    scene_time_pool: int = 25
    scene_hidden: int = 32
    n_scenes: int = 4
    gru_units: int = 32
    event_hidden: int = 32
    n_events: int = 25
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.shared_channels = tuple(int(c) for c in self.shared_channels)
        self.shared_freq_pools = tuple(int(p) for p in self.shared_freq_pools)
        self.scene_channels = tuple(int(c) for c in self.scene_channels)

    def validate(self):
        if len(self.shared_channels) == 0 or len(self.shared_channels) != len(self.shared_freq_pools):
            raise ValueError("shared_channels and shared_freq_pools need equal, non-zero length")
        if len(self.scene_channels) != 2:
            raise ValueError("scene head has exactly two conv stages")
        if min(self.shared_freq_pools) < 1 or self.scene_time_pool < 1:
            raise ValueError("pool factors must be >= 1")
        prod = int(np.prod(self.shared_freq_pools))
        if self.n_mels % prod:
            raise ValueError(f"product of frequency pools ({prod}) must divide n_mels ({self.n_mels})")
        for name in ("n_scenes", "n_events", "gru_units", "event_hidden", "scene_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self

    @property
    def trunk_freq_bins(self):
        return self.n_mels // int(np.prod(self.shared_freq_pools))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def tiny(cls, n_mels=64, n_scenes=4, n_events=6, channels=8, gru_units=8, hidden=16, time_pool=5):
        """Desk-scale preset used by the shipped benchmarks."""
        return cls(n_mels=n_mels, shared_channels=(channels,) * 3, shared_freq_pools=(8, 2, 2),
                   scene_channels=(2 * channels, 2 * channels), scene_time_pool=time_pool,
                   scene_hidden=hidden, n_scenes=n_scenes, gru_units=gru_units,
                   event_hidden=hidden, n_events=n_events)


@dataclass
class ModelOutput:
    """Posteriors: ``scene`` is ``(B, N)`` (or ``(N,)``), ``event`` is ``(B, L, M)`` (or ``(L, M)``)."""

    scene: Tensor
    event: Tensor

    @property
    def scene_posterior(self):
        return self.scene.data

    @property
    def event_posterior(self):
        return self.event.data


class MTLModel:
    """Shared conv trunk feeding a conv scene head and a BiGRU event head."""

    def __init__(self, arch, params, bn):
        self.arch = arch
        self.params = params  # name -> leaf Tensor, in creation order
        self.bn = bn  # name -> BatchNormState

    def parameters(self):
        return list(self.params.values())

    def _bn(self, x, name, train):
        return batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name], train)

    def _conv_block(self, x, name, train):
        x = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        x = self._bn(x, f"{name}.bn", train)
        return leaky_relu(x, self.arch.leaky_slope)

    def forward(self, x, train=False):
        """``x`` is ``(B, D, L)`` log-mel features (or one ``(D, L)`` matrix)."""
        a, p = self.arch, self.params
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        unbatched = data.ndim == 2
        if unbatched:
            data = data[None]
        if data.shape[1] != a.n_mels:
            raise ShapeError(f"model: input has {data.shape[1]} mel bins, arch expects {a.n_mels}")
        bsz, _, length = data.shape
        h = Tensor(np.ascontiguousarray(data.transpose(0, 2, 1))[:, None])  # B, 1, L, D
        for i, pool in enumerate(a.shared_freq_pools):
            h = self._conv_block(h, f"shared{i}", train)
            h = max_pool2d(h, 1, pool)
            _check_finite(h, f"shared{i}")

        s = self._conv_block(h, "scene0", train)
        s = max_pool2d(s, a.scene_time_pool, 1)
        s = self._conv_block(s, "scene1", train)
        s = max_(s, axis=(2, 3))
        s = leaky_relu(linear(s, p["scene_fc0.weight"], p["scene_fc0.bias"]), a.leaky_slope)
        scene = softmax(linear(s, p["scene_fc1.weight"], p["scene_fc1.bias"]), axis=-1)
        _check_finite(scene, "scene_out")

        c, fb = h.shape[1], h.shape[3]
        e = reshape(transpose(h, (0, 2, 1, 3)), (bsz, length, c * fb))
        e = bigru(e, self._gru_params("gru_f"), self._gru_params("gru_b"))
        _check_finite(e, "bigru")
        e = leaky_relu(linear(e, p["event_fc0.weight"], p["event_fc0.bias"]), a.leaky_slope)
        event = sigmoid(linear(e, p["event_fc1.weight"], p["event_fc1.bias"]))
        _check_finite(event, "event_out")
        if unbatched:
            scene, event = reshape(scene, scene.shape[1:]), reshape(event, event.shape[1:])
        return ModelOutput(scene, event)

    __call__ = forward

    def _gru_params(self, name):
        p = self.params
        return p[f"{name}.w_ih"], p[f"{name}.w_hh"], p[f"{name}.b_ih"], p[f"{name}.b_hh"]

    def state_arrays(self):
        """Parameters then batch-norm running statistics, as ``(name, array)`` pairs."""
        out = [(k, v.data) for k, v in self.params.items()]
        for k, st in self.bn.items():
            out.append((f"{k}.running_mean", st.running_mean))
            out.append((f"{k}.running_var", st.running_var))
            out.append((f"{k}.updates", np.array([float(st.updates)])))
        return out


def _check_finite(t, layer):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite activation in layer {layer}")


def build_mtl_model(arch, seed=0):
    """Model with Glorot-uniform weights (``±sqrt(6 / (fan_in + fan_out))``), zero biases, unit BN scales."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params, bn = {}, {}

    def glorot(name, shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True, name=name)

    def zeros(name, n, value=0.0):
        params[name] = Tensor(np.full(n, value), requires_grad=True, name=name)

    def conv(name, cin, cout):
        glorot(f"{name}.weight", (cout, cin, 3, 3), cin * 9, cout * 9)
        zeros(f"{name}.bias", cout)
        zeros(f"{name}.bn.gamma", cout, 1.0)
        zeros(f"{name}.bn.beta", cout)
        bn[f"{name}.bn"] = BatchNormState(cout, arch.bn_momentum, arch.bn_eps)

    def fc(name, nin, nout):
        glorot(f"{name}.weight", (nout, nin), nin, nout)
        zeros(f"{name}.bias", nout)

    def gru_dir(name, nin, units):
        glorot(f"{name}.w_ih", (3 * units, nin), nin, 3 * units)
        glorot(f"{name}.w_hh", (3 * units, units), units, 3 * units)
        zeros(f"{name}.b_ih", 3 * units)
        zeros(f"{name}.b_hh", 3 * units)

    cin = 1
    for i, cout in enumerate(arch.shared_channels):
        conv(f"shared{i}", cin, cout)
        cin = cout
    conv("scene0", cin, arch.scene_channels[0])
    conv("scene1", arch.scene_channels[0], arch.scene_channels[1])
    fc("scene_fc0", arch.scene_channels[1], arch.scene_hidden)
    fc("scene_fc1", arch.scene_hidden, arch.n_scenes)
    bridge = cin * arch.trunk_freq_bins
    gru_dir("gru_f", bridge, arch.gru_units)
    gru_dir("gru_b", bridge, arch.gru_units)
    fc("event_fc0", 2 * arch.gru_units, arch.event_hidden)
    fc("event_fc1", arch.event_hidden, arch.n_events)
    return MTLModel(arch, params, bn)


def mtl_forward(model, x, train=False):
    return model.forward(x.values if hasattr(x, "values") else x, train=train)

# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, meta=None):
    header = json.dumps({"arch": model.arch.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    model = build_mtl_model(ArchConfig.from_dict(header["arch"]), seed=0)
    for name, t in model.params.items():
        if arrays[name].shape != t.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name]
    for name, st in model.bn.items():
        st.running_mean = arrays[f"{name}.running_mean"]
        st.running_var = arrays[f"{name}.running_var"]
        st.updates = int(arrays[f"{name}.updates"][0])
    return model, header["meta"]
