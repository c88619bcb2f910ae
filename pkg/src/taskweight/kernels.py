"""Hot inner loops of the layer primitives.

Every kernel exists twice: a vectorized numpy version and a numba version.
The public names are bound to one of them at import time according to
``TASKWEIGHT_NUMBA`` (see :mod:`taskweight._accel`); both sets stay reachable
through :data:`IMPLEMENTATIONS` for benchmarking and cross-checking.

Layouts: images are ``(batch, channels, time, freq)``; recurrent arrays are
time-major ``(time, batch, features)`` so that each step is contiguous.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im for odd square kernels with "same" padding


def _np_im2col(xpad, k):
    b, c, tp, fp = xpad.shape
    t, f = tp - k + 1, fp - k + 1
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # b, c, t, f, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, t * f)


def _np_col2im(cols, c, t, f, k):
    b = cols.shape[0]
    out = np.zeros((b, c, t + k - 1, f + k - 1))
    cols = cols.reshape(b, c, k, k, t, f)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + t, j:j + f] += cols[:, :, i, j]
    return out


def _nb_im2col_impl(xpad, k):
    b, c, tp, fp = xpad.shape
    t = tp - k + 1
    f = fp - k + 1
    cols = np.empty((b, c * k * k, t * f))
    for bi in range(b):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for ti in range(t):
                        base = ti * f
                        for fi in range(f):
                            cols[bi, row, base + fi] = xpad[bi, ci, ti + i, fi + j]
    return cols


def _nb_col2im_impl(cols, c, t, f, k):
    b = cols.shape[0]
    out = np.zeros((b, c, t + k - 1, f + k - 1))
    for bi in range(b):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for ti in range(t):
                        base = ti * f
                        for fi in range(f):
                            out[bi, ci, ti + i, fi + j] += cols[bi, row, base + fi]
    return out


_nb_im2col = njit(_nb_im2col_impl)
_nb_col2im = njit(_nb_col2im_impl)

# ---------------------------------------------------------------------------
# disjoint-window max pooling; trailing remainders are dropped


def _np_maxpool_forward(x, pt, pf):
    b, c, t, f = x.shape
    to, fo = t // pt, f // pf
    win = x[:, :, :to * pt, :fo * pf].reshape(b, c, to, pt, fo, pf)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, to, fo, pt * pf)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _np_maxpool_backward(g, idx, shape, pt, pf):
    b, c, t, f = shape
    to, fo = g.shape[2], g.shape[3]
    win = np.zeros((b, c, to, fo, pt * pf))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(b, c, to, fo, pt, pf).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, to * pt, fo * pf)
    dx = np.zeros(shape)
    dx[:, :, :to * pt, :fo * pf] = win
    return dx


def _nb_maxpool_forward_impl(x, pt, pf):
    b, c, t, f = x.shape
    to = t // pt
    fo = f // pf
    out = np.empty((b, c, to, fo))
    idx = np.empty((b, c, to, fo), dtype=np.int64)
    for bi in range(b):
        for ci in range(c):
            for oi in range(to):
                for oj in range(fo):
                    best = x[bi, ci, oi * pt, oj * pf]
                    arg = 0
                    for i in range(pt):
                        for j in range(pf):
                            v = x[bi, ci, oi * pt + i, oj * pf + j]
                            if v > best:
                                best = v
                                arg = i * pf + j
                    out[bi, ci, oi, oj] = best
                    idx[bi, ci, oi, oj] = arg
    return out, idx


def _nb_maxpool_backward_impl(g, idx, shape, pt, pf):
    b, c, to, fo = g.shape
    dx = np.zeros(shape)
    for bi in range(b):
        for ci in range(c):
            for oi in range(to):
                for oj in range(fo):
                    a = idx[bi, ci, oi, oj]
                    dx[bi, ci, oi * pt + a // pf, oj * pf + a % pf] += g[bi, ci, oi, oj]
    return dx


_nb_maxpool_forward = njit(_nb_maxpool_forward_impl)
_nb_maxpool_backward_raw = njit(_nb_maxpool_backward_impl)


def _nb_maxpool_backward(g, idx, shape, pt, pf):
    return _nb_maxpool_backward_raw(np.ascontiguousarray(g), idx, tuple(int(s) for s in shape), pt, pf)

# ---------------------------------------------------------------------------
# single-direction GRU recurrence
#
#   r = sig(xw_r + h Wr + br)     z = sig(xw_z + h Wz + bz)
#   n = tanh(xw_n + r * (h Wn + bn))
#   h' = (1 - z) n + z h
#
# ``xw`` holds the input projections (x W_ih^T + b_ih) for all steps; ``whT``
# is W_hh^T with gate blocks ordered r, z, n. The same source serves both
# backends.


def _gru_forward_impl(xw, whT, bh):
    steps, b, h3 = xw.shape
    h = h3 // 3
    hs = np.zeros((steps + 1, b, h))
    r = np.empty((steps, b, h))
    z = np.empty((steps, b, h))
    n = np.empty((steps, b, h))
    hn = np.empty((steps, b, h))
    for t in range(steps):
        hp = hs[t]
        gh = np.dot(hp, whT) + bh
        rt = 1.0 / (1.0 + np.exp(-(xw[t, :, :h] + gh[:, :h])))
        zt = 1.0 / (1.0 + np.exp(-(xw[t, :, h:2 * h] + gh[:, h:2 * h])))
        hnt = gh[:, 2 * h:]
        nt = np.tanh(xw[t, :, 2 * h:] + rt * hnt)
        hs[t + 1] = (1.0 - zt) * nt + zt * hp
        r[t] = rt
        z[t] = zt
        n[t] = nt
        hn[t] = hnt
    return hs, r, z, n, hn


def _gru_backward_impl(dout, hs, r, z, n, hn, whT):
    steps, b, h = dout.shape
    dxw = np.empty((steps, b, 3 * h))
    dwhT = np.zeros((h, 3 * h))
    dbh = np.zeros(3 * h)
    dgh = np.empty((b, 3 * h))
    wh = np.ascontiguousarray(whT.T)
    dh = np.zeros((b, h))
    for t in range(steps - 1, -1, -1):
        dh = dh + dout[t]
        hp = hs[t]
        rt = r[t]
        zt = z[t]
        nt = n[t]
        dn = dh * (1.0 - zt)
        dz = dh * (hp - nt)
        dan = dn * (1.0 - nt * nt)
        dar = dan * hn[t] * rt * (1.0 - rt)
        daz = dz * zt * (1.0 - zt)
        dgh[:, :h] = dar
        dgh[:, h:2 * h] = daz
        dgh[:, 2 * h:] = dan * rt
        dxw[t, :, :h] = dar
        dxw[t, :, h:2 * h] = daz
        dxw[t, :, 2 * h:] = dan
        dwhT += np.dot(np.ascontiguousarray(hp.T), dgh)
        dbh += dgh.sum(axis=0)
        dh = dh * zt + np.dot(dgh, wh)
    return dxw, dwhT, dbh


_nb_gru_forward = njit(_gru_forward_impl)
_nb_gru_backward = njit(_gru_backward_impl)


def _np_gru_forward(xw, whT, bh):
    with np.errstate(over="ignore"):
        return _gru_forward_impl(xw, whT, bh)


_np_gru_backward = _gru_backward_impl

IMPLEMENTATIONS = {
    "numpy": {
        "im2col": _np_im2col,
        "col2im": _np_col2im,
        "maxpool_forward": _np_maxpool_forward,
        "maxpool_backward": _np_maxpool_backward,
        "gru_forward": _np_gru_forward,
        "gru_backward": _np_gru_backward,
    },
    "numba": {
        "im2col": _nb_im2col,
        "col2im": _nb_col2im,
        "maxpool_forward": _nb_maxpool_forward,
        "maxpool_backward": _nb_maxpool_backward,
        "gru_forward": _nb_gru_forward,
        "gru_backward": _nb_gru_backward,
    },
}

BACKEND = "numba" if USE_NUMBA else "numpy"
_active = IMPLEMENTATIONS[BACKEND]

im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool_forward = _active["maxpool_forward"]
maxpool_backward = _active["maxpool_backward"]
gru_forward = _active["gru_forward"]
gru_backward = _active["gru_backward"]
