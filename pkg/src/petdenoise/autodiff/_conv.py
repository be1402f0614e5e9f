"""Numpy kernels for N-d cross-correlation and its two adjoints.

Layout is channels-first: inputs ``[B, C, *spatial]``, kernels
``[C_out, C_in, *k]``. The three kernels below are closed under
differentiation (each one's adjoints are the other two), which is what
makes double backprop through convolutions possible.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if not any(pads):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])


def _columns(x: np.ndarray, ksize, stride, pads) -> np.ndarray:
    """im2col in ``[B * prod(out), prod(k) * C_in]`` layout (channel fastest)."""
    nd = len(ksize)
    xcl = np.moveaxis(x, 1, -1)
    if any(pads):
        xcl = np.pad(xcl, [(0, 0)] + [(p, p) for p in pads] + [(0, 0)])
    spatial = tuple(range(1, 1 + nd))
    win = sliding_window_view(xcl, ksize, axis=spatial)
    if any(s != 1 for s in stride):
        win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    # [B, *O, C, *K] -> [B, *O, *K, C]: copies run along contiguous channels
    order = (0,) + spatial + tuple(range(2 + nd, 2 + 2 * nd)) + (1 + nd,)
    cols = np.ascontiguousarray(win.transpose(order))
    return cols.reshape(-1, int(np.prod(ksize)) * x.shape[1])


def _channels_last(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, g.shape[1])


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """``[C_out, C_in, *K]`` -> ``[C_out, prod(K) * C_in]`` matching :func:`_columns`."""
    return np.moveaxis(w, 1, -1).reshape(w.shape[0], -1)


def conv(x: np.ndarray, w: np.ndarray, stride, pads) -> np.ndarray:
    """Cross-correlate ``x`` with ``w``; returns ``[B, C_out, *out]``."""
    nd = w.ndim - 2
    B = x.shape[0]
    co = w.shape[0]
    ksize = w.shape[2:]
    osz = tuple(out_size(x.shape[2 + i], ksize[i], stride[i], pads[i]) for i in range(nd))
    cols = _columns(x, ksize, stride, pads)
    y = cols @ _kernel_matrix(w).T
    y = y.reshape((B,) + osz + (co,))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def conv_weight(x: np.ndarray, g: np.ndarray, stride, pads, ksize) -> np.ndarray:
    """Adjoint of :func:`conv` w.r.t. the kernel."""
    ksize = tuple(ksize)
    co, ci = g.shape[1], x.shape[1]
    cols = _columns(x, ksize, stride, pads)
    dw = (cols.T @ _channels_last(g)).reshape(ksize + (ci, co))
    nd = len(ksize)
    return np.ascontiguousarray(dw.transpose((nd + 1, nd) + tuple(range(nd))))


def conv_transpose(g: np.ndarray, w: np.ndarray, stride, pads, in_spatial) -> np.ndarray:
    """Adjoint of :func:`conv` w.r.t. the input; returns ``[B, C_in, *in_spatial]``."""
    nd = w.ndim - 2
    ksize = w.shape[2:]
    in_spatial = tuple(in_spatial)
    if all(s == 1 for s in stride):
        # stride 1: correlation of the padded gradient with the flipped kernel
        wf = np.ascontiguousarray(np.flip(np.swapaxes(w, 0, 1), axis=tuple(range(2, 2 + nd))))
        full = tuple(k - 1 - p for k, p in zip(ksize, pads))
        if all(f >= 0 for f in full):
            return conv(g, wf, stride, full)
    return _fold(g, w, stride, pads, in_spatial)


def _fold(g, w, stride, pads, in_spatial):
    nd = w.ndim - 2
    B, co = g.shape[:2]
    ci = w.shape[1]
    ksize = w.shape[2:]
    osz = g.shape[2:]
    cols = _channels_last(g) @ w.reshape(co, -1)
    cols = np.moveaxis(cols.reshape((B,) + tuple(osz) + (ci,) + tuple(ksize)), 1 + nd, 0)
    # cols: [C_in, B, *O, *K]
    padded = tuple(n + 2 * p for n, p in zip(in_spatial, pads))
    # room for windows that hang past the padded extent at large strides
    room = tuple(max(padded[i], (osz[i] - 1) * stride[i] + ksize[i]) for i in range(nd))
    out = np.zeros((ci, B) + room, dtype=np.result_type(g, w))
    for offset in np.ndindex(*ksize):
        idx = (slice(None), slice(None)) + tuple(
            slice(o, o + stride[i] * (osz[i] - 1) + 1, stride[i]) for i, o in enumerate(offset)
        )
        out[idx] += cols[(slice(None),) * (2 + nd) + offset]
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pads, in_spatial))
    return np.ascontiguousarray(np.moveaxis(out[crop], 0, 1))
