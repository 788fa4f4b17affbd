"""CPU kernels for valid 3D convolution and its gradients.

Each kernel has a numpy implementation (tensordot over sliding windows)
and a numba-compiled direct loop with row-local accumulators. The numba
path is ~7x faster on training shapes because it keeps the working set
in cache instead of materializing im2col buffers; it is selected at
import when numba is available and can be disabled with ROOTSR_NO_NUMBA=1.

All kernels use a fixed per-element summation order, so results are
bitwise reproducible run-to-run. The parallel loops partition disjoint
output slabs, which keeps them deterministic for any thread count.
"""

from __future__ import annotations

import os
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# numba's workqueue threading layer aborts the process when two host threads
# launch parallel kernels concurrently; all jitted calls go through this lock
NUMBA_LOCK = threading.Lock()


def _conv3d_fwd_np(x, w):
    win = sliding_window_view(x, w.shape[2:], axis=(1, 2, 3))
    return np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def _conv3d_gx_np(go, w, in_shape):
    kd, kh, kw = w.shape[2:]
    pad = ((0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1))
    gop = np.pad(go, pad)
    win = sliding_window_view(gop, (kd, kh, kw), axis=(1, 2, 3))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1])
    return np.tensordot(wf, win, axes=([0, 2, 3, 4], [0, 4, 5, 6]))


def _conv3d_gw_np(x, go, w_shape):
    win = sliding_window_view(x, go.shape[1:], axis=(1, 2, 3))
    gw = np.tensordot(go, win, axes=([1, 2, 3], [4, 5, 6]))
    return np.ascontiguousarray(gw.transpose(1, 0, 2, 3, 4))


HAVE_NUMBA = False
if os.environ.get("ROOTSR_NO_NUMBA", "") != "1":
    try:
        # the default TBB layer warns on mismatched versions; workqueue is
        # always available and plenty for the core counts targeted here
        os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
        import numba
        from numba import prange

        @numba.njit(parallel=True, fastmath=False, cache=True)
        def _conv3d_fwd_nb(x, w, out):
            O, C, kd, kh, kw = w.shape
            _, D, H, W = out.shape
            for o in prange(O):
                for d in range(D):
                    for h in range(H):
                        row = out[o, d, h]
                        for t in range(W):
                            row[t] = 0.0
                        for c in range(C):
                            for i in range(kd):
                                for j in range(kh):
                                    xr = x[c, d + i, h + j]
                                    for l in range(kw):
                                        s = w[o, c, i, j, l]
                                        for t in range(W):
                                            row[t] += s * xr[t + l]

        @numba.njit(parallel=True, fastmath=False, cache=True)
        def _conv3d_gx_nb(go, w, gx):
            O, C, kd, kh, kw = w.shape
            _, Do, Ho, Wo = go.shape
            _, Di, Hi, Wi = gx.shape
            for c in prange(C):
                row = np.zeros(Wi, gx.dtype)
                for dd in range(Di):
                    for hh in range(Hi):
                        for t in range(Wi):
                            row[t] = 0.0
                        for i in range(kd):
                            d = dd - i
                            if d < 0 or d >= Do:
                                continue
                            for j in range(kh):
                                h = hh - j
                                if h < 0 or h >= Ho:
                                    continue
                                for o in range(O):
                                    gor = go[o, d, h]
                                    for l in range(kw):
                                        s = w[o, c, i, j, l]
                                        for t in range(Wo):
                                            row[t + l] += s * gor[t]
                        for t in range(Wi):
                            gx[c, dd, hh, t] = row[t]

        @numba.njit(parallel=True, fastmath=False, cache=True)
        def _conv3d_gw_nb(x, go, gw):
            O, C, kd, kh, kw = gw.shape
            _, Do, Ho, Wo = go.shape
            for o in prange(O):
                vacc = np.zeros((kw, Wo), gw.dtype)
                for c in range(C):
                    for i in range(kd):
                        for j in range(kh):
                            for l in range(kw):
                                for t in range(Wo):
                                    vacc[l, t] = 0.0
                            for d in range(Do):
                                for h in range(Ho):
                                    gor = go[o, d, h]
                                    xr = x[c, d + i, h + j]
                                    for l in range(kw):
                                        for t in range(Wo):
                                            vacc[l, t] += gor[t] * xr[t + l]
                            for l in range(kw):
                                s = vacc[l, 0] - vacc[l, 0]
                                for t in range(Wo):
                                    s += vacc[l, t]
                                gw[o, c, i, j, l] = s

        HAVE_NUMBA = True
    except Exception:  # pragma: no cover - numba missing or broken
        HAVE_NUMBA = False


def conv3d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation. x (C,D,H,W), w (O,C,kd,kh,kw) -> (O,D',H',W')."""
    out_shape = (w.shape[0],) + tuple(
        x.shape[1 + a] - w.shape[2 + a] + 1 for a in range(3)
    )
    if HAVE_NUMBA:
        out = np.empty(out_shape, dtype=x.dtype)
        with NUMBA_LOCK:
            _conv3d_fwd_nb(x, w, out)
        return out
    return _conv3d_fwd_np(x, w)


def conv3d_grad_input(go: np.ndarray, w: np.ndarray, in_shape) -> np.ndarray:
    if HAVE_NUMBA:
        gx = np.empty(in_shape, dtype=go.dtype)
        with NUMBA_LOCK:
            _conv3d_gx_nb(go, w, gx)
        return gx
    return _conv3d_gx_np(go, w, in_shape)


def conv3d_grad_weight(x: np.ndarray, go: np.ndarray, w_shape) -> np.ndarray:
    if HAVE_NUMBA:
        gw = np.empty(w_shape, dtype=go.dtype)
        with NUMBA_LOCK:
            _conv3d_gw_nb(x, go, gw)
        return gw
    return _conv3d_gw_np(x, go, w_shape)
