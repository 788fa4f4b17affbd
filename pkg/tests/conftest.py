"""Shared oracles: naive reference implementations kept deliberately
independent of the package's kernels (plain nested loops), plus a guarded
central-difference gradient checker."""

import numpy as np
import pytest

from rootsr.autodiff import backward, collect_pool_indices


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# reference kernels


def conv3d_ref(x, w, b):
    """Seven nested loops, no tricks."""
    O, C, kd, kh, kw = w.shape
    _, D, H, W = x.shape
    out = np.zeros((O, D - kd + 1, H - kh + 1, W - kw + 1), dtype=np.float64)
    for o in range(O):
        for d in range(out.shape[1]):
            for h in range(out.shape[2]):
                for v in range(out.shape[3]):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kd):
                            for j in range(kh):
                                for l in range(kw):
                                    acc += w[o, c, i, j, l] * x[c, d + i, h + j, v + l]
                    out[o, d, h, v] = acc + b[o]
    return out


def conv_transpose3d_ref(x, w, b):
    """Scatter-accumulate: each input voxel writes its 2x2x2 output block."""
    C, D, H, W = x.shape
    _, O = w.shape[:2]
    out = np.zeros((O, 2 * D, 2 * H, 2 * W), dtype=np.float64)
    for c in range(C):
        for d in range(D):
            for h in range(H):
                for v in range(W):
                    for o in range(O):
                        for a in range(2):
                            for bb in range(2):
                                for g in range(2):
                                    out[o, 2 * d + a, 2 * h + bb, 2 * v + g] += (
                                        x[c, d, h, v] * w[c, o, a, bb, g]
                                    )
    for o in range(O):
        out[o] += b[o]
    return out


def maxpool3d_ref(x):
    C, D, H, W = x.shape
    out = np.zeros((C, D // 2, H // 2, W // 2), dtype=x.dtype)
    for c in range(C):
        for d in range(D // 2):
            for h in range(H // 2):
                for v in range(W // 2):
                    out[c, d, h, v] = x[
                        c, 2 * d : 2 * d + 2, 2 * h : 2 * h + 2, 2 * v : 2 * v + 2
                    ].max()
    return out


def edt_squared_ref(mask):
    """O(n^2) scan: for every voxel, the min squared distance to any feature."""
    pts = np.argwhere(mask)
    out = np.full(mask.shape, np.iinfo(np.int64).max, dtype=np.int64)
    if len(pts) == 0:
        return out
    for d in range(mask.shape[0]):
        for h in range(mask.shape[1]):
            for w in range(mask.shape[2]):
                dd = pts - np.array([d, h, w])
                out[d, h, w] = int((dd * dd).sum(axis=1).min())
    return out


def tolerant_prf_ref(pred, gt, tol):
    """All-pairs distances, no transforms."""
    p_pts = np.argwhere(pred)
    g_pts = np.argwhere(gt)
    if len(p_pts) == 0 and len(g_pts) == 0:
        return 1.0, 1.0, 1.0
    if len(p_pts) == 0 or len(g_pts) == 0:
        return 0.0, 0.0, 0.0
    t2 = tol * tol
    mp = sum(
        1 for p in p_pts if ((g_pts - p) ** 2).sum(axis=1).min() <= t2
    )
    mg = sum(
        1 for g in g_pts if ((p_pts - g) ** 2).sum(axis=1).min() <= t2
    )
    prec, rec = mp / len(p_pts), mg / len(g_pts)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient_check(build_loss, tensors, h=1e-4, sample=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    build_loss() must rebuild the scalar loss Tensor from the current
    values of `tensors` (float64). Coordinates whose FD stencil crosses a
    maxpool argmax change are skipped (the function is not differentiable
    there); returns (max_rel_err, n_checked, n_skipped).
    """
    loss = build_loss()
    patterns0 = collect_pool_indices(loss)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.value) for t in tensors]
    gscale = max(float(np.abs(a).max()) for a in analytic)
    gscale = max(gscale, 1e-12)

    r = rng(seed)
    max_rel = 0.0
    checked = skipped = 0
    for t, grad in zip(tensors, analytic):
        flat = t.value.view()
        flat.shape = (-1,)  # raises if a copy would be needed
        n = flat.size
        if sample is None or sample >= n:
            coords = np.arange(n)
        else:
            coords = r.choice(n, size=sample, replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            lp = build_loss()
            pats_p = collect_pool_indices(lp)
            flat[ci] = orig - h
            lm = build_loss()
            pats_m = collect_pool_indices(lm)
            flat[ci] = orig
            stable = all(
                np.array_equal(a, b) and np.array_equal(a, c)
                for a, b, c in zip(patterns0, pats_p, pats_m)
            )
            if not stable:
                skipped += 1
                continue
            fd = (float(lp.value) - float(lm.value)) / (2 * h)
            an = float(grad.reshape(-1)[ci])
            denom = max(abs(an), abs(fd), gscale * 1e-3)
            max_rel = max(max_rel, abs(fd - an) / denom)
            checked += 1
    return max_rel, checked, skipped


@pytest.fixture
def seeded_rng():
    return rng(12345)
