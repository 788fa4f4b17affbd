"""Reverse-mode automatic differentiation over dense tensors.

Implements exactly the operations the super-resolution U-Net needs:
valid 3D convolution, 2x2x2 maxpool, stride-2 transposed convolution,
center-crop/concat, sigmoid, and the weighted masked binary cross-entropy
loss, plus an Adam optimizer.

A Tensor wraps a numpy array and remembers how it was produced; backward()
walks the graph in reverse topological order, propagating adjoints through
per-op vjp closures and accumulating them into .grad. Repeated backward
calls accumulate (each pass adds a fresh adjoint, so two passes double
every gradient).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .volume import Volume

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("value", "grad", "name", "_parents", "_vjp", "pool_index")

    def __init__(self, value, parents=(), vjp=None, name=""):
        self.value = np.asarray(value)
        self.grad = None
        self.name = name
        self.pool_index = None
        if _GRAD_ENABLED[-1]:
            self._parents = tuple(parents)
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, name={self.name!r})"


def tensor(value, dtype=None, name="") -> Tensor:
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr, name=name)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _check_same_dtype(*tensors):
    dt = tensors[0].value.dtype
    for t in tensors[1:]:
        if t.value.dtype != dt:
            raise ValueError(f"mixed tensor dtypes: {dt} vs {t.value.dtype}")
    return dt


# ---------------------------------------------------------------------------
# layer operations


def conv3d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid cross-correlation plus per-output-channel bias.

    x (C,D,H,W), w (O,C,k,k,k), b (O) -> (O, D-k+1, H-k+1, W-k+1).
    """
    _check_same_dtype(x, w, b)
    C = x.value.shape[0]
    O, Cw = w.value.shape[:2]
    if Cw != C:
        raise ValueError(f"channel mismatch: input has {C}, weight expects {Cw}")
    if b.value.shape != (O,):
        raise ValueError(f"bias shape {b.value.shape} != ({O},)")
    for a in range(3):
        if x.value.shape[1 + a] < w.value.shape[2 + a]:
            raise ValueError(
                f"spatial dim {x.value.shape[1 + a]} < kernel {w.value.shape[2 + a]} on axis {a}"
            )
    xv, wv = x.value, w.value
    out = _kernels.conv3d_forward(xv, wv)
    out += b.value[:, None, None, None]

    def vjp(g):
        gx = _kernels.conv3d_grad_input(np.ascontiguousarray(g), wv, xv.shape)
        gw = _kernels.conv3d_grad_weight(xv, np.ascontiguousarray(g), wv.shape)
        gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    return Tensor(out, (x, w, b), vjp)


def maxpool3d(x: Tensor) -> Tensor:
    """Max over disjoint 2x2x2 blocks; gradient routes to the argmax voxel
    (first in scan order on ties)."""
    C, D, H, W = x.value.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"odd spatial dim in {(D, H, W)}: maxpool needs even sizes")
    d2, h2, w2 = D // 2, H // 2, W // 2
    blocks = (
        x.value.reshape(C, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(C, d2, h2, w2, 8)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        buf = np.zeros((C, d2, h2, w2, 8), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        gx = (
            buf.reshape(C, d2, h2, w2, 2, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(C, D, H, W)
        )
        return (np.ascontiguousarray(gx),)

    t = Tensor(out, (x,), vjp)
    t.pool_index = idx
    return t


def conv_transpose3d_x2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transposed convolution with kernel 2, stride 2: exact 2x upsampling.

    x (C,D,H,W), w (C,O,2,2,2), b (O) -> (O,2D,2H,2W). Kernel size equals
    stride, so every output voxel receives exactly one input contribution.
    """
    _check_same_dtype(x, w, b)
    C, D, H, W = x.value.shape
    Cw, O = w.value.shape[:2]
    if Cw != C:
        raise ValueError(f"channel mismatch: input has {C}, weight expects {Cw}")
    if w.value.shape[2:] != (2, 2, 2):
        raise ValueError(f"weight kernel must be 2x2x2, got {w.value.shape[2:]}")
    xv, wv = x.value, w.value
    out6 = np.einsum("cdhw,coabg->odahbwg", xv, wv, optimize=True)
    out = np.ascontiguousarray(out6.reshape(O, 2 * D, 2 * H, 2 * W))
    out += b.value[:, None, None, None]

    def vjp(g):
        g6 = g.reshape(O, D, 2, H, 2, W, 2)
        gx = np.einsum("odahbwg,coabg->cdhw", g6, wv, optimize=True)
        gw = np.einsum("cdhw,odahbwg->coabg", xv, g6, optimize=True)
        gb = g.sum(axis=(1, 2, 3))
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb

    return Tensor(out, (x, w, b), vjp)


def _center_slices(big, small):
    sl = [slice(None)]
    for ax in range(3):
        margin = big[1 + ax] - small[1 + ax]
        if margin < 0:
            raise ValueError("crop extent exceeds tensor extent")
        if margin % 2:
            raise ValueError(f"odd margin {margin} on spatial axis {ax}")
        sl.append(slice(margin // 2, margin // 2 + small[1 + ax]))
    return tuple(sl)


def center_crop_t(x: Tensor, extent: tuple[int, int, int]) -> Tensor:
    """Spatial center crop as a differentiable op; margins must be even."""
    target = (x.value.shape[0],) + tuple(extent)
    sl = _center_slices(x.value.shape, target)
    out = np.ascontiguousarray(x.value[sl])

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[sl] = g
        return (gx,)

    return Tensor(out, (x,), vjp)


def concat_center_crop(a: Tensor, b: Tensor) -> Tensor:
    """Center-crop the spatially larger input to the smaller one's extent,
    then concatenate along channels (a's channels first)."""
    _check_same_dtype(a, b)
    target = tuple(min(a.value.shape[1 + ax], b.value.shape[1 + ax]) for ax in range(3))
    sla = _center_slices(a.value.shape, (a.value.shape[0],) + target)
    slb = _center_slices(b.value.shape, (b.value.shape[0],) + target)
    out = np.concatenate([a.value[sla], b.value[slb]], axis=0)
    ca = a.value.shape[0]

    def vjp(g):
        ga = np.zeros_like(a.value)
        gb = np.zeros_like(b.value)
        ga[sla] = g[:ca]
        gb[slb] = g[ca:]
        return ga, gb

    return Tensor(out, (a, b), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)); values strictly inside (0, 1).

    Saturated values are nudged to the nearest representable float inside
    the open interval so downstream strict comparisons (thresholding at
    0 or 1) behave like the exact function's.
    """
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    one = v.dtype.type(1)
    zero = v.dtype.type(0)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (x,), vjp)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossConfig:
    """Binary cross-entropy options: `root_weight` multiplies the loss terms
    of foreground (root) voxels; `use_dontcare` drops flagged voxels from
    the average entirely; probabilities are clamped to
    [clamp_epsilon, 1 - clamp_epsilon] before the log."""

    root_weight: float = 1.0
    use_dontcare: bool = False
    clamp_epsilon: float = 1e-7

    def __post_init__(self):
        if not self.root_weight > 0:
            raise ValueError(f"root_weight must be > 0, got {self.root_weight}")
        if not 0 < self.clamp_epsilon < 0.5:
            raise ValueError(f"clamp_epsilon must be in (0, 0.5), got {self.clamp_epsilon}")


def weighted_masked_bce(pred: Tensor, target, dontcare=None, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean binary cross-entropy over non-don't-care voxels, with root voxels
    weighted by cfg.root_weight in the numerator only:

        L = -sum_i w_i * [y_i log p_i + (1-y_i) log(1-p_i)] / N_cared

    where w_i = root_weight if y_i = 1 else 1, the sum skips don't-care
    voxels, and N_cared counts the voxels kept.
    """
    y = _as_array(target)
    if y.shape != pred.value.shape:
        raise ValueError(f"target shape {y.shape} != pred shape {pred.value.shape}")
    dc = None
    if cfg.use_dontcare and dontcare is not None:
        dc = _as_array(dontcare)
        if dc.shape != pred.value.shape:
            raise ValueError(f"dontcare shape {dc.shape} != pred shape {pred.value.shape}")

    y64 = y.astype(np.float64)
    care = np.ones_like(y64) if dc is None else 1.0 - (dc != 0)
    n_cared = care.sum()
    if n_cared == 0:
        raise ValueError("all voxels are don't-care: loss undefined")

    eps = cfg.clamp_epsilon
    p = pred.value.astype(np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    weights = np.where(y64 != 0, cfg.root_weight, 1.0) * care
    terms = y64 * np.log(pc) + (1.0 - y64) * np.log1p(-pc)
    loss = -(weights * terms).sum() / n_cared

    def vjp(g):
        interior = (p > eps) & (p < 1.0 - eps)
        dterm = y64 / pc - (1.0 - y64) / (1.0 - pc)
        gp = -(weights * dterm) / n_cared * interior
        return (np.asarray(g * gp, dtype=pred.value.dtype),)

    return Tensor(np.float64(loss), (pred,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every tensor reachable from `loss` with d loss / d t.

    Adjoints are propagated through fresh buffers and added into .grad at
    the end, so calling backward twice exactly doubles every gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.value.shape}")
    order = _toposort(loss)
    adj = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue  # defensive: every ancestor of the root receives an adjoint
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = adj.get(id(p))
                if acc is None:
                    # vjps return freshly-allocated buffers: take ownership
                    adj[id(p)] = np.asarray(pg, dtype=p.value.dtype)
                else:
                    acc += pg
        if node.grad is None:
            node.grad = g
        else:
            node.grad += g


def collect_pool_indices(root: Tensor):
    """Argmax patterns of every maxpool in the graph, in topological order.

    Finite-difference checks compare these between stencil endpoints: if a
    pattern changes, the stencil straddles a maxpool kink and the central
    difference is not a valid derivative estimate there.
    """
    return [n.pool_index for n in _toposort(root) if n.pool_index is not None]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @staticmethod
    def init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return AdamState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            step=0,
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(params, grads, state: AdamState) -> None:
    """One Adam update with bias correction; increments the step counter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p.value) if g is None else g
        if g.shape != p.value.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.value.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.value -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    state.step = t
