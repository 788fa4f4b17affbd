"""Exact Euclidean distance transform and distance-tolerant evaluation.

The EDT is the separable lower-envelope (parabola) method: one 1D pass per
axis, each computing d2[x] = min_y ((x - y)^2 + f[y]) over the previous
pass's output. Distances are exact squared integers; float64 is used only
for envelope bookkeeping, which is exact for any realistic grid size.

The distance-tolerant scores count a predicted voxel as matched when its
Euclidean distance to the nearest ground-truth voxel is at most d (and
symmetrically for recall). Don't-care voxels are removed from both masks
before matching. Conventions for empty masks: both empty -> precision =
recall = F1 = 1; exactly one empty -> all 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume

EDT_INF = np.int64(1) << 62  # sentinel: no feature voxel anywhere

_USE_NUMBA = os.environ.get("ROOTSR_NO_NUMBA", "") != "1"


def _edt_pass_rows(rows: np.ndarray) -> None:
    """In-place 1D squared-distance transform along the last axis of a 2D
    float64 array. np.inf marks absent features; rows of all-inf stay inf."""
    m, n = rows.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    d = np.empty(n, np.float64)
    for r in range(m):
        f = rows[r]
        k = -1
        for q in range(n):
            fq = f[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            while s <= z[k]:
                k -= 1
                s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            continue  # empty row: all inf already
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d[q] = (q - v[j]) * (q - v[j]) + f[v[j]]
        for q in range(n):
            f[q] = d[q]


if _USE_NUMBA:
    try:
        os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
        import numba

        @numba.njit(parallel=True, fastmath=False, cache=True)
        def _edt_pass_rows_par(rows):
            m, n = rows.shape
            for r in numba.prange(m):
                f = rows[r]
                v = np.empty(n, np.int64)
                z = np.empty(n + 1, np.float64)
                d = np.empty(n, np.float64)
                k = -1
                for q in range(n):
                    fq = f[q]
                    if fq == np.inf:
                        continue
                    if k < 0:
                        k = 0
                        v[0] = q
                        z[0] = -np.inf
                        z[1] = np.inf
                        continue
                    s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
                    while s <= z[k]:
                        k -= 1
                        s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
                    k += 1
                    v[k] = q
                    z[k] = s
                    z[k + 1] = np.inf
                if k < 0:
                    continue
                j = 0
                for q in range(n):
                    while z[j + 1] < q:
                        j += 1
                    d[q] = (q - v[j]) * (q - v[j]) + f[v[j]]
                for q in range(n):
                    f[q] = d[q]

        def _edt_pass(rows):
            from ._kernels import NUMBA_LOCK

            with NUMBA_LOCK:
                _edt_pass_rows_par(rows)

    except Exception:  # pragma: no cover

        def _edt_pass(rows):
            _edt_pass_rows(rows)

else:

    def _edt_pass(rows):
        _edt_pass_rows(rows)


@dataclass(frozen=True)
class DistanceField:
    """Per-voxel squared Euclidean distance (int64, voxel^2 units) to the
    nearest feature voxel; EDT_INF everywhere when the mask is empty."""

    dist2: np.ndarray

    @property
    def shape(self):
        return self.dist2.shape


def _as_mask3d(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"mask must be single-channel, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"mask must be 3-d or (1,D,H,W), got shape {arr.shape}")
    return arr != 0


def edt_squared(mask) -> DistanceField:
    """Exact squared Euclidean distance to the nearest 1-voxel."""
    m = _as_mask3d(mask)
    D, H, W = m.shape
    f = np.where(m, 0.0, np.inf)
    _edt_pass(f.reshape(D * H, W))  # contiguous view: modified in place
    ft = np.ascontiguousarray(f.transpose(0, 2, 1))
    _edt_pass(ft.reshape(D * W, H))
    f = ft.transpose(0, 2, 1)
    ft = np.ascontiguousarray(f.transpose(1, 2, 0))
    _edt_pass(ft.reshape(H * W, D))
    f = np.ascontiguousarray(ft.transpose(2, 0, 1))
    out = np.full(m.shape, EDT_INF, dtype=np.int64)
    finite = np.isfinite(f)
    out[finite] = np.rint(f[finite]).astype(np.int64)
    return DistanceField(out)


@dataclass(frozen=True)
class ToleranceRow:
    tolerance: float
    precision: float
    recall: float
    f1: float
    pred_count: int
    gt_count: int
    matched_pred: int
    matched_gt: int


@dataclass(frozen=True)
class ToleranceReport:
    rows: tuple
    dontcare_excluded: bool = False
    meta: dict = field(default_factory=dict)

    def row(self, tolerance) -> ToleranceRow:
        for r in self.rows:
            if r.tolerance == tolerance:
                return r
        raise KeyError(f"no row for tolerance {tolerance}")


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def distance_tolerant_prf(pred, gt, tolerances, dontcare=None) -> ToleranceReport:
    """Precision/recall/F1 at each tolerance, matching by Euclidean distance."""
    p = _as_mask3d(pred)
    g = _as_mask3d(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    if dontcare is not None:
        dc = _as_mask3d(dontcare)
        if dc.shape != p.shape:
            raise ValueError(f"dontcare shape {dc.shape} != pred shape {p.shape}")
        keep = ~dc
        p = p & keep
        g = g & keep
    np_, ng = int(p.sum()), int(g.sum())
    rows = []
    if np_ and ng:
        d2_to_g = edt_squared(g).dist2[p]  # squared distance of each pred voxel to gt
        d2_to_p = edt_squared(p).dist2[g]
    for tol in tolerances:
        if tol < 0:
            raise ValueError(f"tolerance must be >= 0, got {tol}")
        if np_ == 0 and ng == 0:
            rows.append(ToleranceRow(tol, 1.0, 1.0, 1.0, 0, 0, 0, 0))
            continue
        if np_ == 0 or ng == 0:
            rows.append(ToleranceRow(tol, 0.0, 0.0, 0.0, np_, ng, 0, 0))
            continue
        t2 = float(tol) * float(tol)
        mp = int((d2_to_g <= t2).sum())
        mg = int((d2_to_p <= t2).sum())
        prec, rec = mp / np_, mg / ng
        rows.append(ToleranceRow(tol, prec, rec, _f1(prec, rec), np_, ng, mp, mg))
    return ToleranceReport(tuple(rows), dontcare_excluded=dontcare is not None)


# confusion categories
BG, TP, FP, FN = 0, 1, 2, 3


@dataclass(frozen=True)
class ConfusionVolume:
    """Per-voxel category: 0 background, 1 TP, 2 FP, 3 FN."""

    labels: np.ndarray
    tolerance: float


def confusion_map(pred, gt, d, dontcare=None) -> ConfusionVolume:
    """Pred voxels within d of ground truth are TP, the rest FP; ground-truth
    voxels not within d of the prediction are FN; don't-care voxels are
    background."""
    p = _as_mask3d(pred)
    g = _as_mask3d(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    if dontcare is not None:
        dc = _as_mask3d(dontcare)
        if dc.shape != p.shape:
            raise ValueError(f"dontcare shape {dc.shape} != pred shape {p.shape}")
        keep = ~dc
        p = p & keep
        g = g & keep
    t2 = float(d) * float(d)
    labels = np.zeros(p.shape, dtype=np.uint8)
    if p.any():
        if g.any():
            near_g = edt_squared(g).dist2 <= t2
        else:
            near_g = np.zeros(p.shape, dtype=bool)
        labels[p & near_g] = TP
        labels[p & ~near_g] = FP
    if g.any():
        if p.any():
            near_p = edt_squared(p).dist2 <= t2
        else:
            near_p = np.zeros(p.shape, dtype=bool)
        labels[g & ~near_p] = FN
    return ConfusionVolume(labels, float(d))


_CONFUSION_RGB = {BG: (0, 0, 0), TP: (0, 255, 0), FP: (255, 0, 0), FN: (0, 0, 255)}

_AXIS_INDEX = {"d": 0, "h": 1, "w": 2}


def export_confusion_slices(cv: ConfusionVolume, axis: str, out_dir) -> list:
    """One binary PPM (P6) per slice along `axis`: TP green, FP red, FN blue,
    background black. Returns the written paths."""
    if axis not in _AXIS_INDEX:
        raise ValueError(f"axis must be one of d/h/w, got {axis!r}")
    ax = _AXIS_INDEX[axis]
    lut = np.zeros((4, 3), dtype=np.uint8)
    for code, rgb in _CONFUSION_RGB.items():
        lut[code] = rgb
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(cv.labels.shape[ax]):
        sl = [slice(None)] * 3
        sl[ax] = i
        rgb = lut[cv.labels[tuple(sl)]]
        path = os.path.join(out_dir, f"{axis}{i:04d}.ppm")
        write_ppm(rgb, path)
        paths.append(path)
    return paths


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM (P6), maxval 255. img is (rows, cols, 3) uint8."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"ppm image must be (rows, cols, 3), got {img.shape}")
    rows, cols = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_report_csv(report: ToleranceReport, path) -> None:
    """CSV: tolerance,precision,recall,f1,pred_count,gt_count (6 decimals)."""
    with open(path, "w", encoding="ascii", newline="") as f:
        f.write("tolerance,precision,recall,f1,pred_count,gt_count\n")
        for r in report.rows:
            f.write(
                f"{r.tolerance:g},{r.precision:.6f},{r.recall:.6f},{r.f1:.6f},"
                f"{r.pred_count},{r.gt_count}\n"
            )
