"""Synthetic training data: procedural root systems rendered at 2x
resolution, composited into soil volumes at 1x, with contrast/noise/symmetry
augmentation and don't-care border masks.

Geometry conventions: root coordinates and radii are in 1x voxel units.
The voxel center of 1x index a is at a + 0.5; the center of SR index i is
at (i + 0.5) / 2, so each 1x voxel covers exactly the 2x2x2 block of SR
indices {2a, 2a+1} per axis. A SR voxel is occupied when its center lies
within the (linearly interpolated) radius of any branch segment.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .metrics import edt_squared
from .volume import Volume, read_rvol, write_rvol


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------
# root systems


@dataclass(frozen=True)
class RootGenParams:
    seed: int = 0
    taproot_length: tuple[float, float] = (50.0, 80.0)
    step_length: float = 1.0
    direction_jitter: float = 0.35  # angular std per step, radians
    gravitropism: float = 0.2  # blend weight toward straight down
    branching_rate: float = 0.06  # expected branch events per unit length
    radius_ratio: tuple[float, float] = (0.55, 0.8)  # child base / parent
    taper_rate: float = 0.008  # geometric radius decay per unit length
    initial_radius: tuple[float, float] = (1.3, 2.2)
    r_min: float = 0.5
    max_depth: int = 3
    domain: float = 72.0  # cube edge length, 1x voxels

    def __post_init__(self):
        if self.step_length <= 0:
            raise ValueError("step_length must be > 0")
        if self.taper_rate < 0 or self.branching_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.r_min <= 0:
            raise ValueError("r_min must be > 0")
        for name in ("taproot_length", "radius_ratio", "initial_radius"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: {(lo, hi)}")
        if self.initial_radius[0] < self.r_min:
            raise ValueError("initial_radius must not start below r_min")
        if not 0 <= self.gravitropism <= 1:
            raise ValueError("gravitropism must be in [0, 1]")


@dataclass(frozen=True)
class Branch:
    vertices: np.ndarray  # (N, 3) float64, (d, h, w) in 1x voxel units
    radii: np.ndarray  # (N,) float64, non-increasing
    parent: tuple[int, int] | None  # (branch index, vertex index) or None
    depth: int


@dataclass(frozen=True)
class RootSystem:
    branches: tuple

    @property
    def total_length(self) -> float:
        tot = 0.0
        for b in self.branches:
            seg = np.diff(b.vertices, axis=0)
            tot += float(np.sqrt((seg**2).sum(axis=1)).sum())
        return tot


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.sqrt((v**2).sum()))
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


_DOWN = np.array([1.0, 0.0, 0.0])  # +d is "down" (away from the top face)


def generate_root(params: RootGenParams) -> RootSystem:
    """Stochastic branching walk, deterministic per params.seed.

    The taproot starts on the top face and heads down; each step jitters
    the direction, blends it toward gravity, and decays the radius
    geometrically; branch events follow a Poisson process along the arc
    length, spawning children with a reduced radius until r_min or
    max_depth stops the recursion.
    """
    rng = _rng(params.seed)
    max_steps = int(np.ceil(params.taproot_length[1] / params.step_length)) * 2
    branches = []
    # queue entries: (parent link, depth, start pos, start dir, start radius, step cap)
    length = rng.uniform(*params.taproot_length)
    start = np.array(
        [0.0, rng.uniform(0.25, 0.75) * params.domain, rng.uniform(0.25, 0.75) * params.domain]
    )
    queue = [(None, 0, start, _DOWN.copy(), rng.uniform(*params.initial_radius),
              min(int(round(length / params.step_length)), max_steps))]
    decay = float(np.exp(-params.taper_rate * params.step_length))
    while queue:
        parent, depth, pos, direction, radius, cap = queue.pop(0)
        verts = [pos.copy()]
        radii = [radius]
        index = len(branches)
        for step_i in range(cap):
            jitter = params.direction_jitter * rng.normal(size=3)
            direction = _unit(direction + jitter)
            direction = _unit((1.0 - params.gravitropism) * direction + params.gravitropism * _DOWN)
            nxt_r = radius * decay
            if nxt_r < params.r_min:
                break
            pos = pos + params.step_length * direction
            radius = nxt_r
            verts.append(pos.copy())
            radii.append(radius)
            if depth < params.max_depth:
                for _ in range(rng.poisson(params.branching_rate * params.step_length)):
                    child_r = radius * rng.uniform(*params.radius_ratio)
                    u = _unit(rng.normal(size=3))
                    perp = _unit(u - (u @ direction) * direction)
                    child_dir = _unit(0.75 * perp + 0.25 * _DOWN)
                    if child_r >= params.r_min:
                        queue.append(((index, len(verts) - 1), depth + 1,
                                      pos.copy(), child_dir, child_r, max_steps))
        if len(verts) >= 2:
            branches.append(
                Branch(np.asarray(verts), np.asarray(radii), parent, depth)
            )
    return RootSystem(tuple(branches))


def rasterize(root: RootSystem, grid: int) -> tuple[Volume, Volume]:
    """Render the capsule union on the SR grid (2*grid per axis) and derive
    the 1x occupancy fraction as the mean of each voxel's 8 SR children."""
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    n = 2 * grid
    occ = np.zeros((n, n, n), dtype=bool)
    centers = (np.arange(n) + 0.5) / 2.0  # SR center coords in 1x units
    for b in root.branches:
        for i in range(len(b.vertices) - 1):
            _mark_capsule(occ, centers, b.vertices[i], b.vertices[i + 1],
                          float(b.radii[i]), float(b.radii[i + 1]))
    occ_sr = Volume(occ[None].astype(np.uint8))
    frac = occ.reshape(grid, 2, grid, 2, grid, 2).mean(axis=(1, 3, 5))
    occ_frac = Volume(frac[None].astype(np.float32))
    return occ_sr, occ_frac


def _mark_capsule(occ, centers, p0, p1, r0, r1):
    """Set SR voxels whose center is within the linearly-varying radius of
    the segment: min over t in [0,1] of |q - p(t)|^2 - r(t)^2 <= 0."""
    n = occ.shape[0]
    rmax = max(r0, r1)
    lo = np.minimum(p0, p1) - rmax
    hi = np.maximum(p0, p1) + rmax
    # SR index range whose centers fall in [lo, hi]
    i0 = np.maximum(np.ceil(2.0 * lo - 0.5), 0).astype(int)
    i1 = np.minimum(np.floor(2.0 * hi - 0.5), n - 1).astype(int)
    if np.any(i1 < i0):
        return
    axes = [centers[i0[a] : i1[a] + 1] for a in range(3)]
    qd = axes[0][:, None, None] - p0[0]
    qh = axes[1][None, :, None] - p0[1]
    qw = axes[2][None, None, :] - p0[2]
    d = p1 - p0
    dr = r1 - r0
    a_coef = float(d @ d) - dr * dr
    b_coef = -2.0 * (qd * d[0] + qh * d[1] + qw * d[2]) - 2.0 * r0 * dr
    c_coef = qd * qd + qh * qh + qw * qw - r0 * r0
    inside = c_coef <= 0  # t = 0
    inside |= a_coef + b_coef + c_coef <= 0  # t = 1
    if a_coef > 0:
        t = -b_coef / (2.0 * a_coef)
        valid = (t > 0) & (t < 1)
        phi = c_coef - b_coef * b_coef / (4.0 * a_coef)
        inside |= valid & (phi <= 0)
    sl = tuple(slice(i0[a], i1[a] + 1) for a in range(3))
    occ[sl] |= inside


# ---------------------------------------------------------------------------
# soil


@dataclass(frozen=True)
class SoilSpec:
    """Either a path to a real soil volume (center-cropped on load) or a
    synthetic recipe: base intensity plus multi-octave value noise, sparse
    bright ellipsoid artifacts, and per-voxel Gaussian noise."""

    path: str | None = None
    base_intensity: float = 0.32
    noise_amplitudes: tuple = (0.10, 0.06, 0.04)
    noise_frequencies: tuple = (1 / 24, 1 / 12, 1 / 6)  # cycles per voxel
    artifact_density: float = 4e-6  # expected ellipsoids per voxel
    artifact_intensity: float = 0.45
    artifact_size: float = 4.0  # max semi-axis, voxels
    gaussian_sigma: float = 0.02

    def __post_init__(self):
        if not 0 <= self.base_intensity <= 1:
            raise ValueError("base_intensity must be in [0, 1]")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if len(self.noise_amplitudes) != len(self.noise_frequencies):
            raise ValueError("noise amplitude/frequency lists differ in length")


def _value_noise(rng, dims, freq):
    """Trilinear interpolation of a random lattice, values in [-1, 1]."""
    lat_shape = tuple(int(np.floor(d * freq)) + 2 for d in dims)
    lattice = rng.random(lat_shape) * 2.0 - 1.0
    idx, frac = [], []
    for ax, d in enumerate(dims):
        x = np.arange(d) * freq
        i0 = np.floor(x).astype(np.int64)
        idx.append(i0)
        frac.append(x - i0)
    out = np.zeros(dims)
    for cd, ch, cw in itertools.product((0, 1), repeat=3):
        wgt = (
            (frac[0] if cd else 1.0 - frac[0])[:, None, None]
            * (frac[1] if ch else 1.0 - frac[1])[None, :, None]
            * (frac[2] if cw else 1.0 - frac[2])[None, None, :]
        )
        out += wgt * lattice[np.ix_(idx[0] + cd, idx[1] + ch, idx[2] + cw)]
    return out


def make_soil(spec: SoilSpec, dims: tuple[int, int, int], seed: int) -> Volume:
    """Soil intensity volume in [0, 1], deterministic per seed."""
    dims = tuple(dims)
    if spec.path is not None:
        vol = read_rvol(spec.path)
        if vol.channels != 1:
            raise ValueError("soil volume must be single-channel")
        if any(v < d for v, d in zip(vol.spatial, dims)):
            raise ValueError(f"soil crop {dims} larger than file volume {vol.spatial}")
        origin = [(v - d) // 2 for v, d in zip(vol.spatial, dims)]
        sl = (slice(None),) + tuple(slice(o, o + d) for o, d in zip(origin, dims))
        arr = vol.data[sl].astype(np.float32)
        if vol.data.dtype == np.uint8:
            arr /= 255.0
        return Volume(np.clip(arr, 0.0, 1.0))

    rng = _rng(seed)
    arr = np.full(dims, spec.base_intensity, dtype=np.float64)
    for amp, freq in zip(spec.noise_amplitudes, spec.noise_frequencies):
        arr += amp * _value_noise(rng, dims, freq)
    n_art = rng.poisson(spec.artifact_density * np.prod(dims))
    for _ in range(n_art):
        center = rng.uniform(0, 1, 3) * np.asarray(dims)
        semi = rng.uniform(1.0, max(spec.artifact_size, 1.0), 3)
        lo = np.maximum(np.floor(center - semi).astype(int), 0)
        hi = np.minimum(np.ceil(center + semi).astype(int) + 1, dims)
        if np.any(hi <= lo):
            continue
        ax = [np.arange(lo[a], hi[a]) + 0.5 for a in range(3)]
        e = (
            ((ax[0][:, None, None] - center[0]) / semi[0]) ** 2
            + ((ax[1][None, :, None] - center[1]) / semi[1]) ** 2
            + ((ax[2][None, None, :] - center[2]) / semi[2]) ** 2
        )
        region = tuple(slice(lo[a], hi[a]) for a in range(3))
        arr[region] += spec.artifact_intensity * (e <= 1.0)
    if spec.gaussian_sigma > 0:
        arr += rng.normal(0.0, spec.gaussian_sigma, dims)
    return Volume(np.clip(arr, 0.0, 1.0).astype(np.float32)[None])


# ---------------------------------------------------------------------------
# don't-care mask


def make_dontcare(occ_sr, t_dc: float) -> Volume:
    """Flag voxels whose Euclidean distance to the root/soil boundary is at
    most t_dc: distance-to-root for soil voxels, distance-to-background for
    root voxels (both computed on the SR occupancy)."""
    if t_dc < 0:
        raise ValueError(f"t_dc must be >= 0, got {t_dc}")
    occ = occ_sr.data[0] != 0 if isinstance(occ_sr, Volume) else np.asarray(occ_sr) != 0
    if occ.ndim == 4:
        occ = occ[0]
    t2 = float(t_dc) * float(t_dc)
    d2_to_root = edt_squared(occ).dist2
    d2_to_soil = edt_squared(~occ).dist2
    flag = np.where(occ, d2_to_soil <= t2, d2_to_root <= t2)
    return Volume(flag[None].astype(np.uint8))


# ---------------------------------------------------------------------------
# the 48 axis-aligned cube symmetries


_PERMS = tuple(itertools.permutations((0, 1, 2)))


def apply_symmetry(arr: np.ndarray, index: int) -> np.ndarray:
    """Apply symmetry `index` (0..47) to the spatial axes of a (C,D,H,W)
    array: permute axes, then flip. Returns a fresh contiguous array."""
    if not 0 <= index < 48:
        raise ValueError(f"symmetry index must be in 0..47, got {index}")
    perm = _PERMS[index // 8]
    flips = index % 8
    out = arr.transpose((0,) + tuple(p + 1 for p in perm))
    for ax in range(3):
        if flips >> ax & 1:
            out = np.flip(out, axis=ax + 1)
    return np.ascontiguousarray(out)


def _build_inverse_table():
    # a cube keeps all permutations shape-compatible
    probe = np.arange(1 * 4 * 4 * 4).reshape(1, 4, 4, 4)
    table = [None] * 48
    transformed = [apply_symmetry(probe, i) for i in range(48)]
    for i, t in enumerate(transformed):
        for j in range(48):
            if np.array_equal(apply_symmetry(t, j), probe):
                table[i] = j
                break
    return tuple(table)


INVERSE_SYMMETRY = _build_inverse_table()


def inverse_symmetry(index: int) -> int:
    return INVERSE_SYMMETRY[index]


# ---------------------------------------------------------------------------
# sample composition


@dataclass(frozen=True)
class Augment:
    contrast: float = 0.35  # root brightness above the mean soil intensity
    noise_sigma: float = 0.0  # additive Gaussian intensity noise at 1x
    symmetry: int = 0  # one of the 48 axis-aligned cube symmetries


@dataclass(frozen=True)
class Sample:
    mri: Volume  # (1, s, s, s) float32
    target: Volume  # (1, 2s, 2s, 2s) uint8
    dontcare: Volume  # (1, 2s, 2s, 2s) uint8


def compose_sample(occ_frac_1x: Volume, occ_sr: Volume, soil: Volume,
                   aug: Augment, dontcare: Volume, rng=None) -> Sample:
    """Blend root occupancy into soil and apply the same geometric symmetry
    to the MRI, target, and don't-care grids:

        mri = (1 - f) * soil + f * (mean(soil) + contrast) + N(0, sigma)

    clamped to [0, 1], where f is the per-voxel root occupancy fraction.
    """
    if soil.shape != occ_frac_1x.shape:
        raise ValueError(f"soil dims {soil.shape} != occupancy dims {occ_frac_1x.shape}")
    if occ_sr.spatial != tuple(2 * s for s in occ_frac_1x.spatial):
        raise ValueError(
            f"SR occupancy dims {occ_sr.spatial} are not 2x of {occ_frac_1x.spatial}"
        )
    if dontcare.shape != occ_sr.shape:
        raise ValueError(f"dontcare dims {dontcare.shape} != SR dims {occ_sr.shape}")
    f = occ_frac_1x.data.astype(np.float32)
    mu = np.float32(soil.data.mean(dtype=np.float64))
    mri = (1.0 - f) * soil.data + f * (mu + np.float32(aug.contrast))
    if aug.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        mri = mri + rng.normal(0.0, aug.noise_sigma, mri.shape).astype(np.float32)
    mri = np.clip(mri, 0.0, 1.0)
    g = aug.symmetry
    return Sample(
        mri=Volume(apply_symmetry(mri, g)),
        target=Volume(apply_symmetry(occ_sr.data, g)),
        dontcare=Volume(apply_symmetry(dontcare.data, g)),
    )


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 24
    n_val: int = 6
    dims: int = 72  # cube edge at 1x
    base_seed: int = 1000
    t_dc: float = 1.0  # don't-care shell half-thickness, SR voxels
    contrast_range: tuple[float, float] = (0.28, 0.55)
    noise_sigma_range: tuple[float, float] = (0.01, 0.035)
    root: RootGenParams = RootGenParams()
    soil: SoilSpec = SoilSpec()

    def __post_init__(self):
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("sample counts must be >= 0")
        if self.dims < 1:
            raise ValueError("dims must be >= 1")


def build_sample(cfg: DatasetConfig, index: int) -> Sample:
    """Generate sample `index` (train indices first, then val). Per-sample
    seed is base_seed + index, so regeneration is order-independent."""
    sample_seed = cfg.base_seed + index
    root_params = dataclasses.replace(
        cfg.root, seed=sample_seed * 4, domain=float(cfg.dims)
    )
    root = generate_root(root_params)
    occ_sr, occ_frac = rasterize(root, cfg.dims)
    soil = make_soil(cfg.soil, (cfg.dims,) * 3, seed=sample_seed * 4 + 1)
    dontcare = make_dontcare(occ_sr, cfg.t_dc)
    aug_rng = _rng(sample_seed * 4 + 2)
    aug = Augment(
        contrast=float(aug_rng.uniform(*cfg.contrast_range)),
        noise_sigma=float(aug_rng.uniform(*cfg.noise_sigma_range)),
        symmetry=int(aug_rng.integers(48)),
    )
    return compose_sample(occ_frac, occ_sr, soil, aug, dontcare, rng=aug_rng)


def generate_dataset(cfg: DatasetConfig, out_dir, workers: int = 1) -> dict:
    """Write n_train + n_val samples as RVOL triples plus manifest.json.
    Byte-identical across runs for a fixed config."""
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "val"), exist_ok=True)

    entries = []
    for i in range(cfg.n_train):
        entries.append(("train", i, i))
    for j in range(cfg.n_val):
        entries.append(("val", j, cfg.n_train + j))

    def emit(entry):
        split, local, index = entry
        sample = build_sample(cfg, index)
        names = {}
        for kind, vol in (("mri", sample.mri), ("target", sample.target),
                          ("dontcare", sample.dontcare)):
            rel = f"{split}/{local:04d}.{kind}.rvol"
            write_rvol(vol, os.path.join(out_dir, rel))
            names[kind] = rel
        return {"split": split, "index": local, "seed": cfg.base_seed + index, **names}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(emit, entries))
    else:
        records = [emit(e) for e in entries]

    manifest = {
        "config": dataset_config_to_dict(cfg),
        "train": [r for r in records if r["split"] == "train"],
        "val": [r for r in records if r["split"] == "val"],
    }
    blob = json.dumps(manifest, sort_keys=True, indent=2)
    tmp = os.path.join(out_dir, f"manifest.json.tmp.{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(blob + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def dataset_config_to_dict(cfg: DatasetConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def dataset_config_from_dict(d: dict) -> DatasetConfig:
    d = dict(d)
    root = d.pop("root", {})
    soil = d.pop("soil", {})
    kwargs = _check_keys(d, DatasetConfig, "gen")
    kwargs["root"] = RootGenParams(**_tupled(_check_keys(root, RootGenParams, "gen.root")))
    kwargs["soil"] = SoilSpec(**_tupled(_check_keys(soil, SoilSpec, "gen.soil")))
    return DatasetConfig(**_tupled(kwargs))


def _check_keys(d: dict, cls, where: str) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in allowed:
            raise ValueError(f"unknown config key {where}.{key}")
    return dict(d)


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_sample(out_dir, record: dict) -> Sample:
    return Sample(
        mri=read_rvol(os.path.join(out_dir, record["mri"])),
        target=read_rvol(os.path.join(out_dir, record["target"])),
        dontcare=read_rvol(os.path.join(out_dir, record["dontcare"])),
    )


def load_dataset(data_dir) -> tuple[list, list, dict]:
    """Load all samples listed in manifest.json: (train, val, manifest)."""
    data_dir = os.fspath(data_dir)
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    train = [load_sample(data_dir, r) for r in manifest["train"]]
    val = [load_sample(data_dir, r) for r in manifest["val"]]
    return train, val, manifest
