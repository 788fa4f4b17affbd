"""Crop sampling, the training loop, periodic validation, and checkpointing.

Determinism: every stochastic choice in a run derives from per-step
generators seeded by (seed, step), so a fixed config reproduces the same
crop sequence and, single-threaded, bitwise-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    LossConfig,
    Tensor,
    adam_step,
    backward,
    weighted_masked_bce,
    zero_grad,
)
from .infer import segment_volume
from .metrics import ToleranceReport, ToleranceRow, _f1, distance_tolerant_prf
from .net import INPUT_MARGIN, NetConfig, Network, build, forward_t, save_checkpoint, shape_plan
from .synth import Sample, load_dataset
from .volume import Volume, VoxelBox


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 60
    steps: int = 2000
    batch_size: int = 1  # gradient-accumulation factor
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = LossConfig()
    seed: int = 0
    validation_interval: int = 0  # 0: validate only at the end
    val_tolerances: tuple = (0.0, 1.0, 2.0)
    val_threshold: float = 0.5
    val_tile: int = 60
    best_tolerance: float = 1.0  # tolerance whose micro-F1 selects best.ckpt
    root_crop_fraction: float = 0.5  # fraction of crops required to contain root
    crop_retries: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.root_crop_fraction <= 1:
            raise ValueError("root_crop_fraction must be in [0, 1]")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, loss, seconds)
    validations: list = field(default_factory=list)  # (step, ToleranceReport)


def sample_crop(sample: Sample, s: int, rng, require_root: bool = False,
                retries: int = 20):
    """Random input window of size s plus the aligned SR target/dontcare
    crops covering exactly the network's output region.

    The SR crop has origin 2 * (input_origin + 21) and extent (2s - 84)^3.
    With require_root, rejection-samples until the target crop contains a
    root voxel (bounded retries, then accepts the last draw).
    """
    dims = sample.mri.spatial
    if any(d < s for d in dims):
        raise ValueError(f"source dims {dims} too small for crop size {s}")
    out_extent = 2 * s - 2 * 42
    attempts = retries if require_root else 0
    for _ in range(attempts + 1):
        origin = tuple(int(rng.integers(0, d - s + 1)) for d in dims)
        sr_origin = tuple(2 * (o + INPUT_MARGIN) for o in origin)
        sr_box = VoxelBox(sr_origin, (out_extent,) * 3)
        target = sample.target.data[(slice(None),) + sr_box.slices()]
        if not require_root or target.any():
            break
    in_box = VoxelBox(origin, (s, s, s))
    mri = sample.mri.data[(slice(None),) + in_box.slices()]
    dontcare = sample.dontcare.data[(slice(None),) + sr_box.slices()]
    return (
        np.ascontiguousarray(mri),
        np.ascontiguousarray(target),
        np.ascontiguousarray(dontcare),
        in_box,
        sr_box,
    )


def _step_rng(seed: int, step: int, purpose: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, purpose, step)))
    )


def validate(net: Network, val_set, tolerances, threshold: float = 0.5,
             tile: int = 60) -> ToleranceReport:
    """Segment every validation volume, score it with don't-care exclusion,
    and report per-volume rows plus the micro-average (pooled counts).

    Row metadata lives in report.meta["volumes"]: a list of (name, report)
    pairs; the returned report's own rows are the pooled micro-average.
    """
    per_volume = []
    pooled = {}  # tolerance -> [matched_pred, pred, matched_gt, gt]
    for vi, sample in enumerate(val_set):
        _, seg = segment_volume(net, sample.mri, threshold=threshold, tile=tile)
        rep = distance_tolerant_prf(seg, sample.target, tolerances, dontcare=sample.dontcare)
        per_volume.append((f"val{vi:04d}", rep))
        for row in rep.rows:
            acc = pooled.setdefault(row.tolerance, [0, 0, 0, 0])
            acc[0] += row.matched_pred
            acc[1] += row.pred_count
            acc[2] += row.matched_gt
            acc[3] += row.gt_count
    rows = []
    for tol in tolerances:
        mp, np_, mg, ng = pooled.get(tol, [0, 0, 0, 0])
        if np_ == 0 and ng == 0:
            rows.append(ToleranceRow(tol, 1.0, 1.0, 1.0, 0, 0, 0, 0))
            continue
        if np_ == 0 or ng == 0:
            rows.append(ToleranceRow(tol, 0.0, 0.0, 0.0, np_, ng, 0, 0))
            continue
        p, r = mp / np_, mg / ng
        rows.append(ToleranceRow(tol, p, r, _f1(p, r), np_, ng, mp, mg))
    return ToleranceReport(
        tuple(rows), dontcare_excluded=True, meta={"volumes": per_volume}
    )


def write_validation_csv(report: ToleranceReport, path) -> None:
    """Validation CSV: per-volume rows plus the pooled micro row."""
    with open(path, "w", encoding="ascii", newline="") as f:
        f.write("volume,tolerance,precision,recall,f1,pred_count,gt_count\n")
        for name, rep in report.meta.get("volumes", []):
            for r in rep.rows:
                f.write(
                    f"{name},{r.tolerance:g},{r.precision:.6f},{r.recall:.6f},"
                    f"{r.f1:.6f},{r.pred_count},{r.gt_count}\n"
                )
        for r in report.rows:
            f.write(
                f"micro,{r.tolerance:g},{r.precision:.6f},{r.recall:.6f},"
                f"{r.f1:.6f},{r.pred_count},{r.gt_count}\n"
            )


def train(cfg: TrainConfig, data_dir, out_dir, net_cfg: NetConfig = NetConfig(),
          log_cb=None) -> tuple[Network, TrainLog]:
    """Run the training loop; writes train_log.csv, last.ckpt, best.ckpt and
    per-validation CSVs under out_dir. Returns the final network and log."""
    os.makedirs(out_dir, exist_ok=True)
    shape_plan(cfg.crop_size, net_cfg)  # fail before touching data
    train_set, val_set, _ = load_dataset(data_dir)
    if not train_set:
        raise ValueError(f"dataset at {data_dir} has no training samples")
    for i, sample in enumerate(train_set):
        if any(d < cfg.crop_size for d in sample.mri.spatial):
            raise ValueError(
                f"training sample {i} dims {sample.mri.spatial} < crop size {cfg.crop_size}"
            )

    net = build(net_cfg, seed=cfg.seed)
    params = net.parameters()
    state = AdamState.init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           eps=cfg.adam_eps)
    log = TrainLog()
    best_f1 = -1.0
    log_path = os.path.join(out_dir, "train_log.csv")
    t0 = time.monotonic()
    with open(log_path, "w", encoding="ascii", newline="") as logf:
        logf.write("step,loss,seconds\n")
        for step in range(cfg.steps):
            rng = _step_rng(cfg.seed, step)
            loss_val = 0.0
            zero_grad(params)
            for _ in range(cfg.batch_size):
                idx = int(rng.integers(len(train_set)))
                require_root = bool(rng.random() < cfg.root_crop_fraction)
                mri, target, dontcare, _, _ = sample_crop(
                    train_set[idx], cfg.crop_size, rng,
                    require_root=require_root, retries=cfg.crop_retries,
                )
                x = Tensor(mri.astype(np.float32, copy=False))
                prob = forward_t(net, x)
                loss = weighted_masked_bce(prob, target, dontcare, cfg.loss)
                backward(loss)
                loss_val += float(loss.value)
            loss_val /= cfg.batch_size
            grads = [p.grad / cfg.batch_size if cfg.batch_size > 1 else p.grad
                     for p in params]
            adam_step(params, grads, state)
            elapsed = time.monotonic() - t0
            log.steps.append((step, loss_val, elapsed))
            logf.write(f"{step},{loss_val:.9e},{elapsed:.3f}\n")
            logf.flush()
            if log_cb is not None:
                log_cb(step, loss_val)
            net.meta["step"] = step + 1
            if cfg.validation_interval and (step + 1) % cfg.validation_interval == 0 \
                    and step + 1 < cfg.steps and val_set:
                best_f1 = _run_validation(net, cfg, val_set, out_dir, step + 1, log, best_f1)
    if val_set:
        best_f1 = _run_validation(net, cfg, val_set, out_dir, cfg.steps, log, best_f1)
    save_checkpoint(net, os.path.join(out_dir, "last.ckpt"))
    if not val_set or best_f1 < 0:
        save_checkpoint(net, os.path.join(out_dir, "best.ckpt"))
    return net, log


def _run_validation(net, cfg, val_set, out_dir, step, log, best_f1):
    report = validate(net, val_set, cfg.val_tolerances, threshold=cfg.val_threshold,
                      tile=cfg.val_tile)
    log.validations.append((step, report))
    write_validation_csv(report, os.path.join(out_dir, f"val_{step:06d}.csv"))
    try:
        f1 = report.row(cfg.best_tolerance).f1
    except KeyError:
        f1 = report.rows[-1].f1
    if f1 > best_f1:
        best_f1 = f1
        save_checkpoint(net, os.path.join(out_dir, "best.ckpt"))
    return best_f1


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    from .synth import _check_keys, _tupled

    d = dict(d)
    loss = d.pop("loss", {})
    kwargs = _check_keys(d, TrainConfig, "train")
    kwargs["loss"] = LossConfig(**_check_keys(loss, LossConfig, "train.loss"))
    return TrainConfig(**_tupled(kwargs))
