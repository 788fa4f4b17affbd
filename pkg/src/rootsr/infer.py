"""Full-volume segmentation at 2x resolution by tiled network application.

Valid convolutions eat a constant 21-voxel margin per face, so the volume
is reflection-padded by 21 first; input windows of size s then stride by
s - 42 so their SR outputs (2s - 84 per axis) abut exactly. The last window
per axis is shifted inward to stay inside the padded volume and only writes
the SR voxels no earlier tile produced (first writer wins), keeping the
output placements disjoint and covering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .net import INPUT_MARGIN, Network, forward_t, shape_plan
from .volume import Volume, VoxelBox


@dataclass(frozen=True)
class Tile:
    input_box: VoxelBox  # window in padded 1x coordinates
    output_box: VoxelBox  # placement in unpadded SR coordinates
    local_origin: tuple[int, int, int]  # offset of output_box inside this tile's SR output


@dataclass(frozen=True)
class TilePlan:
    tiles: tuple
    pad: int  # reflection padding per face, 1x voxels
    tile_size: int
    volume_dims: tuple[int, int, int]


def _axis_tiles(dim: int, s: int):
    """Per-axis (input_origin, out_origin, out_extent, local_offset) entries,
    origins in padded coordinates; out in SR coordinates of the unpadded
    volume."""
    cover = s - 2 * INPUT_MARGIN  # 1x voxels of output coverage per tile
    if cover < 1 or dim < cover:
        raise ValueError(
            f"tile size {s} covers {cover} voxels: need 1 <= cover <= dim ({dim})"
        )
    entries = []
    written = 0  # SR voxels emitted so far
    k = 0
    while written < 2 * dim:
        origin = k * cover
        if origin + cover > dim:  # final tile: shift inward, clamp output
            origin = dim - cover
        out_start = written
        out_end = 2 * (origin + cover)
        local = out_start - 2 * origin
        entries.append((origin, out_start, out_end - out_start, local))
        written = out_end
        k += 1
    return entries


def tile_plan(volume_dims: tuple[int, int, int], s: int, cfg=None) -> TilePlan:
    """Tile a (D, H, W) volume with input windows of size s; output
    placements partition the (2D, 2H, 2W) SR grid exactly."""
    from .net import NetConfig

    shape_plan(s, cfg or NetConfig())  # raises for invalid s
    dims = tuple(int(d) for d in volume_dims)
    per_axis = [_axis_tiles(d, s) for d in dims]
    tiles = []
    for ed in per_axis[0]:
        for eh in per_axis[1]:
            for ew in per_axis[2]:
                tiles.append(
                    Tile(
                        input_box=VoxelBox((ed[0], eh[0], ew[0]), (s, s, s)),
                        output_box=VoxelBox(
                            (ed[1], eh[1], ew[1]), (ed[2], eh[2], ew[2])
                        ),
                        local_origin=(ed[3], eh[3], ew[3]),
                    )
                )
    return TilePlan(tuple(tiles), pad=INPUT_MARGIN, tile_size=s, volume_dims=dims)


def segment_volume(net: Network, volume: Volume, threshold: float = 0.5,
                   tile: int = 60) -> tuple[Volume, Volume]:
    """Probability and binary segmentation volumes at (2D, 2H, 2W).

    `tile` is the input window size; it is shrunk automatically to the
    largest valid size the volume supports.
    """
    if volume.channels != 1:
        raise ValueError(f"expected single-channel volume, got {volume.channels}")
    dims = volume.spatial
    s = effective_tile_size(dims, tile)
    plan = tile_plan(dims, s)
    data = volume.data[0].astype(np.float32, copy=False)
    padded = np.pad(data, plan.pad, mode="reflect")[None]
    prob = np.empty(tuple(2 * d for d in dims), dtype=np.float32)
    with no_grad():
        for t in plan.tiles:
            window = padded[(slice(None),) + t.input_box.slices()]
            out = forward_t(net, Tensor(np.ascontiguousarray(window))).value[0]
            src = tuple(
                slice(lo, lo + e) for lo, e in zip(t.local_origin, t.output_box.extent)
            )
            prob[t.output_box.slices()] = out[src]
    seg = (prob >= np.float32(threshold)).astype(np.uint8)
    return Volume(prob[None]), Volume(seg[None])


def effective_tile_size(dims: tuple[int, int, int], requested: int) -> int:
    """Largest valid tile size <= requested whose coverage fits the volume:
    s = 0 mod 4, s >= 44, s - 42 <= min(dims)."""
    cap = min(dims) + 2 * INPUT_MARGIN
    s = min(requested, cap)
    s -= s % 4
    if s < 44:
        raise ValueError(
            f"no valid tile size for dims {dims} (requested {requested}): "
            "volume must be at least 2 voxels per axis"
        )
    return s
