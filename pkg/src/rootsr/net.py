"""The super-resolution 3D U-Net: shape planning, parameter initialization,
forward pass, and checkpoint serialization.

Architecture (all convolutions valid, kernel 3 unless noted):

    encoder   3 modules of two convs each (C, 2C, 4C channels),
              joined by 2x2x2 maxpools
    decoder   2 modules: 2x transposed conv up, center-crop concat with the
              matching encoder output, two convs (2C then C channels)
    SR tail   2x transposed conv of the decoder output, concatenated with a
              2x transposed conv of the (center-cropped) raw input, two
              convs, then a 1x1x1 conv + sigmoid head

The output grid has twice the input resolution and covers the centered
(s - 42)^3 input region: output size is 2s - 84 per axis and the input
margin is a constant 21 voxels. Valid input sizes are s >= 44, s = 0 mod 4.

The raw-input upsampling branch crops the input to the needed (s - 40)^3
center region before the transposed convolution; because kernel = stride = 2
and the crop margin is even, this is exactly equivalent to upsampling the
whole input and center-cropping the result, at a fraction of the cost.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    center_crop_t,
    concat_center_crop,
    conv3d_valid,
    conv_transpose3d_x2,
    maxpool3d,
    no_grad,
    sigmoid,
)
from .volume import Volume

CKPT_MAGIC = b"RNET1\x00"

INPUT_MARGIN = 21  # 1x voxels eaten per face by the valid-conv stack


@dataclass(frozen=True)
class NetConfig:
    """base_channels is the first encoder width C; levels double it (C, 2C,
    4C). sr_tail_channels is the width of both 2x upsampling branches and
    the tail convs; defaults to base_channels."""

    base_channels: int = 16
    sr_tail_channels: int | None = None
    kernel: int = 3

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel != 3:
            raise ValueError("only kernel 3 is supported")

    @property
    def tail_channels(self) -> int:
        return self.base_channels if self.sr_tail_channels is None else self.sr_tail_channels


@dataclass(frozen=True)
class ShapePlan:
    input_size: tuple[int, int, int]
    layers: tuple  # ((name, (d, h, w)), ...) sizes after each stage
    output_size: tuple[int, int, int]
    input_margin: int = INPUT_MARGIN


def _as_triple(size) -> tuple[int, int, int]:
    if isinstance(size, int):
        return (size, size, size)
    t = tuple(int(s) for s in size)
    if len(t) != 3:
        raise ValueError(f"input size must be an int or a 3-tuple, got {size!r}")
    return t


def shape_plan(input_size, cfg: NetConfig = NetConfig()) -> ShapePlan:
    """Layer-by-layer spatial sizes for a given input size; raises ValueError
    naming the first layer whose size becomes invalid."""
    s = _as_triple(input_size)
    layers = []
    cur = s

    def conv(name):
        nonlocal cur
        nxt = tuple(c - 2 for c in cur)
        if any(c < 1 for c in nxt):
            raise ValueError(f"input size {s}: size {cur} reaches < 1 at {name}")
        cur = nxt
        layers.append((name, cur))

    def pool(name):
        nonlocal cur
        if any(c % 2 for c in cur):
            raise ValueError(f"input size {s}: odd size {cur} at {name}")
        cur = tuple(c // 2 for c in cur)
        layers.append((name, cur))

    def up(name):
        nonlocal cur
        cur = tuple(2 * c for c in cur)
        layers.append((name, cur))

    conv("enc1.conv1")
    conv("enc1.conv2")
    e1 = cur
    pool("pool1")
    conv("enc2.conv1")
    conv("enc2.conv2")
    e2 = cur
    pool("pool2")
    conv("enc3.conv1")
    conv("enc3.conv2")

    up("dec2.up")
    if any(u > e for u, e in zip(cur, e2)) or any((e - u) % 2 for u, e in zip(cur, e2)):
        raise ValueError(f"input size {s}: skip crop mismatch at dec2.concat ({e2} -> {cur})")
    layers.append(("dec2.concat", cur))
    conv("dec2.conv1")
    conv("dec2.conv2")

    up("dec1.up")
    if any(u > e for u, e in zip(cur, e1)) or any((e - u) % 2 for u, e in zip(cur, e1)):
        raise ValueError(f"input size {s}: skip crop mismatch at dec1.concat ({e1} -> {cur})")
    layers.append(("dec1.concat", cur))
    conv("dec1.conv1")
    conv("dec1.conv2")

    up("sr.up")
    in_crop = tuple(c // 2 for c in cur)
    if any((si - ci) % 2 for si, ci in zip(s, in_crop)):
        raise ValueError(f"input size {s}: odd input-branch crop margin at sr.input_up")
    layers.append(("sr.concat", cur))
    conv("sr.conv1")
    conv("sr.conv2")
    layers.append(("sr.head", cur))

    out = cur
    for a in range(3):
        assert out[a] == 2 * s[a] - 84, "shape law violated"
    return ShapePlan(input_size=s, layers=tuple(layers), output_size=out)


def layer_table(cfg: NetConfig):
    """(name, kind, c_in, c_out) for every parameterized layer, in build order.
    kind is conv3 / up2 / conv1."""
    c = cfg.base_channels
    t = cfg.tail_channels
    return [
        ("enc1.conv1", "conv3", 1, c),
        ("enc1.conv2", "conv3", c, c),
        ("enc2.conv1", "conv3", c, 2 * c),
        ("enc2.conv2", "conv3", 2 * c, 2 * c),
        ("enc3.conv1", "conv3", 2 * c, 4 * c),
        ("enc3.conv2", "conv3", 4 * c, 4 * c),
        ("dec2.up", "up2", 4 * c, 2 * c),
        ("dec2.conv1", "conv3", 4 * c, 2 * c),
        ("dec2.conv2", "conv3", 2 * c, 2 * c),
        ("dec1.up", "up2", 2 * c, c),
        ("dec1.conv1", "conv3", 2 * c, c),
        ("dec1.conv2", "conv3", c, c),
        ("sr.up", "up2", c, t),
        ("sr.input_up", "up2", 1, t),
        ("sr.conv1", "conv3", 2 * t, t),
        ("sr.conv2", "conv3", t, t),
        ("sr.head", "conv1", t, 1),
    ]


def _param_shapes(cfg: NetConfig):
    shapes = {}
    for name, kind, cin, cout in layer_table(cfg):
        if kind == "conv3":
            shapes[f"{name}.w"] = (cout, cin, 3, 3, 3)
        elif kind == "conv1":
            shapes[f"{name}.w"] = (cout, cin, 1, 1, 1)
        else:  # up2: transposed conv weight layout (C_in, C_out, 2, 2, 2)
            shapes[f"{name}.w"] = (cin, cout, 2, 2, 2)
        shapes[f"{name}.b"] = (cout,)
    return shapes


def parameter_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


class Network:
    """Named parameter tensors plus the config that generated them."""

    def __init__(self, cfg: NetConfig, params: dict[str, Tensor], meta=None):
        self.cfg = cfg
        self.params = params
        self.meta = dict(meta or {})

    def parameters(self):
        return list(self.params.values())

    def clone(self) -> "Network":
        return Network(
            self.cfg,
            {k: Tensor(p.value.copy(), name=k) for k, p in self.params.items()},
            dict(self.meta),
        )


def build(cfg: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32) -> Network:
    """Allocate and initialize all parameters deterministically from `seed`:
    He-normal fan-in for weights (fan-in = summed input count per output
    voxel), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, kind, cin, cout in layer_table(cfg):
        shape = _param_shapes(cfg)[f"{name}.w"]
        if kind == "up2":
            fan_in = cin  # each output voxel sums one contribution per input channel
        else:
            fan_in = cin * int(np.prod(shape[2:]))
        std = float(np.sqrt(2.0 / fan_in))
        w = rng.normal(0.0, std, size=shape).astype(dtype)
        params[f"{name}.w"] = Tensor(w, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), name=f"{name}.b")
    return Network(cfg, params, {"seed": int(seed), "step": 0})


def forward_t(net: Network, x: Tensor) -> Tensor:
    """Forward pass on a Tensor (1, s, s, s) -> probability Tensor."""
    shape_plan(x.value.shape[1:], net.cfg)  # validate, raises with layer name
    p = net.params

    def conv(t, name):
        return conv3d_valid(t, p[f"{name}.w"], p[f"{name}.b"])

    def up(t, name):
        return conv_transpose3d_x2(t, p[f"{name}.w"], p[f"{name}.b"])

    e1 = conv(conv(x, "enc1.conv1"), "enc1.conv2")
    e2 = conv(conv(maxpool3d(e1), "enc2.conv1"), "enc2.conv2")
    bott = conv(conv(maxpool3d(e2), "enc3.conv1"), "enc3.conv2")

    d2 = conv(conv(concat_center_crop(up(bott, "dec2.up"), e2), "dec2.conv1"), "dec2.conv2")
    d1 = conv(conv(concat_center_crop(up(d2, "dec1.up"), e1), "dec1.conv1"), "dec1.conv2")

    sr_dec = up(d1, "sr.up")
    in_crop = tuple(e // 2 for e in sr_dec.value.shape[1:])
    sr_in = up(center_crop_t(x, in_crop), "sr.input_up")
    t = conv(conv(concat_center_crop(sr_dec, sr_in), "sr.conv1"), "sr.conv2")
    return sigmoid(conv(t, "sr.head"))


def forward(net: Network, volume: Volume) -> Volume:
    """Forward pass on a single-channel Volume; returns the probability
    Volume at 2x resolution of the covered center region."""
    if volume.channels != 1:
        raise ValueError(f"expected single-channel input, got {volume.channels}")
    with no_grad():
        x = Tensor(volume.data.astype(np.float32, copy=False))
        out = forward_t(net, x)
    return Volume(np.ascontiguousarray(out.value, dtype=np.float32))


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# magic, u32 param count, then per parameter: u16 name length + UTF-8 name,
# u8 ndim, ndim x u32 dims, float32 little-endian payload; finally a
# u32-length-prefixed UTF-8 JSON blob with the config and metadata.


def save_checkpoint(net: Network, path) -> None:
    names = list(net.params)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            val = np.ascontiguousarray(net.params[name].value, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", val.ndim))
            f.write(struct.pack(f"<{val.ndim}I", *val.shape))
            f.write(val.tobytes())
        blob = json.dumps(
            {
                "config": {
                    "base_channels": net.cfg.base_channels,
                    "sr_tail_channels": net.cfg.sr_tail_channels,
                    "kernel": net.cfg.kernel,
                },
                "meta": net.meta,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:6] != CKPT_MAGIC:
        raise ValueError(f"checkpoint: bad magic {raw[:6]!r}")
    try:
        loaded, blob = _parse_checkpoint(raw)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"checkpoint: corrupt file ({e})") from e
    cfgd = blob["config"]
    cfg = NetConfig(
        base_channels=cfgd["base_channels"],
        sr_tail_channels=cfgd["sr_tail_channels"],
        kernel=cfgd["kernel"],
    )
    expected = _param_shapes(cfg)
    if set(loaded) != set(expected):
        missing = set(expected) ^ set(loaded)
        raise ValueError(f"checkpoint: parameter name mismatch {sorted(missing)}")
    params = {}
    for name in expected:
        if loaded[name].shape != expected[name]:
            raise ValueError(
                f"checkpoint: shape mismatch {name} "
                f"(file {loaded[name].shape}, config {expected[name]})"
            )
        params[name] = Tensor(loaded[name], name=name)
    return Network(cfg, params, blob.get("meta", {}))


def _parse_checkpoint(raw: bytes):
    off = 6
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        if not 1 <= ndim <= 5:
            raise ValueError(f"checkpoint: bad ndim {ndim} at {name}")
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(dims))
        if off + 4 * n > len(raw):
            raise ValueError(f"checkpoint: truncated payload at {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        loaded[name] = arr.astype(np.float32)
    (blen,) = struct.unpack_from("<I", raw, off)
    off += 4
    blob = json.loads(raw[off : off + blen].decode("utf-8"))
    return loaded, blob
