"""U-Net construction, forward pass, parameter counting and checkpoints.

Architecture for ``depth`` D and ``base_channels`` c (stage d has c·2^d channels)::

    enc{d}   d = 0..D      conv3x3 -> relu -> conv3x3 -> relu   (enc{D} is the bottleneck)
             max-pool 2x2 between enc{d} and enc{d+1}
    up{d}    d = D-1..0    bilinear 2x upsample -> conv3x3 (c·2^(d+1) -> c·2^d), no activation
    dec{d}   d = D-1..0    concat(up{d}, enc{d}) -> conv3x3 -> relu -> conv3x3 -> relu
    head                   conv1x1 (c -> out_channels)

Parameter count (weights + biases, ``conv(a, b, k) = k·k·a·b + b``)::

    conv(in, c) + conv(c, c)
    + sum_{d=1..D} [conv(c·2^(d-1), c·2^d) + conv(c·2^d, c·2^d)]
    + sum_{d=0..D-1} [conv(c·2^(d+1), c·2^d) + conv(2·c·2^d, c·2^d) + conv(c·2^d, c·2^d)]
    + conv(c, out, 1)

Parameter names are ``<block>.<conv>.<weight|bias>``, e.g. ``enc0.conv1.weight``,
``up1.conv.bias``, ``dec0.conv2.weight``, ``head.conv.weight``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLASS_LOGITS = "class-logits"
SINGLE_LOGIT = "single-channel-logit"
HEADS = (CLASS_LOGITS, SINGLE_LOGIT)

PROVENANCES = ("random-init", "utility-checkpoint", "pretrained-segmentation")

MAGIC = b"UNSE"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class SchemaMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 2
    head: str = CLASS_LOGITS

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.head == SINGLE_LOGIT and self.out_channels != 1:
            raise ValueError("single-channel-logit head requires out_channels == 1")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def with_head(self, head: str, out_channels: int) -> "UNetConfig":
        return UNetConfig(self.depth, self.base_channels, self.in_channels, out_channels, head)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


# Presets for the interpretability model sizes (depth, base channels).
PRESETS = {"small": (2, 16), "medium": (3, 16), "large": (4, 16)}


def noise_config(preset: str, in_channels: int = 1) -> UNetConfig:
    depth, base = PRESETS[preset]
    return UNetConfig(depth, base, in_channels, 1, SINGLE_LOGIT)


@dataclass
class ModelParams:
    config: UNetConfig
    params: "OrderedDict[str, Tensor]"
    provenance: str = "random-init"
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def copy(self) -> "ModelParams":
        params = OrderedDict((k, Tensor(v.data.copy(), v.requires_grad)) for k, v in self.params.items())
        return ModelParams(self.config, params, self.provenance, dict(self.meta))


def _layer_specs(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(prefix, in_ch, out_ch, kernel) for every conv, in schema order."""
    d_max, ch = config.depth, config.channels
    specs = [("enc0.conv1", config.in_channels, ch(0), 3), ("enc0.conv2", ch(0), ch(0), 3)]
    for d in range(1, d_max + 1):
        specs += [(f"enc{d}.conv1", ch(d - 1), ch(d), 3), (f"enc{d}.conv2", ch(d), ch(d), 3)]
    for d in range(d_max - 1, -1, -1):
        specs += [(f"up{d}.conv", ch(d + 1), ch(d), 3),
                  (f"dec{d}.conv1", 2 * ch(d), ch(d), 3),
                  (f"dec{d}.conv2", ch(d), ch(d), 3)]
    specs.append(("head.conv", ch(0), config.out_channels, 1))
    return specs


def param_shapes(config: UNetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes = OrderedDict()
    for prefix, cin, cout, k in _layer_specs(config):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k)
        shapes[f"{prefix}.bias"] = (cout,)
    return shapes


def count_parameters(config: UNetConfig) -> int:
    def conv(a, b, k=3):
        return k * k * a * b + b

    c, d_max = config.base_channels, config.depth
    total = conv(config.in_channels, c) + conv(c, c)
    for d in range(1, d_max + 1):
        total += conv(c * 2 ** (d - 1), c * 2 ** d) + conv(c * 2 ** d, c * 2 ** d)
    for d in range(d_max):
        cd = c * 2 ** d
        total += conv(2 * cd, cd) + conv(2 * cd, cd) + conv(cd, cd)
    return total + conv(c, config.out_channels, 1)


def _init_conv(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)  # kaiming-uniform, relu gain, fan-in mode
    return rng.uniform(-bound, bound, size=shape)


def build(config: UNetConfig, init_seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(init_seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        data = _init_conv(rng, shape) if name.endswith("weight") else np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, params, "random-init")


def reinit_head(model: ModelParams, head: str, out_channels: int, init_seed: int) -> ModelParams:
    """Copy of ``model`` whose 1x1 head is replaced by a fresh one."""
    config = model.config.with_head(head, out_channels)
    fresh = build(config, init_seed)
    params = OrderedDict()
    for name in param_shapes(config):
        src = fresh if name.startswith("head.") else model
        params[name] = Tensor(src.params[name].data.copy(), requires_grad=True, name=name)
    return ModelParams(config, params, model.provenance, dict(model.meta))


def check_input(config: UNetConfig, shape) -> None:
    if len(shape) != 4:
        raise ValueError(f"expected N×C×H×W input, got shape {tuple(shape)}")
    n, c, h, w = shape
    if c != config.in_channels:
        raise ValueError(f"input has {c} channels, model expects {config.in_channels}")
    div = 2 ** config.depth
    if h % div or w % div:
        raise ValueError(
            f"spatial size {h}x{w} must be divisible by {div} (2^depth, depth={config.depth})")


def _conv(model: ModelParams, prefix: str, x: Tensor, padding: int = 1) -> Tensor:
    p = model.params
    return T.conv2d(x, p[prefix + ".weight"], p[prefix + ".bias"], 1, padding)


def encode(model: ModelParams, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Contracting path: returns the bottleneck activation and the skip tensors."""
    cfg = model.config
    check_input(cfg, x.shape)
    skips = []
    h = x
    for d in range(cfg.depth + 1):
        h = T.relu(_conv(model, f"enc{d}.conv1", h))
        h = T.relu(_conv(model, f"enc{d}.conv2", h))
        if d < cfg.depth:
            skips.append(h)
            h = T.max_pool2d(h, 2)
    return h, skips


def decode(model: ModelParams, bottleneck: Tensor, skips: list[Tensor]) -> Tensor:
    """Expanding path plus head."""
    cfg = model.config
    h = bottleneck
    for d in range(cfg.depth - 1, -1, -1):
        h = _conv(model, f"up{d}.conv", T.upsample_bilinear2x(h))
        h = T.concat_channels([h, skips[d]])
        h = T.relu(_conv(model, f"dec{d}.conv1", h))
        h = T.relu(_conv(model, f"dec{d}.conv2", h))
    out = _conv(model, "head.conv", h, padding=0)
    if cfg.head == SINGLE_LOGIT:
        n, _, hh, ww = out.shape
        out = T.reshape(out, (n, hh, ww))
    return out


def forward(model: ModelParams, x, return_bottleneck: bool = False):
    """Run the network.  Class head -> N×K×H×W logits; single head -> N×H×W logits."""
    x = T.as_tensor(x)
    bottleneck, skips = encode(model, x)
    out = decode(model, bottleneck, skips)
    return (out, bottleneck) if return_bottleneck else out


def predict(model: ModelParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Argmax class map (N×H×W, uint8) without building a graph."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(model, Tensor(images[i:i + batch_size]))
            out.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def param_digest(model: ModelParams) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: ModelParams, path) -> None:
    path = Path(path)
    table, offset, blobs = [], 0, []
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    header = {
        "config": asdict(model.config),
        "provenance": model.provenance,
        "meta": model.meta,
        "params": table,
        "data_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, config: Optional[UNetConfig] = None) -> ModelParams:
    """Read a checkpoint; if ``config`` is given the parameter schema must match it."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise CheckpointTruncatedError(f"{path}: file too short for a header")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 10 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    body = raw[10 + hlen:]
    if len(body) < header["data_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: expected {header['data_bytes']} data bytes, found {len(body)}")
    stored_cfg = UNetConfig.from_dict(header["config"])
    target_cfg = config or stored_cfg
    expected = param_shapes(target_cfg)
    stored = [e["name"] for e in header["params"]]
    for name in expected:
        if name not in stored:
            raise SchemaMismatchError(f"{path}: missing key {name!r} required by {target_cfg}")
    for name in stored:
        if name not in expected:
            raise SchemaMismatchError(f"{path}: key {name!r} not in schema of {target_cfg}")
    params = OrderedDict()
    for e in header["params"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise SchemaMismatchError(
                f"{path}: {e['name']} has shape {shape}, schema expects {expected[e['name']]}")
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(body, dtype="<f4", count=n // 4, offset=e["offset"]).reshape(shape)
        params[e["name"]] = Tensor(arr.astype(T.get_dtype()), requires_grad=True, name=e["name"])
    ordered = OrderedDict((k, params[k]) for k in expected)
    return ModelParams(target_cfg, ordered, header["provenance"], header.get("meta", {}))
