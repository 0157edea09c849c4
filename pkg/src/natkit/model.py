"""Hierarchical NAT backbone and classifier (inference only).

Weights live in a flat ``dict[str, ndarray]``; the names and shapes are
produced by :func:`weight_shapes` and listed in the README.  Linear weights
are ``in x out``, conv kernels ``k x k x Cin x Cout``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .attention import AttentionParams, mhna_layer
from .errors import ConfigurationError, FormatError, WeightError
from .neighborhood import NeighborhoodSpec, check_kernel
from .tensor import (
    Rng,
    conv2d,
    decode_tensor_body,
    encode_tensor_body,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    num_threads,
    get_num_threads,
    resolve_precision,
)

NUM_LEVELS = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class NATConfig:
    depths: tuple[int, ...]
    head_dim: int
    base_heads: int
    mlp_ratio: float
    kernel: int
    num_classes: int = 1000
    layer_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) != NUM_LEVELS or any(d < 1 for d in self.depths):
            raise ConfigurationError(f"depths must be 4 positive ints, got {self.depths}")
        if self.head_dim < 1 or self.base_heads < 1 or self.num_classes < 1:
            raise ConfigurationError("head_dim, base_heads and num_classes must be positive")
        if (self.head_dim * self.base_heads) % 2:
            raise ConfigurationError("base channel count must be even (tokenizer uses C0/2)")
        if not self.mlp_ratio > 0:
            raise ConfigurationError("mlp_ratio must be positive")
        if self.layer_scale is not None and not self.layer_scale > 0:
            raise ConfigurationError("layer_scale must be positive or None")
        check_kernel(self.kernel)

    def heads(self, level: int) -> int:
        return self.base_heads * 2**level

    def channels(self, level: int) -> int:
        return self.head_dim * self.heads(level)

    def hidden(self, level: int) -> int:
        return int(round(self.mlp_ratio * self.channels(level)))

    @property
    def spec(self) -> NeighborhoodSpec:
        return NeighborhoodSpec(self.kernel)


PRESETS: dict[str, NATConfig] = {
    "mini": NATConfig((3, 4, 6, 5), 32, 2, 3, 7),
    "tiny": NATConfig((3, 4, 18, 5), 32, 2, 3, 7),
    "small": NATConfig((3, 4, 18, 5), 32, 3, 2, 7, layer_scale=1e-5),
    "base": NATConfig((3, 4, 18, 5), 32, 4, 2, 7, layer_scale=1e-5),
    "desk": NATConfig((1, 1, 1, 1), 8, 2, 2, 3, num_classes=10),
}

CONFIG_KEYS = {"depths", "head_dim", "base_heads", "mlp_ratio", "kernel", "num_classes", "layer_scale"}


def config_from_dict(obj: Mapping) -> NATConfig:
    """Build a config from the JSON object form; a ``preset`` key overrides the rest."""
    if not isinstance(obj, Mapping):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(obj) - CONFIG_KEYS - {"preset"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "preset" in obj:
        name = obj["preset"]
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name]
    missing = CONFIG_KEYS - set(obj)
    if missing:
        raise ConfigurationError(f"missing config keys: {sorted(missing)}")
    return NATConfig(
        depths=tuple(obj["depths"]),
        head_dim=int(obj["head_dim"]),
        base_heads=int(obj["base_heads"]),
        mlp_ratio=obj["mlp_ratio"],
        kernel=int(obj["kernel"]),
        num_classes=int(obj["num_classes"]),
        layer_scale=obj["layer_scale"],
    )


def config_to_dict(config: NATConfig) -> dict:
    d = asdict(config)
    d["depths"] = list(config.depths)
    return d


def load_config(path: str | os.PathLike) -> NATConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON config ({exc})") from exc
    return config_from_dict(obj)


# -- weight manifest ----------------------------------------------------------


def linear_param_count(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def block_shapes(config: NATConfig, level: int) -> dict[str, tuple[int, ...]]:
    C, hid, T = config.channels(level), config.hidden(level), 2 * config.kernel - 1
    shapes = {
        "norm1.weight": (C,),
        "norm1.bias": (C,),
        "attn.qkv.weight": (C, 3 * C),
        "attn.qkv.bias": (3 * C,),
        "attn.rpb": (config.heads(level), T, T),
        "attn.proj.weight": (C, C),
        "attn.proj.bias": (C,),
        "norm2.weight": (C,),
        "norm2.bias": (C,),
        "mlp.fc1.weight": (C, hid),
        "mlp.fc1.bias": (hid,),
        "mlp.fc2.weight": (hid, C),
        "mlp.fc2.bias": (C,),
    }
    if config.layer_scale is not None:
        shapes["gamma1"] = (C,)
        shapes["gamma2"] = (C,)
    return shapes


def weight_shapes(config: NATConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape manifest of every tensor the model owns."""
    c0 = config.channels(0)
    shapes: dict[str, tuple[int, ...]] = {
        "tokenizer.conv0.weight": (3, 3, 3, c0 // 2),
        "tokenizer.conv0.bias": (c0 // 2,),
        "tokenizer.conv1.weight": (3, 3, c0 // 2, c0),
        "tokenizer.conv1.bias": (c0,),
    }
    for level in range(NUM_LEVELS):
        for b in range(config.depths[level]):
            for name, shape in block_shapes(config, level).items():
                shapes[f"levels.{level}.blocks.{b}.{name}"] = shape
        if level < NUM_LEVELS - 1:
            C = config.channels(level)
            shapes[f"levels.{level}.downsample.weight"] = (3, 3, C, 2 * C)
            shapes[f"levels.{level}.downsample.bias"] = (2 * C,)
    c3 = config.channels(NUM_LEVELS - 1)
    shapes["norm.weight"] = (c3,)
    shapes["norm.bias"] = (c3,)
    shapes["head.weight"] = (c3, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def count_params(config: NATConfig) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(config).values())


def init_weights(config: NATConfig, seed: int = 42, precision="f32") -> dict[str, np.ndarray]:
    """Random untrained weights, drawn in manifest order from one seeded stream."""
    rng = Rng(seed)
    dt = resolve_precision(precision)
    weights = {}
    for name, shape in weight_shapes(config).items():
        *_, owner, leaf = ("." + name).rsplit(".", 2)
        if leaf.startswith("gamma"):
            w = np.full(shape, config.layer_scale, dtype=dt)
        elif owner.startswith("norm") and leaf == "weight":
            w = np.ones(shape, dtype=dt)
        elif leaf == "bias":
            w = np.zeros(shape, dtype=dt)
        else:  # affine/conv weights and relative-position tables
            w = rng.truncated_normal(shape, std=0.02, precision=dt)
        weights[name] = w
    return weights


def validate_weights(config: NATConfig, weights: Mapping[str, np.ndarray]) -> None:
    expected = weight_shapes(config)
    problems = []
    missing = [n for n in expected if n not in weights]
    orphans = [n for n in weights if n not in expected]
    if missing:
        problems.append(f"missing: {', '.join(missing)}")
    if orphans:
        problems.append(f"unexpected: {', '.join(orphans)}")
    for name, shape in expected.items():
        if name in weights and tuple(weights[name].shape) != shape:
            problems.append(f"{name}: shape {tuple(weights[name].shape)} != expected {shape}")
    dtypes = {np.dtype(w.dtype) for w in weights.values()}
    if len(dtypes) > 1:
        problems.append(f"mixed precisions {sorted(str(d) for d in dtypes)}")
    if problems:
        raise WeightError("weights do not match config; " + "; ".join(problems))


NATW_MAGIC = b"NATW"
NATW_VERSION = 1


def save_weights(path: str | os.PathLike, weights: Mapping[str, np.ndarray]) -> None:
    parts = [NATW_MAGIC, struct.pack("<II", NATW_VERSION, len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor_body(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != NATW_MAGIC:
        raise FormatError(f"{path}: not a NATW weights file (bad magic {buf[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated NATW header") from exc
    if version != NATW_VERSION:
        raise FormatError(f"{path}: unsupported NATW version {version}")
    offset = 12
    weights = {}
    for _ in range(count):
        try:
            (n,) = struct.unpack_from("<H", buf, offset)
            name = buf[offset + 2 : offset + 2 + n].decode("utf-8")
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: corrupt NATW tensor name") from exc
        offset += 2 + n
        weights[name], offset = decode_tensor_body(buf, offset, f"{path} (NATW, {name})")
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes in NATW file")
    return weights


# -- forward ------------------------------------------------------------------


def _sub(weights: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in weights.items() if k.startswith(p)}


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"image must be H x W x 3, got {image.shape}")
    H, W, _ = image.shape
    if H % 32 or W % 32:
        raise ConfigurationError(f"image extents {H}x{W} must be divisible by 32")


def tokenizer_forward(image: np.ndarray, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    """Two stride-2 3x3 convolutions: ``H x W x 3 -> H/4 x W/4 x C0``."""
    _check_image(image)
    x = conv2d(image, weights["tokenizer.conv0.weight"], weights["tokenizer.conv0.bias"], stride=2, pad=1)
    return conv2d(x, weights["tokenizer.conv1.weight"], weights["tokenizer.conv1.bias"], stride=2, pad=1)


def nat_block_forward(x: np.ndarray, block: Mapping[str, np.ndarray], spec: NeighborhoodSpec, heads: int) -> np.ndarray:
    """Pre-norm residual block: attention branch then MLP branch.

    ``block`` uses the local names of :func:`block_shapes`; ``gamma1``/``gamma2``
    (layer scale) are applied when present.
    """
    params = AttentionParams(
        qkv_weight=block["attn.qkv.weight"],
        qkv_bias=block["attn.qkv.bias"],
        proj_weight=block["attn.proj.weight"],
        proj_bias=block["attn.proj.bias"],
        rpb=block["attn.rpb"],
        heads=heads,
    )
    y = mhna_layer(layer_norm(x, block["norm1.weight"], block["norm1.bias"], LN_EPS), params, spec)
    if "gamma1" in block:
        y = y * block["gamma1"]
    x = x + y
    h = layer_norm(x, block["norm2.weight"], block["norm2.bias"], LN_EPS)
    h = gelu(linear(h, block["mlp.fc1.weight"], block["mlp.fc1.bias"]))
    y = linear(h, block["mlp.fc2.weight"], block["mlp.fc2.bias"])
    if "gamma2" in block:
        y = y * block["gamma2"]
    return x + y


def downsample_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 stride-2 conv: ``h x w x C -> h/2 x w/2 x 2C``."""
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise ConfigurationError(f"downsampler needs even extents, got {x.shape[:2]}")
    return conv2d(x, weight, bias, stride=2, pad=1)


def _levels(image: np.ndarray, config: NATConfig, weights: Mapping[str, np.ndarray]) -> Iterator[np.ndarray]:
    validate_weights(config, weights)
    dt = next(iter(weights.values())).dtype
    x = tokenizer_forward(np.ascontiguousarray(image, dtype=dt), weights)
    spec = config.spec
    for level in range(NUM_LEVELS):
        for b in range(config.depths[level]):
            x = nat_block_forward(x, _sub(weights, f"levels.{level}.blocks.{b}"), spec, config.heads(level))
        yield x
        if level < NUM_LEVELS - 1:
            x = downsample_forward(
                x, weights[f"levels.{level}.downsample.weight"], weights[f"levels.{level}.downsample.bias"]
            )


def nat_forward(image, config: NATConfig, weights: Mapping[str, np.ndarray], threads: int | None = None) -> np.ndarray:
    """Class logits for one ``H x W x 3`` image."""
    with num_threads(threads or get_num_threads()):
        *_, x = _levels(image, config, weights)
        x = layer_norm(x, weights["norm.weight"], weights["norm.bias"], LN_EPS)
        return linear(global_avg_pool(x), weights["head.weight"], weights["head.bias"])


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray] = field(default_factory=list)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]


def extract_pyramid(image, config: NATConfig, weights: Mapping[str, np.ndarray], threads: int | None = None) -> FeaturePyramid:
    """Per-level outputs (before downsampling) at 1/4, 1/8, 1/16 and 1/32 scale."""
    with num_threads(threads or get_num_threads()):
        return FeaturePyramid(list(_levels(image, config, weights)))
