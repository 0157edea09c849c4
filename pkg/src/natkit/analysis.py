"""Analytic compute and memory costs.

Costs are exact integers counted in multiply-accumulates (MACs).  Memory is
counted in scalar elements: the Q/K/V projections plus the attention-weight
buffer for attention modules, the output map for convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigurationError, PaddingRequiredError
from .model import NUM_LEVELS, NATConfig, count_params
from .neighborhood import check_kernel
from .tensor import conv_output_size


@dataclass
class CostReport:
    """Totals plus the per-term breakdown they are summed from.

    ``breakdown`` holds a ``"macs"`` and a ``"memory_scalars"`` map; anything
    under ``"estimates"`` is informational and excluded from the totals.
    """

    macs: int
    memory_scalars: int
    breakdown: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, macs: dict[str, int], memory: dict[str, int], estimates: dict[str, int] | None = None):
        breakdown = {"macs": dict(macs), "memory_scalars": dict(memory)}
        if estimates:
            breakdown["estimates"] = dict(estimates)
        return cls(sum(macs.values()), sum(memory.values()), breakdown)

    def to_dict(self) -> dict:
        return {"macs": self.macs, "memory_scalars": self.memory_scalars, "breakdown": self.breakdown}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _positive(**extents) -> None:
    for name, v in extents.items():
        if v < 1:
            raise ConfigurationError(f"{name} must be positive, got {v}")


def cost_self_attention(H: int, W: int, C: int) -> CostReport:
    _positive(H=H, W=W, C=C)
    n = H * W
    return CostReport.from_terms(
        {"qkv": 3 * n * C * C, "attention": 2 * n * n * C},
        {"qkv": 3 * n * C, "weights": n * n},
    )


def cost_window_attention(H: int, W: int, C: int, L: int) -> CostReport:
    """Non-overlapping ``L x L`` window attention.

    Raises :class:`PaddingRequiredError` when ``L`` does not divide both extents.
    """
    _positive(H=H, W=W, C=C, L=L)
    if H % L or W % L:
        raise PaddingRequiredError(f"{H}x{W} is not divisible by window {L}; zero padding required")
    n = H * W
    return CostReport.from_terms(
        {"qkv": 3 * n * C * C, "attention": 2 * n * C * L * L},
        {"qkv": 3 * n * C, "weights": n * L * L},
    )


def cost_na(H: int, W: int, C: int, L: int) -> CostReport:
    _positive(H=H, W=W, C=C)
    check_kernel(L)
    n = H * W
    nb = min(L, H) * min(L, W)
    return CostReport.from_terms(
        {"qkv": 3 * n * C * C, "attention": 2 * n * C * nb},
        {"qkv": 3 * n * C, "weights": n * nb},
    )


def cost_conv(H: int, W: int, C: int, L: int) -> CostReport:
    _positive(H=H, W=W, C=C, L=L)
    return CostReport.from_terms({"conv": H * W * C * C * L * L}, {"output": H * W * C})


def crossover_channels(L: int) -> int:
    """Smallest ``C`` with ``3C^2 + 2CL^2 < C^2 L^2``, i.e. ``C > 2L^2 / (L^2 - 3)``."""
    check_kernel(L)
    num, den = 2 * L * L, L * L - 3
    return num // den + 1


# -- whole model ----------------------------------------------------------------


@dataclass
class ModelStats:
    params: int
    cost: CostReport

    @property
    def macs(self) -> int:
        return self.cost.macs

    def to_dict(self) -> dict:
        return {"params": self.params, **self.cost.to_dict()}


def _conv_macs(h: int, w: int, c_in: int, c_out: int, k: int = 3, stride: int = 2, pad: int = 1):
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    return ho * wo * k * k * c_in * c_out, ho, wo


def model_stats(config: NATConfig, H: int = 224, W: int | None = None) -> ModelStats:
    """Parameter count and MAC total for one forward pass at ``H x W``.

    Counted: conv taps, linear layers, attention QK and AV products, and one
    MAC per element for each LayerNorm affine.  Softmax, GELU and the
    normalization statistics are reported under ``estimates`` only.
    """
    W = H if W is None else W
    if H % 32 or W % 32:
        raise ConfigurationError(f"resolution {H}x{W} must be divisible by 32")
    macs = dict.fromkeys(["tokenizer", "qkv", "attention", "proj", "mlp", "norm", "downsample", "head"], 0)
    memory = {"qkv": 0, "weights": 0}
    estimates = {"softmax": 0, "gelu": 0, "norm_stats": 0}

    c0 = config.channels(0)
    m, h, w = _conv_macs(H, W, 3, c0 // 2)
    macs["tokenizer"] += m
    m, h, w = _conv_macs(h, w, c0 // 2, c0)
    macs["tokenizer"] += m

    for level in range(NUM_LEVELS):
        C, hid, heads = config.channels(level), config.hidden(level), config.heads(level)
        n = h * w
        nb = min(config.kernel, h) * min(config.kernel, w)
        depth = config.depths[level]
        macs["qkv"] += depth * 3 * n * C * C
        macs["attention"] += depth * 2 * n * C * nb
        macs["proj"] += depth * n * C * C
        macs["mlp"] += depth * 2 * n * C * hid
        macs["norm"] += depth * 2 * n * C
        memory["qkv"] += depth * 3 * n * C
        memory["weights"] += depth * heads * n * nb
        estimates["softmax"] += depth * heads * n * nb
        estimates["gelu"] += depth * n * hid
        estimates["norm_stats"] += depth * 2 * 2 * n * C
        if level < NUM_LEVELS - 1:
            m, h, w = _conv_macs(h, w, C, 2 * C)
            macs["downsample"] += m

    c3 = config.channels(NUM_LEVELS - 1)
    macs["norm"] += h * w * c3
    estimates["norm_stats"] += 2 * h * w * c3
    macs["head"] += c3 * config.num_classes
    return ModelStats(count_params(config), CostReport.from_terms(macs, memory, estimates))
