"""Neighborhood attention kernels.

Layouts
-------
* ``q, k, v``: ``H x W x heads x d``
* ``bias``: ``heads x (2L-1) x (2L-1)`` relative-position table
* attention weights: ``H x W x heads x Lh*Lw`` with ``Lh = min(L, H)`` and
  ``Lw = min(L, W)``; the last axis enumerates a query's neighbors row-major.

Dot products and value sums are accumulated in float64 and rounded once to
the input precision, so single-precision results do not depend on the
summation order of a particular path.

The fused path (:func:`na_qk`, :func:`na_av`) walks the ``Lh*Lw`` neighbor
offsets one at a time, gathering a single ``H x W x heads x d`` slab per
offset, so it never holds more than one extra copy of the keys or values.
:func:`na_reference` instead materializes every neighborhood by unfolding
and edge replication and is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError
from .neighborhood import NeighborhoodSpec, bias_starts, window_starts
from .tensor import linear, softmax_last


@dataclass
class AttentionParams:
    """Weights of one multi-head neighborhood attention layer.

    ``qkv_weight`` is ``C x 3C`` producing ``[Q | K | V]`` along the last axis,
    each part split head-major into ``heads x d``.
    """

    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    rpb: np.ndarray
    heads: int


@dataclass
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dbias: np.ndarray


def _acc(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


def attention_scale(d: int) -> float:
    return float(np.sqrt(d))


def _check_inputs(q, k, v, bias, spec: NeighborhoodSpec) -> None:
    if q.ndim != 4:
        raise DimensionError(f"expected H x W x heads x d, got {q.shape}")
    if k.shape != q.shape or (v is not None and v.shape != q.shape):
        raise DimensionError(
            f"q/k/v shapes differ: {q.shape}, {k.shape}, {None if v is None else v.shape}"
        )
    T = spec.table_size
    if bias.shape != (q.shape[2], T, T):
        raise DimensionError(f"bias shape {bias.shape} does not match ({q.shape[2]}, {T}, {T})")


class _Plan:
    """Per-axis window starts and bias-table offsets for one map size."""

    def __init__(self, H: int, W: int, L: int):
        self.lh, self.lw = min(L, H), min(L, W)
        self.rows = window_starts(H, L)
        self.cols = window_starts(W, L)
        self.brows = bias_starts(H, L)
        self.bcols = bias_starts(W, L)

    def offsets(self):
        for a in range(self.lh):
            for b in range(self.lw):
                yield a * self.lw + b, a, b

    def gather(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        return x[self.rows + a][:, self.cols + b]

    def bias_slab(self, bias: np.ndarray, a: int, b: int) -> np.ndarray:
        # (heads, H, W) -> (H, W, heads)
        return bias[:, self.brows + a][:, :, self.bcols + b].transpose(1, 2, 0)

    def scatter_index(self, a: int, b: int):
        return (self.rows + a)[:, None], (self.cols + b)[None, :]


def na_qk(q: np.ndarray, k: np.ndarray, bias: np.ndarray, spec: NeighborhoodSpec) -> np.ndarray:
    """Scaled logits ``(q . k_neighbor + bias) / sqrt(d)``; bias added in the same pass."""
    _check_inputs(q, k, None, bias, spec)
    H, W, heads, d = q.shape
    plan = _Plan(H, W, spec.kernel)
    scale = attention_scale(d)
    q64, k64, b64 = _acc(q), _acc(k), _acc(bias)
    logits = np.empty((H, W, heads, plan.lh * plan.lw), dtype=q.dtype)
    for m, a, b in plan.offsets():
        dots = np.einsum("ijhd,ijhd->ijh", q64, plan.gather(k64, a, b))
        logits[..., m] = (dots + plan.bias_slab(b64, a, b)) / scale
    return logits


def na_av(probs: np.ndarray, v: np.ndarray, spec: NeighborhoodSpec) -> np.ndarray:
    H, W, heads, _ = v.shape
    plan = _Plan(H, W, spec.kernel)
    if probs.shape != (H, W, heads, plan.lh * plan.lw):
        raise DimensionError(
            f"attention weights {probs.shape} do not match values {v.shape} with L={spec.kernel}"
        )
    p64, v64 = _acc(probs), _acc(v)
    out = np.zeros(v.shape)
    for m, a, b in plan.offsets():
        out += p64[..., m, None] * plan.gather(v64, a, b)
    return out.astype(v.dtype, copy=False)


def na_forward(q, k, v, bias, spec: NeighborhoodSpec, return_weights: bool = False):
    _check_inputs(q, k, v, bias, spec)
    probs = softmax_last(na_qk(q, k, bias, spec))
    out = na_av(probs, v, spec)
    return (out, probs) if return_weights else out


def na_backward(q, k, v, bias, spec: NeighborhoodSpec, dout: np.ndarray) -> AttentionGrads:
    """Gradients of ``sum(na_forward(q, k, v, bias) * dout)`` w.r.t. every input.

    Scatter-adds into ``dk``, ``dv`` and ``dbias`` run in fixed neighbor order.
    """
    _check_inputs(q, k, v, bias, spec)
    if dout.shape != q.shape:
        raise DimensionError(f"dout shape {dout.shape} does not match output {q.shape}")
    H, W, heads, d = q.shape
    plan = _Plan(H, W, spec.kernel)
    scale = attention_scale(d)
    probs = softmax_last(na_qk(q, k, bias, spec))

    dprobs = np.empty_like(probs)
    for m, a, b in plan.offsets():
        dprobs[..., m] = np.einsum("ijhd,ijhd->ijh", dout, plan.gather(v, a, b))
    dlogits = probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))
    dscores = dlogits / scale  # w.r.t. q.k + bias, before scaling

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    # table-major during accumulation, transposed to heads-first at the end
    dbias_t = np.zeros((spec.table_size, spec.table_size, heads), dtype=q.dtype)
    for m, a, b in plan.offsets():
        ds = dscores[..., m]
        dq += ds[..., None] * plan.gather(k, a, b)
        idx = plan.scatter_index(a, b)
        np.add.at(dk, idx, ds[..., None] * q)
        np.add.at(dv, idx, probs[..., m, None] * dout)
        np.add.at(dbias_t, ((plan.brows + a)[:, None], (plan.bcols + b)[None, :]), ds)
    return AttentionGrads(dq=dq, dk=dk, dv=dv, dbias=np.ascontiguousarray(dbias_t.transpose(2, 0, 1)))


def self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v`` over all ``M`` tokens of ``M x d`` inputs."""
    if q.ndim != 2 or k.shape != q.shape or v.shape[0] != q.shape[0]:
        raise DimensionError(f"self_attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    logits = (q @ k.T) / attention_scale(q.shape[1])
    return softmax_last(logits) @ v


# -- unfold reference -------------------------------------------------------


def _unfold_pad(n: int, L: int) -> tuple[int, int, int]:
    """Window length and (before, after) edge-replication widths for one axis."""
    wl = min(L, n)
    before = min((L - 1) // 2, n - 1)
    total = wl - 1  # n - (n - wl + 1) windows to replicate
    return wl, before, total - before


def unfold_neighborhoods(x: np.ndarray, L: int) -> np.ndarray:
    """Materialize every neighborhood of an ``H x W x ...`` map.

    Sliding-window extraction gives the windows of all queries that can be
    centered; replicating the edge windows supplies the border queries.
    Result is ``H x W x ... x Lh x Lw``.
    """
    H, W = x.shape[:2]
    wh, bh, ah = _unfold_pad(H, L)
    ww, bw, aw = _unfold_pad(W, L)
    windows = sliding_window_view(x, (wh, ww), axis=(0, 1))
    pad = [(bh, ah), (bw, aw)] + [(0, 0)] * (windows.ndim - 2)
    return np.pad(windows, pad, mode="edge")


def reference_neighbor_indices(H: int, W: int, L: int) -> np.ndarray:
    """``H x W x Lh*Lw x 2`` neighbor coordinates obtained by unfolding a coordinate grid."""
    grid = np.stack(np.meshgrid(np.arange(H), np.arange(W), indexing="ij"), axis=-1)
    nb = unfold_neighborhoods(grid, L)  # H x W x 2 x Lh x Lw
    return nb.reshape(H, W, 2, -1).transpose(0, 1, 3, 2)


def na_reference(q, k, v, bias, spec: NeighborhoodSpec) -> np.ndarray:
    """Dense neighborhood attention built from materialized neighborhoods."""
    _check_inputs(q, k, v, bias, spec)
    H, W, heads, d = q.shape
    L = spec.kernel
    kn = unfold_neighborhoods(_acc(k), L)  # H x W x heads x d x Lh x Lw
    vn = unfold_neighborhoods(_acc(v), L)
    lh, lw = kn.shape[-2:]
    kn = kn.reshape(H, W, heads, d, lh * lw)
    vn = vn.reshape(H, W, heads, d, lh * lw)

    coords = reference_neighbor_indices(H, W, L)  # H x W x M x 2
    rel_r = coords[..., 0] - np.arange(H)[:, None, None] + (L - 1)
    rel_c = coords[..., 1] - np.arange(W)[None, :, None] + (L - 1)
    dense_bias = _acc(bias)[:, rel_r, rel_c].transpose(1, 2, 0, 3)  # H x W x heads x M

    logits = (np.matmul(_acc(q)[..., None, :], kn)[..., 0, :] + dense_bias) / attention_scale(d)
    probs = softmax_last(logits.astype(q.dtype))
    return np.matmul(vn, _acc(probs)[..., None])[..., 0].astype(q.dtype)


# -- multi-head layer ---------------------------------------------------------


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    H, W, C = x.shape
    if C % heads:
        raise ConfigurationError(f"channels {C} not divisible by heads {heads}")
    return x.reshape(H, W, heads, C // heads)


def mhna_layer(x: np.ndarray, params: AttentionParams, spec: NeighborhoodSpec) -> np.ndarray:
    """Multi-head neighborhood attention on an ``H x W x C`` map."""
    if x.ndim != 3:
        raise DimensionError(f"expected H x W x C, got {x.shape}")
    H, W, C = x.shape
    if C % params.heads:
        raise ConfigurationError(f"channels {C} not divisible by heads {params.heads}")
    qkv = linear(x, params.qkv_weight, params.qkv_bias)
    q, k, v = (split_heads(np.ascontiguousarray(qkv[..., i * C : (i + 1) * C]), params.heads) for i in range(3))
    out = na_forward(q, k, v, params.rpb, spec)
    return linear(out.reshape(H, W, C), params.proj_weight, params.proj_bias)
