"""Invariant checks and finite-difference gradient checks behind ``natkit verify``/``gradcheck``.

Every check returns a :class:`Check` record; a check never raises on a
numerical mismatch, it reports ``status="fail"`` with the measured value.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import analysis
from .attention import (
    na_backward,
    na_forward,
    na_qk,
    na_reference,
    reference_neighbor_indices,
    self_attention,
)
from .neighborhood import NeighborhoodSpec, neighborhood_indices, window_start
from .tensor import Rng, resolve_precision, softmax_last


@dataclass
class Check:
    name: str
    status: str
    measured: float
    tolerance: float
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _check(name: str, measured: float, tolerance: float, started: float, exact: bool = False) -> Check:
    ok = measured == 0 if exact else measured <= tolerance
    return Check(name, "pass" if ok else "fail", float(measured), float(tolerance), time.perf_counter() - started)


NAFn = Callable[..., np.ndarray]


def _inputs(rng: Rng, H, W, heads, d, L, dt, zero_bias=False):
    q, k, v = (rng.normal((H, W, heads, d), precision=dt) for _ in range(3))
    T = 2 * L - 1
    bias = np.zeros((heads, T, T), dtype=dt) if zero_bias else rng.normal((heads, T, T), precision=dt)
    return q, k, v, bias


def check_sa_equivalence(rng: Rng, dt, na_fn: NAFn = na_forward) -> Check:
    t0 = time.perf_counter()
    tol = 1e-5 if dt == np.float32 else 1e-12
    worst = 0.0
    H = W = 5
    d = 8
    for heads, L in itertools.product((1, 2), (5, 7)):
        q, k, v, bias = _inputs(rng, H, W, heads, d, L, dt, zero_bias=True)
        out = na_fn(q, k, v, bias, NeighborhoodSpec(L))
        for h in range(heads):
            flat = [x[:, :, h, :].reshape(H * W, d) for x in (q, k, v)]
            ref = self_attention(*flat).reshape(H, W, d)
            worst = max(worst, float(np.abs(out[:, :, h, :] - ref).max()))
    return _check("sa_equivalence", worst, tol, t0)


def check_oracle_equivalence(rng: Rng, dt, na_fn: NAFn = na_forward, extents=range(3, 13)) -> Check:
    t0 = time.perf_counter()
    worst = 0.0
    for H, W, L, heads, d in itertools.product(extents, extents, (3, 5, 7), (1, 2, 4), (2, 4, 8)):
        q, k, v, bias = _inputs(rng, H, W, heads, d, L, dt)
        spec = NeighborhoodSpec(L)
        worst = max(worst, float(np.abs(na_fn(q, k, v, bias, spec) - na_reference(q, k, v, bias, spec)).max()))
    return _check("oracle_equivalence", worst, 1e-6, t0)


def check_neighbor_sets(extents=range(3, 13)) -> Check:
    t0 = time.perf_counter()
    mismatches = 0
    for H, W, L in itertools.product(extents, extents, (3, 5, 7)):
        ref = reference_neighbor_indices(H, W, L)
        for i, j in itertools.product(range(H), range(W)):
            if [tuple(p) for p in ref[i, j].tolist()] != neighborhood_indices(i, j, H, W, L):
                mismatches += 1
    return _check("neighbor_sets", mismatches, 0, t0, exact=True)


def check_corner_semantics() -> Check:
    t0 = time.perf_counter()
    bad = 0
    for i, j in itertools.product(range(5), range(5)):
        bad += len(neighborhood_indices(i, j, 5, 5, 3)) != 9
    expected = [(r, c) for r in (2, 3, 4) for c in (0, 1, 2)]
    bad += neighborhood_indices(4, 0, 5, 5, 3) != expected
    for n, L in itertools.product(range(1, 16), (3, 5, 7, 9)):
        prev = -1
        for i in range(n):
            g = window_start(i, n, L)
            bad += g.start < prev
            bad += not g.start <= i < g.start + g.len
            bad += g.len != min(L, n)
            prev = g.start
    return _check("corner_semantics", bad, 0, t0, exact=True)


def check_row_stochastic(rng: Rng, dt) -> Check:
    t0 = time.perf_counter()
    tol = 1e-6 if dt == np.float32 else 1e-12
    worst = 0.0
    for H, W, L in [(7, 9, 3), (12, 5, 5), (4, 4, 7)]:
        q, k, _, bias = _inputs(rng, H, W, 2, 4, L, dt)
        probs = softmax_last(na_qk(q, k, bias, NeighborhoodSpec(L)))
        worst = max(worst, float(np.abs(probs.sum(-1) - 1).max()))
        if probs.min() < 0 or probs.max() > 1:
            worst = max(worst, 1.0)
    return _check("row_stochastic", worst, tol, t0)


def check_translation_equivariance(rng: Rng, dt, na_fn: NAFn = na_forward, L: int = 3, shift=(2, 3)) -> Check:
    """Shift a 12x12 input by ``shift``; outputs at queries interior in both frames must move with it."""
    t0 = time.perf_counter()
    H = W = 12
    dy, dx = shift
    big = [rng.normal((H + dy, W + dx, 2, 4), precision=dt) for _ in range(3)]
    bias = rng.normal((2, 2 * L - 1, 2 * L - 1), precision=dt)
    spec = NeighborhoodSpec(L)
    base = [x[:H, :W] for x in big]
    moved = [x[dy : dy + H, dx : dx + W] for x in big]
    out_a = na_fn(*[np.ascontiguousarray(x) for x in base], bias, spec)
    out_b = na_fn(*[np.ascontiguousarray(x) for x in moved], bias, spec)
    r = (L - 1) // 2
    worst = 0.0
    # pixel (i, j) in frame b is pixel (i + dy, j + dx) in frame a
    for i, j in itertools.product(range(r, H - r), range(r, W - r)):
        ia, ja = i + dy, j + dx
        if r <= ia < H - r and r <= ja < W - r:
            worst = max(worst, float(np.abs(out_b[i, j] - out_a[ia, ja]).max()))
    return _check("translation_equivariance", worst, 1e-6, t0)


def check_locality(rng: Rng, dt) -> Check:
    t0 = time.perf_counter()
    H, W, L = 9, 8, 3
    q, k, v, bias = _inputs(rng, H, W, 1, 4, L, dt)
    spec = NeighborhoodSpec(L)
    out = na_forward(q, k, v, bias, spec)
    a, b = 4, 0
    k2, v2 = k.copy(), v.copy()
    k2[a, b] += 1
    v2[a, b] += 1
    changed = np.abs(na_forward(q, k2, v2, bias, spec) - out).max(axis=(2, 3)) > 0
    violations = 0
    for i, j in itertools.product(range(H), range(W)):
        inside = (a, b) in neighborhood_indices(i, j, H, W, L)
        violations += bool(changed[i, j]) != inside
    return _check("locality", violations, 0, t0, exact=True)


def check_cost_parity(rng: Rng, points: int = 200) -> Check:
    t0 = time.perf_counter()
    gen = np.random.Generator(np.random.PCG64(rng.seed))
    bad = 0
    for _ in range(points):
        L = int(gen.choice([3, 5, 7, 9]))
        H = L * int(gen.integers(1, 9))
        W = L * int(gen.integers(1, 9))
        C = int(gen.integers(1, 513))
        na = analysis.cost_na(H, W, C, L)
        win = analysis.cost_window_attention(H, W, C, L)
        bad += (na.macs, na.memory_scalars) != (win.macs, win.memory_scalars)
    return _check("cost_parity", bad, 0, t0, exact=True)


def check_crossover() -> Check:
    t0 = time.perf_counter()
    bad = int(analysis.crossover_channels(3) != 4)
    for L in (3, 5, 7):
        c_star = analysis.crossover_channels(L)
        for C in range(1, 65):
            cheaper = analysis.cost_na(8, 8, C, L).macs < analysis.cost_conv(8, 8, C, L).macs
            bad += cheaper != (C >= c_star)
    return _check("crossover", bad, 0, t0, exact=True)


def check_memory_accounting(rng: Rng, dt) -> Check:
    t0 = time.perf_counter()
    gen = np.random.Generator(np.random.PCG64(rng.seed + 1))
    bad = 0
    for _ in range(10):
        H, W = (int(x) for x in gen.integers(1, 20, size=2))
        L = int(gen.choice([3, 5, 7]))
        q, k, _, bias = _inputs(rng, H, W, 1, 4, L, dt)
        weights = na_qk(q, k, bias, NeighborhoodSpec(L))
        bad += weights.size != analysis.cost_na(H, W, 4, L).breakdown["memory_scalars"]["weights"]
    return _check("memory_accounting", bad, 0, t0, exact=True)


# -- gradients ---------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically zero."""
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def finite_difference_grads(q, k, v, bias, spec, dout, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``sum(na_forward(...) * dout)`` for each input."""
    inputs = {"dq": q, "dk": k, "dv": v, "dbias": bias}
    grads = {}
    for name, x in inputs.items():
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = float((na_forward(q, k, v, bias, spec) * dout).sum())
            flat[idx] = orig - h
            minus = float((na_forward(q, k, v, bias, spec) * dout).sum())
            flat[idx] = orig
            gflat[idx] = (plus - minus) / (2 * h)
        grads[name] = g
    return grads


def gradcheck(seed: int = 42, H: int = 4, W: int = 5, d: int = 6, L: int = 3, heads: int = 1,
              instances: int = 3, h: float = 1e-5, zero_dout: bool = False) -> dict[str, float]:
    """Max relative error per gradient tensor over ``instances`` random problems (double precision)."""
    rng = Rng(seed)
    spec = NeighborhoodSpec(L)
    worst = dict.fromkeys(["dq", "dk", "dv", "dbias"], 0.0)
    for _ in range(instances):
        q, k, v, bias = _inputs(rng, H, W, heads, d, L, np.float64)
        dout = np.zeros_like(q) if zero_dout else rng.normal(q.shape)
        analytic = na_backward(q, k, v, bias, spec, dout)
        numeric = finite_difference_grads(q, k, v, bias, spec, dout, h)
        for name in worst:
            worst[name] = max(worst[name], relative_error(getattr(analytic, name), numeric[name]))
    return worst


def check_gradients(seed: int) -> Check:
    t0 = time.perf_counter()
    errs = gradcheck(seed=seed)
    return _check("gradients", max(errs.values()), 1e-4, t0)


def run_suite(seed: int = 42, precision="f64", inject_fault: bool = False) -> list[Check]:
    """The full invariant matrix.  ``inject_fault`` perturbs the fused kernel's output."""
    dt = resolve_precision(precision).type
    rng = Rng(seed)
    na_fn: NAFn = na_forward
    if inject_fault:
        def na_fn(*args):
            out = na_forward(*args)
            out.flat[0] += 1e-3
            return out

    return [
        check_sa_equivalence(rng, dt, na_fn),
        check_oracle_equivalence(rng, dt, na_fn),
        check_neighbor_sets(),
        check_corner_semantics(),
        check_row_stochastic(rng, dt),
        check_translation_equivariance(rng, dt, na_fn),
        check_locality(rng, dt),
        check_cost_parity(rng),
        check_crossover(),
        check_memory_accounting(rng, dt),
        check_gradients(seed),
    ]
