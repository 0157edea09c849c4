"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order with
dtype ``float32`` ("single") or ``float64`` ("double").  Every function here
is pure: inputs are never modified and results depend only on the inputs
and their precision.

Multi-threading is opt-in through :func:`num_threads`.  Work is split into
fixed-size row blocks whose boundaries never depend on the worker count, and
BLAS itself is pinned to one thread inside that context, so each output
element is reduced in the same order no matter how many workers run.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf
from threadpoolctl import threadpool_limits

from .errors import DimensionError, FormatError, NumericError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

# rows per independent matmul block; fixed so results do not depend on workers
ROW_BLOCK = 256

_threads: contextvars.ContextVar[int] = contextvars.ContextVar("natkit_threads", default=1)


def resolve_precision(precision) -> np.dtype:
    """Map ``"f32"``/``"f64"``/``"single"``/``"double"`` or a numpy dtype to a dtype."""
    aliases = {"single": "f32", "double": "f64", "float32": "f32", "float64": "f64"}
    if isinstance(precision, str):
        key = aliases.get(precision, precision)
        if key not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64")
        return np.dtype(PRECISIONS[key])
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}; expected float32 or float64")
    return dt


def as_tensor(x, precision=None) -> np.ndarray:
    """Return ``x`` as a contiguous float tensor, checking the shape invariants."""
    arr = np.asarray(x)
    if precision is None:
        precision = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    if arr.ndim < 1:
        raise DimensionError("tensors must have rank >= 1")
    arr = np.ascontiguousarray(arr, dtype=resolve_precision(precision))
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


@contextlib.contextmanager
def num_threads(n: int | None) -> Iterator[int]:
    """Run enclosed tensor ops with ``n`` workers (``None`` = all CPUs)."""
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValueError("thread count must be >= 1")
    token = _threads.set(n)
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield n
    finally:
        _threads.reset(token)


def get_num_threads() -> int:
    return _threads.get()


def _map_blocks(fn, count: int) -> list:
    workers = min(get_num_threads(), count)
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes of ``a`` and ``b``.

    A 2-D ``b`` is shared across all leading axes of ``a``; otherwise the
    leading axes must match exactly.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul precision mismatch: {a.dtype} vs {b.dtype}")
    if b.ndim > 2:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
        return np.matmul(a, b)

    lead = a.shape[:-1]
    rows = a.reshape(-1, a.shape[-1])
    n_blocks = -(-rows.shape[0] // ROW_BLOCK)
    if n_blocks <= 1:
        return (rows @ b).reshape(*lead, b.shape[1])
    out = np.empty((rows.shape[0], b.shape[1]), dtype=a.dtype)

    def run(i):
        sl = slice(i * ROW_BLOCK, (i + 1) * ROW_BLOCK)
        np.matmul(rows[sl], b, out=out[sl])

    _map_blocks(run, n_blocks)
    return out.reshape(*lead, b.shape[1])


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map over the last axis; ``weight`` is laid out ``in x out``."""
    y = matmul(x[None], weight)[0] if x.ndim == 1 else matmul(x, weight)
    if bias is not None:
        y += bias
    return y


def softmax_last(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {x.shape[-1]}"
        )
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # eps=0 on a constant slice: 0/0, define the normalized value as 0
    with np.errstate(invalid="ignore", divide="ignore"):
        normed = np.where(denom > 0, centered / np.where(denom > 0, denom, 1), 0)
    return (normed * gamma + beta).astype(x.dtype, copy=False)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the Gaussian CDF."""
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation of an ``H x W x Cin`` map with a ``k x k x Cin x Cout`` kernel.

    Zero padding; no kernel flip.  Taps are accumulated in (ki, kj) order,
    each tap being a ``Cin`` contraction.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects HxWxCin input and kxkxCinxCout kernel, got {x.shape}, {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square with odd size, got {w.shape}")
    if w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    H, W, _ = x.shape
    ho, wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}, k={k}, stride={stride}, pad={pad}")

    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.zeros((ho, wo, w.shape[3]), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride, :]
            out += matmul(np.ascontiguousarray(patch), w[ki, kj])
    if b is not None:
        out += b
    return out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects HxWxC, got {x.shape}")
    return x.reshape(-1, x.shape[-1]).mean(axis=0)


class Rng:
    """Seeded generator: PCG64 uniforms, standard normals by Box-Muller.

    The same seed yields the same stream on every platform and thread count.
    """

    def __init__(self, seed: int = 42):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, shape: Sequence[int] | int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape: Sequence[int] | int, std: float = 1.0, precision="f64") -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (std * z[:n]).reshape(shape).astype(resolve_precision(precision))

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0, precision="f64") -> np.ndarray:
        """Normal samples redrawn until they fall inside ``[-bound*std, bound*std]``."""
        z = self.normal(shape, precision="f64")
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.normal(int(bad.sum()), precision="f64")
            bad = np.abs(z) > bound
        return (std * z).astype(resolve_precision(precision))


# NTSR: magic, u32 version, u8 dtype code, u8 rank, rank x u32 extents, raw LE data
NTSR_MAGIC = b"NTSR"
NTSR_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dtype_code(dt: np.dtype) -> int:
    for code, d in DTYPE_CODES.items():
        if np.dtype(dt) == d.newbyteorder("="):
            return code
    raise FormatError(f"dtype {dt} has no NTSR code")


def encode_tensor_body(arr: np.ndarray) -> bytes:
    """dtype, rank, extents, and data: the part shared by NTSR and NATW records."""
    code = dtype_code(arr.dtype)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor_body(buf: bytes, offset: int, where: str) -> tuple[np.ndarray, int]:
    try:
        code, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        shape = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
    except struct.error as exc:
        raise FormatError(f"{where}: truncated tensor header") from exc
    if code not in DTYPE_CODES:
        raise FormatError(f"{where}: unknown dtype code {code}")
    if rank < 1 or any(n < 1 for n in shape):
        raise FormatError(f"{where}: invalid shape {shape}")
    dt = DTYPE_CODES[code]
    nbytes = int(np.prod(shape)) * dt.itemsize
    if offset + nbytes > len(buf):
        raise FormatError(f"{where}: truncated tensor data")
    arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=offset)
    return arr.reshape(shape).astype(dt.newbyteorder("="), copy=True), offset + nbytes


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = as_tensor(arr)
    Path(path).write_bytes(NTSR_MAGIC + struct.pack("<I", NTSR_VERSION) + encode_tensor_body(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != NTSR_MAGIC:
        raise FormatError(f"{path}: not an NTSR tensor file (bad magic {buf[:4]!r})")
    if len(buf) < 8 or struct.unpack_from("<I", buf, 4)[0] != NTSR_VERSION:
        raise FormatError(f"{path}: unsupported NTSR version")
    arr, end = decode_tensor_body(buf, 8, f"{path} (NTSR)")
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after NTSR tensor")
    return arr
