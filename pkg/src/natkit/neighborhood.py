"""Neighborhood geometry: which key/value pixels each query attends to.

Each query gets a contiguous window of ``L`` pixels per axis.  Interior
queries sit in the middle of their window; near a border the window is
shifted (not shrunk) so that it stays inside the map, which keeps every
query's receptive field at ``L x L``.  When ``L`` exceeds the axis the window
is the whole axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class NeighborhoodSpec:
    kernel: int

    def __post_init__(self):
        check_kernel(self.kernel)

    @property
    def half(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def table_size(self) -> int:
        """Side of the relative-position bias table, ``2L - 1``."""
        return 2 * self.kernel - 1

    def window_len(self, n: int) -> int:
        return min(self.kernel, n)


class WindowGeometry(NamedTuple):
    start: int
    len: int


def check_kernel(L) -> None:
    if not isinstance(L, (int, np.integer)) or isinstance(L, bool):
        raise ConfigurationError(f"kernel size must be an integer, got {L!r}")
    if L < 3 or L % 2 == 0:
        raise ConfigurationError(f"kernel size must be an odd integer >= 3, got {L}")


def window_start(i: int, n: int, L: int) -> WindowGeometry:
    check_kernel(L)
    if n < 1:
        raise ConfigurationError(f"axis extent must be >= 1, got {n}")
    if not 0 <= i < n:
        raise IndexError(f"query index {i} outside axis of extent {n}")
    if L >= n:
        return WindowGeometry(0, n)
    start = min(max(i - (L - 1) // 2, 0), n - L)
    return WindowGeometry(start, L)


def window_starts(n: int, L: int) -> np.ndarray:
    """Vectorized ``window_start(i, n, L).start`` for every ``i`` in ``[0, n)``."""
    check_kernel(L)
    if L >= n:
        return np.zeros(n, dtype=np.intp)
    return np.clip(np.arange(n) - (L - 1) // 2, 0, n - L).astype(np.intp)


def bias_starts(n: int, L: int) -> np.ndarray:
    """Bias-table coordinate of each query's first window entry along one axis.

    Entry ``t`` of query ``i``'s window maps to table row ``bias_starts[i] + t``.
    """
    return window_starts(n, L) - np.arange(n) + (L - 1)


def neighborhood_indices(i: int, j: int, H: int, W: int, L: int) -> list[tuple[int, int]]:
    """Key/value pixels attended by query ``(i, j)``, row-major."""
    rows = window_start(i, H, L)
    cols = window_start(j, W, L)
    return [
        (pi, pj)
        for pi in range(rows.start, rows.start + rows.len)
        for pj in range(cols.start, cols.start + cols.len)
    ]


def rel_bias_index(i: int, p: int, L: int, n: int | None = None) -> int:
    """Relative-position table index ``(p - i) + (L - 1)`` along one axis.

    With ``n`` given, ``p`` must lie in the window of ``i`` on an axis of
    extent ``n``; otherwise it only has to be a reachable offset.
    """
    check_kernel(L)
    if n is not None:
        g = window_start(i, n, L)
        if not g.start <= p < g.start + g.len:
            raise IndexError(f"position {p} is outside the window of query {i} (axis {n}, L={L})")
    elif abs(p - i) > L - 1:
        raise IndexError(f"offset {p - i} exceeds the reachable range for L={L}")
    return (p - i) + (L - 1)
