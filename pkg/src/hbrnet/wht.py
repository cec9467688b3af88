"""Fast Walsh-Hadamard transform kernels.

1-D and 2-D orthonormal transforms built from in-place radix-2 butterflies
(adds and subtracts only, one final scaling pass), plus the sequency
(sign-change count) reordering and the low-sequency block mask used for
smooth-field estimation.

The transform is its own inverse under orthonormal scaling, in both natural
and sequency ordering, so `ifwht_2d` is the same butterfly kernel applied to
the coefficient grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NATURAL = "natural"
SEQUENCY = "sequency"


def _check_pow2(n: int, what: str) -> int:
    """Return log2(n), rejecting lengths that are not a power of two."""
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"{what} must be a power of two, got {n}")
    return n.bit_length() - 1


@dataclass(frozen=True)
class WhtPlan:
    """Transform plan: length 2^m, orthonormal scaling, output ordering."""

    m: int
    ordering: str = NATURAL
    normalization: str = "orthonormal"

    def __post_init__(self):
        if self.m < 0:
            raise ValueError(f"plan order must be nonnegative, got {self.m}")
        if self.ordering not in (NATURAL, SEQUENCY):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.normalization != "orthonormal":
            raise ValueError("only orthonormal normalization is supported")

    @property
    def n(self) -> int:
        return 1 << self.m


@dataclass
class CoeffGrid:
    """2-D transform coefficients plus the ordering they are stored in."""

    values: np.ndarray
    ordering: str = NATURAL

    def __post_init__(self):
        if self.values.ndim < 2:
            raise ValueError("coefficient grid must be at least 2-D")
        _check_pow2(self.values.shape[-2], "grid height")
        _check_pow2(self.values.shape[-1], "grid width")


def _butterfly_lastaxis(a: np.ndarray, counter: list | None = None) -> np.ndarray:
    """In-place unnormalized transform along the last axis of `a`.

    Each stage performs n/2 vectorized adds and n/2 subtracts per transform;
    `counter`, when given, accumulates that elementwise add/sub count.
    """
    n = a.shape[-1]
    lead = a.shape[:-1]
    h = 1
    while h < n:
        b = a.reshape(*lead, n // (2 * h), 2, h)
        top = b[..., 0, :]
        bot = b[..., 1, :]
        s = top + bot
        d = top - bot
        b[..., 0, :] = s
        b[..., 1, :] = d
        if counter is not None:
            counter[0] += a.size  # n/2 adds + n/2 subs per transform in this stage
        h *= 2
    return a


def sequency_permutation(m: int) -> np.ndarray:
    """Map sequency position -> natural row index for a length-2^m transform.

    The natural-order row with bit-reversed Gray code of s has exactly s sign
    changes, so gathering through this permutation sorts rows by sequency.
    """
    n = 1 << m
    s = np.arange(n)
    gray = s ^ (s >> 1)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(m):
        rev |= ((gray >> b) & 1) << (m - 1 - b)
    return rev


def sequency_reorder(coeffs: np.ndarray, direction: str) -> np.ndarray:
    """Permute a coefficient vector or grid between natural and sequency order.

    Grids are permuted along both of their trailing axes. `direction` is
    "to_sequency" or "to_natural"; the two are mutual inverses.
    """
    if direction not in ("to_sequency", "to_natural"):
        raise ValueError(f"unknown direction {direction!r}")
    out = np.asarray(coeffs)
    axes = (-1,) if out.ndim == 1 else (-2, -1)
    for ax in axes:
        m = _check_pow2(out.shape[ax], "axis length")
        perm = sequency_permutation(m)
        if direction == "to_natural":
            perm = np.argsort(perm)
        out = np.take(out, perm, axis=ax)
    return out


def fwht_1d(x: np.ndarray, plan: WhtPlan) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform along the last axis.

    Accepts any leading batch shape. Output ordering follows the plan.
    """
    x = np.asarray(x)
    if x.shape[-1] != plan.n:
        raise ValueError(f"input length {x.shape[-1]} does not match plan n={plan.n}")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    a = x.astype(dtype, copy=True)
    _butterfly_lastaxis(a)
    a *= np.asarray(1.0 / np.sqrt(plan.n), dtype=dtype)
    if plan.ordering == SEQUENCY:
        a = np.take(a, sequency_permutation(plan.m), axis=-1)
    return a


def fwht_1d_counted(x: np.ndarray, plan: WhtPlan) -> tuple[np.ndarray, int]:
    """As `fwht_1d`, also returning the butterfly add/sub count performed."""
    x = np.asarray(x)
    if x.shape[-1] != plan.n:
        raise ValueError(f"input length {x.shape[-1]} does not match plan n={plan.n}")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    a = x.astype(dtype, copy=True)
    counter = [0]
    _butterfly_lastaxis(a, counter)
    a *= np.asarray(1.0 / np.sqrt(plan.n), dtype=dtype)
    if plan.ordering == SEQUENCY:
        a = np.take(a, sequency_permutation(plan.m), axis=-1)
    return a, counter[0]


_HADAMARD_CACHE: dict = {}


def _hadamard_matrix(m: int, dtype) -> np.ndarray:
    """Unnormalized natural-order matrix: H[i, j] = (-1)^popcount(i & j)."""
    key = (m, np.dtype(dtype).str)
    cached = _HADAMARD_CACHE.get(key)
    if cached is None:
        n = 1 << m
        ij = np.arange(n)[:, None] & np.arange(n)[None, :]
        parity = np.bitwise_count(ij.astype(np.uint64)) & 1
        cached = np.where(parity, -1.0, 1.0).astype(dtype)
        _HADAMARD_CACHE[key] = cached
    return cached


# Above this edge length the O(n log n) butterflies win over one BLAS
# multiply per axis; below it the matmul path is faster for batches.
_MATMUL_MAX_M = 10


def _wht2_raw(image: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D transform over the last two axes, natural ordering."""
    a = np.asarray(image)
    my = _check_pow2(a.shape[-2], "image height")
    mx = _check_pow2(a.shape[-1], "image width")
    dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float64
    scale = 1.0 / np.sqrt(float(1 << (my + mx)))
    if max(my, mx) <= _MATMUL_MAX_M:
        hy = _hadamard_matrix(my, dtype)
        hx = _hadamard_matrix(mx, dtype)
        out = np.matmul(np.matmul(hy, a.astype(dtype, copy=False)), hx)
        out *= np.asarray(scale, dtype=dtype)
        return out
    a = a.astype(dtype, copy=True)
    _butterfly_lastaxis(a)
    a = np.swapaxes(a, -1, -2)
    _butterfly_lastaxis(a)
    a = np.swapaxes(a, -1, -2)
    a *= np.asarray(scale, dtype=dtype)
    return a


def fwht2_batch(x: np.ndarray) -> np.ndarray:
    """Batched natural-order 2-D transform; involutive, used on hot paths."""
    return _wht2_raw(x)


def fwht_2d(image: np.ndarray, plan: WhtPlan) -> CoeffGrid:
    """Separable row-then-column 2-D transform returning a tagged grid."""
    coeffs = _wht2_raw(image)
    if plan.ordering == SEQUENCY:
        coeffs = sequency_reorder(coeffs, "to_sequency")
    return CoeffGrid(values=coeffs, ordering=plan.ordering)


def ifwht_2d(grid: CoeffGrid) -> np.ndarray:
    """Invert `fwht_2d`; exact up to floating-point round trip."""
    coeffs = grid.values
    if grid.ordering == SEQUENCY:
        coeffs = sequency_reorder(coeffs, "to_natural")
    return _wht2_raw(coeffs)


def lowpass_mask(grid: CoeffGrid, k: int) -> CoeffGrid:
    """Keep the lowest-sequency K-by-K coefficient block, zero the rest."""
    if grid.ordering != SEQUENCY:
        raise ValueError("lowpass_mask expects a sequency-ordered grid")
    h, w = grid.values.shape[-2:]
    if not (1 <= k <= min(h, w)):
        raise ValueError(f"K={k} out of range [1, {min(h, w)}]")
    out = np.zeros_like(grid.values)
    out[..., :k, :k] = grid.values[..., :k, :k]
    return CoeffGrid(values=out, ordering=SEQUENCY)
