"""Multiplicative bias-field simulation and the reference corrector.

Observation model: observed = field * truth + noise, per channel.  Fields
are synthesized as exponentials of band-limited random fields in the
sequency domain; the reference corrector inverts the same family by
iterated log-domain low-pass estimation and produces the regression
targets for the learned first stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .volume_io import CHANNELS, BiomarkerVolume, MaskVolume, clamp_physical
from .wht import fwht2_batch, sequency_reorder

# Hard ceiling on the in-plane voxel-to-voxel step of any synthesized
# field; fields violating it are exponent-damped until they comply.
_MAX_STEP = 0.1


@dataclass
class BiasSpec:
    """Field synthesis parameters: log-field std, band limit, seed."""

    amplitude: float
    max_sequency: int
    seed: int

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be nonnegative, got {self.amplitude}")
        if self.max_sequency < 1:
            raise ValueError(f"max_sequency must be >= 1, got {self.max_sequency}")


@dataclass
class NoiseSpec:
    """Additive Gaussian noise in biomarker units."""

    sigma: float
    seed: int

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass
class BiasField:
    """Strictly positive (Z, H, W) multiplicative field."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"bias field must be (Z, H, W), got {self.values.shape}")
        if self.values.min() <= 0:
            raise ValueError("bias field must be strictly positive")


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _pad_reflect_pow2(slices: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Reflect-pad the trailing two axes up to the next power of two."""
    h, w = slices.shape[-2:]
    ph, pw = _next_pow2(h) - h, _next_pow2(w) - w
    if ph == 0 and pw == 0:
        return slices, (h, w)
    pad = [(0, 0)] * (slices.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(slices, pad, mode="reflect"), (h, w)


def _lowpass_sequency(slices: np.ndarray, k: int, keep_dc: bool = True) -> np.ndarray:
    """K x K sequency low-pass of each (..., H, W) slice, pow-2 dims."""
    coeffs = sequency_reorder(fwht2_batch(slices), "to_sequency")
    out = np.zeros_like(coeffs)
    out[..., :k, :k] = coeffs[..., :k, :k]
    if not keep_dc:
        out[..., 0, 0] = 0.0
    return fwht2_batch(sequency_reorder(out, "to_natural"))


def _max_inplane_step(volume: np.ndarray) -> float:
    dy = np.abs(np.diff(volume, axis=1))
    dx = np.abs(np.diff(volume, axis=2))
    return float(max(dy.max(initial=0.0), dx.max(initial=0.0)))


def synth_bias_field(spec: BiasSpec, dims: tuple) -> BiasField:
    """Smooth multiplicative field exp(G), G band-limited in sequency.

    Per control slice, G is an inverse transform of random zero-DC
    coefficients confined to the lowest max_sequency x max_sequency block
    (sequency-tapered so most energy sits in the gentlest components),
    linearly interpolated across slices, scaled to std = amplitude, and
    mean-log renormalized to zero.  The result is then exponent-damped
    until no in-plane step exceeds the hard smoothness ceiling.
    """
    z, h, w = (int(d) for d in dims)
    if z < 1 or h < 1 or w < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    if spec.amplitude == 0.0:
        return BiasField(np.ones((z, h, w), dtype=np.float32))

    hp, wp = _next_pow2(h), _next_pow2(w)
    k = min(spec.max_sequency, hp, wp)
    gen = RngStream(spec.seed).derive("bias-field").draw()

    n_ctrl = max(2, int(np.ceil(z / 8)) + 1)
    taper_row = 1.0 / (1.0 + np.arange(k)) ** 1.5
    taper = np.outer(taper_row, taper_row)
    controls = np.zeros((n_ctrl, hp, wp))
    for i in range(n_ctrl):
        coeffs = np.zeros((hp, wp))
        coeffs[:k, :k] = gen.standard_normal((k, k)) * taper
        coeffs[0, 0] = 0.0
        controls[i] = fwht2_batch(sequency_reorder(coeffs, "to_natural"))

    positions = np.linspace(0.0, z - 1.0, n_ctrl)
    g = np.empty((z, hp, wp))
    for zi in range(z):
        j = int(np.searchsorted(positions, zi, side="right") - 1)
        j = min(j, n_ctrl - 2)
        t = (zi - positions[j]) / (positions[j + 1] - positions[j])
        g[zi] = (1.0 - t) * controls[j] + t * controls[j + 1]
    g = g[:, :h, :w]

    std = g.std()
    if std > 0:
        g *= spec.amplitude / std
    g -= g.mean()

    field = np.exp(g)
    for _ in range(200):
        if _max_inplane_step(field) <= _MAX_STEP:
            break
        g *= 0.9
        field = np.exp(g)
    return BiasField(field.astype(np.float32))


def apply_bias(
    volume: BiomarkerVolume,
    field: BiasField,
    noise: NoiseSpec,
    channels: tuple = CHANNELS,
) -> BiomarkerVolume:
    """observed = field * truth + noise on the selected channels.

    One shared spatial field multiplies every selected channel; Gaussian
    noise is then added to those channels and the result is clamped to
    each channel's physical range.
    """
    if field.values.shape != volume.dims:
        raise ValueError(
            f"field shape {field.values.shape} does not match volume dims {volume.dims}"
        )
    unknown = [c for c in channels if c not in CHANNELS]
    if unknown:
        raise ValueError(f"unknown channels {unknown}")
    out = volume.data.copy()
    idx = [CHANNELS.index(c) for c in channels]
    for i in idx:
        out[i] *= field.values
    if noise.sigma > 0.0:
        gen = RngStream(noise.seed).derive("observation-noise").draw()
        draws = gen.standard_normal((len(idx),) + volume.dims).astype(np.float32)
        for row, i in enumerate(idx):
            out[i] += noise.sigma * draws[row]
    clamp_physical(out)
    return BiomarkerVolume(out)


def reference_correct(
    x: np.ndarray,
    mask: MaskVolume,
    k: int = 4,
    iters: int = 5,
    floor: float = 1e-4,
) -> tuple[np.ndarray, BiasField]:
    """Estimate and divide out a smooth multiplicative field, log domain.

    Per iteration the residual log image is centered inside the mask,
    zeroed outside it, reflect-padded to power-of-two dims, and its K x K
    sequency low-pass is accumulated into the field estimate.  The final
    field has geometric mean 1 inside the mask.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (Z, H, W) slice stack, got {x.shape}")
    if x.shape != mask.values.shape:
        raise ValueError(f"mask shape {mask.values.shape} does not match {x.shape}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    inside = mask.values > 0
    if not inside.any():
        raise ValueError("empty mask")

    log_x = np.log(np.maximum(x, floor))
    acc = np.zeros_like(log_x)
    for _ in range(iters):
        residual = log_x - acc
        centered = np.where(inside, residual - residual[inside].mean(), 0.0)
        padded, (h, w) = _pad_reflect_pow2(centered)
        low = _lowpass_sequency(padded, k)[:, :h, :w]
        acc += low
    acc -= acc[inside].mean()
    field = BiasField(np.exp(acc))
    x_ref = (x / np.exp(acc)).astype(np.float32)
    return x_ref, field
