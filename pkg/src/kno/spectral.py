"""Real-input FFTs on periodic power-of-two grids, mode truncation, and GRF sampling.

Conventions used throughout the package:

* forward transforms are unnormalized, inverse transforms carry the 1/N factor;
* the last transformed axis uses the half-spectrum layout (frequencies 0..s/2);
* a truncated 2-D spectrum keeps the corner blocks ``[0..f-1]`` and ``[s-f..s-1]``
  of the full axis against ``[0..f-1]`` of the half axis, stored contiguously
  as ``2f x f`` cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

ORACLE_MAX_SIZE = 256


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def check_grid_size(s: int) -> int:
    if not isinstance(s, (int, np.integer)) or s < 4 or not is_power_of_two(int(s)):
        raise ValueError(f"unsupported grid size: {s!r} (need a power of two >= 4)")
    return int(s)


def _resolve_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(ndim))
    elif isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(a % ndim for a in axes)
    if not 1 <= len(axes) <= 2:
        raise ValueError(f"expected one or two transformed axes, got {axes}")
    if len(axes) == 2 and axes[1] != axes[0] + 1:
        raise ValueError(f"transformed axes must be contiguous, got {axes}")
    return axes


@dataclass(frozen=True)
class ComplexSpectrum:
    """Fourier coefficients of a real field.

    ``s`` is the grid size the coefficients are scaled for; ``f`` is the
    retained mode count per axis (0 means the full half-spectrum layout).
    """

    coeffs: np.ndarray
    s: int
    f: int = 0
    axes: tuple[int, ...] = (0,)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def truncated(self) -> bool:
        return self.f > 0


def fft_forward(field: np.ndarray, axes=None) -> ComplexSpectrum:
    """Unnormalized real-to-complex transform over ``axes`` (default: all axes)."""
    field = np.asarray(field, dtype=np.float64)
    axes = _resolve_axes(field.ndim, axes)
    sizes = {field.shape[a] for a in axes}
    if len(sizes) != 1:
        raise ValueError(f"unsupported grid size: non-square grid {field.shape}")
    s = check_grid_size(sizes.pop())
    coeffs = sfft.rfftn(field, axes=axes)
    return ComplexSpectrum(coeffs, s, 0, axes)


def fft_inverse(spec: ComplexSpectrum, s: int | None = None) -> np.ndarray:
    """Inverse transform with 1/N normalization.

    Truncated spectra are zero-padded first, so ``s`` may exceed the size the
    spectrum was computed on (bandlimited interpolation).
    """
    s = spec.s if s is None else check_grid_size(s)
    if spec.f > s // 2:
        raise ValueError(f"modes exceed Nyquist: f={spec.f} > s/2={s // 2}")
    if spec.truncated or s != spec.s:
        spec = pad_modes(spec, s)
    shape = (s,) * spec.ndim
    return sfft.irfftn(spec.coeffs, s=shape, axes=spec.axes)


def _full_axis_index(length: int, f: int) -> np.ndarray:
    return np.r_[0:f, length - f : length]


def truncate_modes(spec: ComplexSpectrum, f: int) -> ComplexSpectrum:
    """Keep the lowest ``f`` frequencies per axis and drop everything else."""
    f = int(f)
    if f < 1:
        raise ValueError(f"retained-mode count must be >= 1, got {f}")
    if f > spec.s // 2:
        raise ValueError(f"modes exceed Nyquist: f={f} > s/2={spec.s // 2}")
    if spec.truncated and f > spec.f:
        raise ValueError(f"cannot truncate a spectrum with f={spec.f} to f={f}")
    c = spec.coeffs
    half = spec.axes[-1]
    out = np.take(c, np.arange(f), axis=half)
    if spec.ndim == 2:
        full = spec.axes[0]
        out = np.take(out, _full_axis_index(c.shape[full], f), axis=full)
    return ComplexSpectrum(out, spec.s, f, spec.axes)


def pad_modes(spec: ComplexSpectrum, s: int) -> ComplexSpectrum:
    """Zero-fill a truncated spectrum into the full layout of grid size ``s``.

    Coefficients are rescaled by ``(s / spec.s) ** d`` so that the result is
    the unnormalized transform of the bandlimited interpolant on the new grid.
    """
    s = check_grid_size(s)
    if not spec.truncated:
        if s == spec.s:
            return spec
        raise ValueError("pad_modes needs a truncated spectrum to change grid size")
    f = spec.f
    if f > s // 2:
        raise ValueError(f"target grid s={s} too small for f={f} retained modes")
    c = spec.coeffs
    shape = list(c.shape)
    half = spec.axes[-1]
    shape[half] = s // 2 + 1
    if spec.ndim == 2:
        shape[spec.axes[0]] = s
    out = np.zeros(shape, dtype=np.complex128)
    idx: list = [slice(None)] * c.ndim
    idx[half] = slice(0, f)
    if spec.ndim == 2:
        full = spec.axes[0]
        lo, hi = list(idx), list(idx)
        lo[full] = slice(0, f)
        hi[full] = slice(s - f, s)
        src_lo, src_hi = [slice(None)] * c.ndim, [slice(None)] * c.ndim
        src_lo[full] = slice(0, f)
        src_hi[full] = slice(f, 2 * f)
        out[tuple(lo)] = c[tuple(src_lo)]
        out[tuple(hi)] = c[tuple(src_hi)]
    else:
        out[tuple(idx)] = c
    if s != spec.s:
        out *= (s / spec.s) ** spec.ndim
    return ComplexSpectrum(out, s, 0, spec.axes)


def retained_mode_count(f: int, d: int) -> int:
    """Number of complex cells kept per channel by ``truncate_modes``."""
    return f if d == 1 else 2 * f * f


def _dft_matrix(s: int, nfreq: int) -> np.ndarray:
    k = np.arange(nfreq)[:, None]
    n = np.arange(s)[None, :]
    # reduce the phase index first so large k*n keep full precision
    return np.exp(-2j * np.pi * ((k * n) % s) / s)


def dft_oracle(field: np.ndarray, axes=None) -> ComplexSpectrum:
    """Direct-summation DFT with the same layout and scaling as ``fft_forward``."""
    field = np.asarray(field, dtype=np.float64)
    axes = _resolve_axes(field.ndim, axes)
    s = field.shape[axes[0]]
    if s > ORACLE_MAX_SIZE:
        raise ValueError(f"oracle size guard: s={s} > {ORACLE_MAX_SIZE}")
    s = check_grid_size(s)
    out = field.astype(np.complex128)
    for pos, ax in enumerate(axes):
        nfreq = s // 2 + 1 if pos == len(axes) - 1 else s
        w = _dft_matrix(s, nfreq)
        out = np.moveaxis(np.tensordot(w, np.moveaxis(out, ax, 0), axes=(1, 0)), 0, ax)
    return ComplexSpectrum(out, s, 0, axes)


@dataclass(frozen=True)
class GrfParams:
    """Gaussian random field N(0, sigma^2 (-Laplacian + tau^2 I)^(-alpha)) on the unit torus."""

    tau: float
    alpha: float
    sigma: float
    seed: int = 0

    def validate(self, d: int) -> None:
        if not self.tau > 0:
            raise ValueError(f"GRF tau must be > 0, got {self.tau}")
        if not self.alpha > d / 2:
            raise ValueError(f"GRF alpha must exceed d/2={d / 2}, got {self.alpha}")
        if not self.sigma >= 0:
            raise ValueError(f"GRF sigma must be >= 0, got {self.sigma}")

    def with_seed(self, seed: int) -> GrfParams:
        return GrfParams(self.tau, self.alpha, self.sigma, int(seed))


BURGERS_GRF = GrfParams(tau=5.0, alpha=2.0, sigma=25.0)
NS_GRF = GrfParams(tau=7.0, alpha=2.5, sigma=7.0**1.5)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def wavenumbers(s: int) -> np.ndarray:
    """Integer frequencies of a length-``s`` full FFT axis."""
    return np.fft.fftfreq(s, d=1.0 / s)


def grf_spectrum_scale(p: GrfParams, s: int, d: int) -> np.ndarray:
    """Per-mode standard deviation sigma * (4 pi^2 |k|^2 + tau^2)^(-alpha/2), k=0 zeroed."""
    k = np.meshgrid(*([wavenumbers(s)] * d), indexing="ij")
    k2 = sum(ki**2 for ki in k)
    scale = p.sigma * (4 * np.pi**2 * k2 + p.tau**2) ** (-p.alpha / 2)
    scale[(0,) * d] = 0.0
    return scale


def grf_point_variance(p: GrfParams, s: int, d: int) -> float:
    """Closed-form pointwise variance of ``grf_sample`` on an ``s``-point grid."""
    return float(np.sum(grf_spectrum_scale(p, s, d) ** 2))


def grf_sample(p: GrfParams, s: int, d: int = 1) -> np.ndarray:
    """Draw one zero-mean GRF realization of shape ``(s,) * d``.

    Modes are drawn on the full frequency grid in C order (real, imaginary
    interleaved), Hermitian-symmetrized, scaled by ``grf_spectrum_scale`` and
    inverse transformed. The pointwise variance equals ``grf_point_variance``
    independently of the grid size.
    """
    if d not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {d}")
    p.validate(d)
    s = check_grid_size(s)
    rng = make_rng(p.seed)
    draws = rng.standard_normal((s,) * d + (2,))
    xi = (draws[..., 0] + 1j * draws[..., 1]) / np.sqrt(2.0)
    reflect = (-np.arange(s)) % s
    xi_ref = xi[np.ix_(*([reflect] * d))]
    xi = (xi + np.conj(xi_ref)) / np.sqrt(2.0)
    coeffs = grf_spectrum_scale(p, s, d) * xi * float(s) ** d
    return np.ascontiguousarray(sfft.ifftn(coeffs).real)
