"""Uniform tensor grids, sampled fields, and Fourier-spectral operations.

Conventions used throughout the package:

* Field values are real float64 arrays indexed ``(channel, axis0, ..., axis_{d-1})``.
* The DFT is unnormalized on the forward transform; the inverse divides by the
  total point count (numpy's default).  All spectral identities in this module
  and in :mod:`pinolab.autodiff` assume this normalization.
* Spectra of real fields are stored Hermitian-reduced on the last axis
  (``numpy.fft.rfftn`` layout).
* On periodic axes the grid spacing is ``length / resolution`` (node at the
  left edge, none at the right); on non-periodic axes it is
  ``length / (resolution - 1)`` (both endpoints sampled).
"""
from __future__ import annotations

from dataclasses import dataclass, field as _field
from functools import lru_cache
from typing import Any

import numpy as np


@lru_cache(maxsize=None)
def _coordinate_fields_cached(resolution, length, periodic) -> np.ndarray:
    grid = Grid(resolution, length, periodic)
    axes = [grid.axis_coordinates(i) for i in range(grid.dims)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=0)


class DomainError(ValueError):
    """An operation required periodicity that the grid does not provide."""


class MalformedSpectrumError(ValueError):
    """Spectrum coefficients violate Hermitian symmetry beyond tolerance."""


class OutOfDomainError(ValueError):
    """A query point lies outside the domain box."""


@dataclass(frozen=True)
class Grid:
    """A uniform (optionally periodic) tensor-product grid on a box."""

    resolution: tuple[int, ...]
    length: tuple[float, ...] | None = None
    periodic: tuple[bool, ...] | None = None

    def __post_init__(self):
        res = tuple(int(n) for n in self.resolution)
        object.__setattr__(self, "resolution", res)
        if any(n < 2 for n in res):
            raise ValueError(f"resolution must be >= 2 on every axis, got {res}")
        length = self.length
        if length is None:
            length = (1.0,) * len(res)
        length = tuple(float(x) for x in length)
        if len(length) != len(res):
            raise ValueError("length/resolution axis count mismatch")
        if any(x <= 0 for x in length):
            raise ValueError(f"length must be > 0 on every axis, got {length}")
        object.__setattr__(self, "length", length)
        periodic = self.periodic
        if periodic is None:
            periodic = (True,) * len(res)
        periodic = tuple(bool(p) for p in periodic)
        if len(periodic) != len(res):
            raise ValueError("periodic/resolution axis count mismatch")
        object.__setattr__(self, "periodic", periodic)

    @property
    def dims(self) -> int:
        return len(self.resolution)

    @property
    def spacing(self) -> tuple[float, ...]:
        """Per-axis grid spacing (periodic: L/N, non-periodic: L/(N-1))."""
        return tuple(
            l / n if p else l / (n - 1)
            for n, l, p in zip(self.resolution, self.length, self.periodic)
        )

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def num_points(self) -> int:
        return int(np.prod(self.resolution))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        """Node coordinates along one axis."""
        n = self.resolution[axis]
        h = self.spacing[axis]
        return np.arange(n) * h

    def coordinate_fields(self) -> np.ndarray:
        """Stacked coordinate arrays, shape (dims, *resolution)."""
        return _coordinate_fields_cached(self.resolution, self.length, self.periodic)

    def all_periodic(self) -> bool:
        return all(self.periodic)


@dataclass(frozen=True, eq=False)
class Field:
    """A function sampled on a grid, one or more real channels."""

    grid: Grid
    values: np.ndarray
    var: Any = _field(default=None, repr=False, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != self.grid.dims + 1:
            raise ValueError(
                f"values must be (channels, *spatial); got ndim {values.ndim} "
                f"for a {self.grid.dims}-d grid"
            )
        if values.shape[1:] != self.grid.resolution:
            raise ValueError(
                f"values shape {values.shape[1:]} != grid resolution {self.grid.resolution}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray, var: Any = None) -> "Field":
        return Field(self.grid, values, var=var)


@dataclass(frozen=True, eq=False)
class SpectrumField:
    """DFT coefficients of a real Field, Hermitian-reduced on the last axis."""

    grid: Grid
    coefficients: np.ndarray

    def __post_init__(self):
        coeff = np.asarray(self.coefficients, dtype=np.complex128)
        expected = self.grid.resolution[:-1] + (self.grid.resolution[-1] // 2 + 1,)
        if coeff.shape[1:] != expected:
            raise ValueError(
                f"coefficient shape {coeff.shape[1:]} != reduced layout {expected}"
            )
        object.__setattr__(self, "coefficients", coeff)

    @property
    def channels(self) -> int:
        return self.coefficients.shape[0]


def _spatial_axes(grid: Grid) -> tuple[int, ...]:
    return tuple(range(1, grid.dims + 1))


def _require_periodic(grid: Grid, axes=None):
    axes = range(grid.dims) if axes is None else axes
    for ax in axes:
        if not grid.periodic[ax]:
            raise DomainError(f"axis {ax} is not periodic")


def signed_modes(n: int) -> np.ndarray:
    """Integer wavenumbers in FFT order: 0..n/2-1, -n/2..-1."""
    return np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)


def fft_forward(f: Field) -> SpectrumField:
    """Forward DFT of a real field (unnormalized, Hermitian-reduced)."""
    _require_periodic(f.grid)
    coeff = np.fft.rfftn(f.values, axes=_spatial_axes(f.grid))
    return SpectrumField(f.grid, coeff)


def _negate_index_map(arr: np.ndarray, axes) -> np.ndarray:
    """arr evaluated at negated (mod N) indices along the given axes."""
    out = arr
    for ax in axes:
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def _check_hermitian(s: SpectrumField, tol: float = 1e-9):
    # Only the self-conjugate last-axis columns (k_d = 0, and N_d/2 for even
    # N_d) can violate symmetry inside the reduced layout.
    coeff = s.coefficients
    n_last = s.grid.resolution[-1]
    other_axes = tuple(range(1, s.grid.dims))  # spatial axes within a column
    scale = max(1.0, float(np.max(np.abs(coeff))) if coeff.size else 1.0)
    cols = [0] + ([n_last // 2] if n_last % 2 == 0 else [])
    for col in cols:
        block = coeff[..., col]
        mirrored = np.conj(_negate_index_map(block, other_axes))
        if np.max(np.abs(block - mirrored)) > tol * scale:
            raise MalformedSpectrumError(
                f"Hermitian symmetry violated in last-axis column {col}"
            )


def fft_inverse(s: SpectrumField) -> Field:
    """Inverse DFT back to a real field (divides by total point count)."""
    _require_periodic(s.grid)
    _check_hermitian(s)
    values = np.fft.irfftn(
        s.coefficients, s=s.grid.resolution, axes=_spatial_axes(s.grid)
    )
    return Field(s.grid, values)


def full_spectrum(s: SpectrumField) -> np.ndarray:
    """Expand the Hermitian-reduced layout to the full complex spectrum."""
    x = np.fft.irfftn(s.coefficients, s=s.grid.resolution, axes=_spatial_axes(s.grid))
    return np.fft.fftn(x, axes=_spatial_axes(s.grid))


def derivative_multiplier(
    grid: Grid, axis: int, order: int, reduced: bool
) -> np.ndarray:
    """(i 2 pi k / L)^order along one axis, broadcastable over the spectrum.

    The Nyquist mode is zeroed for odd orders (its derivative has no
    consistent sign on the grid).
    """
    n = grid.resolution[axis]
    length = grid.length[axis]
    last = axis == grid.dims - 1
    if reduced and last:
        k = np.arange(n // 2 + 1, dtype=np.float64)
    else:
        k = signed_modes(n).astype(np.float64)
    mult = (2j * np.pi * k / length) ** order
    if order % 2 == 1 and n % 2 == 0:
        nyq = n // 2 if (reduced and last) else n // 2
        mult[nyq] = 0.0
    # shape (1, 1, ..., n, ..., 1) for broadcasting against (channel, *spatial)
    shape = [1] * (grid.dims + 1)
    shape[axis + 1] = len(k)
    return mult.reshape(shape)


def spectral_derivative(f: Field, axis: int, order: int) -> Field:
    """Differentiate a band-limited periodic field along one axis."""
    if order < 1:
        raise ValueError("order must be a positive integer")
    _require_periodic(f.grid, [axis])
    axes = _spatial_axes(f.grid)
    coeff = np.fft.rfftn(f.values, axes=axes)
    coeff = coeff * derivative_multiplier(f.grid, axis, order, reduced=True)
    values = np.fft.irfftn(coeff, s=f.grid.resolution, axes=axes)
    return Field(f.grid, values)


def fourier_query(s: SpectrumField, point) -> np.ndarray:
    """Evaluate the trigonometric interpolant at an arbitrary point.

    Returns one value per channel.  At grid nodes this reproduces
    ``fft_inverse`` values.
    """
    point = np.asarray(point, dtype=np.float64)
    grid = s.grid
    if point.shape != (grid.dims,):
        raise ValueError(f"point must have {grid.dims} coordinates")
    for x, l in zip(point, grid.length):
        if x < 0.0 or x > l:
            raise OutOfDomainError(f"point {point} outside domain box")
    full = full_spectrum(s)
    phase = np.zeros(grid.resolution, dtype=np.complex128)
    for ax in range(grid.dims):
        k = signed_modes(grid.resolution[ax])
        shape = [1] * grid.dims
        shape[ax] = len(k)
        phase = phase + (2j * np.pi * k * point[ax] / grid.length[ax]).reshape(shape)
    weights = np.exp(phase) / grid.num_points
    return np.real(np.tensordot(full, weights, axes=(tuple(range(1, grid.dims + 1)),
                                                     tuple(range(grid.dims)))))


def _resample_axis(values: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    """Spectral resampling of one (periodic) axis via mode padding/truncation."""
    old_n = values.shape[axis]
    if new_n == old_n:
        return values
    coeff = np.fft.fft(values, axis=axis)
    shape = list(values.shape)
    shape[axis] = new_n
    out = np.zeros(shape, dtype=np.complex128)

    def sl(idx):
        s = [slice(None)] * len(shape)
        s[axis] = idx
        return tuple(s)

    m = min(old_n, new_n)
    half = m // 2
    keep_pos = half if m % 2 == 0 else half + 1
    out[sl(slice(0, keep_pos))] = coeff[sl(slice(0, keep_pos))]
    if half > (1 if m % 2 == 0 else 0):
        neg = half - 1 if m % 2 == 0 else half
        if neg > 0:
            out[sl(slice(-neg, None))] = coeff[sl(slice(-neg, None))]
    if m % 2 == 0:
        if new_n > old_n:
            # split the old Nyquist coefficient across +/- m/2
            c = coeff[sl(old_n // 2)]
            out[sl(old_n // 2)] = 0.5 * c
            out[sl(new_n - old_n // 2)] = 0.5 * c
        else:
            # fold the +/- m/2 modes of the finer grid onto the new Nyquist
            c = coeff[sl(new_n // 2)] + coeff[sl(old_n - new_n // 2)]
            out[sl(new_n // 2)] = c
    out *= new_n / old_n
    return np.fft.ifft(out, axis=axis).real


def resample(f: Field, new_resolution) -> Field:
    """Spectrally resample a field: zero-padding up, mode truncation down.

    Axes whose resolution is unchanged are untouched (and need not be
    periodic); all resampled axes must be periodic.
    """
    new_resolution = tuple(int(n) for n in new_resolution)
    if len(new_resolution) != f.grid.dims:
        raise ValueError("new_resolution must give one count per axis")
    if any(n < 2 for n in new_resolution):
        raise ValueError(f"new_resolution must be >= 2, got {new_resolution}")
    changed = [ax for ax in range(f.grid.dims) if new_resolution[ax] != f.grid.resolution[ax]]
    _require_periodic(f.grid, changed)
    values = f.values
    for ax in changed:
        values = _resample_axis(values, ax + 1, new_resolution[ax])
    grid = Grid(new_resolution, f.grid.length, f.grid.periodic)
    return Field(grid, values)
