"""Loss functionals: PDE residuals for the three equations, data and anchor
losses, and batch-level operator losses.

All losses are differentiable through a tape when the prediction Field
carries a Var.  Spatial derivatives of periodic axes are spectral; time
derivatives use second-order finite differences (one-sided at the
endpoints); the Darcy flux uses central differences with face coefficients
averaged arithmetically (the coefficient is discontinuous, so spectral
differentiation would ring).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from . import fno
from .autodiff import Tape, Var
from .grids import Field, Grid, derivative_multiplier, resample


@dataclass(frozen=True)
class Burgers:
    """1-d viscous Burgers on the periodic unit interval, t in [0, 1]."""

    nu: float
    u0: Field

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be > 0")
        if self.u0.grid.dims != 1 or not self.u0.grid.periodic[0]:
            raise ValueError("u0 must be a periodic 1-d field")

    @property
    def horizon(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Darcy:
    """2-d steady Darcy flow on the unit box, zero Dirichlet boundary."""

    a: Field
    f: float = 1.0

    def __post_init__(self):
        if self.a.grid.dims != 2:
            raise ValueError("coefficient must be 2-d")
        if np.min(self.a.values) <= 0:
            raise ValueError("coefficient must be strictly positive")


@dataclass(frozen=True)
class NavierStokes:
    """2-d incompressible Navier-Stokes in vorticity form on the unit torus."""

    nu: float
    w0: Field
    forcing: Field
    horizon: float

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be > 0")
        if self.w0.grid.dims != 2 or not all(self.w0.grid.periodic):
            raise ValueError("w0 must be a periodic 2-d field")
        scale = max(1.0, float(np.max(np.abs(self.w0.values))))
        if abs(float(np.mean(self.w0.values))) > 1e-8 * scale:
            raise ValueError("initial vorticity must have zero mean on the torus")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")


PdeInstance = Union[Burgers, Darcy, NavierStokes]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # boundary weight
    beta: float = 1.0  # initial-condition weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("weights must be >= 0")


NS_DEFAULT_WEIGHTS = LossWeights(alpha=5.0, beta=5.0)


@dataclass
class LossReport:
    interior: float
    boundary: float
    initial: float
    total: float
    var: Var | None = None


def _as_var(u: Field) -> Var:
    return u.var if u.var is not None else Var(u.values)


@lru_cache(maxsize=None)
def _fd_time_matrix(n: int, dt: float) -> np.ndarray:
    """Second-order finite differences in time: central interior, one-sided ends."""
    d = np.zeros((n, n))
    d[0, 0], d[0, 1], d[0, 2] = -1.5, 2.0, -0.5
    d[-1, -1], d[-1, -2], d[-1, -3] = 1.5, -2.0, 0.5
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5, 0.5
    return d / dt


def _spectral_mult(grid: Grid, axis: int, order: int) -> np.ndarray:
    """Full-spectrum derivative multiplier shaped for (channel, *spatial)."""
    return derivative_multiplier(grid, axis, order, reduced=False)


def burgers_pde_loss(
    u: Field, inst: Burgers, weights: LossWeights, tape: Tape
) -> LossReport:
    """Residual of u_t + (u^2/2)_x = nu u_xx plus the initial-condition term."""
    grid = u.grid
    if grid.dims != 2 or u.channels != 1:
        raise ValueError("expected a single-channel (x, t) field")
    if grid.resolution[0] != inst.u0.grid.resolution[0]:
        raise ValueError("spatial resolution does not match the instance")
    if not grid.periodic[0] or grid.periodic[1]:
        raise ValueError("expected periodic x axis and non-periodic t axis")
    uv = _as_var(u)
    nt = grid.resolution[1]
    dt = grid.spacing[1]
    u_t = tape.matrix_apply(uv, _fd_time_matrix(nt, dt), axis=2)
    flux = tape.scale(tape.square(uv), 0.5)
    flux_x = tape.spectral_filter(flux, _spectral_mult(grid, 0, 1), axes=(1,))
    u_xx = tape.spectral_filter(uv, _spectral_mult(grid, 0, 2), axes=(1,))
    residual = tape.sub(tape.add(u_t, flux_x), tape.scale(u_xx, inst.nu))
    interior = tape.mean(tape.square(residual))
    ic = tape.sub(tape.take_index(uv, 2, 0), inst.u0.values)
    initial = tape.mean(tape.square(ic))
    total = tape.add(interior, tape.scale(initial, weights.beta))
    return LossReport(
        interior=float(interior.values),
        boundary=0.0,
        initial=float(initial.values),
        total=float(total.values),
        var=total,
    )


@lru_cache(maxsize=None)
def _mollifier_cached(resolution, length, periodic) -> np.ndarray:
    grid = Grid(resolution, length, periodic)
    coords = grid.coordinate_fields()
    m = np.sin(np.pi * coords[0] / grid.length[0]) * np.sin(
        np.pi * coords[1] / grid.length[1]
    )
    for ax in range(2):
        if not grid.periodic[ax]:
            sl = [slice(None)] * 2
            sl[ax] = 0
            m[tuple(sl)] = 0.0
            sl[ax] = -1
            m[tuple(sl)] = 0.0
    return m[None]


def mollifier(grid: Grid) -> np.ndarray:
    """sin(pi x) sin(pi y) with exact zeros on the boundary nodes."""
    return _mollifier_cached(grid.resolution, grid.length, grid.periodic)


def darcy_interior_residual(u_var: Var, a, grid: Grid, forcing_values, tape: Tape):
    """-div(a grad u) - f at interior nodes, arithmetic face averaging.

    ``a`` may be a Var (inverse problems differentiate through it) or an
    ndarray.  Shapes: (1, n, n) over the unit box.
    """
    hx, hy = grid.spacing

    def face_avg(arr, axis):
        if isinstance(arr, Var):
            lo = tape.slice_axis(arr, axis, 0, -1)
            hi = tape.slice_axis(arr, axis, 1, None)
            return tape.scale(tape.add(lo, hi), 0.5)
        sl_lo = [slice(None)] * arr.ndim
        sl_hi = [slice(None)] * arr.ndim
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        return 0.5 * (arr[tuple(sl_lo)] + arr[tuple(sl_hi)])

    def diff(var, axis, h):
        hi = tape.slice_axis(var, axis, 1, None)
        lo = tape.slice_axis(var, axis, 0, -1)
        return tape.scale(tape.sub(hi, lo), 1.0 / h)

    # fluxes at x-faces: shape (1, n-1, n); divergence needs interior columns
    flux_x = tape.mul(face_avg(a, 1), diff(u_var, 1, hx))
    flux_y = tape.mul(face_avg(a, 2), diff(u_var, 2, hy))
    div_x = diff(flux_x, 1, hx)  # (1, n-2, n)
    div_y = diff(flux_y, 2, hy)  # (1, n, n-2)
    div = tape.add(
        tape.slice_axis(div_x, 2, 1, -1),
        tape.slice_axis(div_y, 1, 1, -1),
    )
    f_interior = forcing_values[:, 1:-1, 1:-1]
    return tape.sub(tape.neg(div), f_interior)


def darcy_pde_loss(
    u_raw: Field,
    inst: Darcy,
    tape: Tape,
    forcing: Field | None = None,
    mollify: bool = True,
) -> LossReport:
    """Residual of -div(a grad u) = f with the mollified prediction.

    The mollifier zeroes the boundary exactly, so the boundary term is
    omitted.  ``forcing`` overrides the constant instance forcing (test
    hook); ``mollify=False`` accepts fields that already satisfy the
    boundary condition (e.g. observed solutions in inverse problems).
    """
    grid = u_raw.grid
    if grid.dims != 2 or u_raw.channels != 1:
        raise ValueError("expected a single-channel 2-d field")
    if grid.resolution != inst.a.grid.resolution:
        raise ValueError("prediction grid does not match the coefficient grid")
    uv = _as_var(u_raw)
    if mollify:
        uv = tape.mul(uv, mollifier(grid))
    a = inst.a.var if inst.a.var is not None else inst.a.values
    if forcing is not None:
        f_values = forcing.values
    else:
        f_values = np.full((1,) + grid.resolution, float(inst.f))
    residual = darcy_interior_residual(uv, a, grid, f_values, tape)
    interior = tape.mean(tape.square(residual))
    return LossReport(
        interior=float(interior.values),
        boundary=0.0,
        initial=0.0,
        total=float(interior.values),
        var=interior,
    )


@lru_cache(maxsize=None)
def _ns_multipliers_cached(resolution, length, periodic):
    grid = Grid(resolution, length, periodic)
    kx = _spectral_mult(grid, 0, 1)
    ky = _spectral_mult(grid, 1, 1)
    lap = _spectral_mult(grid, 0, 2) + _spectral_mult(grid, 1, 2)
    ksq = -lap
    inv_ksq = np.where(np.abs(ksq) > 0, 1.0 / np.where(np.abs(ksq) > 0, ksq, 1.0), 0.0)
    return kx, ky, lap, inv_ksq


def _ns_multipliers(grid: Grid):
    """Spectral multipliers on the (x, y) axes of an (x, y, t) field."""
    return _ns_multipliers_cached(grid.resolution, grid.length, grid.periodic)


def ns_pde_loss(
    w: Field, inst: NavierStokes, weights: LossWeights, tape: Tape,
    require_mean_zero: bool = True,
) -> LossReport:
    """Vorticity-form residual with spectral velocity recovery per time slice.

    The streamfunction solve guarantees a divergence-free velocity.  A
    nonzero spatial mean makes the inversion ill-posed, so by default it is
    a contract violation; model predictions are evaluated with
    ``require_mean_zero=False``, where the mean mode simply carries no
    velocity and mean drift is still penalized through the time derivative.
    """
    grid = w.grid
    if grid.dims != 3 or w.channels != 1:
        raise ValueError("expected a single-channel (x, y, t) field")
    if not (grid.periodic[0] and grid.periodic[1]) or grid.periodic[2]:
        raise ValueError("expected periodic x, y axes and non-periodic t axis")
    if require_mean_zero:
        slice_means = w.values.mean(axis=(0, 1, 2))
        scale = max(1.0, float(np.max(np.abs(w.values))))
        if np.max(np.abs(slice_means)) > 1e-8 * scale:
            raise ValueError("vorticity must be mean-zero on every time slice")
    wv = _as_var(w)
    kx, ky, lap, inv_ksq = _ns_multipliers(grid)
    axes = (1, 2)
    # psi_hat = w_hat / |2 pi k|^2;  u = (d_y psi, -d_x psi)
    ux, uy, wx, wy, lap_w = tape.spectral_filter_bank(
        wv, (ky * inv_ksq, -kx * inv_ksq, kx, ky, lap), axes
    )
    nt = grid.resolution[2]
    dt = grid.spacing[2]
    w_t = tape.matrix_apply(wv, _fd_time_matrix(nt, dt), axis=3)
    advection = tape.add(tape.mul(ux, wx), tape.mul(uy, wy))
    residual = tape.sub(
        tape.add(w_t, advection),
        tape.add(tape.scale(lap_w, inst.nu), inst.forcing.values[..., None]),
    )
    interior = tape.mean(tape.square(residual))
    ic = tape.sub(tape.take_index(wv, 3, 0), inst.w0.values)
    initial = tape.mean(tape.square(ic))
    total = tape.add(interior, tape.scale(initial, weights.beta))
    return LossReport(
        interior=float(interior.values),
        boundary=0.0,
        initial=float(initial.values),
        total=float(total.values),
        var=total,
    )


def velocity_from_vorticity(w: Field) -> tuple[Field, Field]:
    """Divergence-free velocity of an (x, y, t) vorticity field."""
    tape = Tape()
    kx, ky, lap, inv_ksq = _ns_multipliers(w.grid)
    wv = Var(w.values)
    ux = tape.spectral_filter(wv, ky * inv_ksq, (1, 2))
    uy = tape.spectral_filter(wv, -kx * inv_ksq, (1, 2))
    return Field(w.grid, ux.values), Field(w.grid, uy.values)


def data_loss(u: Field, target: Field, tape: Tape) -> Var:
    """Squared discrete L2(D) distance: cell volume times summed squares."""
    if u.values.shape != target.values.shape:
        raise ValueError("field shapes do not match")
    diff = tape.sub(_as_var(u), target.values)
    return tape.scale(tape.total(tape.square(diff)), u.grid.cell_volume)


def anchor_loss(current: Field, frozen: Field, tape: Tape) -> Var:
    """data_loss against a frozen operand (excluded from differentiation)."""
    if current.values.shape != frozen.values.shape:
        raise ValueError("field shapes do not match")
    diff = tape.sub(_as_var(current), frozen.values.copy())
    return tape.scale(tape.total(tape.square(diff)), current.grid.cell_volume)


# -- problem adapters ---------------------------------------------------------


def burgers_input(inst: Burgers, nt: int, resolution: int | None = None) -> Field:
    """Initial condition replicated along time on an (x, t) grid."""
    u0 = inst.u0
    if resolution is not None and resolution != u0.grid.resolution[0]:
        u0 = resample(u0, (resolution,))
    n = u0.grid.resolution[0]
    grid = Grid((n, nt), (1.0, inst.horizon), (True, False))
    values = np.repeat(u0.values[:, :, None], nt, axis=2)
    return Field(grid, values)


def darcy_input(inst: Darcy) -> Field:
    return inst.a


def ns_input(inst: NavierStokes, nt: int) -> Field:
    n0, n1 = inst.w0.grid.resolution
    grid = Grid((n0, n1, nt), (1.0, 1.0, inst.horizon), (True, True, False))
    values = np.repeat(inst.w0.values[..., None], nt, axis=3)
    return Field(grid, values)


def model_input(inst: PdeInstance, nt: int | None = None) -> Field:
    if isinstance(inst, Burgers):
        return burgers_input(inst, nt)
    if isinstance(inst, Darcy):
        return darcy_input(inst)
    return ns_input(inst, nt)


def predict(params, inst: PdeInstance, tape: Tape, nt: int | None = None) -> Field:
    """Model prediction for a problem instance (mollified for Darcy).

    Output normalization constants in ``params.meta`` (``out_scale``,
    ``out_shift``) are undone here so predictions are in physical units.
    """
    out = fno.forward(params, model_input(inst, nt), tape)
    u = out.var
    scale = params.meta.get("out_scale") if hasattr(params, "meta") else None
    if scale:
        u = tape.scale(u, float(scale))
    shift = params.meta.get("out_shift") if hasattr(params, "meta") else None
    if shift:
        u = tape.add(u, float(shift))
    if isinstance(inst, Darcy):
        u = tape.mul(u, mollifier(out.grid))
    return Field(out.grid, u.values, var=u)


def pde_loss(
    u: Field, inst: PdeInstance, weights: LossWeights, tape: Tape,
    premollified: bool = False,
) -> LossReport:
    """Dispatch to the instance's residual loss.  ``premollified`` marks
    model predictions: Darcy outputs are already mollified and NS outputs
    are not required to be mean-zero."""
    if isinstance(inst, Burgers):
        return burgers_pde_loss(u, inst, weights, tape)
    if isinstance(inst, Darcy):
        return darcy_pde_loss(u, inst, tape, mollify=not premollified)
    return ns_pde_loss(u, inst, weights, tape, require_mean_zero=not premollified)


def operator_losses(
    model,
    batch: list[tuple[PdeInstance, Field | None]],
    mode: str = "both",
    weights: LossWeights | None = None,
    nt: int | None = None,
) -> tuple[float | None, float | None]:
    """Batch-averaged data and PDE losses (J_data, J_pde).

    ``model`` is either trained operator parameters or any callable
    ``(instance, tape, nt) -> Field`` (a test hook for evaluating the losses
    on externally supplied predictions).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    if mode not in ("data", "pde", "both"):
        raise ValueError(f"unknown mode {mode!r}")
    weights = weights or LossWeights()
    predictor = model if callable(model) else (
        lambda inst, tape, inst_nt: predict(model, inst, tape, nt=inst_nt)
    )
    j_data = 0.0
    j_pde = 0.0
    for inst, target in batch:
        tape = Tape()
        inst_nt = nt
        if inst_nt is None and target is not None and not isinstance(inst, Darcy):
            inst_nt = target.grid.resolution[-1]
        pred = predictor(inst, tape, inst_nt)
        if mode in ("data", "both"):
            if target is None:
                raise ValueError("data loss requested but batch has no targets")
            j_data += float(data_loss(pred, target, tape).values)
        if mode in ("pde", "both"):
            j_pde += pde_loss(pred, inst, weights, tape, premollified=True).total
    n = len(batch)
    return (
        j_data / n if mode in ("data", "both") else None,
        j_pde / n if mode in ("pde", "both") else None,
    )
