"""Ground-truth generation: Gaussian random fields, reference solvers for
the three equations, and dataset assembly.

Solvers:

* Burgers: pseudo-spectral in space, 4th-order explicit Runge-Kutta with an
  integrating factor for diffusion, 2/3-dealiased quadratic term.
* Darcy: 5-point finite volumes with harmonic-mean face coefficients, zero
  Dirichlet boundary, Jacobi-preconditioned conjugate gradients.
* Navier-Stokes (vorticity form): spectral streamfunction inversion,
  2/3-dealiased advection, Crank-Nicolson diffusion with second-order
  (Adams-Bashforth) explicit advection.

All routines are deterministic given their inputs and seeds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import fieldio
from .grids import Field, Grid
from .losses import Burgers, Darcy, NavierStokes, PdeInstance


class SolverError(RuntimeError):
    """A solver detected instability or failed to converge."""


@dataclass(frozen=True)
class GrfSpec:
    """Mean-zero Gaussian measure with spectral covariance
    sigma^2 (4 pi^2 |k|^2 + tau)^(-alpha) on the unit torus."""

    sigma: float
    tau: float
    alpha: float
    dims: int
    resolution: int
    seed: int

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be > 0")
        if self.alpha <= self.dims / 2:
            raise ValueError(
                f"alpha must exceed dims/2 = {self.dims / 2} (trace-class covariance)"
            )
        if self.dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")


#: Gaussian-random-field presets used by the experiments.
GRF_PRESETS = {
    "burgers": dict(sigma=25.0, tau=25.0, alpha=2.0, dims=1),
    "darcy": dict(sigma=1.0, tau=9.0, alpha=2.0, dims=2),
    "ns-transient": dict(sigma=7.0 ** 0.75, tau=49.0, alpha=2.5, dims=2),
    "ns-kolmogorov": dict(sigma=7.0 ** 0.75, tau=49.0, alpha=2.5, dims=2),
}


def grf_preset(name: str, resolution: int, seed: int) -> GrfSpec:
    if name not in GRF_PRESETS:
        raise ValueError(f"unknown GRF preset {name!r}")
    return GrfSpec(resolution=resolution, seed=seed, **GRF_PRESETS[name])


def grf_mode_variance(spec: GrfSpec, k) -> float:
    """Closed-form variance of the Fourier coefficient at integer mode k."""
    ksq = float(np.sum(np.square(np.atleast_1d(k))))
    return spec.sigma**2 * (4.0 * np.pi**2 * ksq + spec.tau) ** (-spec.alpha)


def sample_grf(spec: GrfSpec, rng: np.random.Generator | None = None) -> Field:
    """Draw one sample by coloring spatial white noise in spectrum."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    shape = (spec.resolution,) * spec.dims
    n_tot = int(np.prod(shape))
    noise = rng.standard_normal(shape)
    ksq = np.zeros(shape)
    for ax in range(spec.dims):
        k = np.fft.fftfreq(spec.resolution, d=1.0 / spec.resolution)
        s = [1] * spec.dims
        s[ax] = spec.resolution
        ksq = ksq + (k.reshape(s)) ** 2
    lam = spec.sigma**2 * (4.0 * np.pi**2 * ksq + spec.tau) ** (-spec.alpha)
    coeff = np.sqrt(lam * n_tot) * np.fft.fftn(noise)
    values = np.fft.ifftn(coeff).real[None]
    grid = Grid(shape)
    return Field(grid, values)


def darcy_coefficient(
    spec: GrfSpec, rng: np.random.Generator | None = None,
    base_field: Field | None = None,
) -> Field:
    """Two-valued coefficient: 12 where the latent GRF is >= 0, else 3."""
    if spec.dims != 2:
        raise ValueError("Darcy coefficients are 2-d")
    latent = base_field if base_field is not None else sample_grf(spec, rng)
    values = np.where(latent.values >= 0.0, 12.0, 3.0)
    grid = Grid(latent.grid.resolution, periodic=(False, False))
    return Field(grid, values)


# -- Burgers -------------------------------------------------------------------


def _dealias_mask_1d(n: int) -> np.ndarray:
    k = np.arange(n // 2 + 1)
    return (k <= n // 3).astype(np.float64)


def solve_burgers(
    u0: Field, nu: float, horizon: float = 1.0, nt: int = 65,
    substeps: int | None = None, dealias: bool = True,
) -> Field:
    """March u_t + (u^2/2)_x = nu u_xx and sample nt slices incl. endpoints."""
    if nu <= 0:
        raise ValueError("nu must be > 0")
    if nt < 2:
        raise ValueError("nt must be >= 2")
    if u0.grid.dims != 1 or not u0.grid.periodic[0]:
        raise ValueError("u0 must be a periodic 1-d field")
    n = u0.grid.resolution[0]
    length = u0.grid.length[0]
    k = 2.0 * np.pi * np.arange(n // 2 + 1) / length
    ik = 1j * k.copy()
    if n % 2 == 0:
        ik[-1] = 0.0  # Nyquist derivative
    mask = _dealias_mask_1d(n) if dealias else np.ones(n // 2 + 1)
    lin = -nu * k**2

    def nonlinear(u_hat):
        u = np.fft.irfft(u_hat, n=n)
        return -ik * (mask * np.fft.rfft(0.5 * u * u))

    dt_slice = horizon / (nt - 1)
    umax = max(float(np.max(np.abs(u0.values))), 1e-9)
    h = length / n
    if substeps is None:
        substeps = max(1, int(np.ceil(dt_slice / (0.5 * h / umax))))
    dt = dt_slice / substeps
    e_half = np.exp(0.5 * dt * lin)
    e_full = np.exp(dt * lin)

    out = np.empty((1, n, nt))
    out[0, :, 0] = u0.values[0]
    u_hat = np.fft.rfft(u0.values[0])
    limit = 50.0 * max(1.0, umax)
    for j in range(1, nt):
        for _ in range(substeps):
            k1 = nonlinear(u_hat)
            k2 = nonlinear(e_half * (u_hat + 0.5 * dt * k1))
            k3 = nonlinear(e_half * u_hat + 0.5 * dt * k2)
            k4 = nonlinear(e_full * u_hat + dt * e_half * k3)
            u_hat = e_full * u_hat + (dt / 6.0) * (
                e_full * k1 + 2.0 * e_half * k2 + 2.0 * e_half * k3 + k4
            )
        u = np.fft.irfft(u_hat, n=n)
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > limit:
            raise SolverError(
                f"Burgers march blew up at slice {j}; reduce the step size"
            )
        out[0, :, j] = u
    grid = Grid((n, nt), (length, horizon), (True, False))
    return Field(grid, out)


# -- Darcy ---------------------------------------------------------------------


def _face_coefficients(a: np.ndarray, averaging: str):
    if averaging == "harmonic":
        def avg(x, y):
            return 2.0 * x * y / (x + y)
    elif averaging == "arithmetic":
        def avg(x, y):
            return 0.5 * (x + y)
    else:
        raise ValueError(f"unknown face averaging {averaging!r}")
    ax_e = avg(a[:-1, :], a[1:, :])  # (n-1, n) faces in x
    ax_n = avg(a[:, :-1], a[:, 1:])  # (n, n-1) faces in y
    return ax_e, ax_n


def darcy_operator(a: Field, averaging: str = "harmonic"):
    """The interior stencil u -> -div(a grad u) as a callable on (n, n) arrays
    that vanish on the boundary."""
    values = a.values[0]
    nx, ny = values.shape
    hx, hy = a.grid.spacing
    face_x, face_y = _face_coefficients(values, averaging)

    def apply(u: np.ndarray) -> np.ndarray:
        flux_x = face_x * (u[1:, :] - u[:-1, :]) / hx
        flux_y = face_y * (u[:, 1:] - u[:, :-1]) / hy
        div = np.zeros_like(u)
        div[1:-1, :] += (flux_x[1:, :] - flux_x[:-1, :]) / hx
        div[:, 1:-1] += (flux_y[:, 1:] - flux_y[:, :-1]) / hy
        out = -div
        out[0, :] = out[-1, :] = out[:, 0] = out[:, -1] = 0.0
        return out

    diag = np.zeros_like(values)
    diag[1:-1, :] += (face_x[1:, :] + face_x[:-1, :]) / hx**2
    diag[:, 1:-1] += (face_y[:, 1:] + face_y[:, :-1]) / hy**2
    return apply, diag


def solve_darcy(
    a: Field, f: Field, tol: float = 1e-10, max_iter: int | None = None,
    face_averaging: str = "harmonic",
) -> Field:
    """Solve -div(a grad u) = f with zero Dirichlet boundary by PCG."""
    if a.grid.dims != 2:
        raise ValueError("coefficient must be 2-d")
    if np.min(a.values) <= 0:
        raise ValueError("coefficient must be strictly positive")
    if f.values.shape != a.values.shape:
        raise ValueError("forcing shape must match the coefficient")
    apply_op, diag = darcy_operator(a, face_averaging)
    interior = np.zeros(a.values.shape[1:], dtype=bool)
    interior[1:-1, 1:-1] = True
    b = np.where(interior, f.values[0], 0.0)
    inv_diag = np.where(interior, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)

    u = np.zeros_like(b)
    r = b - apply_op(u)
    r[~interior] = 0.0
    z = inv_diag * r
    p = z.copy()
    rz = float(np.sum(r * z))
    b_norm = float(np.linalg.norm(b)) or 1.0
    max_iter = max_iter or 20 * b.size
    converged = False
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * b_norm:
            converged = True
            break
        ap = apply_op(p)
        alpha = rz / float(np.sum(p * ap))
        u += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        converged = np.linalg.norm(r) <= tol * b_norm
    if not converged:
        raise SolverError("conjugate gradients did not converge")
    return Field(a.grid, u[None])


# -- Navier-Stokes ---------------------------------------------------------------


def kolmogorov_forcing(resolution: int) -> Field:
    """f = 0.1 (sin(2 pi (x + y)) + cos(2 pi (x + y))) on the unit torus."""
    grid = Grid((resolution, resolution))
    coords = grid.coordinate_fields()
    s = 2.0 * np.pi * (coords[0] + coords[1])
    return Field(grid, (0.1 * (np.sin(s) + np.cos(s)))[None])


def taylor_green_vorticity(resolution: int, amplitude: float | None = None) -> Field:
    grid = Grid((resolution, resolution))
    coords = grid.coordinate_fields()
    amp = 4.0 * np.pi if amplitude is None else amplitude
    w = amp * np.sin(2.0 * np.pi * coords[0]) * np.sin(2.0 * np.pi * coords[1])
    return Field(grid, w[None])


def solve_ns(
    w0: Field, nu: float, forcing: Field, horizon: float, nt: int,
    substeps: int | None = None, dealias: bool = True,
) -> Field:
    """March the vorticity equation and sample nt slices incl. endpoints."""
    if nu <= 0:
        raise ValueError("nu must be > 0")
    if nt < 2:
        raise ValueError("nt must be >= 2")
    if w0.grid.dims != 2 or not all(w0.grid.periodic):
        raise ValueError("w0 must be a periodic 2-d field")
    scale = max(1.0, float(np.max(np.abs(w0.values))))
    if abs(float(np.mean(w0.values))) > 1e-8 * scale:
        raise ValueError("w0 must be mean-zero")
    n0, n1 = w0.grid.resolution
    l0, l1 = w0.grid.length
    kx = 2.0 * np.pi * np.fft.fftfreq(n0, d=1.0 / n0)[:, None] / l0
    ky = 2.0 * np.pi * np.arange(n1 // 2 + 1)[None, :] / l1
    ksq = kx**2 + ky**2
    inv_ksq = np.where(ksq > 0, 1.0 / np.where(ksq > 0, ksq, 1.0), 0.0)
    if dealias:
        mask = (np.abs(kx) <= (2.0 * np.pi / l0) * (n0 // 3)) & (
            ky <= (2.0 * np.pi / l1) * (n1 // 3)
        )
    else:
        mask = np.ones_like(ksq, dtype=bool)

    def advection(w_hat):
        psi_hat = w_hat * inv_ksq
        ux = np.fft.irfft2(1j * ky * psi_hat, s=(n0, n1))
        uy = np.fft.irfft2(-1j * kx * psi_hat, s=(n0, n1))
        wx = np.fft.irfft2(1j * kx * w_hat, s=(n0, n1))
        wy = np.fft.irfft2(1j * ky * w_hat, s=(n0, n1))
        adv = np.fft.rfft2(ux * wx + uy * wy)
        return -np.where(mask, adv, 0.0), max(
            float(np.max(np.abs(ux))), float(np.max(np.abs(uy)))
        )

    f_hat = np.fft.rfft2(forcing.values[0])
    dt_slice = horizon / (nt - 1)
    h = min(l0 / n0, l1 / n1)

    out = np.empty((1, n0, n1, nt))
    out[0, ..., 0] = w0.values[0]
    w_hat = np.fft.rfft2(w0.values[0])
    limit = 1e3 * max(1.0, float(np.max(np.abs(w0.values))))
    # uniform step for the whole march keeps the two-step weights consistent
    _, umax0 = advection(w_hat)
    steps = substeps or max(1, int(np.ceil(dt_slice / (0.4 * h / max(umax0, 1e-9)))))
    dt = dt_slice / steps
    den = 1.0 + 0.5 * dt * nu * ksq
    num = 1.0 - 0.5 * dt * nu * ksq
    n_prev = None
    for j in range(1, nt):
        for _ in range(steps):
            n_curr, umax = advection(w_hat)
            if umax * dt > h:
                raise SolverError(
                    f"advective CFL violated before slice {j}; reduce the step size"
                )
            n_old = n_curr if n_prev is None else n_prev
            w_hat = (num * w_hat + dt * (1.5 * n_curr - 0.5 * n_old + f_hat)) / den
            n_prev = n_curr
        w = np.fft.irfft2(w_hat, s=(n0, n1))
        if not np.all(np.isfinite(w)) or np.max(np.abs(w)) > limit:
            raise SolverError(f"NS march blew up at slice {j}; reduce the step size")
        out[0, ..., j] = w
    grid = Grid((n0, n1, nt), (l0, l1, horizon), (True, True, False))
    return Field(grid, out)


# -- dataset assembly --------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    resolution: int
    time_steps: int = 65  # slices incl. both endpoints (1 for stationary)
    horizon: float = 1.0
    dealiasing: bool = True
    scheme: str = "default"

    def __post_init__(self):
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")


@dataclass
class DatasetManifest:
    problem: str
    count: int
    grf: dict
    solver: dict
    nu: float | None
    seed: int
    instances: list
    forcing_file: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


PROBLEMS = ("burgers", "darcy", "ns-taylor-green", "ns-kolmogorov")

_DEFAULT_NU = {"burgers": 0.01, "ns-taylor-green": 0.01, "ns-kolmogorov": 0.05}


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def sample_problem_input(
    problem: str, grf: GrfSpec, rng: np.random.Generator
) -> Field:
    """Draw one input function for a problem family."""
    if problem == "burgers":
        return sample_grf(grf, rng)
    if problem == "darcy":
        return darcy_coefficient(grf, rng)
    if problem == "ns-kolmogorov":
        w0 = sample_grf(grf, rng)
        return Field(w0.grid, w0.values - w0.values.mean())
    if problem == "ns-taylor-green":
        amp = 4.0 * np.pi * rng.uniform(0.5, 1.5)
        return taylor_green_vorticity(grf.resolution, amp)
    raise ValueError(f"unknown problem {problem!r}")


def solve_problem(
    problem: str, input_field: Field, solver: SolverConfig, nu: float | None
) -> Field:
    nu = nu if nu is not None else _DEFAULT_NU.get(problem)
    if problem == "burgers":
        return solve_burgers(
            input_field, nu, solver.horizon, solver.time_steps,
            dealias=solver.dealiasing,
        )
    if problem == "darcy":
        f = Field(input_field.grid, np.ones_like(input_field.values))
        return solve_darcy(input_field, f)
    forcing = (
        kolmogorov_forcing(input_field.grid.resolution[0])
        if problem == "ns-kolmogorov"
        else Field(input_field.grid, np.zeros_like(input_field.values))
    )
    return solve_ns(
        input_field, nu, forcing, solver.horizon, solver.time_steps,
        dealias=solver.dealiasing,
    )


def generate_dataset(
    problem: str,
    count: int,
    grf: GrfSpec,
    solver: SolverConfig,
    out_dir,
    nu: float | None = None,
    jobs: int = 1,
) -> DatasetManifest:
    """Sample inputs, solve each instance, and write fields plus a manifest."""
    if problem not in PROBLEMS:
        raise ValueError(f"problem must be one of {PROBLEMS}")
    nu = nu if nu is not None else _DEFAULT_NU.get(problem)
    out_dir = Path(out_dir)
    (out_dir / "inputs").mkdir(parents=True, exist_ok=True)
    (out_dir / "outputs").mkdir(parents=True, exist_ok=True)

    def build(index: int):
        rng = _instance_rng(grf.seed, index)
        input_field = sample_problem_input(problem, grf, rng)
        try:
            output_field = solve_problem(problem, input_field, solver, nu)
        except SolverError as exc:
            return index, input_field, None, str(exc)
        return index, input_field, output_field, None

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(build, range(count)))
    else:
        results = [build(i) for i in range(count)]

    instances = []
    forcing_file = None
    if problem == "ns-kolmogorov":
        forcing_file = "forcing"
        fieldio.save_field(out_dir / forcing_file, kolmogorov_forcing(grf.resolution))
    for index, input_field, output_field, error in sorted(results):
        name = f"{index:04d}"
        entry = {"index": index, "seed": grf.seed, "input": f"inputs/{name}",
                 "output": f"outputs/{name}", "failed": error is not None}
        if error is None:
            fieldio.save_field(out_dir / "inputs" / name, input_field)
            fieldio.save_field(out_dir / "outputs" / name, output_field)
        else:
            entry["note"] = error
        instances.append(entry)
    manifest = DatasetManifest(
        problem=problem,
        count=count,
        grf=asdict(grf),
        solver=asdict(solver),
        nu=nu,
        seed=grf.seed,
        instances=instances,
        forcing_file=forcing_file,
    )
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest


def load_manifest(path) -> DatasetManifest:
    data = json.loads(Path(path).read_text())
    return DatasetManifest(**data)


def load_dataset(manifest_path) -> list[tuple[PdeInstance, Field]]:
    """Rebuild (instance, target) pairs from a manifest on disk."""
    path = Path(manifest_path)
    manifest = load_manifest(path)
    root = path.parent
    forcing = None
    if manifest.forcing_file:
        forcing = fieldio.load_field(root / manifest.forcing_file)
    pairs = []
    for entry in manifest.instances:
        if entry["failed"]:
            continue
        input_field = fieldio.load_field(root / entry["input"])
        target = fieldio.load_field(root / entry["output"])
        pairs.append((make_instance(manifest, input_field, forcing), target))
    return pairs


def make_instance(
    manifest: DatasetManifest, input_field: Field, forcing: Field | None = None
) -> PdeInstance:
    problem = manifest.problem
    if problem == "burgers":
        return Burgers(nu=manifest.nu, u0=input_field)
    if problem == "darcy":
        return Darcy(a=input_field)
    if forcing is None:
        forcing = Field(input_field.grid, np.zeros_like(input_field.values))
    return NavierStokes(
        nu=manifest.nu, w0=input_field, forcing=forcing,
        horizon=manifest.solver["horizon"],
    )
