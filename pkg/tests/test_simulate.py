import json

import numpy as np
import pytest

from pinolab import fieldio, losses, simulate
from pinolab.grids import Field, Grid
from pinolab.simulate import (
    GrfSpec,
    SolverConfig,
    SolverError,
    darcy_coefficient,
    generate_dataset,
    grf_mode_variance,
    grf_preset,
    kolmogorov_forcing,
    load_dataset,
    load_manifest,
    sample_grf,
    solve_burgers,
    solve_darcy,
    solve_ns,
    taylor_green_vorticity,
)


def test_grf_spec_validation():
    with pytest.raises(ValueError):
        GrfSpec(sigma=1.0, tau=1.0, alpha=0.5, dims=2, resolution=16, seed=0)
    with pytest.raises(ValueError):
        GrfSpec(sigma=-1.0, tau=1.0, alpha=2.0, dims=1, resolution=16, seed=0)


def test_grf_deterministic_per_seed():
    spec = grf_preset("burgers", 32, 9)
    a = sample_grf(spec)
    b = sample_grf(spec)
    assert np.array_equal(a.values, b.values)
    c = sample_grf(grf_preset("burgers", 32, 10))
    assert not np.array_equal(a.values, c.values)


def test_grf_mode_variance_matches_covariance():
    # Monte-Carlo estimate of per-mode variance vs the closed form, |k| <= 4
    spec = grf_preset("burgers", 32, 123)
    rng = np.random.default_rng(123)
    count = 2000
    coeffs = np.empty((count, 5), dtype=complex)
    for i in range(count):
        f = sample_grf(spec, rng)
        coeffs[i] = np.fft.rfft(f.values[0])[:5] / 32
    for k in range(5):
        empirical = float(np.mean(np.abs(coeffs[:, k]) ** 2))
        exact = grf_mode_variance(spec, [k])
        assert abs(empirical - exact) < 0.10 * exact


def test_grf_sample_mean_near_zero():
    spec = grf_preset("darcy", 16, 77)
    rng = np.random.default_rng(77)
    count = 2000
    acc = np.zeros((16, 16))
    for _ in range(count):
        acc += sample_grf(spec, rng).values[0]
    mean_field = acc / count
    pointwise_std = np.sqrt(
        sum(
            grf_mode_variance(spec, [k1, k2])
            for k1 in range(-8, 8)
            for k2 in range(-8, 8)
        )
    )
    assert np.max(np.abs(mean_field)) < 3.0 * pointwise_std / np.sqrt(count) * np.sqrt(
        2 * np.log(256)
    )


def test_darcy_coefficient_codomain_and_fraction():
    # samples are strongly correlated in space, so the per-sample fraction
    # is nearly binary; many draws are needed for the symmetry check
    spec = grf_preset("darcy", 16, 5)
    rng = np.random.default_rng(5)
    fractions = []
    for _ in range(400):
        a = darcy_coefficient(spec, rng)
        assert set(np.unique(a.values)) <= {3.0, 12.0}
        fractions.append(np.mean(a.values == 12.0))
    assert abs(np.mean(fractions) - 0.5) < 0.05


def test_darcy_coefficient_zero_latent_hook():
    g = Grid((8, 8))
    latent = Field(g, np.zeros((1, 8, 8)))
    spec = grf_preset("darcy", 8, 0)
    a = darcy_coefficient(spec, base_field=latent)
    assert np.all(a.values == 12.0)


def test_burgers_constant_fixed_point():
    g = Grid((32,))
    u0 = Field(g, np.full((1, 32), 0.8))
    sol = solve_burgers(u0, 0.1, 1.0, 9)
    assert np.max(np.abs(sol.values - 0.8)) < 1e-12


def test_burgers_mean_conservation():
    spec = grf_preset("burgers", 64, 3)
    u0 = sample_grf(spec)
    sol = solve_burgers(u0, 0.05, 1.0, 17)
    means = sol.values[0].mean(axis=0)
    assert np.max(np.abs(means - means[0])) < 1e-10


def test_burgers_fourth_order_self_convergence():
    g = Grid((64,))
    x = g.axis_coordinates(0)
    u0 = Field(g, (0.4 * np.sin(2 * np.pi * x) + 0.1 * np.cos(4 * np.pi * x))[None])
    sols = {
        nt: solve_burgers(u0, 0.05, 1.0, nt, substeps=1) for nt in (65, 129, 257)
    }
    e_coarse = np.linalg.norm(sols[65].values[0, :, -1] - sols[129].values[0, :, -1])
    e_fine = np.linalg.norm(sols[129].values[0, :, -1] - sols[257].values[0, :, -1])
    assert e_coarse / e_fine >= 8.0


def test_burgers_instability_detected():
    g = Grid((64,))
    x = g.axis_coordinates(0)
    u0 = Field(g, (50.0 * np.sin(2 * np.pi * x))[None])
    with pytest.raises(SolverError):
        # forced huge step: one step per slice at an advective CFL far above 1
        solve_burgers(u0, 1e-6, 1.0, 3, substeps=1)


def test_darcy_manufactured_solution():
    n = 64
    g = Grid((n, n), periodic=(False, False))
    coords = g.coordinate_fields()
    a = Field(g, np.ones((1, n, n)))
    f = Field(
        g, (2 * np.pi**2 * np.sin(np.pi * coords[0]) * np.sin(np.pi * coords[1]))[None]
    )
    u = solve_darcy(a, f)
    exact = np.sin(np.pi * coords[0]) * np.sin(np.pi * coords[1])
    assert np.max(np.abs(u.values[0] - exact)) < 1e-3


def test_darcy_zero_forcing_zero_solution():
    g = Grid((16, 16), periodic=(False, False))
    a = Field(g, np.full((1, 16, 16), 5.0))
    u = solve_darcy(a, Field(g, np.zeros((1, 16, 16))))
    assert np.max(np.abs(u.values)) < 1e-14


def test_darcy_maximum_principle():
    spec = grf_preset("darcy", 24, 8)
    a = darcy_coefficient(spec)
    f = Field(a.grid, np.ones_like(a.values))
    u = solve_darcy(a, f)
    assert np.min(u.values) >= -1e-12


def test_darcy_interface_refinement():
    # piecewise-constant coefficient held fixed across resolutions
    spec = grf_preset("darcy", 32, 4)
    a32 = darcy_coefficient(spec)
    a64_values = np.repeat(np.repeat(a32.values, 2, axis=1), 2, axis=2)
    g64 = Grid((64, 64), periodic=(False, False))
    a64 = Field(g64, a64_values)
    u32 = solve_darcy(a32, Field(a32.grid, np.ones_like(a32.values)))
    u64 = solve_darcy(a64, Field(g64, np.ones_like(a64.values)))
    # compare on the coarse nodes (every second fine node)
    diff32 = u32.values[0] - u64.values[0][::2, ::2]
    rel = np.linalg.norm(diff32) / np.linalg.norm(u64.values[0][::2, ::2])
    assert rel < 0.25  # O(h) or better near interfaces


def test_ns_taylor_green_decay():
    w0 = taylor_green_vorticity(64)
    nu, horizon = 0.01, 0.5
    f0 = Field(w0.grid, np.zeros_like(w0.values))
    sol = solve_ns(w0, nu, f0, horizon, 33)
    exact = w0.values[0] * np.exp(-8 * np.pi**2 * nu * horizon)
    rel = np.linalg.norm(sol.values[0, ..., -1] - exact) / np.linalg.norm(exact)
    assert rel < 1e-4


def test_ns_energy_decay_unforced():
    spec = grf_preset("ns-kolmogorov", 32, 6)
    raw = sample_grf(spec)
    w0 = Field(raw.grid, raw.values - raw.values.mean())
    f0 = Field(w0.grid, np.zeros_like(w0.values))
    sol = solve_ns(w0, 0.01, f0, 1.0, 9)
    kx = 2 * np.pi * np.fft.fftfreq(32, 1 / 32)
    ksq = kx[:, None] ** 2 + kx[None, :] ** 2
    inv = np.where(ksq > 0, 1.0 / np.where(ksq > 0, ksq, 1.0), 0.0)
    energies = []
    for j in range(9):
        what = np.fft.fft2(sol.values[0, ..., j])
        energies.append(float(np.sum(np.abs(what) ** 2 * inv)))
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(energies, energies[1:]))


def test_ns_mean_vorticity_conserved():
    spec = grf_preset("ns-kolmogorov", 32, 7)
    raw = sample_grf(spec)
    w0 = Field(raw.grid, raw.values - raw.values.mean())
    sol = solve_ns(w0, 0.05, kolmogorov_forcing(32), 0.5, 9)
    assert np.max(np.abs(sol.values[0].mean(axis=(0, 1)))) < 1e-12


def test_ns_rejects_nonzero_mean():
    g = Grid((16, 16))
    w0 = Field(g, np.ones((1, 16, 16)))
    with pytest.raises(ValueError):
        solve_ns(w0, 0.1, Field(g, np.zeros((1, 16, 16))), 1.0, 3)


def test_generate_dataset_roundtrip_and_determinism(tmp_path):
    spec = grf_preset("burgers", 32, 13)
    solver = SolverConfig(resolution=32, time_steps=9, horizon=1.0)
    m1 = generate_dataset("burgers", 4, spec, solver, tmp_path / "a", nu=0.05)
    assert sum(not e["failed"] for e in m1.instances) == 4
    pairs = load_dataset(tmp_path / "a" / "manifest.json")
    assert len(pairs) == 4
    inst, target = pairs[0]
    assert isinstance(inst, losses.Burgers)
    assert target.grid.resolution == (32, 9)
    generate_dataset("burgers", 4, spec, solver, tmp_path / "b", nu=0.05)
    for name in ("inputs/0000.f64", "outputs/0003.f64"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_generate_dataset_parallel_matches_serial(tmp_path):
    spec = grf_preset("darcy", 16, 14)
    solver = SolverConfig(resolution=16, time_steps=1)
    generate_dataset("darcy", 4, spec, solver, tmp_path / "serial")
    generate_dataset("darcy", 4, spec, solver, tmp_path / "parallel", jobs=3)
    for i in range(4):
        a = (tmp_path / "serial" / "inputs" / f"{i:04d}.f64").read_bytes()
        b = (tmp_path / "parallel" / "inputs" / f"{i:04d}.f64").read_bytes()
        assert a == b


def test_generate_dataset_darcy_inputs_two_valued(tmp_path):
    spec = grf_preset("darcy", 16, 15)
    solver = SolverConfig(resolution=16, time_steps=1)
    generate_dataset("darcy", 3, spec, solver, tmp_path)
    for i in range(3):
        a = fieldio.load_field(tmp_path / "inputs" / f"{i:04d}")
        assert set(np.unique(a.values)) <= {3.0, 12.0}


def test_generate_dataset_records_failures(tmp_path, monkeypatch):
    calls = {"n": 0}
    original = simulate.solve_problem

    def flaky(problem, input_field, solver, nu):
        calls["n"] += 1
        if calls["n"] == 2:
            raise SolverError("synthetic failure")
        return original(problem, input_field, solver, nu)

    monkeypatch.setattr(simulate, "solve_problem", flaky)
    spec = grf_preset("burgers", 16, 16)
    solver = SolverConfig(resolution=16, time_steps=5)
    manifest = generate_dataset("burgers", 3, spec, solver, tmp_path, nu=0.05)
    failed = [e for e in manifest.instances if e["failed"]]
    assert len(failed) == 1
    assert "synthetic failure" in failed[0]["note"]
    assert len(load_dataset(tmp_path / "manifest.json")) == 2
    reloaded = load_manifest(tmp_path / "manifest.json")
    assert reloaded.instances[1]["failed"]


def test_ns_dataset_kolmogorov(tmp_path):
    spec = grf_preset("ns-kolmogorov", 16, 17)
    solver = SolverConfig(resolution=16, time_steps=5, horizon=0.25)
    generate_dataset("ns-kolmogorov", 2, spec, solver, tmp_path)
    pairs = load_dataset(tmp_path / "manifest.json")
    inst, target = pairs[0]
    assert isinstance(inst, losses.NavierStokes)
    assert abs(inst.w0.values.mean()) < 1e-12
    assert np.max(np.abs(inst.forcing.values - kolmogorov_forcing(16).values)) == 0.0
    assert target.grid.resolution == (16, 16, 5)
