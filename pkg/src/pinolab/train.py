"""Optimization: Adam with a halving learning-rate schedule, the
pre-training loop mixing data and PDE losses over real and virtually sampled
instances, test-time optimization against a frozen anchor, and evaluation.

One pre-training epoch with N data pairs and K virtual instances per pair
performs exactly N * (1 + K) parameter updates (K updates per epoch when the
dataset is empty and training is PDE-only).  Everything is deterministic
given (seed, config, dataset).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fno, simulate
from .autodiff import ParamStore, Tape, backward
from .grids import Field, resample
from .losses import (
    Burgers,
    Darcy,
    LossWeights,
    NavierStokes,
    PdeInstance,
    anchor_loss,
    data_loss,
    pde_loss,
    predict,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    lr_halving_period: int = 100
    batch_size: int = 1
    virtual_per_pair: int = 0  # K in the pre-training scheme
    alpha: float = 1.0
    beta: float = 1.0
    data_weight: float = 1.0
    pde_weight: float = 1.0
    anchor_weight: float = 0.0
    seed: int = 0
    time_steps: int | None = None  # model-grid slices for dynamic problems
    grad_clip: float | None = None
    checkpoint_every: int = 0
    history_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.virtual_per_pair < 0:
            raise ValueError("virtual_per_pair must be >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        m = {}
        v = {}
        for name, var in params.items():
            m[name] = np.zeros(var.values.size * (2 if np.iscomplexobj(var.values) else 1))
            v[name] = np.zeros_like(m[name])
        return cls(m=m, v=v)


def _real_view(arr: np.ndarray) -> np.ndarray:
    """Flat float64 view (complex entries as independent real pairs)."""
    if np.iscomplexobj(arr):
        return arr.view(np.float64).reshape(-1)
    return arr.reshape(-1)


def adam_step(
    params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float,
    grad_clip: float | None = None,
) -> None:
    """Bias-corrected Adam update, in place, real and imaginary parts
    treated as independent reals."""
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    if grad_clip is not None:
        total = math.sqrt(
            sum(float(np.sum(np.abs(g) ** 2)) for g in grads.values())
        )
        if total > grad_clip:
            factor = grad_clip / total
            grads = {name: g * factor for name, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, var in params.items():
        g = _real_view(np.ascontiguousarray(grads[name]))
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)
        target = _real_view(var.values)
        target -= update


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Learning rate halved every ``lr_halving_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.learning_rate * 0.5 ** (epoch // config.lr_halving_period)


HISTORY_COLUMNS = (
    "step", "epoch", "lr", "l_data", "l_pde_interior", "l_pde_ic", "l_anchor", "total"
)


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    restarted_with_clip: bool = False

    def append(self, **kwargs):
        self.rows.append(kwargs)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows])

    def save_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in HISTORY_COLUMNS})


class DivergenceError(RuntimeError):
    pass


def _virtual_instance(
    template: PdeInstance, sampler: simulate.GrfSpec, rng: np.random.Generator
) -> PdeInstance:
    """Draw an unlabeled instance from the input measure."""
    if isinstance(template, Burgers):
        u0 = simulate.sample_grf(sampler, rng)
        return Burgers(nu=template.nu, u0=u0)
    if isinstance(template, Darcy):
        return Darcy(a=simulate.darcy_coefficient(sampler, rng), f=template.f)
    w0 = simulate.sample_grf(sampler, rng)
    w0 = Field(w0.grid, w0.values - w0.values.mean())
    return NavierStokes(
        nu=template.nu, w0=w0, forcing=template.forcing, horizon=template.horizon
    )


def _model_nt(config: TrainConfig, target: Field | None, inst: PdeInstance):
    if isinstance(inst, Darcy):
        return None
    if config.time_steps is not None:
        return config.time_steps
    if target is not None:
        return target.grid.resolution[-1]
    raise ValueError("time_steps must be set for PDE-only dynamic problems")


def _one_update(
    params: fno.FnoParams,
    inst: PdeInstance,
    target: Field | None,
    config: TrainConfig,
    state: AdamState,
    lr: float,
    use_data: bool,
) -> dict:
    tape = Tape()
    pred = predict(params, inst, tape, nt=_model_nt(config, target, inst))
    l_data = 0.0
    terms = []
    if use_data and target is not None and config.data_weight > 0:
        target_on_grid = target
        ld = data_loss(pred, target_on_grid, tape)
        l_data = float(ld.values)
        terms.append(tape.scale(ld, config.data_weight))
    report = pde_loss(pred, inst, config.weights, tape, premollified=True)
    terms.append(tape.scale(report.var, config.pde_weight))
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    total_value = float(total.values)
    if not np.isfinite(total_value):
        raise DivergenceError("loss is not finite")
    params.store.zero_grad()
    params.store.accumulate(backward(total, tape))
    adam_step(params.store, params.store.grads, state, lr, config.grad_clip)
    return {
        "l_data": l_data,
        "l_pde_interior": report.interior,
        "l_pde_ic": report.initial,
        "l_anchor": 0.0,
        "total": total_value,
    }


def pretrain(
    params: fno.FnoParams,
    dataset: list[tuple[PdeInstance, Field]],
    config: TrainConfig,
    sampler: simulate.GrfSpec | None = None,
    template: PdeInstance | None = None,
) -> TrainHistory:
    """Pre-training scheme: one update per data pair (data + PDE loss), then
    K updates on virtually sampled instances (PDE loss only).

    Supports the data-free mode (empty dataset, K > 0) given a template
    instance that fixes the equation parameters.
    """
    if not dataset and config.virtual_per_pair == 0:
        raise ValueError("need a dataset or virtual_per_pair > 0")
    if config.virtual_per_pair > 0 and sampler is None:
        raise ValueError("virtual sampling requires a GRF sampler")
    if not dataset and template is None:
        raise ValueError("PDE-only training requires a template instance")
    if template is None:
        template = dataset[0][0]

    initial = params.store.copy()

    def run(with_clip: bool) -> TrainHistory:
        run_config = replace(config, grad_clip=10.0) if with_clip else config
        rng = np.random.default_rng(run_config.seed)
        state = AdamState.for_params(params.store)
        history = TrainHistory(restarted_with_clip=with_clip)
        step = 0
        for epoch in range(run_config.epochs):
            lr = lr_schedule(run_config, epoch)
            pairs = dataset if dataset else [(None, None)]
            for inst, target in pairs:
                if inst is not None:
                    row = _one_update(
                        params, inst, target, run_config, state, lr, use_data=True
                    )
                    step += 1
                    history.append(step=step, epoch=epoch, lr=lr, **row)
                for _ in range(run_config.virtual_per_pair):
                    virtual = _virtual_instance(template, sampler, rng)
                    row = _one_update(
                        params, virtual, None, run_config, state, lr, use_data=False
                    )
                    step += 1
                    history.append(step=step, epoch=epoch, lr=lr, **row)
        return history

    try:
        history = run(with_clip=False)
    except (DivergenceError, FloatingPointError):
        # one deterministic restart with gradient clipping
        params.store.load_values(initial)
        history = run(with_clip=True)
    if config.history_path:
        history.save_csv(config.history_path)
    return history


@dataclass
class FinetuneResult:
    params: fno.FnoParams
    solution: Field
    history: TrainHistory
    status: str
    equation_error_before: float
    equation_error_after: float
    anchor_final: float


def equation_error(report) -> float:
    return math.sqrt(max(report.interior, 0.0))


def finetune(
    params: fno.FnoParams,
    instance: PdeInstance,
    config: TrainConfig,
) -> FinetuneResult:
    """Test-time optimization of one instance: minimize the PDE loss plus
    ``anchor_weight`` times the distance to the frozen pre-trained output.
    Returns the iterate with the lowest equation error."""
    nt = _model_nt(config, None, instance)
    frozen_store = params.store.copy()
    frozen_params = fno.FnoParams(params.config, frozen_store)
    tape0 = Tape()
    frozen_out = predict(frozen_params, instance, tape0, nt=nt)
    report0 = pde_loss(frozen_out, instance, config.weights, Tape(), premollified=True)
    err0 = equation_error(report0)

    state = AdamState.for_params(params.store)
    history = TrainHistory()
    best_err = err0
    best_store = params.store.copy()
    best_out = Field(frozen_out.grid, frozen_out.values.copy())
    anchor_final = 0.0
    status = "ok"
    for step in range(config.epochs):
        lr = lr_schedule(config, step)
        tape = Tape()
        pred = predict(params, instance, tape, nt=nt)
        report = pde_loss(pred, instance, config.weights, tape, premollified=True)
        total = report.var
        l_anchor = 0.0
        if config.anchor_weight > 0:
            anchor = anchor_loss(pred, frozen_out, tape)
            l_anchor = float(anchor.values)
            total = tape.add(total, tape.scale(anchor, config.anchor_weight))
        total_value = float(total.values)
        if not np.isfinite(total_value):
            status = "diverged"
            break
        err = equation_error(report)
        if err <= best_err:
            best_err = err
            best_store = params.store.copy()
            best_out = Field(pred.grid, pred.values.copy())
            anchor_final = l_anchor
        history.append(
            step=step + 1, epoch=step, lr=lr, l_data=0.0,
            l_pde_interior=report.interior, l_pde_ic=report.initial,
            l_anchor=l_anchor, total=total_value,
        )
        params.store.zero_grad()
        params.store.accumulate(backward(total, tape))
        adam_step(params.store, params.store.grads, state, lr, config.grad_clip)
    if status == "diverged":
        params.store.load_values(frozen_store)
        return FinetuneResult(
            params, frozen_out, history, "diverged", err0, err0, 0.0
        )
    params.store.load_values(best_store)
    return FinetuneResult(
        params, best_out, history, status, err0, best_err, anchor_final
    )


@dataclass
class EvalEntry:
    index: int
    relative_l2: float
    degenerate: bool = False


@dataclass
class EvalReport:
    resolution: int
    entries: list[EvalEntry]
    relative_l2_mean: float
    equation_error_mean: float


def relative_l2(pred: np.ndarray, target: np.ndarray) -> tuple[float, bool]:
    denom = float(np.linalg.norm(target))
    if denom == 0.0:
        return 0.0, True
    return float(np.linalg.norm(pred - target) / denom), False


def _resample_spatial(field: Field, resolution: int, spatial_axes) -> Field:
    new_res = list(field.grid.resolution)
    for ax in spatial_axes:
        new_res[ax] = resolution
    return resample(field, new_res)


def _spatial_axes_of(inst: PdeInstance) -> tuple[int, ...]:
    return (0,) if isinstance(inst, Burgers) else (0, 1)


def evaluate(
    params: fno.FnoParams,
    dataset: list[tuple[PdeInstance, Field]],
    resolutions: list[int] | None = None,
    weights: LossWeights | None = None,
) -> list[EvalReport]:
    """Relative L2 against targets and mean equation error, optionally after
    spectral resampling of inputs/targets to other spatial resolutions."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    weights = weights or LossWeights()
    reports = []
    base_res = dataset[0][1].grid.resolution[0]
    for res in resolutions or [base_res]:
        entries = []
        eq_errors = []
        for index, (inst, target) in enumerate(dataset):
            spatial = _spatial_axes_of(inst)
            inst_r = _resample_instance(inst, res)
            target_r = (
                target
                if res == target.grid.resolution[0]
                else _resample_spatial(target, res, spatial)
            )
            tape = Tape()
            nt = None if isinstance(inst, Darcy) else target_r.grid.resolution[-1]
            pred = predict(params, inst_r, tape, nt=nt)
            rel, degenerate = relative_l2(pred.values, target_r.values)
            entries.append(EvalEntry(index=index, relative_l2=rel, degenerate=degenerate))
            report = pde_loss(pred, inst_r, weights, Tape(), premollified=True)
            eq_errors.append(equation_error(report))
        reports.append(
            EvalReport(
                resolution=res,
                entries=entries,
                relative_l2_mean=float(np.mean([e.relative_l2 for e in entries])),
                equation_error_mean=float(np.mean(eq_errors)),
            )
        )
    return reports


def _resample_instance(inst: PdeInstance, resolution: int) -> PdeInstance:
    if isinstance(inst, Burgers):
        if inst.u0.grid.resolution[0] == resolution:
            return inst
        return Burgers(nu=inst.nu, u0=resample(inst.u0, (resolution,)))
    if isinstance(inst, Darcy):
        if inst.a.grid.resolution[0] == resolution:
            return inst
        raise ValueError("Darcy coefficients are not spectrally resampled")
    if inst.w0.grid.resolution[0] == resolution:
        return inst
    return NavierStokes(
        nu=inst.nu,
        w0=resample(inst.w0, (resolution, resolution)),
        forcing=resample(inst.forcing, (resolution, resolution)),
        horizon=inst.horizon,
    )
