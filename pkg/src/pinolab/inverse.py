"""Darcy coefficient recovery from an observed solution.

Two formulations share the same ingredients: the Darcy residual with the
observation held fixed, total-variation regularization, and (for the
backward mode) an optional anchor to the pre-trained operator.

* forward mode: a trained forward operator G maps coefficients to solutions;
  the coefficient estimate is a plain grid field optimized under
  ``pde + ||G(a_hat) - u_obs||^2 + tv_weight * TV(a_hat)``.
* backward mode: a trained backward operator F maps solutions to
  coefficients; F's parameters are fine-tuned under
  ``pde + anchor_weight * ||F(u_obs) - F_0(u_obs)||^2 + tv_weight * TV``.

Recovered coefficients are classified against the two-valued truth by
thresholding at the midpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fno
from .autodiff import Tape, Var, backward
from .grids import Field, Grid
from .losses import darcy_interior_residual, mollifier
from .train import AdamState, TrainConfig, TrainHistory, adam_step, lr_schedule

# the two media values straddle 7.5 with half-gap 4.5; backward operators
# are trained on coefficients normalized to roughly unit scale
MEDIA_MID = 7.5
MEDIA_HALF_GAP = 4.5


@dataclass(frozen=True)
class InverseConfig:
    mode: str = "forward"
    steps: int = 200
    learning_rate: float = 0.05
    tv_weight: float = 0.0
    anchor_weight: float = 0.0
    threshold: float = 7.5  # midpoint between the two media values
    init: str = "constant"  # forward mode: "constant" (midpoint) or "zero"
    data_weight: float = 1.0
    data_target_is_observation: bool = True
    pde_weight: float = 1.0
    # optional box projection of the forward-mode iterate (the two media
    # values bound the coefficient a priori)
    clip_min: float | None = None
    clip_max: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("forward", "backward"):
            raise ValueError("mode must be 'forward' or 'backward'")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def total_variation(a: Field) -> float:
    """Anisotropic total variation: per axis, summed absolute forward
    differences times the transverse cell size (length/N per axis), so a unit
    step across the box contributes its jump times the interface length."""
    if a.grid.dims != 2:
        raise ValueError("total variation is defined here for 2-d fields")
    values = a.values
    total = 0.0
    cell = [l / n for l, n in zip(a.grid.length, a.grid.resolution)]
    for ax in range(2):
        diffs = np.abs(np.diff(values, axis=ax + 1))
        total += float(diffs.sum()) * cell[1 - ax]
    return total


def _tv_var(a_var: Var, grid: Grid, tape: Tape) -> Var:
    cell = [l / n for l, n in zip(grid.length, grid.resolution)]
    terms = []
    for ax in range(2):
        hi = tape.slice_axis(a_var, ax + 1, 1, None)
        lo = tape.slice_axis(a_var, ax + 1, 0, -1)
        diffs = tape.absolute(tape.sub(hi, lo))
        terms.append(tape.scale(tape.total(diffs), cell[1 - ax]))
    return tape.add(terms[0], terms[1])


@dataclass
class InversionResult:
    a_hat: Field
    a_classified: Field
    objective_history: list
    relative_l2_u: float | None = None
    accuracy: float | None = None
    status: str = "ok"


def coefficient_classify(
    a_hat: Field, a_true: Field, threshold: float = 7.5
) -> tuple[float, Field]:
    """Threshold the estimate to {3, 12} and score cellwise agreement."""
    if a_hat.values.shape != a_true.values.shape:
        raise ValueError("field shapes do not match")
    if not np.all(np.isin(a_true.values, (3.0, 12.0))):
        raise ValueError("reference coefficient must take values in {3, 12}")
    classified = np.where(a_hat.values >= threshold, 12.0, 3.0)
    accuracy = float(np.mean(classified == a_true.values))
    return accuracy, Field(a_true.grid, classified)


def _darcy_pde_term(a_operand, u_obs: Field, tape: Tape) -> Var:
    """mean((-div(a grad u_obs) - 1)^2) with the observation fixed."""
    f_values = np.ones((1,) + u_obs.grid.resolution)
    residual = darcy_interior_residual(
        Var(u_obs.values), a_operand, u_obs.grid, f_values, tape
    )
    return tape.mean(tape.square(residual))


def invert_forward(
    params: fno.FnoParams, u_target: Field, config: InverseConfig
) -> InversionResult:
    """Optimize a grid coefficient field under the forward-model objective."""
    grid = u_target.grid
    if config.init == "constant":
        a0 = np.full((1,) + grid.resolution, config.threshold)
    elif config.init == "zero":
        a0 = np.zeros((1,) + grid.resolution)
    else:
        raise ValueError(f"unknown init {config.init!r}")
    a_var = Var(a0.copy(), requires_grad=True)
    state = AdamState.for_params(_SingleParam(a_var))
    history = []
    best = a_var.values.copy()
    best_objective = math.inf
    moll = mollifier(grid)
    out_scale = float(params.meta.get("out_scale", 1.0))
    # normalize the data misfit by the observation so its weight is
    # meaningful against the O(1) residual term
    u_norm_sq = float(np.sum(u_target.values**2) * grid.cell_volume) or 1.0
    for _ in range(config.steps):
        tape = Tape()
        objective = tape.scale(_darcy_pde_term(a_var, u_target, tape),
                               config.pde_weight)
        if config.data_weight > 0 and config.data_target_is_observation:
            a_field = Field(grid, a_var.values, var=a_var)
            out = fno.forward(params, a_field, tape)
            pred = out.var
            if out_scale != 1.0:
                pred = tape.scale(pred, out_scale)
            pred = tape.mul(pred, moll)
            diff = tape.sub(pred, u_target.values)
            data = tape.scale(tape.total(tape.square(diff)),
                              grid.cell_volume / u_norm_sq)
            objective = tape.add(objective, tape.scale(data, config.data_weight))
        if config.tv_weight > 0:
            objective = tape.add(
                objective, tape.scale(_tv_var(a_var, grid, tape), config.tv_weight)
            )
        value = float(objective.values)
        history.append(value)
        if not np.isfinite(value):
            a_var.values = best
            return _finish(Field(grid, best), history, config.threshold,
                           status="diverged")
        if value < best_objective:
            best_objective = value
            best = a_var.values.copy()
        grads = backward(objective, tape)
        adam_step(_SingleParam(a_var), {"a": grads.get(a_var, np.zeros_like(a0))},
                  state, config.learning_rate)
        if config.clip_min is not None or config.clip_max is not None:
            np.clip(a_var.values, config.clip_min, config.clip_max,
                    out=a_var.values)
    return _finish(Field(grid, a_var.values.copy()), history, config.threshold)


def backward_model_output(params: fno.FnoParams, u_obs: Field, tape: Tape) -> Field:
    """Coefficient prediction of a backward operator, in physical units."""
    out = fno.forward(params, u_obs, tape)
    a = out.var
    if params.meta.get("out_scale"):
        a = tape.scale(a, float(params.meta["out_scale"]))
    if params.meta.get("out_shift"):
        a = tape.add(a, float(params.meta["out_shift"]))
    return Field(out.grid, a.values, var=a)


def make_backward_model(width: int, modes: int, layers: int, seed: int) -> fno.FnoParams:
    """A solution-to-coefficient operator with media-scale output units."""
    config = fno.FnoConfig(
        in_channels=3, out_channels=1, width=width, modes=modes, layers=layers,
        dims=2,
    )
    params = fno.init_params(config, seed)
    params.meta.update(out_scale=MEDIA_HALF_GAP, out_shift=MEDIA_MID)
    return params


def pretrain_backward(
    params: fno.FnoParams,
    pairs: list[tuple[Field, Field]],
    config: TrainConfig,
) -> TrainHistory:
    """Fit a backward operator on (solution, coefficient) pairs.

    The data loss is taken on the normalized output scale so the two media
    values sit near +/-1; the input scale is calibrated from the data the
    first time it is missing.
    """
    scale = float(params.meta.get("out_scale", 1.0))
    shift = float(params.meta.get("out_shift", 0.0))
    if "in_scale" not in params.meta:
        rms = float(np.sqrt(np.mean([np.mean(u.values**2) for u, _ in pairs])))
        params.meta["in_scale"] = 1.0 / max(rms, 1e-12)
    state = AdamState.for_params(params.store)
    history = TrainHistory()
    step = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        for u_obs, a_true in pairs:
            tape = Tape()
            out = fno.forward(params, u_obs, tape)
            target = (a_true.values - shift) / scale
            diff = tape.sub(out.var, target)
            loss = tape.scale(
                tape.total(tape.square(diff)), u_obs.grid.cell_volume
            )
            value = float(loss.values)
            params.store.zero_grad()
            params.store.accumulate(backward(loss, tape))
            adam_step(params.store, params.store.grads, state, lr)
            step += 1
            history.append(
                step=step, epoch=epoch, lr=lr, l_data=value, l_pde_interior=0.0,
                l_pde_ic=0.0, l_anchor=0.0, total=value,
            )
    return history


def invert_backward(
    params: fno.FnoParams, u_target: Field, config: InverseConfig
) -> InversionResult:
    """Fine-tune a backward operator u -> a under the backward objective."""
    grid = u_target.grid
    frozen = fno.FnoParams(params.config, params.store.copy(), meta=dict(params.meta))
    tape0 = Tape()
    frozen_a = backward_model_output(frozen, u_target, tape0)
    state = AdamState.for_params(params.store)
    history = []
    status = "ok"
    for _ in range(config.steps):
        tape = Tape()
        a_pred = backward_model_output(params, u_target, tape)
        objective = tape.scale(_darcy_pde_term(a_pred.var, u_target, tape),
                               config.pde_weight)
        if config.anchor_weight > 0:
            diff = tape.sub(a_pred.var, frozen_a.values.copy())
            anchor = tape.scale(tape.total(tape.square(diff)), grid.cell_volume)
            objective = tape.add(objective, tape.scale(anchor, config.anchor_weight))
        if config.tv_weight > 0:
            objective = tape.add(
                objective,
                tape.scale(_tv_var(a_pred.var, grid, tape), config.tv_weight),
            )
        value = float(objective.values)
        history.append(value)
        if not np.isfinite(value):
            params.store.load_values(frozen.store)
            status = "diverged"
            break
        params.store.zero_grad()
        params.store.accumulate(backward(objective, tape))
        adam_step(params.store, params.store.grads, state, config.learning_rate)
    tape = Tape()
    a_final = backward_model_output(params, u_target, tape)
    if status == "diverged":
        a_final = frozen_a
    return _finish(Field(grid, a_final.values.copy()), history, config.threshold,
                   status=status)


def _finish(
    a_hat: Field, history: list, threshold: float = 7.5, status: str = "ok"
) -> InversionResult:
    classified = Field(
        a_hat.grid, np.where(a_hat.values >= threshold, 12.0, 3.0)
    )
    return InversionResult(
        a_hat=a_hat, a_classified=classified, objective_history=history,
        status=status,
    )


class _SingleParam:
    """Adapter exposing one Var through the ParamStore update interface."""

    def __init__(self, var: Var):
        self._var = var

    def names(self):
        return ["a"]

    def items(self):
        return [("a", self._var)]
