"""Adaptive sharpness-aware gradient aligning (ASGA) and its baselines.

One ASGA step on weights theta:

1. ``L, g0`` at theta.
2. ``rho = min(rho_max, phi / ln(h + 1))`` from the smoothed surrogate gap.
3. ``theta' = theta + (rho / |g0| - mu) * g0``.
4. ``L_p', g1`` at theta'; theta is restored.
5. ``theta <- theta - lr * (g0 + epsilon * g1)``.

SAM uses ``theta + rho * g0 / |g0|`` and updates with ``g1`` alone.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, NumericError
from .sharpness import random_direction

__all__ = ["AsgaParams", "OptimizerState", "StepReport", "Trace", "adaptive_rho", "rho_rule",
           "asga_perturbation_point", "asga_step", "sam_step", "sgd_step", "step",
           "convergence_trace", "write_step_csv", "NumericError", "METHODS"]

METHODS = ("asga", "sam", "sgd")


@dataclass
class AsgaParams:
    rho0: float = 0.1
    rho_max: float = 0.3
    phi: float = 0.5
    mu: float | None = None  # None -> 0.05 * rho0
    epsilon: float = 0.1
    lam: float = 0.0
    lr: float = 0.01
    gap_ema: float = 0.9
    fixed_rho: bool = False
    grad_norm_tol: float = 1e-12
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.mu is None:
            self.mu = 0.05 * self.rho0
        checks = [
            (self.rho0 > 0, "rho0 must be positive"),
            (self.rho_max > 0, "rho_max must be positive"),
            (self.rho0 <= self.rho_max, "rho0 must not exceed rho_max"),
            (self.phi > 0, "phi must be positive"),
            (self.mu >= 0, "mu must be nonnegative"),
            (self.epsilon >= 0, "epsilon must be nonnegative"),
            (self.lam >= 0, "lambda must be nonnegative"),
            (self.lr > 0, "lr must be positive"),
            (0 <= self.gap_ema < 1, "gap_ema must lie in [0, 1)"),
            (self.grad_norm_tol > 0, "grad_norm_tol must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ContractError(f"{msg} ({self})")

    def replace(self, **changes) -> "AsgaParams":
        d = asdict(self)
        d.update(changes)
        if "rho0" in changes and "mu" not in changes:
            d["mu"] = None
        return AsgaParams(**d)


@dataclass
class OptimizerState:
    seed: int = 0
    step: int = 0
    smoothed_gap: float | None = None
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


@dataclass
class StepReport:
    step: int
    loss: float
    perturbed_loss: float
    gap: float
    rho: float
    align_inner: float
    grad_norm: float


STEP_COLUMNS = [f.name for f in fields(StepReport)]


def rho_rule(h: float, phi: float, rho_max: float) -> float:
    """``min(rho_max, phi / ln(h + 1))``; h <= 0 saturates at ``rho_max``."""
    h = max(float(h), 0.0)
    denom = math.log1p(h)
    if denom == 0.0:
        return rho_max
    return min(rho_max, phi / denom)


def adaptive_rho(gap: float, params: AsgaParams) -> float:
    return rho_rule(gap, params.phi, params.rho_max)


def asga_perturbation_point(theta, grad, rho: float, mu: float, tol: float = 1e-12,
                            rng: np.random.Generator | None = None,
                            noise_scale: float = 1.0) -> np.ndarray:
    """``theta + (rho / |g| - mu) * g``; Gaussian direction times rho if |g| < tol."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    norm = float(np.linalg.norm(grad))
    if norm >= tol:
        return theta + (rho / norm - mu) * grad
    return theta + rho * random_direction(theta.size, np.random.default_rng(rng), noise_scale)


def _loss_and_grad(model, batch, where: str, step: int) -> tuple[float, np.ndarray]:
    loss = model.loss_and_grad(batch)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {where} at step {step}")
    g = model.params.grad_vector().copy()
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient {where} at step {step}")
    return loss, g


def current_rho(params: AsgaParams, state: OptimizerState) -> float:
    if params.fixed_rho or state.smoothed_gap is None:
        return params.rho0
    return adaptive_rho(state.smoothed_gap, params)


def asga_step(model, batch, params: AsgaParams, state: OptimizerState,
              base_weight: float = 1.0) -> StepReport:
    """One ASGA update of ``model.params``.

    ``base_weight`` scales the g0 term of the update direction (1 for ASGA;
    0 turns the rule into SAM evaluated at the mu-offset point).
    """
    ps = model.params
    theta = ps.vector().copy()
    loss, g0 = _loss_and_grad(model, batch, "at theta", state.step)
    rho = current_rho(params, state)
    theta_p = asga_perturbation_point(theta, g0, rho, params.mu, params.grad_norm_tol,
                                      state.rng, params.noise_scale)
    try:
        ps.set_vector(theta_p)
        lp, g1 = _loss_and_grad(model, batch, "at the perturbed point", state.step)
    finally:
        ps.set_vector(theta)

    if params.epsilon == 0.0 and base_weight == 1.0:
        direction = g0
    else:
        direction = base_weight * g0 + params.epsilon * g1
    ps.set_vector(theta - params.lr * direction)

    gap = lp - loss
    h = max(gap, 0.0)
    if state.smoothed_gap is None:
        state.smoothed_gap = h
    else:
        state.smoothed_gap = params.gap_ema * state.smoothed_gap + (1 - params.gap_ema) * h
    report = StepReport(state.step, loss, lp, gap, rho, float(g0 @ g1), float(np.linalg.norm(g0)))
    state.step += 1
    return report


def sam_step(model, batch, rho: float, lr: float, state: OptimizerState | None = None,
             grad_norm_tol: float = 1e-12) -> StepReport:
    """SAM baseline: gradient at ``theta + rho * g / |g|`` drives the update."""
    state = state or OptimizerState()
    ps = model.params
    theta = ps.vector().copy()
    loss, g0 = _loss_and_grad(model, batch, "at theta", state.step)
    if rho == 0.0:
        theta_p = theta
    else:
        theta_p = asga_perturbation_point(theta, g0, rho, 0.0, grad_norm_tol, state.rng)
    try:
        ps.set_vector(theta_p)
        lp, g1 = _loss_and_grad(model, batch, "at the SAM point", state.step)
    finally:
        ps.set_vector(theta)
    ps.set_vector(theta - lr * g1)
    report = StepReport(state.step, loss, lp, lp - loss, rho, float(g0 @ g1),
                        float(np.linalg.norm(g0)))
    state.step += 1
    return report


def sgd_step(model, batch, lr: float, state: OptimizerState | None = None) -> StepReport:
    state = state or OptimizerState()
    ps = model.params
    theta = ps.vector().copy()
    loss, g0 = _loss_and_grad(model, batch, "at theta", state.step)
    ps.set_vector(theta - lr * g0)
    gn = float(np.linalg.norm(g0))
    report = StepReport(state.step, loss, loss, 0.0, 0.0, gn * gn, gn)
    state.step += 1
    return report


def step(method: str, model, batch, params: AsgaParams, state: OptimizerState) -> StepReport:
    """Dispatch one weight update by method name (``asga``, ``sam`` or ``sgd``)."""
    if method == "asga":
        return asga_step(model, batch, params, state)
    if method == "sam":
        return sam_step(model, batch, params.rho0, params.lr, state, params.grad_norm_tol)
    if method == "sgd":
        return sgd_step(model, batch, params.lr, state)
    raise ContractError(f"unknown optimizer {method!r}; expected one of {METHODS}")


@dataclass
class Trace:
    sq_grad_norms: np.ndarray
    running_mean: np.ndarray
    failed: bool = False
    message: str = ""

    @property
    def mean(self) -> float:
        return float(self.running_mean[-1]) if len(self.running_mean) else float("nan")


def convergence_trace(model, batches: Callable[[int], object] | Iterable, method: str,
                      params: AsgaParams, T: int, gamma0: float, seed: int = 0,
                      divergence: float = 1e6) -> Trace:
    """Run ``T`` steps with ``lr = gamma0 / sqrt(T)`` recording |grad L|^2.

    ``batches`` is either a callable ``t -> batch`` or an iterable of batches.
    """
    if T < 100:
        raise ContractError(f"convergence traces need T >= 100, got {T}")
    params = params.replace(lr=gamma0 / math.sqrt(T))
    state = OptimizerState(seed=seed)
    get = batches if callable(batches) else iter(batches).__next__
    sq = []
    failed, message = False, ""
    for t in range(T):
        batch = get(t) if callable(batches) else get()
        try:
            rep = step(method, model, batch, params, state)
        except NumericError as exc:
            failed, message = True, str(exc)
            break
        if rep.loss > divergence:
            failed, message = True, f"loss {rep.loss} exceeded {divergence} at step {t}"
            break
        sq.append(rep.grad_norm ** 2)
    sq = np.asarray(sq)
    running = np.cumsum(sq) / np.arange(1, len(sq) + 1) if len(sq) else sq
    return Trace(sq, running, failed, message)


def write_step_csv(reports: Iterable[StepReport], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for r in reports:
            w.writerow([r.step] + [repr(float(getattr(r, c))) for c in STEP_COLUMNS[1:]])
    return path
