"""Loss-landscape instrumentation.

The perturbed loss ``L_p`` is the loss at the first-order ascent point
``theta + rho * g / |g|``; the surrogate gap is ``h = L_p - L`` and
``2 h / rho**2`` estimates the dominant Hessian eigenvalue. Power iteration
with finite-difference Hessian-vector products is the independent check of
that estimate, and :func:`landscape_probe` replaces the first-order ascent by
an exhaustive search of the rho-ball for 1-D and 2-D test functions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError


@dataclass(frozen=True)
class PerturbParams:
    rho: float
    noise_scale: float = 1.0
    grad_norm_tol: float = 1e-12

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractError(f"rho must be positive, got {self.rho}")
        if not self.grad_norm_tol > 0:
            raise ContractError(f"grad_norm_tol must be positive, got {self.grad_norm_tol}")
        if not self.noise_scale > 0:
            raise ContractError(f"noise_scale must be positive, got {self.noise_scale}")


@dataclass(frozen=True)
class SharpnessReport:
    rho: float
    loss: float
    perturbed_loss: float
    gap: float
    sigma_gap: float
    sigma_power: float | None = None

    def to_dict(self) -> dict:
        return dict(rho=self.rho, loss=self.loss, perturbed_loss=self.perturbed_loss,
                    gap=self.gap, sigma_gap=self.sigma_gap, sigma_power=self.sigma_power)


def random_direction(n: int, rng: np.random.Generator, noise_scale: float = 1.0) -> np.ndarray:
    """Unit vector along a draw from N(0, b^2 I)."""
    if n == 0:
        return np.zeros(0)
    while True:
        d = rng.normal(0.0, noise_scale, size=n)
        norm = np.linalg.norm(d)
        if norm > 0:
            return d / norm


def ascent_direction(grads, p: PerturbParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """``g / |g|``, or a random Gaussian direction when ``|g| < grad_norm_tol``.

    ``grads`` is a flat gradient vector or a ParamSet with populated grads.
    """
    g = grads.grad_vector() if hasattr(grads, "grad_vector") else np.asarray(grads, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm >= p.grad_norm_tol:
        return g / norm
    return random_direction(g.size, np.random.default_rng(rng), p.noise_scale)


def surrogate_gap(loss: float, perturbed_loss: float) -> float:
    return perturbed_loss - loss


def sigma_from_gap(gap: float, rho: float) -> float:
    if not rho > 0:
        raise ContractError(f"rho must be positive, got {rho}")
    return 2.0 * gap / rho ** 2


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


def perturbed_loss(model, batch, p: PerturbParams, rng: np.random.Generator | int | None = None,
                   direction: np.ndarray | None = None) -> tuple[float, float]:
    """Return ``(L, L_p)``; parameters are restored bit-for-bit.

    ``direction`` (normalized here) replaces the gradient ascent direction.
    """
    params = model.params
    theta = params.vector().copy()
    loss = _check_finite(model.loss_and_grad(batch), "loss at theta")
    if direction is None:
        d = ascent_direction(params, p, np.random.default_rng(rng))
    else:
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
    try:
        params.set_vector(theta + p.rho * d)
        lp = model.loss(batch)
    finally:
        params.set_vector(theta)
    return loss, _check_finite(lp, f"perturbed loss at rho={p.rho}")


def hessian_vector_product(model, batch, v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Central difference of gradients along ``v``."""
    params = model.params
    theta = params.vector().copy()
    if eps is None:
        eps = 1e-4 * (1.0 + np.linalg.norm(theta))
    try:
        params.set_vector(theta + eps * v)
        model.loss_and_grad(batch)
        g_plus = params.grad_vector().copy()
        params.set_vector(theta - eps * v)
        model.loss_and_grad(batch)
        g_minus = params.grad_vector().copy()
    finally:
        params.set_vector(theta)
    hv = (g_plus - g_minus) / (2.0 * eps)
    if not np.all(np.isfinite(hv)):
        raise NumericError("non-finite Hessian-vector product")
    return hv


def hessian_eig_power(model, batch, iters: int = 50, seed: int = 0,
                      v0: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Dominant Hessian eigenvalue (Rayleigh quotient) and its unit eigenvector."""
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    n = model.params.size
    rng = np.random.default_rng(seed)
    v = random_direction(n, rng) if v0 is None else np.asarray(v0, float) / np.linalg.norm(v0)
    eig = 0.0
    for _ in range(iters):
        hv = hessian_vector_product(model, batch, v)
        eig = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0:
            return 0.0, v
        v = hv / norm
    eig = float(v @ hessian_vector_product(model, batch, v))
    return eig, v


def sharpness_report(model, batch, rho: float, power_iters: int = 0, seed: int = 0,
                     at_eigvector: bool = False) -> SharpnessReport:
    """Snapshot of (L, L_p, h, sigma) at radius ``rho``.

    With ``power_iters > 0`` the power-iteration eigenvalue is attached, and
    ``at_eigvector`` measures the gap along its eigenvector instead of the
    gradient.
    """
    p = PerturbParams(rho)
    sigma_power = None
    direction = None
    if power_iters > 0:
        sigma_power, vec = hessian_eig_power(model, batch, power_iters, seed)
        if at_eigvector:
            direction = vec
    loss, lp = perturbed_loss(model, batch, p, rng=seed, direction=direction)
    gap = surrogate_gap(loss, lp)
    return SharpnessReport(rho, loss, lp, gap, sigma_from_gap(gap, rho), sigma_power)


# exhaustive probes of analytic landscapes ---------------------------------

@dataclass(frozen=True)
class Landscape:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    dim: int
    grid: tuple[np.ndarray, ...]

    def default_grid(self) -> np.ndarray:
        if self.dim == 1:
            return self.grid[0]
        xs, ys = np.meshgrid(*self.grid, indexing="ij")
        return np.column_stack([xs.ravel(), ys.ravel()])


# sharp well at -2 (width^2 0.005) and a shallower, flat well at +2 (width^2 2)
TWO_MINIMA = dict(base=1.0, sharp_depth=0.9, sharp_center=-2.0, sharp_width=0.005,
                  flat_depth=0.8, flat_center=2.0, flat_width=2.0)


def two_minima(x, base=TWO_MINIMA["base"], sharp_depth=TWO_MINIMA["sharp_depth"],
               sharp_center=TWO_MINIMA["sharp_center"], sharp_width=TWO_MINIMA["sharp_width"],
               flat_depth=TWO_MINIMA["flat_depth"], flat_center=TWO_MINIMA["flat_center"],
               flat_width=TWO_MINIMA["flat_width"]):
    x = np.asarray(x, dtype=float)
    return (base - sharp_depth * np.exp(-(x - sharp_center) ** 2 / sharp_width)
            - flat_depth * np.exp(-(x - flat_center) ** 2 / flat_width))


def two_minima_grad(x, sharp_depth=TWO_MINIMA["sharp_depth"],
                    sharp_center=TWO_MINIMA["sharp_center"], sharp_width=TWO_MINIMA["sharp_width"],
                    flat_depth=TWO_MINIMA["flat_depth"], flat_center=TWO_MINIMA["flat_center"],
                    flat_width=TWO_MINIMA["flat_width"], **_):
    x = np.asarray(x, dtype=float)
    ds = x - sharp_center
    dfl = x - flat_center
    return (sharp_depth * 2.0 * ds / sharp_width * np.exp(-ds ** 2 / sharp_width)
            + flat_depth * 2.0 * dfl / flat_width * np.exp(-dfl ** 2 / flat_width))


def _bowl2d(p):
    p = np.asarray(p, dtype=float)
    return 0.5 * (p[..., 0] ** 2 + 10.0 * p[..., 1] ** 2)


def _bowl2d_grad(p):
    p = np.asarray(p, dtype=float)
    return np.stack([p[..., 0], 10.0 * p[..., 1]], axis=-1)


LANDSCAPES: dict[str, Landscape] = {
    "two-minima": Landscape("two-minima", two_minima, two_minima_grad, 1,
                            (np.linspace(-3.0, 3.0, 121),)),
    "parabola": Landscape("parabola", lambda x: np.asarray(x, float) ** 2,
                          lambda x: 2.0 * np.asarray(x, float), 1, (np.linspace(-1.0, 1.0, 41),)),
    "constant": Landscape("constant", lambda x: np.ones_like(np.asarray(x, float)),
                          lambda x: np.zeros_like(np.asarray(x, float)), 1,
                          (np.linspace(-1.0, 1.0, 21),)),
    "bowl2d": Landscape("bowl2d", _bowl2d, _bowl2d_grad, 2,
                        (np.linspace(-1.0, 1.0, 5), np.linspace(-1.0, 1.0, 5))),
}


def get_landscape(name: str) -> Landscape:
    try:
        return LANDSCAPES[name]
    except KeyError:
        raise ContractError(f"unknown landscape {name!r}; known: {sorted(LANDSCAPES)}") from None


def ball_offsets(rho: float, dim: int, steps_per_rho: int = 1000) -> np.ndarray:
    """Lattice points of spacing rho/steps_per_rho inside the closed rho-ball."""
    t = np.linspace(-rho, rho, 2 * steps_per_rho + 1)
    if dim == 1:
        return t[:, None]
    if dim == 2:
        xs, ys = np.meshgrid(t, t, indexing="ij")
        pts = np.column_stack([xs.ravel(), ys.ravel()])
        return pts[np.einsum("ij,ij->i", pts, pts) <= rho * rho * (1 + 1e-12)]
    raise ContractError(f"landscape_probe supports 1-D and 2-D functions, got dim {dim}")


def _evaluate(f, pts: np.ndarray, dim: int) -> np.ndarray:
    vals = f(pts[:, 0]) if dim == 1 else f(pts)
    return np.broadcast_to(np.asarray(vals, dtype=float), (len(pts),))


def landscape_probe(f: Callable[[np.ndarray], np.ndarray], grid, rho_list: Sequence[float],
                    steps_per_rho: int = 1000, chunk: int = 1 << 20) -> list[dict]:
    """Rows ``{x[, y], rho, loss, perturbed_loss, gap, sigma}`` over ``grid``.

    ``f`` takes an array of points (shape (n,) for 1-D, (n, 2) for 2-D) and
    returns their values. ``perturbed_loss`` is the maximum over the rho-ball.
    """
    pts = np.asarray(grid, dtype=float)
    if pts.size == 0:
        raise ContractError("landscape_probe needs a nonempty grid")
    dim = 1 if pts.ndim == 1 else pts.shape[1]
    pts = pts.reshape(-1, dim)
    rows = []
    for rho in rho_list:
        if not rho > 0:
            raise ContractError(f"rho must be positive, got {rho}")
        off = ball_offsets(float(rho), dim, steps_per_rho)
        for p in pts:
            center = float(_evaluate(f, p[None, :], dim)[0])
            best = -np.inf
            for start in range(0, len(off), chunk):
                cand = p + off[start:start + chunk]
                best = max(best, float(np.max(_evaluate(f, cand, dim))))
            gap = best - center
            row = {"x": float(p[0])}
            if dim == 2:
                row["y"] = float(p[1])
            row.update(rho=float(rho), loss=center, perturbed_loss=best, gap=gap,
                       sigma=sigma_from_gap(gap, float(rho)))
            rows.append(row)
    return rows


def write_probe_csv(rows: list[dict], path) -> Path:
    """CSV with columns ``x[,y],loss,perturbed_loss,gap,sigma`` (plus ``rho``
    first when rows span several radii)."""
    path = Path(path)
    cols = ["x"] + (["y"] if rows and "y" in rows[0] else [])
    cols += ["loss", "perturbed_loss", "gap", "sigma"]
    if len({r["rho"] for r in rows}) > 1:
        cols = ["rho"] + cols
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in cols])
    return path
