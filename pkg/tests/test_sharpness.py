import numpy as np
import pytest

from asgampq.errors import ContractError, NumericError
from asgampq.models import MLP, FunctionModel, QuadraticModel
from asgampq.sharpness import (LANDSCAPES, PerturbParams, SharpnessReport, ascent_direction,
                               ball_offsets, get_landscape, hessian_eig_power, landscape_probe,
                               perturbed_loss, sharpness_report, sigma_from_gap, surrogate_gap,
                               two_minima, write_probe_csv)

DIAG = np.diag([1.0, 10.0])


def random_spd(seed, n=5):
    b = np.random.default_rng(seed).normal(size=(n, n))
    return b @ b.T / n + 0.1 * np.eye(n)


def test_perturb_params_validation():
    for bad in (dict(rho=0), dict(rho=-1), dict(rho=0.1, grad_norm_tol=0),
                dict(rho=0.1, noise_scale=0)):
        with pytest.raises(ContractError):
            PerturbParams(**bad)


def test_ascent_direction():
    p = PerturbParams(0.1)
    np.testing.assert_allclose(ascent_direction(np.array([3.0, 4.0]), p), [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(ascent_direction(np.array([30.0, 40.0]), p),
                               ascent_direction(np.array([3.0, 4.0]), p), atol=1e-15)
    d1 = ascent_direction(np.zeros(2), p, np.random.default_rng(4))
    d2 = ascent_direction(np.zeros(2), p, np.random.default_rng(4))
    assert abs(np.linalg.norm(d1) - 1) < 1e-12
    np.testing.assert_array_equal(d1, d2)


def test_perturbed_loss_quadratic():
    model = QuadraticModel(DIAG, [1.0, 0.0])
    loss, lp = perturbed_loss(model, None, PerturbParams(0.1))
    assert loss == 0.5
    assert lp == pytest.approx(0.605, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_perturbed_loss_small_rho_taylor(seed):
    rng = np.random.default_rng(seed)
    net = MLP([5, 8, 3], rng=seed)
    batch = rng.normal(size=(10, 5)), rng.integers(0, 3, 10)
    rho = 1e-6
    loss, lp = perturbed_loss(net, batch, PerturbParams(rho))
    gn = net.params.grad_norm()
    assert abs(lp - loss) <= rho * gn + 1e-10


def test_perturbed_loss_restores_bytes():
    rng = np.random.default_rng(0)
    net = MLP([4, 6, 3], rng=0)
    batch = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    before = net.params.digest()
    perturbed_loss(net, batch, PerturbParams(0.3))
    assert net.params.digest() == before


def test_perturbed_loss_nonfinite():
    model = FunctionModel(lambda th: np.inf if th[0] > 0.5 else 0.0, lambda th: np.ones(1), [0.0])
    with pytest.raises(NumericError):
        perturbed_loss(model, None, PerturbParams(1.0))
    assert model.theta[0] == 0.0


def test_gap_and_sigma():
    assert surrogate_gap(1.00, 1.02) == pytest.approx(0.02)
    assert sigma_from_gap(0.02, 0.1) == pytest.approx(4.0)
    assert surrogate_gap(0.7, 0.7) == 0.0 and sigma_from_gap(0.0, 0.1) == 0.0
    with pytest.raises(ContractError):
        sigma_from_gap(0.1, 0.0)


def test_sigma_at_minimum_along_eigvector():
    model = QuadraticModel(DIAG, [0.0, 0.0])
    rep = sharpness_report(model, None, 0.1, power_iters=50, at_eigvector=True)
    assert abs(rep.sigma_gap - 10) < 1e-3
    assert abs(rep.sigma_power - 10) < 1e-3


def test_power_iteration_examples():
    lam, _ = hessian_eig_power(QuadraticModel(DIAG, [0.3, -0.2]), None, iters=50)
    assert abs(lam - 10) < 1e-3
    for seed in range(3):
        v0 = np.random.default_rng(seed).normal(size=4)
        lam, _ = hessian_eig_power(QuadraticModel(np.eye(4), np.zeros(4)), None, iters=5, v0=v0)
        assert abs(lam - 1) < 1e-6
    with pytest.raises(ContractError):
        hessian_eig_power(QuadraticModel(DIAG, [0.0, 0.0]), None, iters=0)


@pytest.mark.parametrize("seed", range(5))
def test_power_iteration_matches_eigensolve(seed):
    A = random_spd(seed)
    lam, v = hessian_eig_power(QuadraticModel(A, np.zeros(5)), None, iters=300, seed=seed)
    exact = np.linalg.eigvalsh(A)[-1]
    assert abs(lam - exact) < 1e-3
    model = QuadraticModel(A, np.zeros(5))
    rep = sharpness_report(model, None, 0.1, power_iters=300, seed=seed, at_eigvector=True)
    assert abs(rep.sigma_gap - exact) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_convex_gap_nonnegative_and_random_direction_bounded(seed):
    A = random_spd(seed)
    rng = np.random.default_rng(seed)
    model = QuadraticModel(A, rng.normal(size=5))
    rep = sharpness_report(model, None, 0.2)
    assert rep.gap >= 0
    at_min = QuadraticModel(A, np.zeros(5))
    loss, lp = perturbed_loss(at_min, None, PerturbParams(0.2), direction=rng.normal(size=5))
    assert sigma_from_gap(lp - loss, 0.2) <= np.linalg.eigvalsh(A)[-1] + 1e-6


def test_report_consistency():
    rng = np.random.default_rng(2)
    net = MLP([4, 6, 3], rng=2)
    batch = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    rep = sharpness_report(net, batch, 0.05, power_iters=3)
    assert rep.gap == pytest.approx(rep.perturbed_loss - rep.loss, abs=1e-12)
    assert rep.sigma_gap == pytest.approx(2 * rep.gap / 0.05 ** 2, abs=1e-12)
    assert rep.sigma_power is not None
    assert set(rep.to_dict()) == {"rho", "loss", "perturbed_loss", "gap", "sigma_gap",
                                  "sigma_power"}
    assert isinstance(rep, SharpnessReport)


def test_probe_parabola():
    rows = landscape_probe(LANDSCAPES["parabola"].f, [0.0], [0.1])
    assert rows[0]["gap"] == pytest.approx(0.01, abs=1e-12)
    assert rows[0]["sigma"] == pytest.approx(2.0, abs=1e-9)


def test_probe_constant_is_flat():
    ls = get_landscape("constant")
    rows = landscape_probe(ls.f, ls.default_grid(), [0.05, 0.2])
    assert all(r["gap"] == 0.0 for r in rows)


def test_probe_two_dimensional():
    ls = get_landscape("bowl2d")
    rows = landscape_probe(ls.f, np.array([[0.0, 0.0]]), [0.1], steps_per_rho=200)
    # max of 0.5 (x^2 + 10 y^2) on the 0.1-ball is along y
    assert rows[0]["perturbed_loss"] == pytest.approx(0.05, rel=1e-9)
    assert rows[0]["y"] == 0.0


def test_probe_dominates_first_order_on_convex():
    ls = get_landscape("parabola")
    for r in landscape_probe(ls.f, ls.default_grid(), [0.1]):
        x = r["x"]
        first_order = ls.f(x + 0.1 * np.sign(2 * x)) if x != 0 else r["loss"]
        assert r["perturbed_loss"] >= first_order - 1e-9


@pytest.mark.parametrize("rho", np.linspace(0.05, 0.3, 6))
def test_two_minima_sharp_gap_exceeds_flat(rho):
    rows = landscape_probe(two_minima, [-2.0, 2.0], [rho])
    assert rows[0]["gap"] > rows[1]["gap"]


def test_ball_offsets_resolution():
    off = ball_offsets(0.1, 1)
    assert np.max(np.diff(off[:, 0])) <= 0.1 / 1000 + 1e-15
    assert off[0, 0] == -0.1 and off[-1, 0] == 0.1
    with pytest.raises(ContractError):
        ball_offsets(0.1, 3)


def test_probe_requires_grid_and_positive_rho():
    with pytest.raises(ContractError):
        landscape_probe(two_minima, [], [0.1])
    with pytest.raises(ContractError):
        landscape_probe(two_minima, [0.0], [0.0])
    with pytest.raises(ContractError):
        get_landscape("nope")


def test_probe_csv_header(tmp_path):
    rows = landscape_probe(two_minima, [0.0, 1.0], [0.1])
    text = write_probe_csv(rows, tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "x,loss,perturbed_loss,gap,sigma"
    assert len(text) == 3
    multi = landscape_probe(two_minima, [0.0], [0.1, 0.2])
    assert write_probe_csv(multi, tmp_path / "m.csv").read_text().startswith("rho,x,")
