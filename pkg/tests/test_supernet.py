import json
import math

import numpy as np
import pytest

from asgampq.autodiff import ParamSet, Tape, backward, constant, matmul, total
from asgampq.errors import ContractError, FormatError, ShapeError
from asgampq.optim import AsgaParams
from asgampq.quantization import QuantSpec, quantize
from asgampq.supernet import (BitCandidates, LayerChoice, MpqPolicy, SearchState, Supernet,
                              SupernetLayer, alternate_update, branch_probs, complexity_loss,
                              extract_policy, layer_comp, mixture_forward)
from oracles import param_fd, rel_err

TWO_FOUR = BitCandidates((2, 4), (2, 4))


def _layer(alpha=None, beta=None, shape=(2, 3), cands=TWO_FOUR, seed=0):
    w = np.random.default_rng(seed).normal(size=shape)
    layer = SupernetLayer("l0", w, cands)
    if alpha is not None:
        layer.alpha.values[...] = alpha
    if beta is not None:
        layer.beta.values[...] = beta
    return layer


def test_candidates_validation():
    for bad in [(), (1, 2), (4, 2), (2, 2)]:
        with pytest.raises(ContractError):
            BitCandidates(bad, (2,))


def test_branch_probs_examples():
    np.testing.assert_allclose(branch_probs([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(branch_probs([math.log(2), 0]), [2 / 3, 1 / 3], atol=1e-15)
    assert branch_probs([10, -10])[0] > 1 - 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_branch_probs_normalized_and_shift_invariant(seed):
    z = np.random.default_rng(seed).normal(scale=5, size=6)
    p = branch_probs(z)
    assert abs(p.sum() - 1) <= 1e-12
    np.testing.assert_allclose(branch_probs(z + 123.4), p, atol=1e-12)


def test_layer_comp():
    assert layer_comp((2, 3, 1, 1, 1, 1)) == 6
    assert layer_comp((1, 1, 1, 1, 1, 1)) == 1
    assert layer_comp((64, 128, 3, 3, 8, 8)) == 4_718_592
    with pytest.raises(ContractError):
        layer_comp((0, 1, 1, 1, 1, 1))
    with pytest.raises(ContractError):
        layer_comp((1, 1, 1))


def test_complexity_loss_uniform_is_54():
    layer = _layer()
    assert layer.comp == 6
    assert complexity_loss([layer]).item() == 54.0


def test_complexity_loss_one_hot_limit():
    layer = _layer(alpha=[10, -10], beta=[10, -10])
    assert abs(complexity_loss([layer]).item() - 24) < 1e-6


def test_complexity_loss_fixed_layer():
    layer = SupernetLayer("f", np.ones((3, 5)), TWO_FOUR, fixed_bits=(8, 8))
    assert complexity_loss([layer]).item() == 8 * 8 * 15


@pytest.mark.parametrize("seed", range(5))
def test_complexity_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    cands = BitCandidates((2, 3, 4, 6), (2, 3, 4, 6))
    layers = [_layer(rng.normal(size=4), rng.normal(size=4), shape=s, cands=cands, seed=seed)
              for s in [(3, 4), (4, 5)]]
    ps = ParamSet()
    for i, layer in enumerate(layers):
        ps.add(f"a{i}", layer.alpha)
        ps.add(f"b{i}", layer.beta)
    with Tape() as tape:
        out = complexity_loss(layers)
    backward(out, tape, ps)
    fd = param_fd(lambda: complexity_loss(layers).item(), ps)
    assert rel_err(ps.grad_vector(), fd) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_complexity_loss_bounds_and_monotone(seed):
    rng = np.random.default_rng(seed)
    cands = BitCandidates((2, 3, 4, 6), (2, 4, 8))
    layers = [_layer(rng.normal(size=4) * 3, rng.normal(size=3) * 3, shape=s, cands=cands)
              for s in [(3, 4), (4, 2)]]
    total_comp = sum(l.comp for l in layers)
    lc = complexity_loss(layers).item()
    assert 2 * 2 * total_comp <= lc <= 6 * 8 * total_comp
    layers[0].alpha.values[0, 3] += 1.0
    assert complexity_loss(layers).item() >= lc


def test_mixture_one_hot_equals_single_branch():
    x = np.random.default_rng(1).normal(size=(4, 2))
    layer = _layer(alpha=[-30, 30], beta=[-30, 30])
    out = mixture_forward(layer, constant(x)).values
    xq = quantize(x, QuantSpec(4, signed=False))
    ref = xq @ quantize(layer.weights.values, QuantSpec(4))
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_mixture_sixteen_bits_close_to_float():
    rng = np.random.default_rng(2)
    x = np.abs(rng.normal(size=(8, 5)))
    layer = _layer(shape=(5, 3), cands=BitCandidates((16,), (16,)))
    out = mixture_forward(layer, constant(x)).values
    ref = x @ layer.weights.values
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-3


def test_mixture_uniform_alpha_is_branch_average():
    x = np.abs(np.random.default_rng(3).normal(size=(4, 2)))
    layer = _layer(beta=[-40, 40])
    out = mixture_forward(layer, constant(x)).values
    xq = constant(quantize(x, QuantSpec(4, signed=False)))
    b2 = matmul(xq, constant(quantize(layer.weights.values, QuantSpec(2)))).values
    b4 = matmul(xq, constant(quantize(layer.weights.values, QuantSpec(4)))).values
    np.testing.assert_allclose(out, 0.5 * (b2 + b4), rtol=0, atol=1e-12)


def test_mixture_shape_error():
    with pytest.raises(ShapeError):
        mixture_forward(_layer(), constant(np.zeros((2, 3))))


def test_mixture_gradients_reach_everything():
    layer = _layer()
    x = np.abs(np.random.default_rng(0).normal(size=(3, 2)))
    ps = ParamSet([("w", layer.weights), ("a", layer.alpha), ("b", layer.beta)])
    with Tape() as tape:
        out = total(mixture_forward(layer, constant(x)))
    backward(out, tape, ps)
    for name, t in ps.items():
        assert np.any(t.grad != 0), name


def test_extract_policy_examples():
    layer = _layer(alpha=[0.1, 2.0])
    assert extract_policy([layer], 1e9).layers[0].w_bits == 4
    tie = _layer(alpha=[0.7, 0.7])
    assert extract_policy([tie], 1e9).layers[0].w_bits == 2
    shifted = _layer(alpha=[5.1, 7.0])
    assert extract_policy([shifted], 1e9).layers == extract_policy([layer], 1e9).layers


@pytest.mark.parametrize("seed", range(5))
def test_extract_policy_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    net = Supernet([4, 6, 6, 6, 3], rng=seed)
    for t in net.arch_params.tensors():
        t.values[...] = rng.normal(size=t.shape)
    before = net.policy(1e9)
    for t in net.arch_params.tensors():
        t.values[...] = np.exp(2 * t.values) - 3
    assert net.policy(1e9).layers == before.layers


def test_fixed_layers_keep_override():
    net = Supernet([4, 6, 6, 3], rng=0)
    for t in net.arch_params.tensors():
        t.values[...] = [[0, 0, 0, 50]]
    pol = net.policy(net.max_bops())
    assert (pol.layers[0].w_bits, pol.layers[0].a_bits) == (8, 8)
    assert (pol.layers[-1].w_bits, pol.layers[-1].a_bits) == (8, 8)
    assert (pol.layers[1].w_bits, pol.layers[1].a_bits) == (6, 6)
    assert pol.total_bops == pol.recompute_bops() == net.max_bops()
    assert pol.feasible


def test_policy_feasibility_flag():
    net = Supernet([4, 6, 3], rng=0, fix_first_last=False)
    pol = net.policy(1.0)
    assert not pol.feasible and pol.total_bops > 1.0


def test_policy_json_roundtrip(tmp_path):
    pol = MpqPolicy([LayerChoice("fc0", 8, 8, 64), LayerChoice("fc1", 3, 4, 4096)],
                    float(3 * 4 * 4096 + 64 * 64), 20000.5, True)
    again = MpqPolicy.from_json(pol.to_json())
    assert again == pol
    assert again.to_json() == pol.to_json()
    pol.save(tmp_path / "p.json")
    assert MpqPolicy.load(tmp_path / "p.json") == pol
    assert set(json.loads(pol.to_json())) == {"layers", "total_bops", "budget", "feasible"}


@pytest.mark.parametrize("text", ["{", "{}", '{"layers": [{"name": "a"}]}', "[]"])
def test_policy_malformed(text):
    with pytest.raises(FormatError):
        MpqPolicy.from_json(text)


def test_from_policy_checks_layers():
    pol = Supernet([4, 6, 3], rng=0).policy(1e9)
    with pytest.raises(ContractError):
        Supernet.from_policy([4, 6, 6, 3], pol)
    with pytest.raises(ContractError):
        Supernet.from_policy([4, 7, 3], pol)
    net = Supernet.from_policy([4, 6, 3], pol)
    assert len(net.arch_params) == 0


def _supernet_loss_fd(seed, lam):
    # the last layer's logits and bias sit downstream of every fake-quant, so the
    # objective is smooth in them; earlier logits feed a later quantizer
    rng = np.random.default_rng(seed)
    net = Supernet([5, 6, 6, 3], rng=seed, fix_first_last=False)
    for t in net.arch_params.tensors():
        t.values[...] = rng.normal(size=t.shape)
    X, y = rng.normal(size=(7, 5)), rng.integers(0, 3, 7)
    last = net.layers[-1]
    ps = ParamSet([("alpha", last.alpha), ("beta", last.beta), ("bias", last.bias)])
    with Tape() as tape:
        loss = net.arch_objective((X, y), lam)
    backward(loss, tape, ps)
    fd = param_fd(lambda: net.arch_objective((X, y), lam).item(), ps)
    return rel_err(ps.grad_vector(), fd)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("lam", [0.0, 1e-3])
def test_supernet_objective_gradient_matches_fd(seed, lam):
    assert _supernet_loss_fd(seed, lam) < 1e-5


def test_lambda_zero_gives_no_complexity_gradient():
    rng = np.random.default_rng(0)
    net = Supernet([4, 5, 3], rng=0, fix_first_last=False)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    net.arch_loss_and_grad((X, y), 0.0)
    g_task = net.arch_params.grad_vector().copy()
    ps = net.arch_params
    with Tape() as tape:
        lc = complexity_loss(net.layers)
    backward(lc, tape, ps)
    assert np.any(ps.grad_vector() != 0)
    net.arch_loss_and_grad((X, y), 0.0)
    np.testing.assert_array_equal(net.arch_params.grad_vector(), g_task)


def test_large_lambda_drives_minimum_bits():
    rng = np.random.default_rng(0)
    net = Supernet([4, 6, 3], rng=0, fix_first_last=False)
    X, y = rng.normal(size=(32, 4)), rng.integers(0, 3, 32)
    state = SearchState(net, "sgd", AsgaParams(lam=1e3, lr=0.01), arch_lr=0.01)
    for _ in range(200):
        alternate_update(state, (X, y), (X, y))
    pol = net.policy(1e9)
    assert all((c.w_bits, c.a_bits) == (2, 2) for c in pol.layers)
    assert state.theta_steps == state.arch_steps == 200


def test_frozen_arch_is_plain_qat():
    rng = np.random.default_rng(1)
    centers = np.array([[3.0, 0, 0, 0], [-3.0, 0, 0, 0], [0, 3.0, 0, 0]])
    y = rng.integers(0, 3, 96)
    X = centers[y] + 0.5 * rng.normal(size=(96, 4))
    net = Supernet([4, 8, 3], rng=1)
    arch_before = net.arch_params.vector().copy()
    state = SearchState(net, "sgd", AsgaParams(lr=0.05), update_arch=False)
    first = net.loss((X, y))
    for _ in range(100):
        alternate_update(state, (X, y), None)
    assert net.loss((X, y)) < first
    np.testing.assert_array_equal(net.arch_params.vector(), arch_before)
    assert state.arch_steps == 0


def test_alternate_update_rejects_empty():
    net = Supernet([4, 5, 3], rng=0)
    state = SearchState(net)
    empty = (np.zeros((0, 4)), np.zeros(0, dtype=int))
    ok = (np.ones((2, 4)), np.array([0, 1]))
    with pytest.raises(ContractError):
        alternate_update(state, empty, ok)
    with pytest.raises(ContractError):
        alternate_update(state, ok, empty)
