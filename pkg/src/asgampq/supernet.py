"""Differentiable mixed-precision supernet.

Each layer keeps one set of float master weights. Every candidate weight
bitwidth is a branch ``x_q @ Q(W, b_j)`` and the branches are mixed with
``softmax(alpha)``. The layer input is fake-quantized per activation
candidate and mixed with ``softmax(beta)``. The complexity loss is the
expected bit-operation count::

    L_comp = sum_l E_alpha[b_w] * E_beta[b_a] * comp_l
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import optim
from .autodiff import (ParamSet, Tape, Tensor, add, backward, constant, dot_const, matmul,
                       mix, mul, relu, scale, softmax, softmax_cross_entropy)
from .errors import ContractError, FormatError, ShapeError
from .models import check_batch, he_init
from .quantization import QuantSpec, fake_quant


@dataclass(frozen=True)
class BitCandidates:
    weight_bits: tuple[int, ...] = (2, 3, 4, 6)
    act_bits: tuple[int, ...] = (2, 3, 4, 6)

    def __post_init__(self):
        for label, bits in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
            bits = tuple(int(b) for b in bits)
            object.__setattr__(self, label, bits)
            if not bits:
                raise ContractError(f"{label} must be nonempty")
            if any(b < 2 for b in bits):
                raise ContractError(f"{label} entries must be >= 2, got {bits}")
            if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
                raise ContractError(f"{label} must be strictly increasing, got {bits}")


def branch_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).ravel()
    e = np.exp(z - z.max())
    return e / e.sum()


def layer_comp(dims: Sequence[int]) -> int:
    """Multiply-accumulate count c_in * c_out * k_a * k_b * h_out * w_out."""
    if len(dims) != 6:
        raise ContractError(f"cost dims need 6 entries, got {len(dims)}")
    if any(int(d) < 1 for d in dims):
        raise ContractError(f"cost dims must all be >= 1, got {tuple(dims)}")
    return math.prod(int(d) for d in dims)


class SupernetLayer:
    """Dense layer with bitwidth logits over weight and activation candidates."""

    def __init__(self, name: str, weights: np.ndarray, candidates: BitCandidates,
                 fixed_bits: tuple[int, int] | None = None, act_signed: bool = False,
                 bias: np.ndarray | None = None):
        weights = np.asarray(weights, dtype=np.float64)
        self.name = name
        self.candidates = candidates
        self.weights = Tensor(weights, requires_grad=True, name=f"{name}.weight")
        fo = weights.shape[1]
        self.bias = Tensor(np.zeros((1, fo)) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")
        self.alpha = Tensor(np.zeros(len(candidates.weight_bits)), requires_grad=True,
                            name=f"{name}.alpha")
        self.beta = Tensor(np.zeros(len(candidates.act_bits)), requires_grad=True,
                           name=f"{name}.beta")
        self.cost_dims = (weights.shape[0], weights.shape[1], 1, 1, 1, 1)
        self.fixed_bits = None if fixed_bits is None else (int(fixed_bits[0]), int(fixed_bits[1]))
        self.act_signed = act_signed

    @property
    def comp(self) -> int:
        return layer_comp(self.cost_dims)

    @property
    def searchable(self) -> bool:
        return self.fixed_bits is None

    def weight_specs(self) -> list[QuantSpec]:
        return [QuantSpec(b, signed=True) for b in self.candidates.weight_bits]

    def act_specs(self) -> list[QuantSpec]:
        return [QuantSpec(b, signed=self.act_signed) for b in self.candidates.act_bits]


def mixture_forward(layer: SupernetLayer, inputs: Tensor) -> Tensor:
    """Pre-activation output of one supernet layer."""
    if inputs.shape[1] != layer.weights.shape[0]:
        raise ShapeError(f"{layer.name}: input {inputs.shape} vs weights {layer.weights.shape}")
    if layer.fixed_bits is not None:
        wb, ab = layer.fixed_bits
        xq = fake_quant(inputs, QuantSpec(ab, signed=layer.act_signed))
        y = matmul(xq, fake_quant(layer.weights, QuantSpec(wb, signed=True)))
    else:
        pa = softmax(layer.beta)
        xq = mix(pa, [fake_quant(inputs, s) for s in layer.act_specs()])
        pw = softmax(layer.alpha)
        y = mix(pw, [matmul(xq, fake_quant(layer.weights, s)) for s in layer.weight_specs()])
    return add(y, layer.bias)


def complexity_loss(layers: Sequence[SupernetLayer]) -> Tensor:
    """Expected BOPs, differentiable in every searchable layer's alpha and beta."""
    out = constant(0.0)
    for layer in layers:
        if layer.fixed_bits is not None:
            wb, ab = layer.fixed_bits
            out = add(out, constant(float(wb * ab * layer.comp)))
            continue
        ew = dot_const(softmax(layer.alpha), layer.candidates.weight_bits)
        ea = dot_const(softmax(layer.beta), layer.candidates.act_bits)
        out = add(out, scale(mul(ew, ea), float(layer.comp)))
    return out


@dataclass
class LayerChoice:
    name: str
    w_bits: int
    a_bits: int
    comp: int


@dataclass
class MpqPolicy:
    layers: list[LayerChoice]
    total_bops: float
    budget: float
    feasible: bool

    def recompute_bops(self) -> float:
        return float(sum(c.w_bits * c.a_bits * c.comp for c in self.layers))

    def to_dict(self) -> dict:
        return {
            "layers": [{"name": c.name, "w_bits": c.w_bits, "a_bits": c.a_bits, "comp": c.comp}
                       for c in self.layers],
            "total_bops": self.total_bops,
            "budget": self.budget,
            "feasible": self.feasible,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MpqPolicy":
        try:
            layers = [LayerChoice(str(c["name"]), int(c["w_bits"]), int(c["a_bits"]), int(c["comp"]))
                      for c in d["layers"]]
            return cls(layers, float(d["total_bops"]), float(d["budget"]), bool(d["feasible"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed policy document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "MpqPolicy":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"policy is not valid JSON: {exc}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "MpqPolicy":
        return cls.from_json(Path(path).read_text())


def _argmax_smallest(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the smallest bitwidth on ties
    return int(np.argmax(np.asarray(logits).ravel()))


def extract_policy(layers: Sequence[SupernetLayer], budget: float) -> MpqPolicy:
    choices = []
    for layer in layers:
        if layer.fixed_bits is not None:
            wb, ab = layer.fixed_bits
        else:
            wb = layer.candidates.weight_bits[_argmax_smallest(layer.alpha.values)]
            ab = layer.candidates.act_bits[_argmax_smallest(layer.beta.values)]
        choices.append(LayerChoice(layer.name, int(wb), int(ab), layer.comp))
    total = float(sum(c.w_bits * c.a_bits * c.comp for c in choices))
    return MpqPolicy(choices, total, float(budget), total <= budget)


class Supernet:
    """MLP supernet; ``params`` are the float weights, ``arch_params`` the logits."""

    def __init__(self, sizes: Sequence[int], candidates: BitCandidates | None = None,
                 rng: np.random.Generator | int = 0, fix_first_last: bool = True,
                 fixed_bits: int = 8, layer_bits: Sequence[tuple[int, int] | None] | None = None):
        if len(sizes) < 2:
            raise ContractError(f"need at least input and output sizes, got {sizes}")
        rng = np.random.default_rng(rng)
        self.sizes = list(sizes)
        self.candidates = candidates or BitCandidates()
        n = len(sizes) - 1
        if layer_bits is None:
            layer_bits = [None] * n
            if fix_first_last:
                layer_bits[0] = layer_bits[-1] = (fixed_bits, fixed_bits)
        if len(layer_bits) != n:
            raise ContractError(f"{len(layer_bits)} bit overrides for {n} layers")
        self.layers = [
            SupernetLayer(f"fc{i}", he_init(rng, fi, fo), self.candidates,
                          fixed_bits=layer_bits[i], act_signed=(i == 0))
            for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.params = ParamSet()
        self.arch_params = ParamSet()
        for layer in self.layers:
            self.params.add(layer.weights.name, layer.weights)
            self.params.add(layer.bias.name, layer.bias)
            if layer.searchable:
                self.arch_params.add(layer.alpha.name, layer.alpha)
                self.arch_params.add(layer.beta.name, layer.beta)

    @classmethod
    def from_policy(cls, sizes: Sequence[int], policy: MpqPolicy,
                    rng: np.random.Generator | int = 0) -> "Supernet":
        """Fixed-bitwidth quantized network; no architecture parameters."""
        n = len(sizes) - 1
        if len(policy.layers) != n:
            raise ContractError(f"policy covers {len(policy.layers)} layers, model has {n}")
        for i, (c, fi, fo) in enumerate(zip(policy.layers, sizes[:-1], sizes[1:])):
            if c.comp != fi * fo:
                raise ContractError(f"policy layer {i} ({c.name}) has comp {c.comp}, "
                                    f"model layer is {fi}x{fo}")
        return cls(sizes, rng=rng, layer_bits=[(c.w_bits, c.a_bits) for c in policy.layers])

    @property
    def all_params(self) -> ParamSet:
        ps = ParamSet()
        for name, t in self.params.items():
            ps.add(name, t)
        for name, t in self.arch_params.items():
            ps.add(name, t)
        return ps

    def forward(self, X) -> Tensor:
        h = constant(X)
        for i, layer in enumerate(self.layers):
            h = mixture_forward(layer, h)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    def loss(self, batch) -> float:
        X, y = batch
        return softmax_cross_entropy(self.forward(X), y).item()

    def loss_and_grad(self, batch) -> float:
        check_batch(batch)
        X, y = batch
        with Tape() as tape:
            loss = softmax_cross_entropy(self.forward(X), y)
        backward(loss, tape, self.params)
        return loss.item()

    def arch_objective(self, batch, lam: float) -> Tensor:
        X, y = batch
        loss = softmax_cross_entropy(self.forward(X), y)
        if lam != 0.0:
            loss = add(loss, scale(complexity_loss(self.layers), lam))
        return loss

    def arch_loss_and_grad(self, batch, lam: float) -> float:
        """L + lam * L_comp on ``batch``; gradients land in ``arch_params``."""
        check_batch(batch)
        with Tape() as tape:
            loss = self.arch_objective(batch, lam)
        backward(loss, tape, self.arch_params)
        return loss.item()

    def complexity(self) -> float:
        return complexity_loss(self.layers).item()

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X).values, axis=1)

    def accuracy(self, batch) -> float:
        X, y = batch
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def policy(self, budget: float) -> MpqPolicy:
        return extract_policy(self.layers, budget)

    def max_bops(self) -> float:
        """BOPs with every searchable layer at its largest candidates."""
        total = 0
        for layer in self.layers:
            wb, ab = layer.fixed_bits or (max(self.candidates.weight_bits),
                                          max(self.candidates.act_bits))
            total += wb * ab * layer.comp
        return float(total)


@dataclass
class SearchState:
    """Mutable state of one bilevel search run."""

    model: Supernet
    method: str = "asga"
    asga: optim.AsgaParams = field(default_factory=optim.AsgaParams)
    arch_lr: float = 0.01
    update_arch: bool = True
    opt_state: optim.OptimizerState = field(default_factory=optim.OptimizerState)
    theta_steps: int = 0
    arch_steps: int = 0
    last_report: optim.StepReport | None = None
    last_arch_loss: float | None = None


def alternate_update(state: SearchState, weight_batch, arch_batch) -> SearchState:
    """One weight step on the train split, then one logit step on the val split."""
    check_batch(weight_batch)
    if state.update_arch:
        check_batch(arch_batch)
    state.last_report = optim.step(state.method, state.model, weight_batch, state.asga,
                                   state.opt_state)
    state.theta_steps += 1
    if state.update_arch and len(state.model.arch_params):
        loss = state.model.arch_loss_and_grad(arch_batch, state.asga.lam)
        if not np.isfinite(loss):
            raise optim.NumericError(f"non-finite architecture loss at arch step {state.arch_steps}")
        ap = state.model.arch_params
        ap.set_vector(ap.vector() - state.arch_lr * ap.grad_vector())
        state.last_arch_loss = loss
        state.arch_steps += 1
    return state
