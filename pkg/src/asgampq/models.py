"""Models the optimizers and sharpness probes can drive.

A model exposes ``params`` (the weights an optimizer may perturb and update),
``loss(batch)`` and ``loss_and_grad(batch)``; the latter leaves
d(loss)/d(param) in each parameter's ``grad``. A batch is an ``(X, y)`` pair
for networks and is ignored by the analytic objectives.
"""
from __future__ import annotations

from typing import Callable, Protocol, Sequence

import numpy as np

from .autodiff import ParamSet, Tape, Tensor, add, backward, constant, matmul, relu, softmax_cross_entropy
from .errors import ContractError


class Model(Protocol):
    params: ParamSet

    def loss(self, batch) -> float: ...

    def loss_and_grad(self, batch) -> float: ...


def check_batch(batch) -> None:
    if batch is None:
        return
    X, y = batch
    if len(X) == 0 or len(y) == 0:
        raise ContractError("empty batch")
    if len(X) != len(y):
        raise ContractError(f"batch has {len(X)} inputs but {len(y)} labels")


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


class MLP:
    """Float multilayer perceptron with ReLU hidden layers."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | int = 0):
        if len(sizes) < 2:
            raise ContractError(f"an MLP needs at least input and output sizes, got {sizes}")
        rng = np.random.default_rng(rng)
        self.sizes = list(sizes)
        self.params = ParamSet()
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params.add(f"fc{i}.weight", Tensor(he_init(rng, fi, fo)))
            self.params.add(f"fc{i}.bias", Tensor(np.zeros((1, fo))))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X) -> Tensor:
        h = constant(X)
        for i in range(self.n_layers):
            h = add(matmul(h, self.params[f"fc{i}.weight"]), self.params[f"fc{i}.bias"])
            if i < self.n_layers - 1:
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

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X).values, axis=1)

    def accuracy(self, batch) -> float:
        X, y = batch
        return float(np.mean(self.predict(X) == np.asarray(y)))


class FunctionModel:
    """Objective given by plain callables ``f(theta)`` and ``grad(theta)``."""

    def __init__(self, f: Callable[[np.ndarray], float],
                 grad: Callable[[np.ndarray], np.ndarray], theta0):
        self.f = f
        self.grad = grad
        self.params = ParamSet([("theta", Tensor(np.atleast_1d(np.asarray(theta0, dtype=float))))])

    @property
    def theta(self) -> np.ndarray:
        return self.params.vector()

    def loss(self, batch=None) -> float:
        return float(self.f(self.theta))

    def loss_and_grad(self, batch=None) -> float:
        theta = self.theta
        t = self.params["theta"]
        t.grad[...] = np.asarray(self.grad(theta), dtype=float).reshape(t.shape)
        return float(self.f(theta))


class QuadraticModel(FunctionModel):
    """L(theta) = 1/2 theta^T A theta."""

    def __init__(self, A, theta0):
        self.A = np.asarray(A, dtype=float)
        super().__init__(lambda th: 0.5 * th @ self.A @ th, lambda th: self.A @ th, theta0)


def landscape_model(f: Callable[[np.ndarray], np.ndarray],
                    df: Callable[[np.ndarray], np.ndarray], x0) -> FunctionModel:
    """Wrap a vectorized scalar landscape ``f(x)`` and its derivative."""
    return FunctionModel(lambda th: float(np.sum(f(th))), df, x0)
