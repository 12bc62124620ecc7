"""Feed-forward networks and the AdamW optimizer on top of :mod:`cdesurv.tensor`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {
    "tanh": T.tanh,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "identity": lambda x: x,
}


class MLP:
    """Fully connected network with a fixed hidden activation.

    Weights are drawn from ``Uniform(-sqrt(1/fan_in), sqrt(1/fan_in))`` and
    biases start at zero.  ``out_activation`` is applied after the last layer
    and the result is multiplied by ``out_scale``.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        out_activation: str = "identity",
        out_scale: float = 1.0,
        name: str = "mlp",
    ):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.out_activation = out_activation
        self.out_scale = float(out_scale)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b{i}"))

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for w, b in zip(self.weights, self.biases):
            yield w.name, w
            yield b.name, b

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.linear(h, w, b)
            if i < last:
                h = act(h)
        h = _ACTIVATIONS[self.out_activation](h)
        if self.out_scale != 1.0:
            h = T.scale(h, self.out_scale)
        return h

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(np.atleast_2d(x))).data


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
