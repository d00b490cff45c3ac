"""Small module system on top of the tape ops."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from mprlab.errors import ConfigError
from mprlab.numcore import tensor as T
from mprlab.numcore.init import orthogonal_init, uniform_fan_in, zero_init
from mprlab.numcore.tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class Linear(Module):
    """``x @ W + b`` with W stored as (n_in, n_out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 init: str = "uniform", gain: float = 1.0):
        if init == "uniform":
            self.weight = uniform_fan_in(n_in, n_out, rng)
        elif init == "orthogonal":
            self.weight = orthogonal_init(n_in, n_out, gain, rng)
        elif init == "zeros":
            self.weight = zero_init((n_in, n_out))
        else:
            raise ConfigError(f"unknown init '{init}'")
        self.bias = zero_init((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = zero_init((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu, "tanh": T.tanh}


class MLP(Module):
    """Stack of Linear layers; optional LayerNorm after each hidden Linear.

    ``final_init``/``final_gain`` control the output layer separately, which
    is how the zero-delta predictor head and the small actor head are built.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", layernorm: bool = False,
                 init: str = "uniform", gain: float = 1.0,
                 final_init: str | None = None, final_gain: float | None = None):
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.act = activation
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            self.layers.append(Linear(
                a, b, rng,
                init=(final_init or init) if last else init,
                gain=(final_gain if final_gain is not None else gain) if last else gain,
            ))
        self.norms = [LayerNorm(s) for s in sizes[1:-1]] if layernorm else []

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.act]
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                if self.norms:
                    x = self.norms[i](x)
                x = act(x)
        return x


class EnsembleLinear(Module):
    """E independent Linear layers applied to an (E, B, n_in) stack in one batched matmul."""

    def __init__(self, n_members: int, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(np.stack([uniform_fan_in(n_in, n_out, rng).data
                                       for _ in range(n_members)]), requires_grad=True)
        self.bias = zero_init((n_members, 1, n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class EnsembleMLP(Module):
    """E same-shaped MLPs evaluated together; optional per-member LayerNorm."""

    def __init__(self, n_members: int, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", layernorm: bool = False):
        self.act = activation
        self.layers = [EnsembleLinear(n_members, a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.norms = []
        if layernorm:
            for s in sizes[1:-1]:
                ln = Module()
                ln.gamma = Tensor(np.ones((n_members, 1, s)), requires_grad=True)
                ln.beta = zero_init((n_members, 1, s))
                self.norms.append(ln)

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is (E, B, n_in); returns (E, B, n_out)."""
        act = _ACTIVATIONS[self.act]
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                if self.norms:
                    x = T.layernorm(x, self.norms[i].gamma, self.norms[i].beta)
                x = act(x)
        return x
