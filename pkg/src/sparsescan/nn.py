"""Parameter containers and small layers on top of diffcore."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc


class Module:
    """Collects parameter Tensors and child modules in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, dc.Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, dc.Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[dc.Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(value) -> dc.Tensor:
    return dc.Tensor(value, requires_grad=True)


def expand(t, shape, axes):
    """Insert singleton ``axes`` into ``t`` and broadcast it to ``shape``."""
    t = dc.tensor(t)
    reshaped = list(t.shape)
    for ax in sorted(a % len(shape) for a in axes):
        reshaped.insert(ax, 1)
    return dc.broadcast_to(dc.reshape(t, reshaped), shape)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of an arbitrary-rank ``x``."""
    x = dc.tensor(x)
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else dc.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = flat @ weight
    if bias is not None:
        out = out + expand(bias, out.shape, (0,))
    return out if x.ndim == 2 else dc.reshape(out, lead + (weight.shape[1],))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float = 1.0):
        self.weight = param(rng.normal(0.0, scale / np.sqrt(d_in), (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, out_scale: float = 1.0):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, scale=out_scale)

    def __call__(self, x):
        return self.fc2(dc.relu(self.fc1(x)))


class SGD:
    """Gradient descent with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = np.sqrt(np.sum([np.sum(g * g) for g in grads]))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
