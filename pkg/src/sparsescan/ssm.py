"""Selective state-space recurrence and its association-matrix form.

Shapes: a sequence batch is ``(..., L, D)``; per-position steps carry a state
of size S for every channel, i.e. ``(..., L, D, S)``.  There is no skip term:
the output is ``y_i = C_i h_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import Module, expand, linear, param


class SsmParams(Module):
    """Input-dependent projections for Δ, B, C plus the diagonal continuous A.

    A is stored as ``log(-A)`` so it stays negative; it starts at -(1..S) for
    every channel.
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator, dt_init: float = 0.05):
        self.d_model = d_model
        self.d_state = d_state
        scale = 0.1 / np.sqrt(d_model)
        self.w_delta = param(rng.normal(0.0, scale, (d_model, d_model)))
        self.b_delta = param(np.full(d_model, np.log(np.expm1(dt_init))))
        self.w_b = param(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_state)))
        self.w_c = param(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_state)))
        self.a_log = param(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1))))

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log.data)


@dataclass
class Steps:
    """Discretized per-position parameters (Ā, B̄, C)."""

    decay: dc.Tensor     # Ā, (..., L, D, S)
    drive: dc.Tensor     # B̄, (..., L, D, S)
    readout: dc.Tensor   # C, (..., L, S)

    def numpy(self):
        return self.decay.data, self.drive.data, self.readout.data


def discretize(params: SsmParams, x, pad=None) -> Steps:
    """Ā = exp(Δ A), B̄ = Δ B, with Δ = softplus(x W + b).

    Rows flagged in ``pad`` get Δ = 0, i.e. Ā = 1 and B̄ = 0: they pass the
    state through untouched.
    """
    x = dc.tensor(x)
    lead = x.shape[:-1]
    S = params.d_state
    delta = dc.softplus(linear(x, params.w_delta, params.b_delta))
    if pad is not None:
        keep = 1.0 - np.asarray(pad, dtype=np.float64)
        delta = delta * np.broadcast_to(keep[..., None], delta.shape)
    full = lead + (params.d_model, S)
    delta_s = expand(delta, full, (-1,))
    a = expand(dc.neg(dc.exp(params.a_log)), full, tuple(range(len(lead))))
    decay = dc.exp(delta_s * a)
    b = linear(x, params.w_b)
    c = linear(x, params.w_c)
    drive = delta_s * expand(b, full, (-2,))
    return Steps(decay, drive, c)


def scan_states(x, steps: Steps) -> dc.Tensor:
    """h_i = Ā_i h_{i-1} + B̄_i x_i with h_0 = 0, shape ``(..., L, D, S)``."""
    x = dc.tensor(x)
    u = steps.drive * expand(x, steps.drive.shape, (-1,))
    return dc.linear_recurrence(steps.decay, u, axis=x.ndim - 2)


def readout(h, c) -> dc.Tensor:
    """y_i = C_i · h_i contracted over the state axis."""
    return dc.sum(h * expand(c, h.shape, (-2,)), axis=-1)


def scan(x, steps: Steps) -> dc.Tensor:
    return readout(scan_states(x, steps), steps.readout)


def association_matrix(steps, channel: int = 0) -> np.ndarray:
    """Closed form M_ij = C_i · (prod_{t=j+1..i} Ā_t) B̄_j for j <= i, else 0.

    ``steps`` is a :class:`Steps` for one sequence or a tuple of arrays
    ``(decay (L, D, S), drive (L, D, S), readout (L, S))``.
    """
    decay, drive, c = steps.numpy() if isinstance(steps, Steps) else steps
    a = np.asarray(decay)[:, channel]
    b = np.asarray(drive)[:, channel]
    c = np.asarray(c)
    n = len(a)
    M = np.zeros((n, n))
    for j in range(n):
        carry = b[j].copy()
        for i in range(j, n):
            if i > j:
                carry = carry * a[i]
            M[i, j] = c[i] @ carry
    return M
