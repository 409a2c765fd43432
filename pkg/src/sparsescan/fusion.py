"""Semantic-assisted and state-spatial fusion of SSM state variables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import MLP, Module, expand, linear, param
from .ssm import SsmParams, discretize, readout, scan_states
from .voxel import neighbor_table

AXES = np.eye(3, dtype=np.int64)


class SemanticHead(MLP):
    """Per-token class logits; class 0 is background."""

    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator, hidden: int = 16):
        super().__init__(d_model, hidden, n_classes, rng)
        self.n_classes = n_classes


def predict_semantics(x, head: SemanticHead):
    """Returns ``(ids, logits)``; argmax ties resolve to the lowest class id."""
    logits = head(x)
    return np.argmax(logits.data, axis=-1), logits


def semantic_order(ids) -> np.ndarray:
    """Stable sort of positions by class id (original order kept inside a class)."""
    return np.argsort(np.asarray(ids), axis=-1, kind="stable")


def semantic_rearrange(h, ids):
    perm = semantic_order(ids)
    return dc.gather(h, perm), perm


def reverse_rearrange(h_sorted, perm):
    return dc.gather(h_sorted, np.argsort(perm))


def semantic_neighbors(ids, half_width: int, per_group: bool = False) -> np.ndarray:
    """Original index of the k-th neighbour in the class-sorted sequence.

    Returns ``(L, 2K+1)`` with -1 where the offset falls off the sequence (or,
    with ``per_group``, into a different class).
    """
    ids = np.asarray(ids)
    perm = semantic_order(ids)
    pos = np.argsort(perm)
    n = len(ids)
    table = np.full((n, 2 * half_width + 1), -1, dtype=np.int64)
    for t, k in enumerate(range(-half_width, half_width + 1)):
        q = pos + k
        ok = (q >= 0) & (q < n)
        nbr = np.where(ok, perm[np.clip(q, 0, n - 1)], -1)
        if per_group:
            ok &= ids[np.clip(nbr, 0, n - 1)] == ids
        table[:, t] = np.where(ok, nbr, -1)
    return table


def saf(h, ids, alpha, per_group: bool = False):
    """Rearrange states by class, convolve along the sorted axis, restore order.

    ``h`` is ``(L, D, S)`` or a patch batch ``(M, L, D, S)`` with ``ids`` of the
    matching leading shape; ``alpha`` is ``(2K+1, D)``, shared over the state
    axis.  Zero padding at the ends of each (patch) sequence.  With
    ``per_group`` the kernel never reaches across a class boundary.
    """
    h = dc.tensor(h)
    ids = np.asarray(ids)
    batched = h.ndim == 4
    if not batched:
        h = dc.reshape(h, (1,) + h.shape)
        ids = ids[None]
    M, L, D, S = h.shape
    taps = alpha.shape[0]
    w = expand(alpha, (taps, D, S), (-1,))
    perm = semantic_order(ids)
    flat_perm = (perm + (np.arange(M) * L)[:, None]).reshape(-1)
    flat = dc.reshape(h, (M * L, D, S))
    arranged = dc.gather(flat, flat_perm)
    if per_group:
        base = dc.conv_table(L, taps)
        sorted_ids = np.take_along_axis(ids, perm, axis=1)
        tables = []
        for m in range(M):
            own = sorted_ids[m][np.clip(base, 0, L - 1)] == sorted_ids[m][:, None]
            tables.append(np.where((base >= 0) & own, base + m * L, -1))
        mixed = dc.index_conv(arranged, w, np.concatenate(tables))
    else:
        mixed = dc.reshape(dc.conv1d(dc.reshape(arranged, (M, L, D, S)), w, axis=1), (M * L, D, S))
    out = dc.reshape(dc.gather(mixed, np.argsort(flat_perm)), (M, L, D, S))
    return out if batched else dc.reshape(out, (L, D, S))


def transfer_matrix(decay, drive) -> np.ndarray:
    """G[m, j] = (prod_{t=j+1..m} Ā_t) ⊙ B̄_j for j <= m, zero otherwise; ``(L, L, S)``."""
    n, s = drive.shape
    G = np.zeros((n, n, s))
    for j in range(n):
        carry = drive[j].copy()
        G[j, j] = carry
        for m in range(j + 1, n):
            carry = carry * decay[m]
            G[m, j] = carry
    return G


def saf_association(steps, ids, alpha, channel: int = 0, per_group: bool = False) -> np.ndarray:
    """M'_ij = sum_k alpha_k C_i · Ā^x_{j:N_k(i)} B̄_j over neighbours with N_k(i) >= j.

    ``alpha`` is the kernel for this channel, length 2K+1.  With K = 0 and
    alpha = [1] this is the plain lower-triangular association matrix.
    """
    decay, drive, c = steps.numpy() if hasattr(steps, "numpy") else steps
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    K = len(alpha) // 2
    G = transfer_matrix(np.asarray(decay)[:, channel], np.asarray(drive)[:, channel])
    nbrs = semantic_neighbors(ids, K, per_group)
    n = len(nbrs)
    Mp = np.zeros((n, n))
    for i in range(n):
        for t, a_k in enumerate(alpha):
            m = nbrs[i, t]
            if m >= 0:
                Mp[i] += a_k * (G[m] @ c[i])
    return Mp


def association_label(coords, classes, sigma: float = 3.0) -> np.ndarray:
    """Gaussian-in-distance affinity between same-class voxels."""
    coords = np.asarray(coords, dtype=np.float64)
    classes = np.asarray(classes)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * sigma ** 2)) * (classes[:, None] == classes[None, :])


def association_similarity(M, coords, classes, sigma: float = 3.0) -> float:
    """Cosine similarity between |M| and the Gaussian same-class label, in [0, 1]."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a = np.abs(np.asarray(M, dtype=np.float64)).ravel()
    b = association_label(coords, classes, sigma).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def ssf(h, coords, weights, valid=None, group=None):
    """Scatter states to their voxels, convolve along X, Y, Z in turn, gather back.

    ``h`` is ``(R, D, ...)``; ``weights`` is three ``(T, D)`` kernels.  Empty
    cells contribute zero and intermediate results live only on occupied cells.
    Rows with ``valid`` False (tokens, padding) have no position and pass
    through unchanged.  ``group`` keeps separate sequences (patches) apart.
    """
    h = dc.tensor(h)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    R = h.shape[0]
    valid = np.ones(R, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    gkey = np.zeros(R, dtype=np.int64) if group is None else np.asarray(group, dtype=np.int64).reshape(-1)
    keyed = np.concatenate([gkey[valid, None], coords[valid]], axis=1)
    if len(np.unique(keyed, axis=0)) != len(keyed):
        raise ValueError("ssf: duplicate voxel coordinates in one sequence")
    out = h
    for axis, w in enumerate(weights):
        taps = w.shape[0]
        half = taps // 2
        offsets = np.outer(np.arange(-half, taps - half), AXES[axis])
        table = neighbor_table(coords, offsets, group=gkey, valid=valid)
        out = dc.index_conv(out, expand(w, (taps,) + h.shape[1:], tuple(range(2, h.ndim))), table)
    if not valid.all():
        keep = np.broadcast_to(valid.reshape((R,) + (1,) * (h.ndim - 1)), h.shape).astype(np.float64)
        out = out * keep + h * (1.0 - keep)
    return out


@dataclass
class BlockOutput:
    y: dc.Tensor
    logits: dc.Tensor
    ids: np.ndarray


def rms_normalize(x, eps: float = 1e-6):
    """Scale each row of ``x`` to unit root-mean-square (no learned gain)."""
    d = x.shape[-1]
    ms = dc.sum(x * x, axis=-1, keepdims=True) * (1.0 / d)
    return x / dc.broadcast_to(dc.power(ms + eps, 0.5), x.shape)


class SasfBlock(Module):
    """SSM states -> SAF -> SSF -> readout C, times a sigmoid gate on x.

    With ``norm`` the branch sees RMS-normalized input; with ``residual`` the
    block returns ``x + branch``.  Both off gives the bare fused SSM.
    """

    def __init__(self, d_model: int, d_state: int, n_classes: int, rng: np.random.Generator,
                 saf_half_width: int = 3, ssf_taps: int = 9, gate: bool = True, per_group: bool = False,
                 norm: bool = True, residual: bool = True):
        self.ssm = SsmParams(d_model, d_state, rng)
        self.head = SemanticHead(d_model, n_classes, rng)
        alpha = rng.normal(0.0, 0.02, (2 * saf_half_width + 1, d_model))
        alpha[saf_half_width] = 1.0
        self.saf_alpha = param(alpha)
        kernels = []
        for _ in range(3):
            k = np.zeros((ssf_taps, d_model))
            k[ssf_taps // 2] = 1.0
            kernels.append(param(k))
        self.ssf_weights = kernels
        self.gate_w = param(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model))) if gate else None
        self.gate_b = param(np.zeros(d_model)) if gate else None
        self.per_group = per_group
        self.norm = norm
        self.residual = residual

    def __call__(self, x, coords=None, coord_valid=None, pad=None, nonvoxel=None) -> BlockOutput:
        """Encode ``(L, D)`` or a patch batch ``(M, L, D)``.

        ``pad`` rows are zeroed and skipped by the scan.  ``nonvoxel`` rows
        (padding, tokens; defaults to ``pad``) get the fixed class id
        ``n_classes``, which sorts after every real class in SAF.
        """
        x = dc.tensor(x)
        single = x.ndim == 2
        if single:
            x = dc.reshape(x, (1,) + x.shape)
            coords = None if coords is None else np.asarray(coords)[None]
            coord_valid = None if coord_valid is None else np.asarray(coord_valid)[None]
            pad = None if pad is None else np.asarray(pad)[None]
            nonvoxel = None if nonvoxel is None else np.asarray(nonvoxel)[None]
        M, L, D = x.shape
        if nonvoxel is None:
            nonvoxel = pad
        if pad is not None:
            keep = 1.0 - np.asarray(pad, dtype=np.float64)
            x = x * np.broadcast_to(keep[..., None], x.shape)
        skip = x
        if self.norm:
            x = rms_normalize(x)
        ids, logits = predict_semantics(x, self.head)
        if nonvoxel is not None:
            ids = np.where(np.asarray(nonvoxel, bool), self.head.n_classes, ids)
        steps = discretize(self.ssm, x, pad)
        h = scan_states(x, steps)
        h = saf(h, ids, self.saf_alpha, self.per_group)
        if coords is not None:
            S = h.shape[-1]
            valid = np.ones((M, L), bool) if coord_valid is None else np.asarray(coord_valid, bool)
            group = np.repeat(np.arange(M), L)
            flat = ssf(dc.reshape(h, (M * L, D, S)), np.asarray(coords).reshape(-1, 3),
                       self.ssf_weights, valid.reshape(-1), group)
            h = dc.reshape(flat, (M, L, D, S))
        y = readout(h, steps.readout)
        if self.gate_w is not None:
            y = y * dc.sigmoid(linear(x, self.gate_w, self.gate_b))
        if self.residual:
            y = skip + y
        if single:
            y = dc.reshape(y, (L, D))
            logits = dc.reshape(logits, (L, logits.shape[-1]))
            ids = ids[0]
        return BlockOutput(y, logits, ids)
