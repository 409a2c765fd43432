"""Central finite-difference checks of tape gradients along random directions."""
from __future__ import annotations

import math

import numpy as np

from sparsescan import diffcore as dc
from sparsescan.backbone import StageConfig, StageParams, encode_stage, score_foreground
from sparsescan.fusion import SasfBlock, saf, ssf
from sparsescan.loss import binary_probs, focal_loss, FocalConfig, head_losses, smooth_l1
from sparsescan.nn import MLP, Linear
from sparsescan.rgsw import rgsw_encode
from sparsescan.ssm import SsmParams, discretize, scan
from sparsescan.voxel import Grid, VoxelSet, downsample

STEP = 1e-4
REL_TOL = 1e-3


def directional_error(loss_fn, params, rng, step=STEP):
    """Relative error between the tape's directional derivative and a central difference."""
    for p in params:
        p.grad = None
    with dc.Tape() as tape:
        out = loss_fn()
    dc.backward(out, tape)
    dirs = [rng.normal(size=p.shape) for p in params]
    analytic = sum(float(np.sum((np.zeros(p.shape) if p.grad is None else p.grad) * v))
                   for p, v in zip(params, dirs))
    base = [p.data.copy() for p in params]
    values = []
    with dc.no_grad():
        for sign in (1.0, -1.0):
            for p, b, v in zip(params, base, dirs):
                p.data = b + sign * step * v
            values.append(loss_fn().item())
    for p, b in zip(params, base):
        p.data = b
    numeric = (values[0] - values[1]) / (2 * step)
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale < 1e-9 else abs(analytic - numeric) / scale


def _readout(rng, shape):
    w = rng.normal(size=shape)
    return lambda t: dc.sum(t * w)


def _voxels(rng, n, res=(8, 8, 4), d=3):
    flat = rng.choice(int(np.prod(res)), n, replace=False)
    coords = np.stack(np.unravel_index(flat, res), 1)
    return VoxelSet(coords, rng.normal(size=(n, d)), Grid(res))


def probe_primitives(rng):
    a = dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = dc.Tensor(rng.uniform(0.5, 1.5, (4, 3)), requires_grad=True)
    w = rng.normal(size=(4, 3))

    def f():
        y = dc.exp(a) * b + dc.log(b) - dc.sigmoid(a) / b + dc.softplus(a * 2.0)
        y = y + dc.power(b, 1.5) + dc.softmax(a, axis=1) * dc.broadcast_to(dc.cosine_similarity(a, b, axis=1).reshape(4, 1), (4, 3))
        return dc.sum(y * w)
    return f, [a, b]


def probe_structural(rng):
    a = dc.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    m = dc.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    idx = np.array([3, -1, 0, 5, 5])
    read = _readout(rng, (10, 6))

    def f():
        g = dc.gather(a, idx) @ m
        s = dc.scatter(g, np.array([0, 2, 2, 1, 0]), 3)
        t = dc.transpose(dc.concat([s, dc.broadcast_to(a[0:1, 0:1], (3, 5))], axis=0), (1, 0))
        return read(dc.reshape(dc.concat([t, t * t], axis=1), (10, 6)))
    return f, [a, m]


def probe_conv(rng):
    a = dc.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    w = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    read = _readout(rng, (7, 3))
    return (lambda: read(dc.conv1d(a, w, axis=0))), [a, w]


def probe_recurrence(rng):
    d = dc.Tensor(rng.uniform(0.2, 0.95, (9, 2, 3)), requires_grad=True)
    u = dc.Tensor(rng.normal(size=(9, 2, 3)), requires_grad=True)
    read = _readout(rng, (9, 2, 3))
    return (lambda: read(dc.linear_recurrence(d, u, axis=0))), [d, u]


def probe_mlp(rng):
    mlp = MLP(4, 6, 3, rng)
    lin = Linear(3, 2, rng)
    x = dc.Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    read = _readout(rng, (2, 5, 2))
    return (lambda: read(lin(mlp(x)))), [x] + mlp.parameters() + lin.parameters()


def probe_scan(rng):
    p = SsmParams(4, 3, rng)
    x = dc.Tensor(rng.normal(size=(10, 4)), requires_grad=True)
    pad = np.zeros(10, bool)
    pad[-2:] = True
    read = _readout(rng, (10, 4))
    return (lambda: read(scan(x, discretize(p, x, pad)))), [x] + p.parameters()


def probe_saf(rng):
    h = dc.Tensor(rng.normal(size=(2, 8, 3, 2)), requires_grad=True)
    alpha = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ids = rng.integers(0, 3, (2, 8))
    per_group = bool(rng.integers(0, 2))
    read = _readout(rng, (2, 8, 3, 2))
    return (lambda: read(saf(h, ids, alpha, per_group))), [h, alpha]


def probe_ssf(rng):
    vox = _voxels(rng, 12, res=(4, 4, 3))
    h = dc.Tensor(rng.normal(size=(12, 3, 2)), requires_grad=True)
    ws = [dc.Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(3)]
    valid = rng.random(12) > 0.2
    read = _readout(rng, (12, 3, 2))
    return (lambda: read(ssf(h, vox.coords, ws, valid))), [h] + ws


def probe_block(rng):
    block = SasfBlock(4, 2, 3, rng, saf_half_width=1, ssf_taps=3)
    vox = _voxels(rng, 10, res=(4, 4, 4), d=4)
    x = dc.Tensor(vox.feats.data, requires_grad=True)
    read = _readout(rng, (10, 4))
    return (lambda: read(block(x, vox.coords).y)), [x] + block.parameters()


def probe_rgsw(rng):
    block = SasfBlock(4, 2, 3, rng, saf_half_width=1, ssf_taps=3)
    token = dc.Tensor(rng.normal(size=4) * 0.5, requires_grad=True)
    vox = _voxels(rng, 14, res=(4, 4, 4), d=4)
    x = dc.Tensor(vox.feats.data, requires_grad=True)
    read = _readout(rng, (14, 4))
    return (lambda: read(rgsw_encode(x, block, 3, 2, token, vox.coords)[0])), [x, token] + block.parameters()


def probe_stage(rng):
    cfg = StageConfig(alpha=0.5, d_model=4, d_state=2, saf_half_width=1, ssf_taps=3, patch_len=4)
    params = StageParams(cfg, 3, rng, scorer_hidden=4)
    # Sim(x, T')·T' has no derivative at T' = 0, so probe away from the zero init
    params.token.data = rng.normal(size=4) * 0.5
    vox = _voxels(rng, 16, res=(8, 8, 4), d=4)
    feats = dc.Tensor(vox.feats.data, requires_grad=True)
    vox = vox.with_feats(feats)
    read = _readout(rng, (16, 4))

    def f():
        out = encode_stage(vox, cfg, params)
        labels = (np.arange(16) % 2)
        return read(out.vox.feats) + focal_loss(binary_probs(out.scores), labels) + dc.sum(out.logits * 0.1)
    return f, [feats] + params.parameters()


def probe_scoring_downsample(rng):
    vox = _voxels(rng, 15, d=3)
    feats = dc.Tensor(vox.feats.data, requires_grad=True)
    scorer = MLP(6, 5, 1, rng)
    w = dc.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = dc.Tensor(rng.normal(size=2), requires_grad=True)

    def f():
        v = vox.with_feats(feats)
        s = score_foreground(v, scorer)
        down, _ = downsample(v, w, b)
        return dc.sum(s * s) + dc.sum(down.feats * down.feats)
    return f, [feats, w, b] + scorer.parameters()


def probe_losses(rng):
    logits = dc.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    box = dc.Tensor(rng.normal(size=(6, 4)) * 2, requires_grad=True)
    labels = rng.integers(0, 3, 6)
    obj = np.array([1, 0, 1, 1, 0, 0])
    target = rng.normal(size=(6, 4)) * 2
    cfg = FocalConfig(2.0, (1.0, 2.0, 0.5))

    def f():
        l_cls, l_reg = head_losses(logits[:, 0:2], box, obj, target)
        return focal_loss(dc.softmax(logits, axis=1), labels, cfg) + l_cls + l_reg + dc.sum(smooth_l1(box * 0.3))
    return f, [logits, box]


PROBES = [probe_primitives, probe_structural, probe_conv, probe_recurrence, probe_mlp, probe_scan, probe_saf,
          probe_ssf, probe_block, probe_rgsw, probe_stage, probe_scoring_downsample, probe_losses]


def run_probes(n=100, seed=0):
    """``n`` probes cycling over every learned operation; returns (name, rel_error) pairs."""
    results = []
    for i in range(n):
        make = PROBES[i % len(PROBES)]
        rng = np.random.default_rng([seed, i])
        fn, params = make(rng)
        err = directional_error(fn, params, rng)
        results.append((make.__name__, err if math.isfinite(err) else float("inf")))
    return results
