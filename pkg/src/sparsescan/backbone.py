"""Stage composition: foreground scoring, top-k sampling, rotated RGSW encoding, merge, downsampling."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .curve import build_template, normalize_scheme, required_order, serial_order
from .fusion import SasfBlock, rms_normalize
from .nn import MLP, Linear, Module, param
from .rgsw import patch_count, rgsw_encode
from .voxel import VoxelSet, downsample, neighbor_mean


@dataclass(frozen=True)
class StageConfig:
    alpha: float = 0.2
    angles: tuple[float, ...] = (0.0, math.pi / 2)
    t: int = 2
    patch_len: int = 64             # target rows per RGSW patch; M follows from k
    d_model: int = 32
    d_state: int = 4
    saf_half_width: int = 3
    ssf_taps: int = 9
    scheme: str = "hilbert"
    order: int | None = None        # None: smallest order covering the rotated grid
    propagate_every: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        if not self.angles:
            raise ValueError("at least one rotation angle is required")
        object.__setattr__(self, "scheme", normalize_scheme(self.scheme))

    def template_order(self, resolution) -> int:
        return self.order if self.order is not None else required_order(resolution, self.angles)


class StageParams(Module):
    """Learned pieces of one stage; the encoder and token are shared by all rotations."""

    def __init__(self, cfg: StageConfig, n_classes: int, rng: np.random.Generator, scorer_hidden: int = 16):
        d = cfg.d_model
        self.scorer = MLP(2 * d, scorer_hidden, 1, rng)
        self.pe = Linear(3, d, rng, scale=0.1)
        self.block = SasfBlock(d, cfg.d_state, n_classes, rng, cfg.saf_half_width, cfg.ssf_taps)
        self.token = param(np.zeros(d))
        self.merge = MLP(d, d, d, rng, out_scale=0.1)


@dataclass
class StageOutput:
    vox: VoxelSet            # stage input voxels with encoded features
    scores: dc.Tensor        # (N,) foreground scores of the stage input
    fg_index: np.ndarray     # rows encoded, in descending score order
    logits: dc.Tensor        # (k, C) semantic logits of the encoded rows


def score_foreground(vox: VoxelSet, scorer) -> dc.Tensor:
    """sigmoid(scorer([f, mean of occupied 6-neighbours]))."""
    ctx = dc.concat([vox.feats, neighbor_mean(vox)], axis=1)
    logit = scorer(ctx)
    return dc.sigmoid(dc.reshape(logit, (logit.shape[0],)))


def topk_split(scores, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """``k = ceil(alpha N)`` highest scores (descending, ties by index) and the rest in order."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    s = np.asarray(scores.data if isinstance(scores, dc.Tensor) else scores, dtype=np.float64)
    n = len(s)
    k = min(n, math.ceil(alpha * n - 1e-9))
    order = np.lexsort((np.arange(n), -s))
    fg = order[:k]
    bg = np.sort(order[k:])
    return fg, bg


def positional_embedding(coords, resolution, pe: Linear) -> dc.Tensor:
    norm = (np.asarray(coords, dtype=np.float64) + 0.5) / np.asarray(resolution, dtype=np.float64)
    return pe(norm.reshape(-1, 3))


def sample_topk(vox: VoxelSet, scores, alpha: float, pe: Linear | None = None, corrupt=None):
    """Split into (fg, bg, fg_index); fg rows carry the positional embedding.

    Background features are taken as they are so they stay bit-identical.
    ``corrupt(fg_index, bg_index) -> fg_index`` may replace sampled rows.
    """
    fg_idx, bg_idx = topk_split(scores, alpha)
    if corrupt is not None:
        fg_idx = np.asarray(corrupt(fg_idx, bg_idx), dtype=np.int64)
        bg_idx = np.setdiff1d(np.arange(len(vox)), fg_idx)
    fg = vox.subset(fg_idx)
    if pe is not None and len(fg_idx):
        fg = fg.with_feats(fg.feats + positional_embedding(fg.coords, vox.resolution, pe))
    return fg, vox.subset(bg_idx), fg_idx


def encode_rotations(fg: VoxelSet, cfg: StageConfig, params: StageParams, template) -> dc.Tensor:
    """Sum over angles of Enc(serialize_θ(fg)), each mapped back to fg row order."""
    k, d = fg.feats.shape
    m = patch_count(k, cfg.patch_len)
    total = None
    for theta in cfg.angles:
        perm = serial_order(fg.coords, template, theta, fg.resolution)
        seq = dc.gather(fg.feats, perm)
        y, _ = rgsw_encode(seq, params.block, m, cfg.t, params.token, fg.coords[perm],
                           propagate_every=cfg.propagate_every)
        back = dc.gather(y, np.argsort(perm))
        total = back if total is None else total + back
    return total


def encode_stage(vox: VoxelSet, cfg: StageConfig, params: StageParams, template=None,
                 corrupt=None) -> StageOutput:
    """Score, sample, encode the foreground under every rotation, merge, reattach the background."""
    if template is None:
        template = build_template(cfg.scheme, cfg.template_order(vox.resolution))
    scores = score_foreground(vox, params.scorer)
    fg, bg, fg_idx = sample_topk(vox, scores, cfg.alpha, params.pe, corrupt)
    n = len(vox)
    if len(fg_idx) == 0:
        empty = dc.Tensor(np.zeros((0, params.block.head.n_classes)))
        return StageOutput(vox, scores, fg_idx, empty)
    logits = params.block.head(rms_normalize(fg.feats))
    s = encode_rotations(fg, cfg, params, template)
    merged = s + params.merge(s)
    # rows of [merged; bg] back to the original voxel order
    stacked = dc.concat([merged, bg.feats], axis=0)
    order = np.empty(n, dtype=np.int64)
    order[np.concatenate([fg_idx, np.setdiff1d(np.arange(n), fg_idx)])] = np.arange(n)
    return StageOutput(vox.with_feats(dc.gather(stacked, order)), scores, fg_idx, logits)


class Backbone(Module):
    """Input stem, per-stage parameters and the linear maps of the downsampling blocks."""

    def __init__(self, stages, in_dim: int, n_classes: int, rng: np.random.Generator):
        stages = list(stages)
        if not stages:
            raise ValueError("at least one stage is required")
        self.stages = stages
        self.n_classes = n_classes
        self.stem = Linear(in_dim, stages[0].d_model, rng)
        self.stage_params = [StageParams(cfg, n_classes, rng) for cfg in stages]
        self.down = [Linear(a.d_model, b.d_model, rng) for a, b in zip(stages[:-1], stages[1:])]


@dataclass
class BackboneOutput:
    vox: VoxelSet
    stages: list[StageOutput] = field(default_factory=list)
    parents: list[np.ndarray] = field(default_factory=list)   # stage i row -> stage i+1 row


def run_backbone(vox: VoxelSet, model: Backbone, stem: bool = True, corrupt=None,
                 timings: list | None = None) -> BackboneOutput:
    """Alternate encode_stage and stride-2 downsampling; no downsampling after the last stage.

    ``corrupt(stage, fg_index, bg_index)`` optionally rewrites each stage's
    sample.  Wall-clock seconds per stage are appended to ``timings`` if given.
    """
    if stem:
        vox = vox.with_feats(model.stem(vox.feats))
    out = BackboneOutput(vox)
    for i, (cfg, params) in enumerate(zip(model.stages, model.stage_params)):
        hook = None if corrupt is None else (lambda f, b, i=i: corrupt(i, f, b))
        start = time.perf_counter()
        res = encode_stage(vox, cfg, params, corrupt=hook)
        out.stages.append(res)
        vox = res.vox
        if i < len(model.down):
            vox, parent = downsample(vox, model.down[i].weight, model.down[i].bias)
            out.parents.append(parent)
        if timings is not None:
            timings.append(time.perf_counter() - start)
    out.vox = vox
    return out


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

@dataclass
class FlopsReport:
    scoring: int = 0
    flatten: int = 0
    encoder: int = 0
    merge: int = 0
    downsample: int = 0

    COMPONENTS = ("scoring", "flatten", "encoder", "merge", "downsample")

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in self.COMPONENTS)

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        return FlopsReport(*(getattr(self, c) + getattr(other, c) for c in self.COMPONENTS))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "flops"])
        for c in self.COMPONENTS:
            w.writerow([c, getattr(self, c)])
        w.writerow(["total", self.total])
        return buf.getvalue()


def encoder_token_cost(cfg: StageConfig, n_classes: int = 4, head_hidden: int = 16) -> int:
    """Multiply-adds of one encoder pass for one token."""
    d, s = cfg.d_model, cfg.d_state
    proj = d * d + 2 * d * s + d * d               # Δ, B, C, gate
    discretize = 3 * d * s
    scan = 2 * d * s
    saf = (2 * cfg.saf_half_width + 1) * d * s
    ssf = 3 * cfg.ssf_taps * d * s
    readout = d * s
    head = d * head_hidden + head_hidden * n_classes
    return proj + discretize + scan + saf + ssf + readout + head


def stage_flops(n: int, cfg: StageConfig, next_dim: int | None, n_classes: int = 4,
                scorer_hidden: int = 16) -> FlopsReport:
    d = cfg.d_model
    k = min(n, math.ceil(cfg.alpha * n - 1e-9))
    return FlopsReport(
        scoring=n * (6 * d + 2 * d * scorer_hidden + scorer_hidden),
        flatten=0,
        encoder=k * encoder_token_cost(cfg, n_classes) * len(cfg.angles) * cfg.t,
        merge=k * (3 * d + 2 * d * d),
        downsample=0 if next_dim is None else n * (d + d * next_dim),
    )


def count_flops(coords, stages, n_classes: int = 4) -> FlopsReport:
    """Closed-form multiply-add count of the backbone on voxels at ``coords``.

    Only coordinates matter: later-stage voxel counts come from the stride-2
    merge of the coordinates, which does not depend on alpha.
    """
    if isinstance(stages, StageConfig):
        stages = [stages]
    coords = np.asarray(coords.coords if isinstance(coords, VoxelSet) else coords, dtype=np.int64).reshape(-1, 3)
    report = FlopsReport()
    for i, cfg in enumerate(stages):
        nxt = stages[i + 1].d_model if i + 1 < len(stages) else None
        report = report + stage_flops(len(coords), cfg, nxt, n_classes)
        coords = np.unique(coords // 2, axis=0)
    return report
