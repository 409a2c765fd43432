"""Synthetic scenes, a toy BEV detection head, training, evaluation and ablations."""
from __future__ import annotations

import csv
import io
import math
import struct
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .backbone import Backbone, StageConfig, count_flops, run_backbone, topk_split
from .curve import build_template, serial_order
from .fusion import association_similarity, rms_normalize, saf_association
from .loss import FocalConfig, LossWeights, binary_probs, focal_loss, head_losses, total_loss
from .nn import MLP, SGD, Module
from .ssm import discretize
from .voxel import Box3D, Grid, VoxelSet, foreground_labels, semantic_labels, voxelize

# class id -> (name, nominal size l, w, h in metres); 0 is background
# name, nominal box size (m), mean return intensity of the object's surface
CLASSES = {1: ("car", (3.9, 1.7, 1.6), 0.85),
           2: ("pedestrian", (0.8, 0.7, 1.75), 0.5),
           3: ("cyclist", (1.8, 0.6, 1.7), 0.65)}
BACKGROUND_INTENSITY = (0.3, 0.1)   # mean, std
N_CLASSES = 1 + len(CLASSES)
POINT_COLUMNS = ("x", "y", "z", "f1")          # f1: return intensity
BOX_COLUMNS = ("cx", "cy", "cz", "dx", "dy", "dz", "yaw", "class")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Config:
    """Flat key=value configuration shared by the harness and the command line."""

    seed: int = 0
    # scenes
    grid: tuple[int, int, int] = (64, 64, 16)
    cell: float = 0.25
    min_boxes: int = 2
    max_boxes: int = 5
    fg_fraction: float = 0.2
    point_noise: float = 0.05
    surface_density: float = 48.0      # points per square metre of box surface
    intensity_noise: float = 0.05      # per-point std around the class mean intensity
    empty_bg_voxels: int = 400         # background voxels of a scene with no boxes
    n_train_scenes: int = 8
    n_val_scenes: int = 4
    # model
    stages: int = 2
    d_model: int = 32
    d_state: int = 4
    alpha: float = 0.2
    angles_deg: tuple[float, ...] = (0.0, 90.0)
    t: int = 2
    patch_len: int = 64
    saf_half_width: int = 3
    ssf_taps: int = 9
    scheme: str = "hilbert"
    # optimisation
    steps: int = 200
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 5.0
    batch_size: int = 1
    loss_w: float = 2.0
    gamma: float = 2.0
    beta_fg: float = 2.0
    # evaluation
    eval_alpha: float = 0.25
    val_every: int = 50
    noise_ratio: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.alpha <= 1 or not 0 < self.eval_alpha <= 1:
            raise ValueError("alpha and eval_alpha must be in (0, 1]")
        if self.min_boxes < 0 or self.max_boxes < self.min_boxes:
            raise ValueError(f"bad box count range [{self.min_boxes}, {self.max_boxes}]")
        if not 0 < self.fg_fraction < 1:
            raise ValueError(f"fg_fraction must be in (0, 1), got {self.fg_fraction}")

    def stage_configs(self) -> list[StageConfig]:
        angles = tuple(math.radians(a) for a in self.angles_deg)
        return [StageConfig(self.alpha, angles, self.t, self.patch_len, self.d_model, self.d_state,
                            self.saf_half_width, self.ssf_taps, self.scheme) for _ in range(self.stages)]

    @property
    def grid_spec(self) -> Grid:
        return Grid(tuple(self.grid), (self.cell,) * 3)

    @classmethod
    def from_text(cls, text: str) -> "Config":
        """Parse ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse_value(types[key], value)
            except ValueError as exc:
                raise ValueError(f"config line {lineno}: {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


def _parse_value(type_name: str, value: str):
    kind = str(type_name)
    if kind.startswith("tuple"):
        inner = float if "float" in kind else int
        return tuple(inner(v) for v in value.split(",") if v.strip())
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSample:
    points: np.ndarray                 # (P, 4) x, y, z, intensity
    boxes: list[Box3D]
    seed: int


def _footprint_radius(box: Box3D, margin: float = 0.5) -> float:
    return math.hypot(box.size[0] / 2 + margin, box.size[1] / 2 + margin)


def place_boxes(rng: np.random.Generator, n: int, classes, extent, max_tries: int = 1000) -> list[Box3D]:
    """Non-overlapping boxes (enlarged footprints disjoint) by rejection sampling."""
    boxes: list[Box3D] = []
    tries = 0
    while len(boxes) < n:
        cls_id = int(rng.choice(classes))
        size = tuple(float(s) for s in np.asarray(CLASSES[cls_id][1]) * rng.uniform(0.9, 1.1, 3))
        yaw = float(rng.uniform(0.0, math.pi))
        probe = Box3D((0.0, 0.0, 0.0), size, yaw, cls_id)
        r = _footprint_radius(probe)
        if 2 * r >= min(extent[0], extent[1]) or size[2] >= extent[2]:
            raise ValueError(f"grid extent {extent} cannot hold a {CLASSES[cls_id][0]} box")
        cx, cy = rng.uniform(r, extent[0] - r), rng.uniform(r, extent[1] - r)
        cand = Box3D((float(cx), float(cy), size[2] / 2), size, yaw, cls_id)
        if all(math.hypot(cx - b.center[0], cy - b.center[1]) > r + _footprint_radius(b) for b in boxes):
            boxes.append(cand)
            continue
        tries += 1
        if tries >= max_tries:
            raise RuntimeError(f"box placement failed after {max_tries} rejections "
                               f"(boxes={n}, classes={list(classes)}, extent={tuple(extent)})")
    return boxes


def surface_points(rng: np.random.Generator, box: Box3D, density: float, noise: float) -> np.ndarray:
    """Points on the top and four side faces, jittered by Gaussian noise."""
    l, w, h = box.size
    faces = [  # (area, sampler in box frame)
        (l * w, lambda u, v: np.stack([(u - 0.5) * l, (v - 0.5) * w, np.full_like(u, h / 2)], 1)),
        (l * h, lambda u, v: np.stack([(u - 0.5) * l, np.full_like(u, w / 2), (v - 0.5) * h], 1)),
        (l * h, lambda u, v: np.stack([(u - 0.5) * l, np.full_like(u, -w / 2), (v - 0.5) * h], 1)),
        (w * h, lambda u, v: np.stack([np.full_like(u, l / 2), (u - 0.5) * w, (v - 0.5) * h], 1)),
        (w * h, lambda u, v: np.stack([np.full_like(u, -l / 2), (u - 0.5) * w, (v - 0.5) * h], 1)),
    ]
    parts = []
    for area, sample in faces:
        n = max(1, int(round(area * density)))
        parts.append(sample(rng.random(n), rng.random(n)))
    local = np.concatenate(parts) + rng.normal(0.0, noise, (sum(len(p) for p in parts), 3))
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]], 1)
    return world + np.asarray(box.center)


def generate_scene(cfg: Config, seed: int, n_boxes: int | None = None) -> SceneSample:
    """Boxes with surface points plus background clutter in cells outside all enlarged boxes.

    The clutter volume is chosen so that foreground voxels make up about
    ``cfg.fg_fraction`` of the occupied cells.
    """
    rng = np.random.default_rng(seed)
    grid = cfg.grid_spec
    extent = np.asarray(grid.resolution) * np.asarray(grid.cell_size)
    if n_boxes is None:
        n_boxes = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    boxes = place_boxes(rng, n_boxes, sorted(CLASSES), extent)
    fg_pts = [surface_points(rng, b, cfg.surface_density, cfg.point_noise) for b in boxes]
    fg_xyz = np.concatenate(fg_pts) if fg_pts else np.zeros((0, 3))
    means = np.concatenate([np.full(len(p), CLASSES[b.class_id][2]) for p, b in zip(fg_pts, boxes)]) \
        if fg_pts else np.zeros(0)
    fg_int = np.clip(means + rng.normal(0.0, cfg.intensity_noise, len(fg_xyz)), 0.0, 1.0)
    fg = np.concatenate([fg_xyz, fg_int[:, None]], axis=1)
    # candidate background cells: centre outside every enlarged box, not hit by a box point
    res = np.asarray(grid.resolution)
    cells = np.stack(np.meshgrid(*(np.arange(r) for r in res), indexing="ij"), -1).reshape(-1, 3)
    probe = VoxelSet(cells, np.zeros((len(cells), 1)), grid)
    free = foreground_labels(probe, boxes) == 0
    if len(fg_xyz):
        hit = np.floor(fg_xyz / np.asarray(grid.cell_size)).astype(np.int64)
        hit = hit[((hit >= 0) & (hit < res)).all(1)]
        free[np.ravel_multi_index(hit.T, res)] = False
        n_fg = int(foreground_labels(voxelize(fg, grid), boxes).sum())
        n_bg = int(round(n_fg * (1.0 - cfg.fg_fraction) / cfg.fg_fraction))
    else:
        n_bg = cfg.empty_bg_voxels
    pool = np.nonzero(free)[0]
    chosen = np.sort(rng.choice(pool, size=min(n_bg, len(pool)), replace=False))
    bg_xyz = (cells[chosen] + rng.random((len(chosen), 3))) * np.asarray(grid.cell_size)
    bg_int = np.clip(rng.normal(*BACKGROUND_INTENSITY, len(chosen)), 0.0, 1.0)
    bg = np.concatenate([bg_xyz, bg_int[:, None]], axis=1)
    return SceneSample(np.concatenate([fg, bg]), boxes, seed)


def scene_seed(master: int, index: int, split: str = "train") -> int:
    """Independent per-scene seed derived from the master seed."""
    return int(np.random.SeedSequence([master, index, 0 if split == "train" else 1]).generate_state(1)[0])


@dataclass
class PreparedScene:
    """Voxelized scene with per-voxel labels and BEV-head targets."""

    sample: SceneSample
    vox: VoxelSet
    fg: np.ndarray
    sem: np.ndarray


def prepare(sample: SceneSample, grid: Grid) -> PreparedScene:
    vox = voxelize(sample.points, grid)
    return PreparedScene(sample, vox, foreground_labels(vox, sample.boxes), semantic_labels(vox, sample.boxes))


# ---------------------------------------------------------------------------
# toy detection head over bird's-eye-view cells
# ---------------------------------------------------------------------------

BOX_TARGETS = 7   # dx, dy, log l, log w, log h, sin yaw, cos yaw


class BevHead(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int = 32):
        self.cls = MLP(d_model, hidden, 2, rng)
        self.reg = MLP(d_model, hidden, BOX_TARGETS, rng, out_scale=0.1)

    def __call__(self, feats):
        return self.cls(feats), self.reg(feats)


def bev_pool(vox: VoxelSet):
    """Mean feature over Z for every occupied BEV column; returns ``(cells (B, 2), feats (B, D))``."""
    cells, col = np.unique(vox.coords[:, :2], axis=0, return_inverse=True)
    col = col.reshape(-1)
    counts = np.bincount(col, minlength=len(cells)).astype(np.float64)
    summed = dc.scatter(vox.feats, col, len(cells))
    return cells, summed * np.broadcast_to((1.0 / counts)[:, None], summed.shape)


def bev_targets(cells, grid: Grid, boxes) -> tuple[np.ndarray, np.ndarray]:
    """Objectness (cell centre inside a box footprint) and box regression targets per cell."""
    centers = (np.asarray(cells, dtype=np.float64) + 0.5) * np.asarray(grid.cell_size[:2]) + np.asarray(grid.origin[:2])
    obj = np.zeros(len(cells), dtype=np.int64)
    reg = np.zeros((len(cells), BOX_TARGETS))
    for box in boxes:
        d = centers - np.asarray(box.center[:2])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx, ly = c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]
        inside = (np.abs(lx) <= box.size[0] / 2) & (np.abs(ly) <= box.size[1] / 2)
        obj[inside] = 1
        reg[inside] = np.concatenate([-d[inside], np.tile(np.log(box.size), (inside.sum(), 1)),
                                      np.tile([s, c], (inside.sum(), 1))], axis=1)
    return obj, reg


class Detector(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator, in_dim: int = 2):
        self.backbone = Backbone(cfg.stage_configs(), in_dim, N_CLASSES, rng)
        self.head = BevHead(cfg.d_model, rng)


def build_model(cfg: Config) -> Detector:
    return Detector(cfg, np.random.default_rng(cfg.seed))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def stage_labels(scene: PreparedScene, parents) -> list[tuple[np.ndarray, np.ndarray]]:
    """Foreground and class labels of each stage's voxels (a parent takes the max of its children)."""
    fg, sem = scene.fg, scene.sem
    out = [(fg, sem)]
    for parent in parents:
        n = int(parent.max()) + 1 if len(parent) else 0
        pf, ps = np.zeros(n, np.int64), np.zeros(n, np.int64)
        np.maximum.at(pf, parent, fg)
        np.maximum.at(ps, parent, sem)
        fg, sem = pf, ps
        out.append((fg, sem))
    return out


@dataclass
class Forward:
    losses: dict[str, dc.Tensor]
    total: dc.Tensor
    out: object
    obj_prob: np.ndarray
    obj_target: np.ndarray


def forward(model: Detector, scene: PreparedScene, cfg: Config, corrupt=None) -> Forward:
    """Backbone, head and every loss term for one scene."""
    out = run_backbone(scene.vox, model.backbone, corrupt=corrupt)
    labels = stage_labels(scene, out.parents)
    fg_cfg = FocalConfig(cfg.gamma, (1.0, cfg.beta_fg))
    sem_cfg = FocalConfig(cfg.gamma)
    lf, ls = [], []
    for st, (fg, sem) in zip(out.stages, labels):
        lf.append(focal_loss(binary_probs(st.scores), fg, fg_cfg))
        if len(st.fg_index):
            ls.append(focal_loss(dc.softmax(st.logits, axis=1), sem[st.fg_index], sem_cfg))
    loss_f = _mean(lf)
    loss_s = _mean(ls)
    cells, pooled = bev_pool(out.vox)
    obj, reg = bev_targets(cells, out.vox.grid, scene.sample.boxes)
    logits, box = model.head(pooled)
    loss_cls, loss_reg = head_losses(logits, box, obj, reg)
    total = total_loss(loss_f, loss_s, loss_cls, loss_reg, LossWeights(cfg.loss_w))
    probs = dc.softmax(logits, axis=1).data[:, 1] if len(cells) else np.zeros(0)
    return Forward({"loss_f": loss_f, "loss_s": loss_s, "loss_cls": loss_cls, "loss_reg": loss_reg},
                   total, out, probs, obj)


def _mean(terms):
    if not terms:
        return dc.Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of every positive (ties by index)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def foreground_recall(scores, fg, alpha: float) -> tuple[float, float]:
    """(precision, recall) of the top ``ceil(alpha N)`` voxels against the foreground labels."""
    sel, _ = topk_split(scores, alpha)
    fg = np.asarray(fg).astype(bool)
    tp = int(fg[sel].sum())
    precision = tp / len(sel) if len(sel) else 0.0
    recall = tp / int(fg.sum()) if fg.any() else 1.0
    return precision, recall


def evaluate(model: Detector, scenes, cfg: Config, noise_ratio: float = 0.0, noise_seed: int = 0) -> dict:
    """Foreground precision/recall at ``eval_alpha``, semantic accuracy and BEV objectness AP."""
    tp = n_sel = n_fg = 0
    correct = n_sem = 0
    probs, targets = [], []
    with dc.no_grad():
        for i, scene in enumerate(scenes):
            corrupt = _noise_hook(noise_ratio, noise_seed + 7919 * i) if noise_ratio > 0 else None
            fw = forward(model, scene, cfg, corrupt=corrupt)
            st = fw.out.stages[0]
            sel, _ = topk_split(st.scores, cfg.eval_alpha)
            tp += int(scene.fg[sel].sum())
            n_sel += len(sel)
            n_fg += int(scene.fg.sum())
            if len(st.fg_index):
                pred = np.argmax(st.logits.data, axis=1)
                correct += int((pred == scene.sem[st.fg_index]).sum())
                n_sem += len(pred)
            probs.append(fw.obj_prob)
            targets.append(fw.obj_target)
    return {
        "fg_precision": tp / n_sel if n_sel else 0.0,
        "fg_recall": tp / n_fg if n_fg else 1.0,
        "sem_accuracy": correct / n_sem if n_sem else 0.0,
        "bev_ap": average_precision(np.concatenate(probs), np.concatenate(targets)),
    }


def _noise_hook(ratio: float, seed: int):
    def corrupt(stage, fg_idx, bg_idx):
        return inject_foreground_noise(fg_idx, bg_idx, ratio, seed + stage)
    return corrupt


def inject_foreground_noise(fg_index, bg_pool, ratio: float, seed: int) -> np.ndarray:
    """Replace ``floor(ratio k)`` sampled rows with distinct random background rows.

    For a fixed seed the replaced positions and their substitutes are nested
    in ``ratio``: a larger ratio corrupts a superset of rows.
    """
    if not 0 <= ratio <= 1:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio}")
    fg_index = np.asarray(fg_index, dtype=np.int64).copy()
    bg_pool = np.asarray(bg_pool, dtype=np.int64)
    r = math.floor(ratio * len(fg_index) + 1e-9)
    if r > len(bg_pool):
        raise ValueError(f"cannot replace {r} rows from a background pool of {len(bg_pool)}")
    if r == 0:
        return fg_index
    rng = np.random.default_rng(seed)
    slots = rng.permutation(len(fg_index))[:r]
    fg_index[slots] = rng.permutation(bg_pool)[:r]
    return fg_index


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "loss_total", "loss_f", "loss_s", "loss_cls", "loss_reg")


@dataclass
class TrainResult:
    model: Detector
    log: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, LOG_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.log:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def make_scenes(cfg: Config, split: str) -> list[PreparedScene]:
    n = cfg.n_train_scenes if split == "train" else cfg.n_val_scenes
    return [prepare(generate_scene(cfg, scene_seed(cfg.seed, i, split)), cfg.grid_spec) for i in range(n)]


def train(cfg: Config, train_scenes=None, val_scenes=None, model: Detector | None = None,
          on_step=None) -> TrainResult:
    """Momentum SGD on the combined objective, cycling through the training scenes."""
    train_scenes = make_scenes(cfg, "train") if train_scenes is None else train_scenes
    val_scenes = make_scenes(cfg, "val") if val_scenes is None else val_scenes
    model = build_model(cfg) if model is None else model
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
    result = TrainResult(model)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        for _ in range(cfg.batch_size):
            scene = train_scenes[cursor % len(train_scenes)]
            cursor += 1
            with dc.Tape() as tape:
                fw = forward(model, scene, cfg)
                loss = fw.total * (1.0 / cfg.batch_size)
            value = fw.total.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at step {step}")
            dc.backward(loss, tape)
            sums["loss_total"] += value / cfg.batch_size
            for k, v in fw.losses.items():
                sums[k] += v.item() / cfg.batch_size
        opt.step()
        result.log.append({"step": step, **sums})
        if on_step is not None:
            on_step(step, sums)
        if cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps) and val_scenes:
            result.validation.append({"step": step, **evaluate(model, val_scenes, cfg)})
    return result


# ---------------------------------------------------------------------------
# checkpoints: "FMCK", u32 version, u32 count, then per tensor
#   u16 name length, name (utf-8), u8 ndim, u32 dims..., float64 data (little endian, C order)
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FMCK"
CKPT_VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, state = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state


# ---------------------------------------------------------------------------
# association similarity probe
# ---------------------------------------------------------------------------

def interleaved_scene(cfg: Config, seed: int) -> PreparedScene:
    """Boxes of every class packed close together so classes alternate along the curve."""
    rng = np.random.default_rng(seed)
    boxes, x = [], 1.5
    for i in range(6):
        cls_id = 1 + i % len(CLASSES)
        size = CLASSES[cls_id][1]
        boxes.append(Box3D((x + size[0] / 2, 4.0 + rng.uniform(-0.3, 0.3), size[2] / 2), size, 0.0, cls_id))
        x += size[0] + 0.2
    small = replace(cfg, grid=(64, 64, 16))
    fg_pts = [surface_points(rng, b, small.surface_density, small.point_noise) for b in boxes]
    xyz = np.concatenate(fg_pts)
    intensity = np.concatenate([np.full(len(p), CLASSES[b.class_id][2]) for p, b in zip(fg_pts, boxes)])
    pts = np.concatenate([xyz, intensity[:, None]], axis=1)
    return prepare(SceneSample(pts, boxes, seed), small.grid_spec)


def kernel_similarity(block, scene: PreparedScene, n_rows: int = 64, sigma: float = 3.0,
                      scheme: str = "hilbert") -> float:
    """Sim between |M'| (channel mean) and the same-class Gaussian label on a run of foreground rows.

    The run is the ``n_rows`` window of foreground voxels along the curve with
    the most class changes.  Inputs are one-hot classes padded to the block
    width, which keeps the probe independent of any stem.  SAF groups rows
    by their true classes.
    """
    rows = np.nonzero(scene.fg)[0]
    coords, classes = scene.vox.coords[rows], scene.sem[rows]
    res = scene.vox.resolution
    template = build_template(scheme, max(1, math.ceil(math.log2(max(res)))))
    perm = serial_order(coords, template, 0.0, res)
    coords, classes = coords[perm], classes[perm]
    n_rows = min(n_rows, len(perm))
    switches = np.concatenate([[0], np.cumsum(classes[1:] != classes[:-1])])
    start = int(np.argmax(switches[n_rows - 1:] - switches[:len(perm) - n_rows + 1]))
    coords, classes = coords[start:start + n_rows], classes[start:start + n_rows]
    d = block.ssm.d_model
    x = np.zeros((n_rows, d))
    x[np.arange(n_rows), classes % d] = 1.0
    x[:, -1] = 1.0
    with dc.no_grad():
        steps = discretize(block.ssm, rms_normalize(dc.Tensor(x)))
    decay, drive, c = steps.numpy()
    alpha = block.saf_alpha.data
    mats = [np.abs(saf_association((decay, drive, c), classes, alpha[:, ch], ch)) for ch in range(d)]
    return association_similarity(np.mean(mats, axis=0), coords, classes, sigma)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_KINDS = ("alpha", "scan", "kernel", "iterations", "noise")


def _ablation_value(kind: str, raw):
    if kind == "scan":
        return str(raw).strip()
    if kind in ("kernel", "iterations"):
        return int(raw)
    return float(raw)


def run_ablation(kind: str, values, cfg: Config) -> list[dict]:
    """One row per value: validation metrics, FLOPs and wall time (plus Sim for kernel sizes).

    The noise sweep trains once and corrupts only the evaluation samples.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    values = [_ablation_value(kind, v) for v in values]
    train_scenes, val_scenes = make_scenes(cfg, "train"), make_scenes(cfg, "val")
    probe = val_scenes[0].vox
    rows = []
    shared = None
    for v in values:
        start = time.perf_counter()
        if kind == "alpha":
            run_cfg = replace(cfg, alpha=v)
        elif kind == "scan":
            run_cfg = replace(cfg, scheme=v)
        elif kind == "kernel":
            if v < 0:
                raise ValueError(f"kernel size must be >= 0, got {v}")
            run_cfg = replace(cfg, saf_half_width=max(v, 1) // 2)
        elif kind == "iterations":
            run_cfg = replace(cfg, t=v)
        else:
            run_cfg = cfg
        if kind == "noise":
            if shared is None:
                shared = train(replace(cfg, val_every=0), train_scenes, []).model
            model = shared
            metrics = evaluate(model, val_scenes, cfg, noise_ratio=v, noise_seed=cfg.seed)
        else:
            model = train(replace(run_cfg, val_every=0), train_scenes, []).model
            metrics = evaluate(model, val_scenes, run_cfg)
        row = {kind: v, **metrics, "flops": count_flops(probe, run_cfg.stage_configs()).total}
        if kind == "kernel":
            block = model.backbone.stage_params[0].block
            row["sim"] = float(np.mean([kernel_similarity(block, interleaved_scene(cfg, cfg.seed + j))
                                        for j in range(2)]))
        row["seconds"] = time.perf_counter() - start
        rows.append(row)
    return rows


def ablation_csv(kind: str, rows) -> str:
    cols = [kind, "fg_precision", "fg_recall", "sem_accuracy", "bev_ap", "flops"]
    if kind == "kernel":
        cols.append("sim")
    cols.append("seconds")
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
