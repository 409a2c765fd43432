"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure (missing or
malformed input, numerical failure).  ``FMS_SEED`` overrides ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import diffcore as dc
from .backbone import count_flops, run_backbone
from .curve import MAX_ORDER, SCHEMES, TRUNCATION_COLUMNS, build_template, truncation_table
from .harness import (
    ABLATION_KINDS, BOX_COLUMNS, CLASSES, POINT_COLUMNS, Config, SceneSample, ablation_csv,
    build_model, forward, generate_scene, interleaved_scene, load_checkpoint, prepare, run_ablation,
    save_checkpoint, scene_seed, train,
)
from .ssm import association_matrix, discretize
from .fusion import predict_semantics, rms_normalize, saf_association
from .voxel import Box3D


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# input files
# ---------------------------------------------------------------------------

def _open(path):
    try:
        return open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _is_numeric(row) -> bool:
    try:
        [float(cell) for cell in row]
    except ValueError:
        return False
    return True


def read_table(path, columns) -> np.ndarray:
    """Numeric CSV with ``len(columns)`` fields per line; returns ``(rows, len(columns))``.

    An optional first line naming ``columns`` (in order) is accepted as a header.
    """
    with _open(path) as fh:
        rows = list(csv.reader(fh))
    start = 0
    if rows and any(cell.strip() for cell in rows[0]) and not _is_numeric(rows[0]):
        header = [c.strip() for c in rows[0]]
        if header != list(columns):
            raise InputError(f"{path}:1: expected header {','.join(columns)}, got {','.join(header)}")
        start = 1
    out = []
    for lineno, row in enumerate(rows[start:], start + 1):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != len(columns):
            raise InputError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
        if not _is_numeric(row):
            raise InputError(f"{path}:{lineno}: non-numeric field in {','.join(row)}")
        values = [float(cell) for cell in row]
        if not all(math.isfinite(v) for v in values):
            raise InputError(f"{path}:{lineno}: non-finite value")
        out.append(values)
    return np.asarray(out, dtype=np.float64).reshape(-1, len(columns))


def read_boxes(path) -> list[Box3D]:
    boxes = []
    for i, r in enumerate(read_table(path, BOX_COLUMNS)):
        cls_id = int(r[7])
        if cls_id not in CLASSES or cls_id != r[7]:
            raise InputError(f"{path}: box {i + 1}: unknown class id {r[7]:g}")
        try:
            boxes.append(Box3D(tuple(r[:3]), tuple(r[3:6]), float(r[6]), cls_id))
        except ValueError as exc:
            raise InputError(f"{path}: box {i + 1}: {exc}") from None
    return boxes


def load_config(path) -> Config:
    if path is None:
        return Config()
    with _open(path) as fh:
        text = fh.read()
    try:
        return Config.from_text(text)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _seed(args_seed, cfg: Config) -> int:
    env = os.environ.get("FMS_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FMS_SEED must be an integer, got {env!r}") from None
    return cfg.seed if args_seed is None else args_seed


def _load_weights(model, path):
    if path is None:
        return
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    try:
        model.load_state_dict(load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _write(path, text: str | bytes):
    mode = "wb" if isinstance(text, bytes) else "w"
    try:
        with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_template(args):
    if not 1 <= args.order <= MAX_ORDER:
        raise UsageError(f"--order must be in 1..{MAX_ORDER}, got {args.order}")
    template = build_template(args.scheme, args.order)
    try:
        template.save(args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote {args.scheme} order {args.order} template ({8 ** args.order} cells) to {args.out}")


def cmd_run(args):
    cfg = load_config(args.config)
    points = read_table(args.points, POINT_COLUMNS)
    boxes = read_boxes(args.boxes) if args.boxes else []
    scene = prepare(SceneSample(points, boxes, cfg.seed), cfg.grid_spec)
    header = "x,y,z," + ",".join(f"f{i}" for i in range(cfg.d_model))
    if len(scene.vox) == 0:
        _write(args.out_feats, header + "\n")
        print("0 voxels")
        return
    model = build_model(replace(cfg, seed=_seed(None, cfg)))
    _load_weights(model, args.checkpoint)
    with dc.no_grad():
        fw = forward(model, scene, cfg)
    vox = fw.out.vox
    lines = [header]
    for c, f in zip(vox.coords, vox.feats.data):
        lines.append(",".join(str(int(v)) for v in c) + "," + ",".join(f"{v:.8g}" for v in f))
    _write(args.out_feats, "\n".join(lines) + "\n")
    losses = ",".join(f"{k}={v.item():.6g}" for k, v in fw.losses.items())
    print(f"{len(scene.vox)} voxels -> {len(vox)} output voxels; {losses}")


def cmd_train(args):
    cfg = load_config(args.config)
    cfg = replace(cfg, seed=_seed(args.seed, cfg))

    def progress(step, sums):
        if step == 1 or step % 10 == 0 or step == cfg.steps:
            print(f"step {step}: loss {sums['loss_total']:.4f}", file=sys.stderr)

    result = train(cfg, on_step=None if args.quiet else progress)
    save_checkpoint(args.out, result.model.state_dict())
    _write(args.log, result.log_csv())
    if result.validation:
        last = result.validation[-1]
        print(",".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))


def cmd_ablate(args):
    cfg = load_config(args.config)
    cfg = replace(cfg, seed=_seed(None, cfg))
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values needs at least one value")
    try:
        rows = run_ablation(args.kind, values, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write(args.out, ablation_csv(args.kind, rows))


def cmd_bench(args):
    cfg = load_config(args.config)
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    seed = _seed(None, cfg)
    model = build_model(replace(cfg, seed=seed))
    stages = cfg.stage_configs()
    report = None
    per_stage = np.zeros(len(stages))
    for i in range(args.scenes):
        scene = prepare(generate_scene(cfg, scene_seed(seed, i, "val")), cfg.grid_spec)
        flops = count_flops(scene.vox, stages)
        report = flops if report is None else report + flops
        timings = []
        with dc.no_grad():
            run_backbone(scene.vox, model.backbone, timings=timings)
        per_stage += np.asarray(timings)
    sys.stdout.write(report.to_csv())
    print("stage,seconds_per_scene")
    for i, s in enumerate(per_stage / args.scenes):
        print(f"{i},{s:.6f}")


def _assoc_rows(model, cfg: Config, seed: int, use_saf: bool, n_rows: int = 64) -> np.ndarray:
    """Channel-mean |M| (or |M'|) of the first stage on a run of foreground voxels."""
    scene = interleaved_scene(cfg, seed)
    block = model.backbone.stage_params[0].block
    rows = np.nonzero(scene.fg)[0][:n_rows]
    with dc.no_grad():
        feats = model.backbone.stem(scene.vox.feats)
        x = rms_normalize(dc.gather(feats, rows))
        steps = discretize(block.ssm, x)
        ids, _ = predict_semantics(x, block.head)
    d = block.ssm.d_model
    if use_saf:
        mats = [np.abs(saf_association(steps, ids, block.saf_alpha.data[:, ch], ch)) for ch in range(d)]
    else:
        mats = [np.abs(association_matrix(steps, ch)) for ch in range(d)]
    return np.mean(mats, axis=0)


def _pgm(image: np.ndarray) -> bytes:
    """8-bit binary PGM, scaled so the maximum maps to 255; row 0 is the top line."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape, np.uint8) if top <= 0 else np.round(img / top * 255).astype(np.uint8)
    h, w = scaled.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes()


def cmd_viz(args):
    cfg = load_config(args.config)
    seed = _seed(args.seed, cfg)
    if args.what == "truncation":
        rows = truncation_table(seed=seed)
        lines = [",".join(TRUNCATION_COLUMNS)]
        lines += [",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in TRUNCATION_COLUMNS)
                  for r in rows]
        _write(args.out, "\n".join(lines) + "\n")
        return
    model = build_model(replace(cfg, seed=seed))
    _load_weights(model, args.checkpoint)
    if args.what in ("assoc", "assoc-saf"):
        M = _assoc_rows(model, cfg, seed, args.what == "assoc-saf")
        _write(args.out, "\n".join(",".join(f"{v:.6g}" for v in row) for row in M) + "\n")
        return
    scene = prepare(generate_scene(cfg, scene_seed(seed, 0, "val")), cfg.grid_spec)
    with dc.no_grad():
        fw = forward(model, scene, cfg)
    scores = fw.out.stages[0].scores.data
    res = cfg.grid_spec.resolution
    heat = np.zeros((res[1], res[0]))
    coords = scene.vox.coords
    np.add.at(heat, (res[1] - 1 - coords[:, 1], coords[:, 0]), scores)
    _write(args.out, _pgm(heat))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsescan", description="Foreground-sampled state-space encoding of sparse voxels.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-template", help="write a serialization curve template")
    g.add_argument("--scheme", required=True, choices=[s.replace("_", "-") for s in SCHEMES],
                   help="curve family")
    g.add_argument("--order", required=True, type=int, help="bits per axis, 1..6 (side 2^order)")
    g.add_argument("--out", required=True, help="output template file")
    g.set_defaults(func=cmd_gen_template)

    r = sub.add_parser("run", help="encode one point cloud and write the final voxel features")
    r.add_argument("--points", required=True, help="CSV x,y,z,f1 (f1 = intensity), optional header line")
    r.add_argument("--boxes", help="CSV " + ",".join(BOX_COLUMNS) + ", optional header line (used for the losses)")
    r.add_argument("--config", help="key=value configuration file (defaults if omitted)")
    r.add_argument("--out-feats", required=True, help="output CSV x,y,z,f0..f{D-1}")
    r.add_argument("--checkpoint", help="weights written by train (random init if omitted)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train", help="train on generated scenes")
    t.add_argument("--config", help="key=value configuration file (defaults if omitted)")
    t.add_argument("--seed", type=int, help="master seed (FMS_SEED overrides)")
    t.add_argument("--out", required=True, help="output checkpoint")
    t.add_argument("--log", required=True, help="output per-step loss CSV")
    t.add_argument("--quiet", action="store_true", help="no progress on standard error")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="sweep one setting and tabulate metrics")
    a.add_argument("--kind", required=True, choices=ABLATION_KINDS, help="setting to sweep")
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--config", help="key=value configuration file (defaults if omitted)")
    a.add_argument("--out", required=True, help="output CSV")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="print the FLOPs model and per-stage wall-clock time")
    b.add_argument("--config", help="key=value configuration file (defaults if omitted)")
    b.add_argument("--scenes", type=int, default=3, help="number of generated scenes")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz", help="export diagnostics")
    v.add_argument("--what", required=True, choices=("assoc", "assoc-saf", "fg-heatmap", "truncation"),
                   help="assoc/assoc-saf: association matrix CSV; fg-heatmap: BEV score PGM; "
                        "truncation: per-scheme gap CSV")
    v.add_argument("--out", required=True, help="output file")
    v.add_argument("--config", help="key=value configuration file (defaults if omitted)")
    v.add_argument("--checkpoint", help="weights written by train (random init if omitted)")
    v.add_argument("--seed", type=int, help="scene / init seed (FMS_SEED overrides)")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
