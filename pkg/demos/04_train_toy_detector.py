"""Train the two-stage encoder on synthetic scenes and probe it.

Scenes hold a few cars, pedestrians and cyclists (about 20% of occupied
voxels) in background clutter.  The model learns to score foreground voxels,
classify the sampled ones and predict BEV objectness.  Afterwards we replace
part of the sampled foreground with background voxels at inference time and
watch the BEV metric drop.

    python demos/04_train_toy_detector.py [steps]      # default 120, about a minute
"""
import sys
import time
from dataclasses import replace

from sparsescan.backbone import count_flops
from sparsescan.harness import Config, evaluate, make_scenes, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120
cfg = replace(Config(), steps=steps, val_every=0)
val = make_scenes(cfg, "val")

start = time.perf_counter()
result = train(cfg, val_scenes=[], on_step=lambda s, l: print(f"step {s:3d}  loss {l['loss_total']:.3f}")
               if s % 10 == 0 or s == 1 else None)
print(f"trained {steps} steps in {time.perf_counter() - start:.0f} s")

for ratio in (0.0, 0.05, 0.10, 0.15):
    m = evaluate(result.model, val, cfg, noise_ratio=ratio)
    print(f"noise {ratio:.2f}: fg recall {m['fg_recall']:.3f}  sem acc {m['sem_accuracy']:.3f}"
          f"  BEV AP {m['bev_ap']:.3f}")

probe = val[0].vox
for alpha in (0.2, 1.0):
    print(f"alpha {alpha}: {count_flops(probe, [replace(c, alpha=alpha) for c in cfg.stage_configs()]).total:,} FLOPs")
