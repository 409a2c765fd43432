"""How far one voxel's influence travels through the sliding-window encoder.

The sequence is split into 4 windows of 8 rows.  One pass keeps everything
inside its window; the second pass shifts the windows by half a window, so
information crosses the boundaries, and later passes keep spreading it.

    python demos/03_receptive_field.py
"""
import numpy as np

from sparsescan import diffcore as dc
from sparsescan.fusion import SasfBlock
from sparsescan.rgsw import receptive_field, rgsw_encode

rng = np.random.default_rng(0)
block = SasfBlock(4, 2, 3, rng, saf_half_width=1, ssf_taps=3)
token = dc.tensor(rng.normal(size=4) * 0.5)
x = rng.normal(size=(32, 4))

for t in (1, 2, 3, 4):
    rows = receptive_field(lambda a: rgsw_encode(a, block, 4, t, token)[0], x, positions=[0, 20])
    for src in (0, 20):
        hit = sorted({q for p, q, _ in rows if p == src})
        windows = sorted({q // 8 for q in hit})
        print(f"t={t}: perturbing row {src:2d} moves {len(hit):2d} rows in windows {windows}")
