"""Space-filling curves and the truncation problem.

Neighbouring voxels can land far apart in a 1-D serialization.  We count how
often that happens for each curve, and how much a second, rotated
serialization helps: for every adjacent pair we keep the smaller of the two
sequence distances.

    python demos/02_serialization.py
"""
import math

import numpy as np

from sparsescan.curve import build_template, random_cells, truncation_gap, truncation_table

template = build_template("hilbert", 1)
print("order-1 Hilbert cells in visiting order:")
print(template.cells_in_order())

print("\nscheme      mean gap  truncated pairs  truncated after rotation")
for row in truncation_table(scenes=20, n=200, order=4):
    print(f"{row['scheme']:<10} {row['mean_gap0']:8.2f} {row['truncated_fraction']:16.3f}"
          f" {row['truncated_fraction_rotated']:25.3f}")

rng = np.random.default_rng(1)
cloud = random_cells(rng, 200, 4)
stats = truncation_gap(cloud, build_template("hilbert", 4), (0.0, math.pi / 2))
worst = int(np.argmax(stats.gap0))
print(f"\nworst pair in one cloud: {stats.gap0[worst]} steps apart unrotated, "
      f"{stats.min_gap[worst]} with the 90 degree copy")
