"""Why semantic fusion breaks causality.

A selective scan is a lower-triangular matrix acting on the sequence: row i
mixes only inputs 0..i.  Fusing hidden states across neighbours of the same
predicted class (in class-sorted order) lets a row read states of later rows,
which shows up as non-zero entries above the diagonal.

    python demos/01_association_matrices.py
"""
import numpy as np

from sparsescan import diffcore as dc
from sparsescan.fusion import saf, saf_association
from sparsescan.ssm import SsmParams, association_matrix, discretize, readout, scan, scan_states

np.set_printoptions(precision=2, suppress=True, linewidth=120)
rng = np.random.default_rng(0)

n, d = 8, 2
x = rng.normal(size=(n, d))
steps = discretize(SsmParams(d, 4, rng), x)

M = association_matrix(steps, channel=0)
print("plain scan, channel 0: y = M x with M lower triangular")
print(M)
print("max |scan - M x| =", np.abs(scan(x, steps).data[:, 0] - M @ x[:, 0]).max())

ids = np.array([0, 1, 2, 0, 1, 2, 0, 1])      # classes alternate along the curve
alpha = np.array([[0.3, 0.3], [1.0, 1.0], [0.3, 0.3]])
Mp = saf_association(steps, ids, alpha[:, 0], channel=0)
print("\nwith semantic fusion (half width 1), classes", ids.tolist())
print(Mp)
print("entries above the diagonal:", int((np.abs(np.triu(Mp, 1)) > 0).sum()))

y = readout(saf(scan_states(x, steps), ids, dc.tensor(alpha)), steps.readout).data
print("max |C saf(h) - M' x| =", np.abs(y[:, 0] - Mp @ x[:, 0]).max())
