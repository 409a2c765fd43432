"""Space-filling curve templates and rotated serialization of voxel sets."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

SCHEMES = ("hilbert", "zorder", "raster_x", "raster_y")
_SCHEME_CODES = {name: i for i, name in enumerate(SCHEMES)}
MAGIC = b"FMCT"
MAX_ORDER = 6


class CurveError(ValueError):
    pass


def hilbert_ranks(x, y, z, order: int) -> np.ndarray:
    """3D Hilbert index via Skilling's transpose/Gray-code construction.

    Vectorized over integer arrays ``x, y, z`` in ``[0, 2**order)``.
    """
    X = [np.asarray(c, dtype=np.int64).copy() for c in (x, y, z)]
    n = 3
    top = 1 << (order - 1)
    q = top
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (X[i] & q) != 0
            if i == 0:
                X[0] = np.where(hit, X[0] ^ p, X[0])
                continue
            t = np.where(hit, 0, (X[0] ^ X[i]) & p)
            X[0] = np.where(hit, X[0] ^ p, X[0] ^ t)
            X[i] = X[i] ^ t
        q >>= 1
    for i in range(1, n):
        X[i] ^= X[i - 1]
    t = np.zeros_like(X[0])
    q = top
    while q > 1:
        t = np.where((X[n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(n):
        X[i] ^= t
    rank = np.zeros_like(X[0])
    for bit in range(order - 1, -1, -1):
        for i in range(n):
            rank = (rank << 1) | ((X[i] >> bit) & 1)
    return rank


def _spread_bits(v: np.ndarray, order: int) -> np.ndarray:
    out = np.zeros_like(v)
    for bit in range(order):
        out |= ((v >> bit) & 1) << (3 * bit)
    return out


def zorder_ranks(x, y, z, order: int) -> np.ndarray:
    """Morton code with x in the lowest interleaved bit, then y, then z."""
    x, y, z = (np.asarray(c, dtype=np.int64) for c in (x, y, z))
    return _spread_bits(x, order) | (_spread_bits(y, order) << 1) | (_spread_bits(z, order) << 2)


def raster_ranks(x, y, z, order: int, fastest: str = "x") -> np.ndarray:
    n = 1 << order
    x, y, z = (np.asarray(c, dtype=np.int64) for c in (x, y, z))
    if fastest == "x":
        return x + n * y + n * n * z
    return y + n * x + n * n * z


@dataclass(frozen=True)
class CurveTemplate:
    """Precomputed cell -> rank table, indexed ``rank_of[x, y, z]``."""

    scheme: str
    order: int
    rank_of: np.ndarray = field(repr=False, compare=False)

    @property
    def side(self) -> int:
        return 1 << self.order

    def rank(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return self.rank_of[coords[:, 0], coords[:, 1], coords[:, 2]]

    def cells_in_order(self) -> np.ndarray:
        """All cells sorted by rank, shape ``(side**3, 3)``."""
        flat = np.argsort(self.rank_of.reshape(-1), kind="stable")
        return np.stack(np.unravel_index(flat, self.rank_of.shape), axis=1)

    def save(self, path) -> None:
        # ranks in raster order: x fastest, then y, then z
        body = np.transpose(self.rank_of, (2, 1, 0)).astype("<u4").tobytes()
        header = MAGIC + struct.pack("<BB", _SCHEME_CODES[self.scheme], self.order)
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path) -> "CurveTemplate":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise CurveError(f"{path}: not a curve template (bad magic)")
        code, order = struct.unpack("<BB", raw[4:6])
        n = 1 << order
        ranks = np.frombuffer(raw[6:], dtype="<u4")
        if code >= len(SCHEMES) or ranks.size != n ** 3:
            raise CurveError(f"{path}: corrupt header or truncated body")
        rank_of = np.transpose(ranks.astype(np.int64).reshape(n, n, n), (2, 1, 0))
        return cls(SCHEMES[code], order, np.ascontiguousarray(rank_of))

    def to_csv(self, path) -> None:
        n = self.side
        x, y, z = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
        rows = np.stack([x.ravel(), y.ravel(), z.ravel(), self.rank_of.ravel()], axis=1)
        rows = rows[np.lexsort((rows[:, 0], rows[:, 1], rows[:, 2]))]
        np.savetxt(path, rows, fmt="%d", delimiter=",", header="x,y,z,rank", comments="")


def normalize_scheme(scheme: str) -> str:
    scheme = scheme.replace("-", "_")
    if scheme not in SCHEMES:
        raise CurveError(f"unknown curve scheme {scheme!r}; expected one of {SCHEMES}")
    return scheme


_template_cache: dict[tuple[str, int], CurveTemplate] = {}


def build_template(scheme: str, order: int) -> CurveTemplate:
    """Build (or fetch from the in-process cache) the template of ``scheme``."""
    scheme = normalize_scheme(scheme)
    if not 1 <= order <= MAX_ORDER:
        raise CurveError(f"curve order {order} outside [1, {MAX_ORDER}]")
    key = (scheme, order)
    if key not in _template_cache:
        n = 1 << order
        x, y, z = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
        if scheme == "hilbert":
            ranks = hilbert_ranks(x, y, z, order)
        elif scheme == "zorder":
            ranks = zorder_ranks(x, y, z, order)
        else:
            ranks = raster_ranks(x, y, z, order, fastest=scheme[-1])
        ranks.setflags(write=False)
        _template_cache[key] = CurveTemplate(scheme, order, ranks)
    return _template_cache[key]


# ---------------------------------------------------------------------------
# rotation and flattening
# ---------------------------------------------------------------------------

def _trig(theta: float) -> tuple[float, float]:
    # snap values like cos(pi/2) = 6e-17 so the floor stays exact
    c, s = math.cos(theta), math.sin(theta)
    c = round(c) if abs(c - round(c)) < 1e-12 else c
    s = round(s) if abs(s - round(s)) < 1e-12 else s
    return c, s


def rotate_coords(coords, theta: float) -> np.ndarray:
    """BEV rotation with floor: (x cos + y sin, y cos - x sin, z)."""
    p = np.asarray(coords, dtype=np.int64)
    flat = p.reshape(-1, 3)
    c, s = _trig(theta)
    x, y = flat[:, 0].astype(np.float64), flat[:, 1].astype(np.float64)
    out = np.empty_like(flat)
    out[:, 0] = np.floor(x * c + y * s)
    out[:, 1] = np.floor(y * c - x * s)
    out[:, 2] = flat[:, 2]
    return out.reshape(p.shape)


def rotation_offset(extent, theta: float) -> np.ndarray:
    """Translation making every rotated cell of the grid ``[0, extent)`` non-negative.

    Taken from the rotated corners, so it depends on the grid only, never on
    which cells are occupied.  Identity for ``theta = 0``.
    """
    ex, ey = int(extent[0]) - 1, int(extent[1]) - 1
    corners = np.array([[0, 0, 0], [ex, 0, 0], [0, ey, 0], [ex, ey, 0]])
    lo = rotate_coords(corners, theta).min(axis=0)
    return np.array([-lo[0], -lo[1], 0], dtype=np.int64)


def required_order(extent, angles) -> int:
    """Smallest template order containing the grid under every angle."""
    span = int(extent[2])
    ex, ey = int(extent[0]) - 1, int(extent[1]) - 1
    corners = np.array([[0, 0, 0], [ex, 0, 0], [0, ey, 0], [ex, ey, 0]])
    for theta in angles:
        r = rotate_coords(corners, theta)
        span = max(span, int(np.ptp(r[:, 0])) + 1, int(np.ptp(r[:, 1])) + 1)
    return max(1, math.ceil(math.log2(span)))


def serial_ranks(coords, template: CurveTemplate, theta: float, extent=None) -> np.ndarray:
    """Curve rank of each voxel after rotation and re-centering."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if extent is None:
        extent = (template.side,) * 3
    shifted = rotate_coords(coords, theta) + rotation_offset(extent, theta)
    bad = np.nonzero(((shifted < 0) | (shifted >= template.side)).any(axis=1))[0]
    if bad.size:
        i = int(bad[0])
        raise CurveError(f"cell {tuple(int(v) for v in coords[i])} rotated by {theta:.4f} rad lands at "
                         f"{tuple(int(v) for v in shifted[i])}, outside the order-{template.order} template")
    return template.rank(shifted)


def serial_order(coords, template: CurveTemplate, theta: float, extent=None) -> np.ndarray:
    """Permutation sorting voxels by rotated rank; collisions fall back to the θ=0 rank."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    rotated = serial_ranks(coords, template, theta, extent)
    base = serial_ranks(coords, template, 0.0, extent)
    return np.lexsort((np.arange(len(coords)), base, rotated))


def flatten(feats, coords, template: CurveTemplate, theta: float, extent=None):
    """Reorder rows of ``feats`` along the curve; returns ``(sequence, perm)``.

    ``feats`` may be a numpy array or a diffcore Tensor (reordered with gather).
    """
    perm = serial_order(coords, template, theta, extent)
    if hasattr(feats, "requires_grad"):
        return dc.gather(feats, perm), perm
    return np.asarray(feats)[perm], perm


# ---------------------------------------------------------------------------
# regional truncation diagnostic
# ---------------------------------------------------------------------------

def adjacent_pairs(coords) -> np.ndarray:
    """Index pairs (i, j), i < j, of voxels one unit step apart."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    lookup = {tuple(c): i for i, c in enumerate(coords.tolist())}
    pairs = []
    for i, (x, y, z) in enumerate(coords.tolist()):
        for d in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            j = lookup.get((x + d[0], y + d[1], z + d[2]))
            if j is not None:
                pairs.append((min(i, j), max(i, j)))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


@dataclass
class TruncationStats:
    pairs: int
    gap0: np.ndarray = field(repr=False)
    min_gap: np.ndarray = field(repr=False)

    @property
    def mean_gap0(self) -> float:
        return float(self.gap0.mean()) if self.pairs else 0.0

    @property
    def max_gap0(self) -> int:
        return int(self.gap0.max()) if self.pairs else 0

    @property
    def mean_min_gap(self) -> float:
        return float(self.min_gap.mean()) if self.pairs else 0.0

    @property
    def max_min_gap(self) -> int:
        return int(self.min_gap.max()) if self.pairs else 0

    def truncated_fraction(self, threshold: int = 2, rotated: bool = False) -> float:
        """Share of adjacent pairs more than ``threshold`` sequence steps apart.

        Unlike the mean gap this is not dominated by the few pairs straddling
        the curve's top-level cell boundaries, so it ranks schemes stably.
        """
        gaps = self.min_gap if rotated else self.gap0
        return float(np.mean(gaps > threshold)) if self.pairs else 0.0

    def mean_log_gap(self, rotated: bool = False) -> float:
        gaps = self.min_gap if rotated else self.gap0
        return float(np.mean(np.log2(gaps))) if self.pairs else 0.0


def truncation_gap(coords, template: CurveTemplate, angles=(0.0, math.pi / 2), extent=None) -> TruncationStats:
    """Sequence distance between spatially adjacent voxels, at θ=0 and best over ``angles``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) < 2:
        raise ValueError("truncation_gap needs at least two voxels")
    pairs = adjacent_pairs(coords)
    gaps = []
    for theta in (0.0, *angles):
        position = np.empty(len(coords), dtype=np.int64)
        position[serial_order(coords, template, theta, extent)] = np.arange(len(coords))
        gaps.append(np.abs(position[pairs[:, 0]] - position[pairs[:, 1]]))
    gap0 = gaps[0]
    min_gap = np.min(np.stack(gaps[1:]), axis=0) if angles else gap0
    return TruncationStats(len(pairs), gap0, np.minimum(min_gap, gap0))


def random_cells(rng: np.random.Generator, n: int, order: int) -> np.ndarray:
    """``n`` distinct uniformly random cells of the ``2^order`` cube."""
    side = 1 << order
    flat = rng.choice(side ** 3, size=n, replace=False)
    return np.stack(np.unravel_index(flat, (side,) * 3), axis=1).astype(np.int64)


TRUNCATION_COLUMNS = ("scheme", "scenes", "pairs", "mean_gap0", "mean_min_gap",
                      "truncated_fraction", "truncated_fraction_rotated")


def truncation_table(schemes=SCHEMES, scenes: int = 20, n: int = 200, order: int = 4, seed: int = 0,
                     angles=(0.0, math.pi / 2)) -> list[dict]:
    """Per-scheme truncation statistics over random voxel clouds (same clouds for every scheme)."""
    rng = np.random.default_rng(seed)
    clouds = [random_cells(rng, n, order) for _ in range(scenes)]
    rows = []
    for scheme in schemes:
        template = build_template(scheme, order)
        stats = [truncation_gap(c, template, angles) for c in clouds]
        rows.append({
            "scheme": normalize_scheme(scheme),
            "scenes": scenes,
            "pairs": sum(s.pairs for s in stats),
            "mean_gap0": float(np.mean([s.mean_gap0 for s in stats])),
            "mean_min_gap": float(np.mean([s.mean_min_gap for s in stats])),
            "truncated_fraction": float(np.mean([s.truncated_fraction() for s in stats])),
            "truncated_fraction_rotated": float(np.mean([s.truncated_fraction(rotated=True) for s in stats])),
        })
    return rows
