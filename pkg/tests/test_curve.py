import math

import numpy as np
import pytest

from sparsescan import diffcore as dc
from sparsescan.curve import (SCHEMES, CurveError, CurveTemplate, build_template, flatten, random_cells,
                             required_order, rotate_coords, rotation_offset, serial_order, truncation_gap,
                             truncation_table)


def _steps(template):
    cells = template.cells_in_order()
    return np.abs(np.diff(cells, axis=0)).sum(axis=1)


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_templates_are_bijections(scheme, order):
    ranks = build_template(scheme, order).rank_of.ravel()
    np.testing.assert_array_equal(np.sort(ranks), np.arange(8 ** order))


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_hilbert_unit_steps(order):
    assert (_steps(build_template("hilbert", order)) == 1).all()


@pytest.mark.parametrize("scheme", ["zorder", "raster_x", "raster_y"])
def test_other_schemes_break_adjacency(scheme):
    assert (_steps(build_template(scheme, 2)) > 1).any()


def test_zorder_and_raster_small_examples():
    z = build_template("zorder", 1)
    np.testing.assert_array_equal(z.rank([[1, 0, 0], [0, 1, 0], [0, 0, 1]]), [1, 2, 4])
    r = build_template("raster-x", 1)
    cells = np.stack(np.unravel_index(np.arange(8), (2, 2, 2)), 1)
    np.testing.assert_array_equal(r.rank(cells), cells[:, 0] + 2 * cells[:, 1] + 4 * cells[:, 2])


def test_order_and_scheme_validation():
    with pytest.raises(CurveError):
        build_template("hilbert", 0)
    with pytest.raises(CurveError):
        build_template("hilbert", 7)
    with pytest.raises(CurveError):
        build_template("peano", 2)


def test_template_file_roundtrip(tmp_path):
    t = build_template("hilbert", 2)
    path = tmp_path / "h2.bin"
    t.save(path)
    raw = path.read_bytes()
    assert len(raw) == 4 + 2 + 64 * 4 and raw[:4] == b"FMCT"
    # first u32 after the header is the rank of cell (0,0,0), next is (1,0,0)
    assert int.from_bytes(raw[10:14], "little") == t.rank_of[1, 0, 0]
    back = CurveTemplate.load(path)
    assert back.scheme == "hilbert" and back.order == 2
    np.testing.assert_array_equal(back.rank_of, t.rank_of)
    path.write_bytes(raw[:-4])
    with pytest.raises(CurveError):
        CurveTemplate.load(path)


def test_template_csv(tmp_path):
    path = tmp_path / "t.csv"
    build_template("zorder", 1).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,z,rank" and lines[2] == "1,0,0,1" and len(lines) == 9


def test_rotation_examples():
    np.testing.assert_array_equal(rotate_coords([2, 3, 1], 0.0), [2, 3, 1])
    np.testing.assert_array_equal(rotate_coords([2, 3, 1], math.pi / 2), [3, -2, 1])
    np.testing.assert_array_equal(rotate_coords([2, 3, 1], math.pi), [-2, -3, 1])
    rng = np.random.default_rng(0)
    p = rng.integers(-50, 50, (100, 3))
    np.testing.assert_array_equal(rotate_coords(p, 0.0), p)


def test_rotation_offset_keeps_grid_non_negative():
    for theta in (0.0, math.pi / 2, math.pi / 4, math.pi):
        ext = (64, 48, 16)
        off = rotation_offset(ext, theta)
        corners = np.array([[x, y, 0] for x in (0, ext[0] - 1) for y in (0, ext[1] - 1)])
        assert (rotate_coords(corners, theta) + off >= 0).all()
    np.testing.assert_array_equal(rotation_offset((8, 8, 8), 0.0), [0, 0, 0])
    assert required_order((64, 64, 16), (0.0, math.pi / 2)) == 6


def test_flatten_examples():
    t = build_template("raster_x", 1)
    seq, perm = flatten(np.array([[10.0], [20.0]]), [[1, 0, 0], [0, 0, 0]], t, 0.0)
    np.testing.assert_array_equal(perm, [1, 0])
    np.testing.assert_array_equal(seq, [[20.0], [10.0]])
    seq, perm = flatten(np.array([[5.0]]), [[0, 1, 0]], t, 0.0)
    np.testing.assert_array_equal(perm, [0])


def test_flatten_inverse_and_feature_independence():
    rng = np.random.default_rng(1)
    t = build_template("hilbert", 4)
    coords = random_cells(rng, 32, 3)
    feats = rng.normal(size=(32, 5))
    for theta in (0.0, math.pi / 2):
        seq, perm = flatten(feats, coords, t, theta, (8, 8, 8))
        np.testing.assert_array_equal(seq[np.argsort(perm)], feats)
        _, perm2 = flatten(feats * 100.0, coords, t, theta, (8, 8, 8))
        np.testing.assert_array_equal(perm, perm2)
    tensor_seq, _ = flatten(dc.tensor(feats), coords, t, 0.0, (8, 8, 8))
    assert isinstance(tensor_seq, dc.Tensor)


def test_rotation_collisions_fall_back_to_unrotated_rank():
    t = build_template("hilbert", 3)
    coords = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
    theta = math.pi / 4
    perm = serial_order(coords, t, theta, (4, 4, 4))
    rotated = t.rank(rotate_coords(coords, theta) + rotation_offset((4, 4, 4), theta))
    base = t.rank(coords)
    keys = list(zip(rotated[perm], base[perm]))
    assert keys == sorted(keys)


def test_out_of_template_cell_is_named():
    with pytest.raises(CurveError, match=r"\(9, 0, 0\)"):
        serial_order([[9, 0, 0]], build_template("hilbert", 2), 0.0)


def test_truncation_gap_examples():
    t = build_template("hilbert", 2)
    cells = t.cells_in_order()[:2]
    stats = truncation_gap(cells, t, extent=(4, 4, 4))
    assert stats.pairs == 1 and stats.max_gap0 == 1 and stats.max_min_gap == 1
    with pytest.raises(ValueError):
        truncation_gap(cells[:1], t)


def test_rotation_never_worsens_a_pair():
    rng = np.random.default_rng(2)
    t = build_template("hilbert", 4)
    for _ in range(5):
        stats = truncation_gap(random_cells(rng, 200, 4), t, extent=(16, 16, 16))
        assert (stats.min_gap <= stats.gap0).all()
        assert stats.mean_min_gap < stats.mean_gap0


def test_truncation_table_ranks_schemes():
    rows = {r["scheme"]: r for r in truncation_table(scenes=6)}
    assert rows["hilbert"]["truncated_fraction"] < rows["zorder"]["truncated_fraction"]
    assert rows["zorder"]["truncated_fraction"] < rows["raster_x"]["truncated_fraction"]
