import numpy as np
import pytest

from sparsescan import diffcore as dc
from sparsescan.fusion import SasfBlock
from sparsescan.rgsw import (_encode_windows, patch_count, patch_layout, propagate_token, receptive_field,
                            receptive_field_csv, rgsw_encode, slide, split_and_insert)


def _block(seed=0, d=4):
    return SasfBlock(d, 2, 3, np.random.default_rng(seed), saf_half_width=1, ssf_taps=3)


def _affected(rows, src):
    return sorted({q for p, q, _ in rows if p == src})


def test_split_and_insert_layout():
    x = np.arange(1.0, 5.0).reshape(4, 1)
    out, layout = split_and_insert(x, 2, dc.tensor([9.0]))
    np.testing.assert_array_equal(out.data[..., 0], [[1, 2, 9], [3, 4, 9]])
    single, _ = split_and_insert(x, 1, dc.tensor([9.0]))
    np.testing.assert_array_equal(single.data[..., 0], [[1, 2, 3, 4, 9]])
    odd, layout = split_and_insert(np.arange(1.0, 6.0).reshape(5, 1), 2, dc.tensor([9.0]))
    np.testing.assert_array_equal(odd.data[..., 0], [[1, 2, 3, 9], [4, 5, 0, 9]])
    np.testing.assert_array_equal(layout.pad, [[False] * 3, [False, False, True]])
    with pytest.raises(ValueError):
        patch_layout(4, 0)


def test_patch_count_targets_length():
    assert patch_count(10, 64) == 1
    assert patch_count(640, 64) == 10


def test_propagate_token_cases():
    tok = np.array([1.0, 0.0])
    enc = np.array([[[2.0, 0.0], [0.0, 3.0], [5.0, 5.0], [0.0, 0.0]]])
    enc[0, -1] = tok
    out = propagate_token(dc.tensor(enc)).data[0]
    np.testing.assert_allclose(out[0], [3.0, 0.0])          # parallel: cos = 1
    np.testing.assert_allclose(out[1], [0.0, 3.0])          # orthogonal: unchanged
    zero = enc.copy()
    zero[0, -1] = 0.0
    np.testing.assert_array_equal(propagate_token(dc.tensor(zero)).data[0], zero[0, :-1])
    same = np.array([[[1.0, 2.0], [1.0, 2.0]]])
    np.testing.assert_allclose(propagate_token(dc.tensor(same)).data[0, 0], [2.0, 4.0])
    pad = np.array([[False, False, True]])
    np.testing.assert_array_equal(propagate_token(dc.tensor(enc), pad).data[0, 2], enc[0, 2])


def test_slide_examples():
    p = dc.tensor(np.arange(8.0).reshape(2, 4, 1))
    np.testing.assert_array_equal(slide(p).data[..., 0], [[2, 3, 4, 5]])
    assert slide(dc.tensor(np.zeros((1, 4, 1)))).shape[0] == 0
    with pytest.raises(ValueError):
        slide(dc.tensor(np.zeros((2, 3, 1))))


@pytest.mark.parametrize("m,t", [(1, 1), (2, 1), (3, 2), (4, 2), (4, 3), (5, 4)])
def test_length_preserved(m, t):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(23, 4))
    y, first = rgsw_encode(x, _block(), m, t, dc.tensor(np.zeros(4)))
    assert y.shape == (23, 4)


def test_single_patch_single_pass_degenerates_to_block():
    rng = np.random.default_rng(2)
    block = _block()
    x = rng.normal(size=(7, 4))
    token = rng.normal(size=4)
    y, _ = rgsw_encode(x, block, 1, 1, dc.tensor(token))
    seq = np.concatenate([x, token[None]])
    nonvoxel = np.zeros(8, bool)
    nonvoxel[-1] = True
    enc = block(seq, nonvoxel=nonvoxel).y
    np.testing.assert_allclose(y.data, propagate_token(dc.reshape(enc, (1, 8, 4))).data[0], atol=1e-12)


def test_zero_input_and_zero_token_give_zero():
    y, _ = rgsw_encode(np.zeros((12, 4)), _block(), 3, 2, dc.tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_pad_content_never_leaks():
    rng = np.random.default_rng(3)
    block = _block()
    token = dc.tensor(rng.normal(size=4))
    body = rng.normal(size=(3, 4, 4))
    pad = np.zeros((3, 4), bool)
    pad[2, 1:] = True
    coords = np.stack(np.unravel_index(rng.choice(64, 12, replace=False), (4, 4, 4)), 1).reshape(3, 4, 3)
    clean = body.copy()
    clean[pad] = 0.0
    noisy = body.copy()
    noisy[pad] = rng.normal(size=(3, 4)) * 100
    a, _ = _encode_windows(block, dc.tensor(clean), token, pad, coords, True)
    b, _ = _encode_windows(block, dc.tensor(noisy), token, pad, coords, True)
    np.testing.assert_array_equal(a.data[~pad], b.data[~pad])


def _sweep(m, t, n=32, seed=4):
    rng = np.random.default_rng(seed)
    block = _block(seed)
    token = dc.tensor(rng.normal(size=4) * 0.5)
    x = rng.normal(size=(n, 4))
    return receptive_field(lambda a: rgsw_encode(a, block, m, t, token)[0], x)


def test_single_pass_confined_to_patch():
    rows = _sweep(4, 1)
    for p, q, _ in rows:
        assert p // 8 == q // 8


def test_two_passes_reach_every_patch():
    rows = _sweep(4, 2)
    patches = {q // 8 for _, q, _ in rows}
    assert patches == {0, 1, 2, 3}
    pairs = {(p // 8, q // 8) for p, q, _ in rows}
    for i in range(3):
        assert (i, i + 1) in pairs and (i + 1, i) in pairs


def test_more_passes_spread_further_from_the_first_row():
    reach = [max(q // 8 for q in _affected(_sweep(4, t), 0)) for t in (1, 2, 4)]
    assert reach[0] == 0 and reach[0] < reach[1] < reach[2]


def test_slide_schedule_stops_spreading():
    rng = np.random.default_rng(5)
    block = _block(5)
    token = dc.tensor(rng.normal(size=4) * 0.5)
    x = rng.normal(size=(32, 4))

    def reach(t, schedule):
        rows = receptive_field(lambda a: rgsw_encode(a, block, 4, t, token, schedule=schedule)[0], x, [0])
        return max(q for _, q, _ in rows) // 8
    assert reach(3, "slide") == reach(2, "slide")


def test_token_receives_gradient_from_zero_init():
    rng = np.random.default_rng(6)
    token = dc.Tensor(np.zeros(4), requires_grad=True)
    x = rng.normal(size=(20, 4))
    coords = np.stack(np.unravel_index(rng.choice(64, 20, replace=False), (4, 4, 4)), 1)
    with dc.Tape() as tape:
        y, _ = rgsw_encode(x, _block(6), 3, 2, token, coords)
        loss = dc.sum(y * y)
    dc.backward(loss, tape)
    assert np.abs(token.grad).max() > 0


def test_receptive_field_csv():
    text = receptive_field_csv([(0, 3, 0.5)])
    assert text == "perturbed_pos,affected_pos,delta\n0,3,0.5\n"


def test_iteration_count_validated():
    with pytest.raises(ValueError):
        rgsw_encode(np.zeros((4, 4)), _block(), 2, 0, dc.tensor(np.zeros(4)))
