import numpy as np
import pytest

from sparsescan import diffcore as dc
from gradcheck import PROBES, directional_error


def _grad_of(fn, *arrays):
    ts = [dc.Tensor(a, requires_grad=True) for a in arrays]
    with dc.Tape() as tape:
        out = fn(*ts)
    dc.backward(out, tape)
    return [t.grad for t in ts]


def test_forward_examples():
    np.testing.assert_array_equal(dc.add(dc.tensor([1.0, 2.0]), dc.tensor([3.0, 4.0])).data, [4, 6])
    v = np.array([0.3, -1.2, 5.0])
    np.testing.assert_array_equal((dc.tensor(np.eye(3)) @ dc.tensor(v.reshape(3, 1))).data.ravel(), v)
    np.testing.assert_allclose(dc.softmax(dc.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_backward_square_and_constant():
    (g,) = _grad_of(lambda x: dc.sum(x * x), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0])
    x = dc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with dc.Tape() as tape:
        out = dc.sum(x * 0.0) + 3.0
    dc.backward(out, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_non_scalar_root_rejected():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        dc.backward(y, tape)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(dc.ShapeError) as info:
        dc.add(dc.tensor(np.ones((2, 3))), dc.tensor(np.ones((3, 2))))
    assert "(2, 3)" in str(info.value) and "(3, 2)" in str(info.value)


def test_only_scalar_broadcasting():
    with pytest.raises(dc.ShapeError):
        dc.mul(dc.tensor(np.ones((2, 3))), dc.tensor(np.ones(3)))
    np.testing.assert_array_equal((dc.tensor(np.ones((2, 3))) * 2.0).data, np.full((2, 3), 2.0))


def test_reshape_infers_one_axis():
    x = dc.tensor(np.arange(12.0))
    assert dc.reshape(x, (3, -1)).shape == (3, 4)
    with pytest.raises(ValueError):
        dc.reshape(x, (-1, -1))


def test_cosine_zero_vector_convention():
    sim = dc.cosine_similarity(dc.tensor([[0.0, 0.0], [1.0, 0.0]]), dc.tensor([[1.0, 2.0], [2.0, 0.0]]), axis=1)
    np.testing.assert_allclose(sim.data, [0.0, 1.0])


def test_gather_with_negative_index_reads_zero():
    a = dc.tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(dc.gather(a, np.array([2, -1, 0])).data, [[4, 5], [0, 0], [0, 1]])


def test_scatter_sums_rows():
    a = dc.tensor(np.ones((4, 2)))
    np.testing.assert_array_equal(dc.scatter(a, np.array([0, 2, 2, 0]), 3).data, [[2, 2], [0, 0], [2, 2]])


def test_conv1d_same_zero_padding():
    a = dc.tensor(np.array([[1.0], [2.0], [3.0]]))
    w = dc.tensor(np.ones((3, 1)))
    np.testing.assert_array_equal(dc.conv1d(a, w, axis=0).data.ravel(), [3, 6, 5])


def test_linear_recurrence_matches_loop():
    rng = np.random.default_rng(1)
    a, u = rng.uniform(0, 1, (6, 2)), rng.normal(size=(6, 2))
    h, expected = np.zeros(2), []
    for i in range(6):
        h = a[i] * h + u[i]
        expected.append(h.copy())
    np.testing.assert_allclose(dc.linear_recurrence(dc.tensor(a), dc.tensor(u)).data, expected, atol=1e-12)


def test_gradients_accumulate_over_reuse():
    (g,) = _grad_of(lambda x: dc.sum(x * 3.0) + dc.sum(x * x), np.array([1.0, -1.0]))
    np.testing.assert_allclose(g, [5.0, 1.0])


def test_no_grad_records_nothing():
    x = dc.Tensor(np.ones(2), requires_grad=True)
    with dc.Tape() as tape:
        with dc.no_grad():
            dc.sum(x * x)
    assert len(tape) == 0


def test_repeat_is_bit_identical():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))

    def run():
        return _grad_of(lambda x, y: dc.sum(dc.softmax(x @ y, axis=1) * dc.sigmoid(x @ y)), a, b)
    first, second = run(), run()
    for g1, g2 in zip(first, second):
        assert np.array_equal(g1, g2)


@pytest.mark.parametrize("probe", PROBES, ids=lambda p: p.__name__)
def test_probe_matches_finite_differences(probe):
    for i in range(3):
        rng = np.random.default_rng([7, i])
        fn, params = probe(rng)
        assert directional_error(fn, params, rng) <= 1e-3
