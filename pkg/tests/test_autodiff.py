import math

import numpy as np
import pytest

from rtqa import autodiff as ad
from rtqa.errors import NumericError, ShapeError

from oracles import assert_grads_close, fd_gradient, np_softmax


def test_matmul_identity():
    eye = ad.constant(np.eye(2))
    m = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(eye, m)
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_computed():
    a = ad.constant([[1.0, 0.0], [0.0, 0.0]])
    b = ad.constant([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_scalar_case():
    out = ad.matmul(ad.constant([[2.0]]), ad.constant([[3.0]]))
    assert out.item() == 6.0


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


@pytest.mark.parametrize("ta,tb", [(False, False), (True, False), (False, True), (True, True)])
def test_matmul_transpose_flags_match_numpy(ta, tb):
    rng = np.random.default_rng(0)
    a = ad.param(rng.normal(size=(4, 4)))
    b = ad.param(rng.normal(size=(4, 4)))
    left = a.data.T if ta else a.data
    right = b.data.T if tb else b.data
    with ad.Tape() as tape:
        out = ad.matmul(a, b, ta, tb)
        np.testing.assert_allclose(out.data, left @ right)
        loss = ad.sum_all(out)
        ad.backward(loss, tape)
    fd = fd_gradient(
        lambda: float(((a.data.T if ta else a.data) @ (b.data.T if tb else b.data)).sum()), [a, b])
    assert_grads_close(a.grad, fd[0])
    assert_grads_close(b.grad, fd[1])


def test_softmax_uniform():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_closed_form():
    out = ad.softmax(ad.constant([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_extreme_magnitudes_stable():
    out = ad.softmax(ad.constant([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)
    assert abs(out.data.sum() - 1.0) < 1e-6


def test_softmax_nan_input_rejected():
    x = ad.constant([0.0, 1.0])
    x.data[0] = np.nan
    with pytest.raises(NumericError):
        ad.softmax(x)


def test_cross_entropy_closed_forms():
    assert ad.cross_entropy(ad.constant([0.0, 0.0]), 0).item() == pytest.approx(math.log(2))
    assert ad.cross_entropy(ad.constant([100.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-12)
    assert ad.cross_entropy(ad.constant([0.0, math.log(3.0)]), 0).item() == pytest.approx(math.log(4))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.constant([0.0, 1.0]), 2)


def test_cross_entropy_batched_is_mean_of_rows():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 5))
    targets = [0, 3, 2, 1]
    batched = ad.cross_entropy(ad.constant(logits), targets).item()
    single = np.mean([ad.cross_entropy(ad.constant(row), t).item()
                      for row, t in zip(logits, targets)])
    assert batched == pytest.approx(single, rel=1e-12)


def test_backward_square():
    x = ad.param(np.asarray([3.0]))
    with ad.Tape() as tape:
        loss = ad.mul(x, x)
        ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_sum_of_softmax_is_zero():
    x = ad.param(np.asarray([[0.3, -1.2, 2.0]]))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.softmax(x))
        ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, np.zeros((1, 3)), atol=1e-12)


def test_backward_requires_scalar_loss():
    x = ad.param(np.ones((2, 2)))
    with ad.Tape() as tape:
        out = ad.add(x, x)
        with pytest.raises(ShapeError):
            ad.backward(out, tape)


def test_backward_shared_tensor_sums_both_paths():
    rng = np.random.default_rng(2)
    x = ad.param(rng.normal(size=(2, 3)))
    w = ad.param(rng.normal(size=(3, 2)))

    def run():
        h = ad.matmul(x, w)
        # x used again on a second path
        both = ad.add(ad.sum_all(h), ad.sum_all(ad.mul(x, x)))
        return both

    with ad.Tape() as tape:
        loss = run()
        ad.backward(loss, tape)
    fd = fd_gradient(lambda: run().item(), [x, w])
    assert_grads_close(x.grad, fd[0])
    assert_grads_close(w.grad, fd[1])


def _random_graph(rng, x, w1, w2, gain, bias, emb):
    """Composite graph touching every primitive."""
    h = ad.gelu(ad.matmul(x, w1))
    h = ad.layer_norm(h, gain, bias)
    picked = ad.embedding(emb, [0, 2, 1])
    h = ad.concat([h, picked], axis=0)
    h = ad.add(ad.matmul(h, w2), ad.mul(ad.rows(h, 0, h.shape[0]), 0.0))
    att = ad.softmax(ad.mul(ad.matmul(h, h, transpose_b=True), 0.5))
    h = ad.matmul(att, h)
    return ad.cross_entropy(ad.rows(h, 1, 2), 2)


def test_gradient_oracle_random_graphs():
    # every primitive vs central finite differences
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = ad.param(rng.normal(size=(2, 4)))
        w1 = ad.param(rng.normal(size=(4, 4)))
        w2 = ad.param(rng.normal(size=(4, 4)))
        gain = ad.param(np.ones(4))
        bias = ad.param(np.zeros(4))
        emb = ad.param(rng.normal(size=(3, 4)))
        params = [x, w1, w2, gain, bias, emb]
        with ad.Tape() as tape:
            loss = _random_graph(rng, *params)
            ad.backward(loss, tape)
        fd = fd_gradient(lambda: _random_graph(rng, *params).item(), params)
        for p, g in zip(params, fd):
            assert_grads_close(p.grad, g)


def test_gradient_accumulates_across_tapes():
    x = ad.param(np.asarray([2.0]))
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.mul(x, x)
            ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [8.0])
    ad.zero_grads([x])
    assert x.grad is None


def test_no_tape_records_nothing():
    x = ad.param(np.ones((2, 2)))
    out = ad.matmul(x, x)
    assert not out._on_tape


def test_determinism_bit_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = ad.param(rng.normal(size=(3, 3)))
        w = ad.param(rng.normal(size=(3, 3)))
        with ad.Tape() as tape:
            loss = ad.cross_entropy(ad.rows(ad.gelu(ad.matmul(x, w)), 0, 1), 1)
            ad.backward(loss, tape)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run(7)
    l2, gx2, gw2 = run(7)
    assert l1 == l2
    assert (gx1 == gx2).all() and (gw1 == gw2).all()


def test_adam_zero_gradient_keeps_params():
    p = ad.param(np.asarray([1.0, -2.0]))
    state = ad.AdamState.for_params([p], lr=0.1)
    before = p.data.copy()
    ad.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step == 1


def test_adam_first_step_closed_form():
    p = ad.param(np.asarray([1.0, 1.0]))
    g = np.asarray([0.3, -0.5])
    lr = 0.01
    state = ad.AdamState.for_params([p], lr=lr)
    ad.adam_step([p], [g], state)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = 1.0 - lr * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adam_second_moment_grows():
    p = ad.param(np.asarray([0.0]))
    g = np.asarray([0.4])
    state = ad.AdamState.for_params([p])
    ad.adam_step([p], [g], state)
    v1 = state.v[0].copy()
    ad.adam_step([p], [g], state)
    assert (state.v[0] > v1).all()


def test_adam_shape_mismatch():
    p = ad.param(np.ones(3))
    state = ad.AdamState.for_params([p])
    with pytest.raises(ShapeError):
        ad.adam_step([p], [np.ones(4)], state)


def test_softmax_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7)) * 10
    np.testing.assert_allclose(ad.softmax(ad.constant(x), axis=1).data,
                               np_softmax(x, axis=1), atol=1e-12)
