"""Forward semantics and finite-difference gradient checks for every op."""

import math

import numpy as np
import pytest

from convattn import Tensor, parameter, finite_diff
from convattn import ops


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ops.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zeros_annihilate(self):
        out = ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_known_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ops.matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_array_equal(out.data, triple_loop_matmul(a, b))

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 3))
        np.testing.assert_allclose(
            ops.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12
        )

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_identity_association_is_bit_exact(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((3, 3)))
        b = Tensor(rng.standard_normal((3, 3)))
        eye = Tensor(np.eye(3))
        left = ops.matmul(ops.matmul(a, eye), b)
        right = ops.matmul(a, ops.matmul(eye, b))
        np.testing.assert_array_equal(left.data, right.data)


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = ops.masked_softmax(Tensor([0.0, 0.0]), np.array([True, True]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_single_active_position(self):
        out = ops.masked_softmax(Tensor([9.9, 3.3]), np.array([True, False]))
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_three_way_values(self):
        # High-precision scalar evaluation of softmax([1, 2, 3]).
        exps = [math.exp(v - 3.0) for v in (1.0, 2.0, 3.0)]
        expected = [e / sum(exps) for e in exps]
        out = ops.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.ones(3, dtype=bool))
        np.testing.assert_allclose(out.data, expected, rtol=1e-15)

    def test_empty_active_set_rejected(self):
        with pytest.raises(ValueError, match="at least one active"):
            ops.masked_softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    def test_mask_shape_must_match(self):
        with pytest.raises(ValueError):
            ops.masked_softmax(Tensor([1.0, 2.0]), np.array([True, True, False]))

    def test_shift_invariance_on_active_logits(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(7)
        mask = np.array([True, False, True, True, False, True, True])
        base = ops.masked_softmax(Tensor(logits), mask)
        shifted = ops.masked_softmax(Tensor(logits + 123.456), mask)
        np.testing.assert_allclose(base.data, shifted.data, atol=1e-12)

    def test_random_masks_exact_zeros_and_unit_sums(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            rows, cols = rng.integers(1, 6), rng.integers(1, 9)
            logits = rng.standard_normal((rows, cols)) * 5
            mask = rng.random((rows, cols)) < 0.5
            mask[np.arange(rows), rng.integers(0, cols, size=rows)] = True
            out = ops.masked_softmax(Tensor(logits), mask).data
            assert (out >= 0.0).all()
            assert (out[~mask] == 0.0).all()
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_survives_large_logits(self):
        out = ops.masked_softmax(Tensor([700.0, 699.0]), np.array([True, True]))
        assert np.isfinite(out.data).all()


class TestElementwise:
    def test_add_zeros_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ops.add(Tensor(x), Tensor(np.zeros((2, 3)))).data, x)

    def test_scale_one_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ops.scale(Tensor(x), 1.0).data, x)

    def test_mul_values(self):
        out = ops.mul(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
        np.testing.assert_array_equal(out.data, [4.0, 10.0, 18.0])

    def test_sub_and_scalar_operands(self):
        out = ops.sub(Tensor([3.0, 4.0]), 1.5)
        np.testing.assert_array_equal(out.data, [1.5, 2.5])
        out = ops.add(Tensor([3.0, 4.0]), 1.0)
        np.testing.assert_array_equal(out.data, [4.0, 5.0])

    @pytest.mark.parametrize("op", [ops.add, ops.mul])
    def test_commutative_kinds_commute(self, op):
        rng = np.random.default_rng(23)
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        np.testing.assert_array_equal(op(Tensor(a), Tensor(b)).data, op(Tensor(b), Tensor(a)).data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="must match"):
            ops.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestSplitMerge:
    def test_single_head_is_identity(self):
        x = np.arange(8.0).reshape(2, 4)
        heads = ops.split_heads(Tensor(x), 1)
        np.testing.assert_array_equal(heads.data[0], x)

    def test_contiguous_slices(self):
        heads = ops.split_heads(Tensor([[1.0, 2.0, 3.0, 4.0]]), 2)
        np.testing.assert_array_equal(heads.data[0], [[1.0, 2.0]])
        np.testing.assert_array_equal(heads.data[1], [[3.0, 4.0]])

    def test_merge_concatenates_heads(self):
        merged = ops.merge_heads(Tensor([[[1.0, 2.0]], [[3.0, 4.0]]]))
        np.testing.assert_array_equal(merged.data, [[1.0, 2.0, 3.0, 4.0]])

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((8, 16))
        back = ops.merge_heads(ops.split_heads(Tensor(x), 4))
        np.testing.assert_array_equal(back.data, x)

    def test_indivisible_width_rejected(self):
        with pytest.raises(ValueError, match="split"):
            ops.split_heads(Tensor(np.zeros((2, 6))), 4)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        vocab = 11
        loss = ops.cross_entropy(Tensor(np.zeros((3, vocab))), np.array([0, 5, 10]))
        np.testing.assert_allclose(loss.item(), math.log(vocab), rtol=1e-15)

    def test_two_class_value(self):
        loss = ops.cross_entropy(Tensor([[1.0, 2.0]]), np.array([1]))
        np.testing.assert_allclose(loss.item(), math.log(1.0 + math.exp(-1.0)), rtol=1e-15)

    def test_margin_drives_loss_to_zero(self):
        losses = []
        for margin in (1.0, 10.0, 100.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = margin
            losses.append(ops.cross_entropy(Tensor(logits), np.array([2])).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-8

    def test_out_of_range_target_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_large_logits_stay_finite(self):
        loss = ops.cross_entropy(Tensor([[1000.0, -1000.0]]), np.array([0]))
        assert math.isfinite(loss.item())


class TestIndexing:
    def test_gather_rows_selects_and_rejects(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = ops.gather_rows(table, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])
        with pytest.raises(ValueError, match="out of range"):
            ops.gather_rows(table, np.array([4]))

    def test_window_gather_shape_and_values(self):
        x = Tensor(np.arange(10.0).reshape(5, 2))
        idx = np.array([[0, 1], [1, 2], [3, 4]])
        out = ops.window_gather(x, idx)
        assert out.shape == (3, 2, 2)
        np.testing.assert_array_equal(out.data, x.data[idx])

    def test_index0_bounds(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(ops.index0(x, 1).data, [2.0, 3.0])
        with pytest.raises(ValueError):
            ops.index0(x, 3)

    def test_concat_and_stack(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 3)))
        assert ops.concat([a, b], axis=1).shape == (2, 5)
        assert ops.stack0([a, a, a]).shape == (3, 2, 2)
        with pytest.raises(ValueError):
            ops.stack0([a, b])


class TestRowwise:
    def test_rowwise_dot_matches_manual(self):
        rng = np.random.default_rng(31)
        q = rng.standard_normal((4, 3))
        kwin = rng.standard_normal((4, 5, 3))
        out = ops.rowwise_dot(Tensor(q), Tensor(kwin)).data
        for r in range(4):
            for s in range(5):
                np.testing.assert_allclose(out[r, s], float(q[r] @ kwin[r, s]), rtol=1e-12)

    def test_rowwise_weighted_sum_matches_manual(self):
        rng = np.random.default_rng(37)
        w = rng.standard_normal((4, 5))
        vwin = rng.standard_normal((4, 5, 3))
        out = ops.rowwise_weighted_sum(Tensor(w), Tensor(vwin)).data
        for r in range(4):
            np.testing.assert_allclose(out[r], w[r] @ vwin[r], rtol=1e-12)


def test_layer_norm_normalizes_rows():
    rng = np.random.default_rng(41)
    x = rng.standard_normal((5, 8)) * 3 + 2
    out = ops.layer_norm(
        Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))
    ).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)  # eps shifts variance slightly


def test_relu_clamps_negatives():
    out = ops.relu(Tensor([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.0])


def test_add_bias_broadcasts_over_rows():
    out = ops.add_bias(Tensor(np.zeros((3, 2))), Tensor([1.0, -1.0]))
    np.testing.assert_array_equal(out.data, [[1.0, -1.0]] * 3)


# ---------------------------------------------------------------------------
# Gradient checks: every differentiable op against central finite differences.


def _loss_through(build):
    """Wrap an op output into a fixed scalar so finite_diff can probe it."""
    probe = build()
    weights = np.random.default_rng(99).standard_normal(probe.shape)

    def loss(_ignored=None):
        return ops.reduce_sum(ops.mul(build(), Tensor(weights))).item()

    return loss


def _gradcheck(inputs, build, tol=1e-6):
    loss = _loss_through(build)
    for p in inputs:
        p.zero_grad()
    out = build()
    seed_weights = np.random.default_rng(99).standard_normal(out.shape)
    ops.reduce_sum(ops.mul(out, Tensor(seed_weights))).backward()
    for p in inputs:
        fd = finite_diff(loss, p).data
        rel = np.abs(p.grad - fd).max() / (np.abs(fd).max() + 1e-12)
        assert rel < tol, f"rel err {rel:.3e}"


def _uniform(rng, shape):
    return parameter(rng.uniform(-1.0, 1.0, size=shape))


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    a, b = _uniform(rng, (3, 4)), _uniform(rng, (4, 2))
    _gradcheck([a, b], lambda: ops.matmul(a, b))


def test_elementwise_gradients():
    rng = np.random.default_rng(1)
    a, b = _uniform(rng, (3, 4)), _uniform(rng, (3, 4))
    _gradcheck([a, b], lambda: ops.add(a, b))
    _gradcheck([a, b], lambda: ops.sub(a, b))
    _gradcheck([a, b], lambda: ops.mul(a, b))
    _gradcheck([a], lambda: ops.scale(a, -1.7))


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(2)
    x = parameter(rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)))
    _gradcheck([x], lambda: ops.relu(x))


def test_add_bias_gradients():
    rng = np.random.default_rng(3)
    x, b = _uniform(rng, (3, 4)), _uniform(rng, (4,))
    _gradcheck([x, b], lambda: ops.add_bias(x, b))


def test_masked_softmax_gradient():
    rng = np.random.default_rng(4)
    logits = _uniform(rng, (3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    _gradcheck([logits], lambda: ops.masked_softmax(logits, mask))


def test_split_merge_gradients():
    rng = np.random.default_rng(5)
    x = _uniform(rng, (4, 6))
    _gradcheck([x], lambda: ops.merge_heads(ops.split_heads(x, 3)))


def test_transpose_gradient():
    rng = np.random.default_rng(6)
    x = _uniform(rng, (3, 5))
    _gradcheck([x], lambda: ops.transpose(x))


def test_layer_norm_gradients():
    rng = np.random.default_rng(7)
    x, g, b = _uniform(rng, (4, 6)), _uniform(rng, (6,)), _uniform(rng, (6,))
    _gradcheck([x, g, b], lambda: ops.layer_norm(x, g, b))


def test_gather_rows_gradient_accumulates_repeats():
    rng = np.random.default_rng(8)
    table = _uniform(rng, (5, 3))
    ids = np.array([0, 2, 2, 4])
    _gradcheck([table], lambda: ops.gather_rows(table, ids))


def test_window_gather_gradient_accumulates_clamped_slots():
    rng = np.random.default_rng(9)
    x = _uniform(rng, (5, 3))
    idx = np.array([[0, 0, 1], [0, 1, 2], [3, 4, 4]])
    _gradcheck([x], lambda: ops.window_gather(x, idx))


def test_rowwise_gradients():
    rng = np.random.default_rng(10)
    q = _uniform(rng, (4, 3))
    kwin = _uniform(rng, (4, 5, 3))
    w = _uniform(rng, (4, 5))
    _gradcheck([q, kwin], lambda: ops.rowwise_dot(q, kwin))
    _gradcheck([w, kwin], lambda: ops.rowwise_weighted_sum(w, kwin))


def test_concat_stack_index_gradients():
    rng = np.random.default_rng(11)
    a, b = _uniform(rng, (2, 3)), _uniform(rng, (2, 2))
    _gradcheck([a, b], lambda: ops.concat([a, b], axis=1))
    c, d = _uniform(rng, (2, 3)), _uniform(rng, (2, 3))
    _gradcheck([c, d], lambda: ops.stack0([c, d]))
    _gradcheck([c], lambda: ops.index0(c, 1))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(12)
    logits = _uniform(rng, (4, 5))
    targets = np.array([0, 3, 1, 4])
    logits.zero_grad()
    loss = ops.cross_entropy(logits, targets)
    loss.backward()
    fd = finite_diff(lambda _: ops.cross_entropy(logits, targets).item(), logits).data
    rel = np.abs(logits.grad - fd).max() / (np.abs(fd).max() + 1e-12)
    assert rel < 1e-6
