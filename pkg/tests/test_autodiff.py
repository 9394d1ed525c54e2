"""Autodiff engine tests: exact op semantics, finite-difference oracles for
every differentiable op, and tape behavior."""

import zlib

import numpy as np
import pytest

from keci import autodiff as ad
from keci.autodiff import ParameterStore, Tape, Tensor, backward, finite_difference_check
from keci.errors import ContractError, DimensionError, ValidationError


def fd_check_op(build_loss, arrays, eps=1e-5, tol=1e-6):
    """Wrap input arrays as float64 parameters and compare analytic gradients
    of build_loss(store) against central finite differences."""
    store = ParameterStore(dtype=np.float64)
    for name, arr in arrays.items():
        store.add(name, np.asarray(arr, dtype=np.float64))
    result = finite_difference_check(lambda: build_loss(store), store, eps=eps)
    assert result.max_rel_error < tol, str(result)
    return result


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        fd_check_op(lambda s: ad.sum_all(ad.matmul(s["a"], s["b"])), {"a": a, "b": b})


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        with Tape():
            loss = ad.sum_all(ad.relu(x))
            backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(np.array(0.0))).item() == pytest.approx(0.5)

    def test_sigmoid_extreme_inputs_finite(self):
        out = ad.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0, abs=1e-12)
        assert out.data[1] == pytest.approx(1.0, abs=1e-12)

    def test_concat_1d(self):
        out = ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_add_requires_equal_shapes_or_scalar(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        out = ad.add(Tensor(np.ones((2, 2))), Tensor(np.asarray(2.0)))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    @pytest.mark.parametrize("op_name", ["add", "mul", "relu", "sigmoid", "concat"])
    def test_gradients_match_finite_differences(self, op_name):
        rng = np.random.default_rng(zlib.crc32(op_name.encode()))
        a = rng.normal(size=(3, 4)) + 0.1  # keep relu away from its kink
        b = rng.normal(size=(3, 4)) + 0.1
        ops = {
            "add": lambda s: ad.add(s["a"], s["b"]),
            "mul": lambda s: ad.mul(s["a"], s["b"]),
            "relu": lambda s: ad.relu(s["a"]),
            "sigmoid": lambda s: ad.sigmoid(s["a"]),
            "concat": lambda s: ad.concat([s["a"], s["b"]], axis=1),
        }
        fd_check_op(lambda s: ad.sum_all(ad.mul(ops[op_name](s), ops[op_name](s))), {"a": a, "b": b})


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([[0.0, 0.0]]), axis=1)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_stabilized_no_overflow(self):
        out = ad.softmax(Tensor([[1000.0, 0.0]]), axis=1)
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(50, 7)) * 10)
        out = ad.softmax(x, axis=1)
        assert np.all(out.data > 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_empty_input(self):
        out = ad.softmax(Tensor(np.zeros((0, 4))), axis=1)
        assert out.shape == (0, 4)

    def test_jacobian_vector_product_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 5))
        v = rng.normal(size=(2, 5))
        fd_check_op(
            lambda s: ad.sum_all(ad.mul(ad.softmax(s["x"], axis=1), ad.constant(v))),
            {"x": x},
        )


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        assert ad.cross_entropy(Tensor([1.0, 0.0]), 0).item() == pytest.approx(0.0)

    def test_uniform_prediction_is_log2(self):
        assert ad.cross_entropy(Tensor([0.5, 0.5]), 1).item() == pytest.approx(np.log(2.0))

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor([0.5, 0.5]), 2)

    def test_rejects_non_distribution(self):
        with pytest.raises(ValidationError):
            ad.cross_entropy(Tensor([[3.0, 4.0]]), [0])

    def test_confident_mistake_is_clamped_finite(self):
        out = ad.cross_entropy(Tensor([1.0, 0.0]), 1)
        assert np.isfinite(out.item())

    def test_gradient_through_softmax_is_probs_minus_onehot(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        targets = [1, 0, 3]
        with Tape():
            probs = ad.softmax(logits, axis=1)
            loss = ad.cross_entropy(probs, targets)
            backward(loss)
        expected = probs.data.copy()
        for i, t in enumerate(targets):
            expected[i, t] -= 1.0
        expected /= 3.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5))
        fd_check_op(
            lambda s: ad.cross_entropy(ad.softmax(s["logits"], axis=1), [0, 2, 4, 1]),
            {"logits": logits},
        )


class TestBinaryCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        out = ad.binary_cross_entropy(Tensor([1.0]), Tensor([1.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-10)

    def test_half_prediction_is_log2(self):
        out = ad.binary_cross_entropy(Tensor([0.5]), Tensor([0.0]))
        assert out.item() == pytest.approx(np.log(2.0))

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ValidationError):
            ad.binary_cross_entropy(Tensor([0.5]), Tensor([0.5]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(3, 4))
        target = (rng.random((3, 4)) > 0.5).astype(float)
        fd_check_op(
            lambda s: ad.binary_cross_entropy(ad.sigmoid(s["logits"]), ad.constant(target)),
            {"logits": logits},
        )


class TestStructuralOps:
    def test_gather_duplicate_indices_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape():
            out = ad.gather_rows(x, [1, 1, 2])
            backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather_rows(Tensor(np.zeros((2, 2))), [2])

    def test_scatter_then_gather_roundtrip(self):
        x = np.arange(8.0).reshape(4, 2)
        out = ad.scatter_rows(Tensor(x), [5, 0, 3, 1], 6)
        assert out.shape == (6, 2)
        np.testing.assert_array_equal(out.data[[5, 0, 3, 1]], x)
        np.testing.assert_array_equal(out.data[[2, 4]], 0.0)

    def test_scatter_duplicate_indices_rejected(self):
        with pytest.raises(ContractError):
            ad.scatter_rows(Tensor(np.zeros((2, 2))), [0, 0], 4)

    @pytest.mark.parametrize(
        "name",
        ["gather", "scatter", "slice_cols", "reshape", "transpose", "mean_rows", "add_bias"],
    )
    def test_gradients_match_finite_differences(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        x = rng.normal(size=(4, 6))
        b = rng.normal(size=(1, 6))
        v = rng.normal(size=(6, 3))
        ops = {
            "gather": lambda s: ad.gather_rows(s["x"], [3, 1, 1, 0]),
            "scatter": lambda s: ad.scatter_rows(s["x"], [7, 2, 0, 5], 9),
            "slice_cols": lambda s: ad.slice_cols(s["x"], 1, 4),
            "reshape": lambda s: ad.reshape(s["x"], (2, 12)),
            "transpose": lambda s: ad.transpose(s["x"]),
            "mean_rows": lambda s: ad.mean_rows(s["x"]),
            "add_bias": lambda s: ad.add_bias(s["x"], s["b"]),
        }
        fd_check_op(
            lambda s: ad.sum_all(ad.mul(ops[name](s), ops[name](s))),
            {"x": x, "b": b, "v": v},
        )


class TestTape:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                backward(y)

    def test_backward_without_tape_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.sum_all(x)  # no tape active: nothing recorded
        with pytest.raises(ContractError):
            backward(loss)

    def test_gradients_accumulate_across_backwards(self):
        """Two separate losses add their gradients (linearity of accumulation)."""
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        with Tape():
            backward(ad.sum_all(ad.mul(x, x)))
        first = x.grad.copy()
        with Tape():
            backward(ad.sum_all(x))
        np.testing.assert_allclose(x.grad, first + 1.0)

    def test_sum_of_losses_equals_sum_of_gradients(self):
        """backward on (l1 + l2) gives the same gradients as summing the
        gradients of separate backward passes."""
        rng = np.random.default_rng(8)
        values = rng.normal(size=(3, 3))

        def l1(x):
            return ad.sum_all(ad.mul(x, x))

        def l2(x):
            return ad.sum_all(ad.sigmoid(x))

        x = Tensor(values.copy(), requires_grad=True)
        with Tape():
            backward(ad.add(l1(x), l2(x)))
        combined = x.grad.copy()

        x1 = Tensor(values.copy(), requires_grad=True)
        with Tape():
            backward(l1(x1))
        x2 = Tensor(values.copy(), requires_grad=True)
        with Tape():
            backward(l2(x2))
        np.testing.assert_allclose(combined, x1.grad + x2.grad, atol=1e-12)

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
            assert len(tape) == 1
            backward(loss)
            assert len(tape) == 0

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        out = ad.mul(x, x)
        assert out.requires_grad is False

    def test_backward_visits_each_node_once_in_reverse(self):
        """Custom counting ops record the replay order of the tape."""
        x = Tensor(np.array(2.0), requires_grad=True)
        visits = []

        def tracked(t, label):
            out = Tensor(t.data * 1.0)
            tape = ad.active_tape()
            out.requires_grad = True

            def bwd(g):
                visits.append(label)
                ad.accumulate_grad(t, g)

            tape.record(out, bwd)
            return out

        with Tape():
            a = tracked(x, "a")
            b = tracked(a, "b")
            c = tracked(b, "c")
            backward(ad.sum_all(c))
        assert visits == ["c", "b", "a"]

    def test_ops_are_deterministic(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        r1 = ad.sigmoid(ad.matmul(Tensor(a), Tensor(b))).data
        r2 = ad.sigmoid(ad.matmul(Tensor(a), Tensor(b))).data
        assert np.array_equal(r1, r2)


class TestParameterStore:
    def test_names_sorted_and_unique(self):
        store = ParameterStore()
        store.add("b.w", np.zeros(2))
        store.add("a.w", np.zeros(2))
        assert store.names() == ["a.w", "b.w"]
        with pytest.raises(ContractError):
            store.add("a.w", np.zeros(2))

    def test_snapshot_load_roundtrip(self):
        store = ParameterStore(dtype=np.float64)
        store.add("w", np.array([1.0, 2.0]))
        snap = store.snapshot()
        store["w"].data[:] = 0.0
        store.load_values(snap)
        np.testing.assert_array_equal(store["w"].data, [1.0, 2.0])

    def test_load_rejects_shape_mismatch(self):
        store = ParameterStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(ValidationError):
            store.load_values({"w": np.zeros((2, 3))})


class TestFiniteDifferenceCheck:
    def test_square_function(self):
        """f(x) = x^2 at x = 3: analytic and FD both give 6."""
        store = ParameterStore(dtype=np.float64)
        store.add("x", np.array(3.0))
        result = finite_difference_check(lambda: ad.mul(store["x"], store["x"]), store)
        assert result.max_rel_error < 1e-9
        assert result.n_checked == 1

    def test_corrupted_gradient_is_flagged_with_name(self):
        """A backward pass reporting twice the true gradient shows up as a
        relative error of about 1, attributed to the offending parameter."""
        store = ParameterStore(dtype=np.float64)
        x = store.add("x", np.array(3.0))

        def doubled_square():
            out = Tensor(x.data**2)
            tape = ad.active_tape()
            if tape is not None:
                out.requires_grad = True
                tape.record(out, lambda g: ad.accumulate_grad(x, g * 4.0 * x.data))
            return out

        result = finite_difference_check(doubled_square, store)
        assert result.max_rel_error == pytest.approx(1.0, rel=1e-3)
        assert result.worst_param.startswith("x")

    def test_eps_must_be_positive(self):
        store = ParameterStore(dtype=np.float64)
        store.add("x", np.array(1.0))
        with pytest.raises(ContractError):
            finite_difference_check(lambda: ad.sum_all(store["x"]), store, eps=0.0)


def test_no_nans_after_chained_ops_on_finite_inputs():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(6, 6)) * 100, requires_grad=True)
    with Tape():
        y = ad.softmax(ad.matmul(ad.relu(x), ad.sigmoid(x)), axis=1)
        loss = ad.cross_entropy(y, [0, 1, 2, 3, 4, 5])
        backward(loss)
    assert np.all(np.isfinite(y.data))
    assert np.all(np.isfinite(x.grad))
