import numpy as np
import pytest

from lilylab.linalg import seeded_gaussian
from lilylab.tape import (GradCheckReport, Tape, UnsupportedPrimitiveError,
                          backward, evaluate, finite_diff_grad, grad_check,
                          record_forward, save_gradcheck_csv)


def rand(rows, cols, seed, std=1.0):
    return seeded_gaussian(rows, cols, std, seed)


class TestRecordForward:
    def test_identity_program(self):
        w = rand(3, 3, 1)

        def program(tape, inputs):
            return tape.matmul(tape.constant(np.eye(3)), tape.param("W", inputs["W"]))

        tape, out = record_forward(program, {"W": w})
        assert np.array_equal(out.value, w)

    def test_recorded_equals_plain_numpy_bitwise(self):
        x = rand(4, 5, 2)
        w = rand(5, 3, 3)

        def program(tape, inputs):
            return tape.matmul(tape.constant(x), tape.param("W", inputs["W"]))

        _, out = record_forward(program, {"W": w})
        assert np.array_equal(out.value, x @ w)

    def test_recorded_equals_grad_free_evaluation_bitwise(self):
        def program(tape, inputs):
            h = tape.gelu(tape.matmul(tape.constant(inputs["x"]),
                                      tape.param("W", inputs["W"])))
            return tape.mse(tape.layer_norm(h), np.zeros_like(h.value))

        inputs = {"x": rand(4, 6, 5), "W": rand(6, 6, 6)}
        _, recorded = record_forward(program, inputs)
        plain = evaluate(program, inputs)
        assert np.array_equal(recorded.value, plain.value)

    def test_unsupported_primitive_rejected_by_name(self):
        tape = Tape()
        with pytest.raises(UnsupportedPrimitiveError, match="convolve"):
            tape.apply("convolve", tape.constant(np.eye(2)))

    def test_apply_dispatches_supported_primitive(self):
        tape = Tape()
        out = tape.apply("add", tape.constant(np.eye(2)), tape.constant(np.eye(2)))
        assert np.array_equal(out.value, 2 * np.eye(2))


class TestBackwardClosedForms:
    def test_grad_of_sum_xw_is_xt_ones(self):
        x = rand(4, 3, 7)
        tape = Tape()
        w = tape.param("W", rand(3, 2, 8))
        y = tape.matmul(tape.constant(x), w)
        # sum(y) expressed with the primitive set: ones^T y ones
        total = tape.matmul(tape.matmul(tape.constant(np.ones((1, 4))), y),
                            tape.constant(np.ones((2, 1))))
        grads = backward(tape, total)
        assert np.allclose(grads["W"], x.T @ np.ones((4, 2)), atol=1e-12)

    def test_low_rank_regression_closed_form(self):
        # loss = 1/2 ||x A B - T||^2 ; dA = x^T R B^T, dB = A^T x^T R
        x, t = rand(5, 4, 9), rand(5, 3, 10)
        a0, b0 = rand(4, 2, 11), rand(2, 3, 12)
        tape = Tape()
        a = tape.param("A", a0)
        b = tape.param("B", b0)
        pred = tape.matmul(tape.matmul(tape.constant(x), a), b)
        # mse = ||.||^2 / size, so scale by size/2 to get the 1/2||.||^2 loss
        loss = tape.scale(tape.mse(pred, t), t.size / 2.0)
        grads = backward(tape, loss)
        resid = x @ a0 @ b0 - t
        assert np.max(np.abs(grads["A"] - x.T @ resid @ b0.T)) < 1e-10
        assert np.max(np.abs(grads["B"] - a0.T @ (x.T @ resid))) < 1e-10

    def test_frozen_leaves_absent(self):
        tape = Tape()
        w = tape.param("W", rand(3, 3, 13), trainable=False)
        loss = tape.mse(tape.matmul(tape.constant(np.eye(3)), w), np.zeros((3, 3)))
        assert backward(tape, loss) == {}

    def test_disconnected_trainable_leaf_gets_zeros(self):
        tape = Tape()
        used = tape.param("used", rand(2, 2, 14))
        unused = tape.param("unused", rand(2, 2, 15))
        loss = tape.mse(used, np.zeros((2, 2)))
        grads = backward(tape, loss)
        assert np.all(grads["unused"] == 0.0)
        assert grads["unused"].shape == unused.value.shape

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        w = tape.param("W", rand(2, 2, 16))
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, tape.add(w, w))

    def test_linearity_of_backward(self):
        x = rand(3, 3, 17)
        c = 2.75

        def grads_of(fn):
            tape = Tape()
            w = tape.param("W", x)
            return backward(tape, fn(tape, w))

        def loss1(tape, w):
            return tape.mse(w, np.zeros((3, 3)))

        def loss2(tape, w):
            return tape.mse(tape.gelu(w), np.ones((3, 3)))

        def combined(tape, w):
            return tape.add(loss1(tape, w), tape.scale(loss2(tape, w), c))

        g1, g2, gc = grads_of(loss1), grads_of(loss2), grads_of(combined)
        assert np.max(np.abs(gc["W"] - (g1["W"] + c * g2["W"]))) < 1e-10


def _fd_check(program, params, rel=1e-5, abs_tol=1e-7):
    tape, loss = record_forward(program, params)
    analytic = backward(tape, loss)
    numeric = finite_diff_grad(program, params, eps=1e-5)
    report = grad_check(analytic, numeric, rel_tol=rel, abs_tol=abs_tol)
    assert report.passed, report.rows
    return report


class TestPrimitiveGradientsAgainstFiniteDifferences:
    """Every primitive's backward vs central differences on small instances."""

    def test_matmul(self):
        def program(tape, p):
            y = tape.matmul(tape.param("A", p["A"]), tape.param("B", p["B"]))
            return tape.mse(y, np.zeros_like(y.value))

        _fd_check(program, {"A": rand(4, 3, 20), "B": rand(3, 5, 21)})

    def test_transpose(self):
        def program(tape, p):
            y = tape.transpose(tape.param("A", p["A"]))
            return tape.mse(y, rand(3, 4, 22))

        _fd_check(program, {"A": rand(4, 3, 23)})

    def test_add(self):
        def program(tape, p):
            y = tape.add(tape.param("A", p["A"]), tape.param("B", p["B"]))
            return tape.mse(y, np.ones((4, 4)))

        _fd_check(program, {"A": rand(4, 4, 24), "B": rand(4, 4, 25)})

    def test_scale_by_constant(self):
        def program(tape, p):
            return tape.mse(tape.scale(tape.param("A", p["A"]), -1.7),
                            np.zeros((3, 3)))

        _fd_check(program, {"A": rand(3, 3, 26)})

    def test_scale_by_node(self):
        def program(tape, p):
            s = tape.param("s", p["s"])
            return tape.mse(tape.scale(tape.param("A", p["A"]), s),
                            np.ones((3, 3)))

        _fd_check(program, {"A": rand(3, 3, 27), "s": np.array([[0.8]])})

    def test_row_softmax(self):
        def program(tape, p):
            y = tape.row_softmax(tape.param("A", p["A"]))
            return tape.mse(y, np.full((4, 5), 0.2))

        _fd_check(program, {"A": rand(4, 5, 28)})

    def test_sum_rows(self):
        def program(tape, p):
            y = tape.sum_rows(tape.param("A", p["A"]))
            return tape.mse(y, np.zeros((1, 6)))

        _fd_check(program, {"A": rand(5, 6, 29)})

    def test_gelu(self):
        def program(tape, p):
            return tape.mse(tape.gelu(tape.param("A", p["A"])), np.zeros((4, 4)))

        _fd_check(program, {"A": rand(4, 4, 30)})

    def test_relu(self):
        # keep entries away from the kink where central differences lie
        a = rand(4, 4, 31)
        a[np.abs(a) < 0.05] = 0.5

        def program(tape, p):
            return tape.mse(tape.relu(tape.param("A", p["A"])), np.zeros((4, 4)))

        _fd_check(program, {"A": a})

    def test_layer_norm(self):
        def program(tape, p):
            y = tape.layer_norm(tape.param("A", p["A"]))
            return tape.mse(y, rand(4, 6, 32))

        _fd_check(program, {"A": rand(4, 6, 33)})

    def test_cross_entropy(self):
        labels = [1, 0, 2]

        def program(tape, p):
            return tape.cross_entropy(tape.param("Z", p["Z"]), labels)

        _fd_check(program, {"Z": rand(3, 4, 34)})

    def test_mse_both_sides(self):
        def program(tape, p):
            return tape.mse(tape.param("A", p["A"]), tape.param("B", p["B"]))

        _fd_check(program, {"A": rand(3, 3, 35), "B": rand(3, 3, 36)})


class TestFiniteDiff:
    def test_quadratic(self):
        def program(tape, p):
            w = tape.param("w", p["w"])
            return tape.mse(w, np.zeros((1, 1)))  # w^2 for a 1x1 value

        grads = finite_diff_grad(program, {"w": np.array([[3.0]])}, eps=1e-5)
        assert abs(grads["w"][0, 0] - 6.0) < 1e-9

    def test_linear_exact_for_any_eps(self):
        def program(tape, p):
            return tape.scale(tape.param("w", p["w"]), 7.0)

        # exactly representable steps give the exact slope; a decimal
        # step only loses what the perturbed points themselves round
        for eps in (2.0 ** -7, 2.0 ** -17, 2.0 ** -23):
            grads = finite_diff_grad(program, {"w": np.array([[2.0]])}, eps=eps)
            assert grads["w"][0, 0] == 7.0
        grads = finite_diff_grad(program, {"w": np.array([[2.0]])}, eps=1e-5)
        assert abs(grads["w"][0, 0] - 7.0) < 1e-8

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t, p: t.constant([[0.0]]), {}, eps=0.0)


class TestGradCheck:
    def test_identical_inputs_pass_with_zero_errors(self):
        g = {"w": rand(3, 3, 40)}
        report = grad_check(g, {"w": g["w"].copy()})
        assert report.passed
        assert report.rows[0][1] == 0.0 and report.rows[0][2] == 0.0

    def test_offset_fails_tight_abs_tol(self):
        g = {"w": rand(3, 3, 41)}
        report = grad_check(g, {"w": g["w"] + 1.0}, rel_tol=0.0, abs_tol=0.5)
        assert not report.passed

    def test_name_mismatch_rejected(self):
        with pytest.raises(ValueError, match="name"):
            grad_check({"a": np.zeros((1, 1))}, {"b": np.zeros((1, 1))})

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            grad_check({"a": np.zeros((1, 2))}, {"a": np.zeros((2, 1))})

    def test_csv_output(self, tmp_path):
        report = GradCheckReport([("w", 1e-6, 2e-8, True)], 1e-4, 1e-6)
        path = tmp_path / "gc.csv"
        save_gradcheck_csv(path, report)
        assert path.read_text().startswith("w,")
        assert path.read_text().strip().endswith("true")
