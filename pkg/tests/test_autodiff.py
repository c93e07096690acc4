"""Tests for the reverse-mode engine.

Analytic gradients are checked against an independent central-difference
oracle implemented here (plain numpy over the forward values).
"""

import numpy as np
import pytest

from tangnn import autodiff as ad
from tangnn.errors import NonFiniteError, ShapeError, StateError


def numeric_grad(f, x, step=1e-6):
    """Central-difference gradient of scalar f at matrix x (independent oracle)."""
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            orig = x[i, j]
            x[i, j] = orig + step
            hi = f(x)
            x[i, j] = orig - step
            lo = f(x)
            x[i, j] = orig
            g[i, j] = (hi - lo) / (2 * step)
    return g


def analytic_grad(op, x_values, *extra):
    """Gradient of sum(op(x)) via the tape."""
    x = ad.parameter(x_values)
    with ad.Tape() as tape:
        out = op(x, *extra)
        loss = ad.sum_all(out)
    tape.backward(loss)
    return x.grad


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.tensor([[0.0]])).values[0, 0] == 0.5

    def test_softmax_of_equal_entries(self):
        out = ad.softmax_rows(ad.tensor(np.zeros((2, 5)))).values
        np.testing.assert_allclose(out, 1.0 / 5.0)

    def test_l2_normalize_345(self):
        out = ad.l2_normalize_rows(ad.tensor([[3.0, 4.0]])).values
        np.testing.assert_allclose(out, [[0.6, 0.8]])

    def test_l2_normalize_zero_row_stays_zero(self):
        with ad.collect_diagnostics() as diag:
            out = ad.l2_normalize_rows(ad.tensor([[0.0, 0.0], [3.0, 4.0]])).values
        np.testing.assert_allclose(out[0], 0.0)
        assert any(event == "l2_zero_row" for event, _ in diag)

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=5.0, size=(7, 11))
        out = ad.softmax_rows(ad.tensor(x)).values
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out > 0).all()

    def test_layer_norm_zero_mean_unit_var_pre_gain(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 9)) * 2.0 + 1.0
        gain = ad.tensor(np.ones((1, 9)))
        bias = ad.tensor(np.zeros((1, 9)))
        out = ad.layer_norm_rows(ad.tensor(x), gain, bias).values
        assert np.abs(out.mean(axis=1)).max() < 1e-7
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6

    def test_nan_input_raises(self):
        with pytest.raises(NonFiniteError):
            ad.tensor([[np.nan, 1.0]])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 2))))


class TestBackward:
    def test_linear_map_gradient_broadcasts_x(self):
        # loss = sum(W @ x) with x fixed: dloss/dW_ij = x_j.
        w = ad.parameter(np.arange(6.0).reshape(2, 3))
        x = ad.constant([[1.0], [2.0], [3.0]])
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.matmul(w, x))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_sigmoid_gradient_at_zero(self):
        w = ad.parameter([[0.0]])
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.sigmoid(w))
        tape.backward(loss)
        assert w.grad[0, 0] == pytest.approx(0.25)

    def test_three_layer_composition_matches_fd(self):
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(4, 5))
        w2 = rng.normal(size=(5, 3))
        x = rng.normal(size=(2, 4))

        def forward_values(w1v):
            h = 1.0 / (1.0 + np.exp(-(x @ w1v)))
            h2 = np.maximum(h @ w2, 0.0)
            rowsum = h2.sum(axis=1, keepdims=True)
            return float(np.log(np.maximum(rowsum, ad.EPS)).sum())

        p = ad.parameter(w1.copy())
        with ad.Tape() as tape:
            h = ad.sigmoid(ad.matmul(ad.constant(x), p))
            h2 = ad.relu(ad.matmul(h, ad.constant(w2)))
            rowsum = ad.matmul(h2, ad.constant(np.ones((3, 1))))
            loss = ad.sum_all(ad.log(rowsum))
        tape.backward(loss)
        fd = numeric_grad(forward_values, w1.copy(), step=1e-5)
        rel = np.abs(p.grad - fd) / np.maximum(np.abs(p.grad) + np.abs(fd), 1e-8)
        assert rel.max() < 1e-4

    def test_backward_twice_is_a_state_error(self):
        w = ad.parameter([[1.0]])
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.sigmoid(w))
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)

    def test_module_level_backward_finds_tape(self):
        w = ad.parameter([[0.0]])
        with ad.Tape():
            loss = ad.sum_all(ad.sigmoid(w))
        ad.backward(loss)
        assert w.grad[0, 0] == pytest.approx(0.25)

    def test_concat_routes_gradients_to_column_blocks(self):
        a = ad.parameter(np.zeros((2, 3)))
        b = ad.parameter(np.zeros((2, 2)))
        pick = np.zeros((5, 1))
        pick[4, 0] = 1.0  # one-hot perturbation: only b's last column matters
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.matmul(ad.concat_cols(a, b), ad.constant(pick)))
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, 0.0)
        expected = np.zeros((2, 2))
        expected[:, 1] = 1.0
        np.testing.assert_allclose(b.grad, expected)


PRIMITIVES = [
    ("matmul", lambda x: ad.matmul(x, ad.constant(np.linspace(-1, 1, 16 * 4).reshape(16, 4))), (8, 16)),
    ("add", lambda x: ad.add(x, ad.constant(np.ones((8, 16)))), (8, 16)),
    ("add_bias", lambda x: ad.add(x, ad.constant(np.linspace(0, 1, 16).reshape(1, 16))), (8, 16)),
    ("scale", lambda x: ad.scale(x, -2.5), (8, 16)),
    ("elementwise_mul", lambda x: ad.elementwise_mul(x, ad.constant(np.linspace(1, 2, 8 * 16).reshape(8, 16))), (8, 16)),
    ("concat_cols", lambda x: ad.concat_cols(x, ad.constant(np.ones((8, 3))), x), (8, 16)),
    ("slice_cols", lambda x: ad.slice_cols(x, 3, 11), (8, 16)),
    ("gather_rows", lambda x: ad.gather_rows(x, np.array([0, 3, 3, 7, 1])), (8, 16)),
    ("reshape", lambda x: ad.reshape(x, 16, 8), (8, 16)),
    ("mean_rows", ad.mean_rows, (8, 16)),
    ("segment_mean_rows", lambda x: ad.segment_mean_rows(x, 4), (8, 16)),
    # sum(softmax) is constant, so weight the entries to get a live gradient
    ("softmax_rows",
     lambda x: ad.elementwise_mul(ad.softmax_rows(x),
                                  ad.constant(np.linspace(-1, 2, 8 * 16).reshape(8, 16))),
     (8, 16)),
    ("sigmoid", ad.sigmoid, (8, 16)),
    ("log", ad.log, (8, 16)),
    ("sum", ad.sum_all, (8, 16)),
    ("l2_normalize_rows", ad.l2_normalize_rows, (8, 16)),
]


@pytest.mark.parametrize("name,op,shape", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_vjp_matches_finite_differences(name, op, shape):
    rng = np.random.default_rng(abs(hash(name)) % (2**31))
    x = rng.normal(size=shape) + 0.05
    if name == "log":
        x = np.abs(x) + 0.5
    grad = analytic_grad(op, x.copy())

    def f(values):
        return float(op(ad.tensor(values)).values.sum())

    fd = numeric_grad(f, x.copy())
    rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
    assert rel.max() < 1e-4


def test_relu_vjp_away_from_kink():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 16))
    x[np.abs(x) < 1e-2] = 0.5  # keep the oracle away from the kink
    grad = analytic_grad(ad.relu, x.copy())
    fd = numeric_grad(lambda v: float(ad.relu(ad.tensor(v)).values.sum()), x.copy())
    rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
    assert rel.max() < 1e-4


def test_layer_norm_vjp_matches_finite_differences():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(5, 7))
    gain_v = rng.normal(size=(1, 7)) + 1.0
    bias_v = rng.normal(size=(1, 7))

    for which in ("x", "gain", "bias"):
        x_t = ad.parameter(x.copy())
        g_t = ad.parameter(gain_v.copy())
        b_t = ad.parameter(bias_v.copy())
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.layer_norm_rows(x_t, g_t, b_t))
        tape.backward(loss)
        target = {"x": x_t, "gain": g_t, "bias": b_t}[which]

        def f(values):
            subs = {"x": x.copy(), "gain": gain_v.copy(), "bias": bias_v.copy()}
            subs[which] = values
            out = ad.layer_norm_rows(ad.tensor(subs["x"]), ad.tensor(subs["gain"]),
                                     ad.tensor(subs["bias"]))
            return float(out.values.sum())

        base = {"x": x, "gain": gain_v, "bias": bias_v}[which]
        fd = numeric_grad(f, base.copy())
        rel = np.abs(target.grad - fd) / np.maximum(np.abs(target.grad) + np.abs(fd), 1e-8)
        assert rel.max() < 1e-4, which


def test_csr_mean_rows_forward_and_vjp():
    # 0-1-2 path plus isolated node 3: row 3 must fall back to itself.
    offsets = np.array([0, 1, 3, 4, 4])
    targets = np.array([1, 0, 2, 1])
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 5))
    out = ad.csr_mean_rows(ad.tensor(x), offsets, targets).values
    np.testing.assert_allclose(out[0], x[1])
    np.testing.assert_allclose(out[1], (x[0] + x[2]) / 2)
    np.testing.assert_allclose(out[3], x[3])

    grad = analytic_grad(lambda t: ad.csr_mean_rows(t, offsets, targets), x.copy())
    fd = numeric_grad(
        lambda v: float(ad.csr_mean_rows(ad.tensor(v), offsets, targets).values.sum()),
        x.copy())
    rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
    assert rel.max() < 1e-4


class TestFiniteDiffCheck:
    def test_quadratic_gradient_is_exact(self):
        w = ad.parameter([[1.0, 2.0]])

        def f():
            return ad.sum_all(ad.elementwise_mul(w, w))

        report = ad.finite_diff_check(f, {"w": w}, step=1e-5, tol=1e-8)
        assert report.passed
        np.testing.assert_allclose(w.grad, [[2.0, 4.0]])
        assert report.max_rel_error < 1e-8

    def test_relu_kink_is_flagged_and_excluded(self):
        w = ad.parameter([[0.0, 1.0]])

        def f():
            return ad.sum_all(ad.relu(w))

        report = ad.finite_diff_check(f, {"w": w}, step=1e-5, tol=1e-4)
        assert (0, 0) in report.excluded["w"]
        assert report.passed  # the kink entry does not poison the check

    def test_composite_model_gradients(self):
        rng = np.random.default_rng(21)
        w1 = ad.parameter(rng.normal(size=(4, 6)) * 0.3)
        w2 = ad.parameter(rng.normal(size=(6, 2)) * 0.3)
        x = np.asarray(rng.normal(size=(3, 4)))

        def f():
            h = ad.sigmoid(ad.matmul(ad.constant(x), w1))
            out = ad.softmax_rows(ad.matmul(h, w2))
            return ad.sum_all(ad.elementwise_mul(out, out))

        report = ad.finite_diff_check(f, {"w1": w1, "w2": w2})
        assert report.passed, report.summary()
