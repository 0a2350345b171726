import math

import numpy as np
import pytest

from spatioforecast import numcore as nc


def fd_check(build, params, step=1e-5, floor=1e-6):
    """Analytic grads via tape vs central finite differences; returns max rel err."""
    for p in params:
        p.zero_grad()
    with nc.Tape() as tape:
        loss = build()
    nc.backward(tape, loss)
    numeric = nc.finite_difference(lambda: build().item(), params, step=step)
    return max(nc.max_relative_error(p.grad, numeric[i], floor=floor)
               for i, p in enumerate(params))


class TestMatmul:
    def test_identity(self):
        a = nc.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nc.matmul(nc.tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_zero(self):
        z = nc.matmul(nc.tensor(np.eye(2)), nc.tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(z.data, np.zeros((2, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(nc.tensor(np.ones((2, 3))), nc.tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_ones_bt(self):
        rng = np.random.default_rng(0)
        a = nc.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = nc.tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.matmul(a, b))
        nc.backward(tape, loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
        err = fd_check(lambda: nc.sum_all(nc.matmul(a, b)), [a, b])
        assert err < 1e-4

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a = nc.tensor(rng.normal(size=(5, 2, 3, 4)), requires_grad=True)
        b = nc.tensor(rng.normal(size=(4, 6)), requires_grad=True)
        out = nc.matmul(a, b)
        assert out.shape == (5, 2, 3, 6)
        err = fd_check(lambda: nc.sum_all(nc.square(nc.matmul(a, b))), [a, b])
        assert err < 1e-4


class TestSoftmaxRows:
    def test_uniform(self):
        out = nc.softmax_rows(nc.tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)

    def test_length_one_row(self):
        out = nc.softmax_rows(nc.tensor([[7.0]]))
        np.testing.assert_array_equal(out.data, [[1.0]])

    def test_log_two_ratio(self):
        out = nc.softmax_rows(nc.tensor([[0.0, math.log(2.0)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_rows_sum_to_one_extreme_values(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1e4, 1e4, size=(6, 9))
        out = nc.softmax_rows(nc.tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-9)

    def test_entries_in_open_interval_for_moderate_inputs(self):
        rng = np.random.default_rng(11)
        out = nc.softmax_rows(nc.tensor(rng.normal(size=(6, 9))))
        assert (out.data > 0).all() and (out.data < 1).all()

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            nc.softmax_rows(nc.tensor([[np.nan, 0.0]]))


class TestElementwise:
    def test_relu_sign_cases(self):
        out = nc.relu(nc.tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_layer_norm_constant_vector_is_zero(self):
        x = nc.tensor(np.full((3, 8), 2.5))
        out = nc.layer_norm(x, nc.tensor(np.ones(8)), nc.tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, np.zeros((3, 8)), atol=1e-12)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(3)
        x = nc.tensor(rng.normal(size=(4, 16)))
        out = nc.layer_norm(x, nc.tensor(np.ones(16)), nc.tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_concat_last_shapes(self):
        out = nc.concat_last(nc.tensor(np.ones((2, 3))), nc.tensor(np.ones((2, 5))))
        assert out.shape == (2, 8)

    def test_concat_last_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.concat_last(nc.tensor(np.ones((2, 3))), nc.tensor(np.ones((3, 5))))


class TestBackward:
    def test_sum_of_squares(self):
        x = nc.tensor([3.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.square(x))
        nc.backward(tape, loss)
        np.testing.assert_allclose(x.grad, [6.0], rtol=1e-15)

    def test_softmax_sum_grad_is_zero(self):
        rng = np.random.default_rng(4)
        x = nc.tensor(rng.normal(size=(3, 5)), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.softmax_rows(x))
        nc.backward(tape, loss)
        np.testing.assert_allclose(x.grad, np.zeros((3, 5)), atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = nc.tensor([1.0, 2.0], requires_grad=True)
        with nc.Tape() as tape:
            y = nc.square(x)
        with pytest.raises(ValueError, match="scalar"):
            nc.backward(tape, y)

    def test_grad_accumulates_on_reuse(self):
        x = nc.tensor([2.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.add(nc.square(x), nc.square(x)))
        nc.backward(tape, loss)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_recording_outside_tape(self):
        x = nc.tensor([1.0], requires_grad=True)
        out = nc.square(x)
        assert out.requires_grad is False


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = nc.tensor(rng.normal(size=(2, 3, 4)) + 0.2, requires_grad=True)  # keep relu/abs off 0
    b = nc.tensor(rng.normal(size=(3, 4)) + 0.2, requires_grad=True)
    w = nc.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gamma = nc.tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = nc.tensor(rng.normal(size=4), requires_grad=True)
    bias5 = nc.tensor(rng.normal(size=5), requires_grad=True)
    pos = nc.tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    cases = {
        "add": (lambda: nc.sum_all(nc.square(nc.add(a, b))), [a, b]),
        "sub": (lambda: nc.sum_all(nc.square(nc.sub(a, b))), [a, b]),
        "mul": (lambda: nc.sum_all(nc.mul(a, b)), [a, b]),
        "neg": (lambda: nc.sum_all(nc.square(nc.neg(a))), [a]),
        "scale": (lambda: nc.sum_all(nc.scale(a, 1.7)), [a]),
        "matmul": (lambda: nc.sum_all(nc.square(nc.matmul(a, w))), [a, w]),
        "transpose": (lambda: nc.sum_all(nc.square(nc.transpose(a, (2, 0, 1)))), [a]),
        "reshape": (lambda: nc.sum_all(nc.square(nc.reshape(a, (6, 4)))), [a]),
        "concat_last": (lambda: nc.sum_all(nc.square(nc.concat_last(b, b))), [b]),
        "relu": (lambda: nc.sum_all(nc.relu(a)), [a]),
        "abs": (lambda: nc.sum_all(nc.abs_(a)), [a]),
        "square": (lambda: nc.sum_all(nc.square(a)), [a]),
        "softmax_rows": (lambda: nc.sum_all(nc.square(nc.softmax_rows(b))), [b]),
        "layer_norm": (lambda: nc.sum_all(nc.square(nc.layer_norm(b, gamma, beta))), [b, gamma, beta]),
        "sum_axis": (lambda: nc.sum_all(nc.square(nc.sum_axis(a, 1))), [a]),
        "mean_axis": (lambda: nc.sum_all(nc.square(nc.mean_axis(a, 2))), [a]),
        "mean_all": (lambda: nc.mean_all(nc.square(a)), [a]),
        "threshold_keep": (lambda: nc.sum_all(nc.threshold_keep(pos, 0.9)), [pos]),
        "deg_inv_sqrt": (lambda: nc.sum_all(nc.deg_inv_sqrt(pos)), [pos]),
        "linear": (lambda: nc.sum_all(nc.square(nc.linear(a, w, bias5))), [a, w, bias5]),
    }
    for name, (build, params) in cases.items():
        err = fd_check(build, params)
        assert err < 1e-4, f"{name}: rel err {err}"


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = nc.tensor(rng.normal(size=(4, 8)))
        w = nc.tensor(rng.normal(size=(8, 8)))
        out = nc.softmax_rows(nc.matmul(nc.relu(x), w))
        return out.data
    first, second = run(), run()
    assert np.array_equal(first, second)


def test_all_values_finite_after_ops():
    rng = np.random.default_rng(9)
    x = nc.tensor(rng.normal(size=(5, 5)) * 100)
    out = nc.softmax_rows(nc.matmul(x, x))
    assert np.isfinite(out.data).all()


def test_independent_tapes_do_not_interfere():
    x = nc.tensor([2.0], requires_grad=True)
    with nc.Tape() as t1:
        loss1 = nc.sum_all(nc.square(x))
    with nc.Tape() as t2:
        loss2 = nc.sum_all(nc.scale(x, 3.0))
    assert len(t1.nodes) == 2 and len(t2.nodes) == 2
    nc.backward(t1, loss1)
    np.testing.assert_allclose(x.grad, [4.0])
    x.zero_grad()
    nc.backward(t2, loss2)
    np.testing.assert_allclose(x.grad, [3.0])
