import numpy as np
import pytest

from cm2net import tensor as T
from cm2net.tensor import (DegenerateInputError, DomainError, NonFiniteError,
                           Parameter, ShapeError, StaleTapeError, Tape,
                           Tensor, grad_check)


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    out = T.matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_computed():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum():
    # grad of sum(a @ b) wrt a is ones(m,n) @ b.T; checked both analytically
    # and against central finite differences
    rng = np.random.default_rng(0)
    a = Parameter("a", rng.standard_normal((4, 5)))
    b = Parameter("b", rng.standard_normal((5, 3)))

    tape = Tape()
    tape.backward(T.tsum(T.matmul(a.node(tape), b.node(tape))))
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.value.T, rtol=1e-12)

    report = grad_check(
        lambda t: T.tsum(T.matmul(a.node(t), b.node(t))), [a, b])
    assert max(report.values()) <= 1e-6


def test_relu():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_tanh_at_zero_has_unit_gradient():
    p = Parameter("p", np.zeros(1))
    tape = Tape()
    out = T.tanh(p.node(tape))
    assert out.data[0] == 0.0
    tape.backward(T.tsum(out))
    np.testing.assert_array_equal(p.grad, [1.0])


def test_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    x = np.abs(rng.standard_normal((3, 4))) + 0.1
    out = T.exp(T.log(Tensor(x)))
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_nonfinite_detected():
    big = Tensor(np.full(3, 800.0))
    with pytest.raises(NonFiniteError):
        T.exp(big)


def test_mean_and_sum():
    assert T.tmean(Tensor([2.0, 4.0, 6.0])).item() == 4.0
    assert T.tsum(Tensor(np.zeros((5, 2)))).item() == 0.0


def test_mean_over_axis_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 5))
    out = T.mean_over_axis(Tensor(x), 0)
    expected = np.array([sum(x[i, j] for i in range(8)) / 8 for j in range(5)])
    np.testing.assert_array_equal(out.data, expected)


def test_mean_over_axis_bad_axis():
    with pytest.raises(ShapeError):
        T.mean_over_axis(Tensor(np.ones((2, 3))), 2)


def test_l2_normalize_345_triangle():
    out = T.l2_normalize(Tensor([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_idempotent_on_unit_vector():
    v = np.array([0.6, 0.8])
    np.testing.assert_allclose(T.l2_normalize(Tensor(v)).data, v, atol=1e-15)


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(Tensor(np.zeros(4)))


def test_l2_normalize_gradcheck():
    rng = np.random.default_rng(3)
    p = Parameter("p", rng.standard_normal((2, 5)))
    w = np.arange(10.0).reshape(2, 5)
    report = grad_check(
        lambda t: T.tsum(T.mul(T.l2_normalize(p.node(t)), Tensor(w))), [p])
    assert report["p"] <= 1e-6


def test_log_softmax_uniform_row():
    out = T.log_softmax_rows(Tensor(np.zeros((2, 4))))
    np.testing.assert_allclose(out.data, np.log(0.25) * np.ones((2, 4)),
                               atol=1e-12)


def test_log_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5))
    a = T.log_softmax_rows(Tensor(x)).data
    b = T.log_softmax_rows(Tensor(x + 17.3)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_log_softmax_matches_naive():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6)) * 3
    out = T.log_softmax_rows(Tensor(x)).data
    naive = np.log(np.exp(x) / np.exp(x).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(out, naive, atol=1e-10)


def test_log_softmax_rows_exp_sums_to_one():
    rng = np.random.default_rng(6)
    out = T.log_softmax_rows(Tensor(rng.standard_normal((10, 7)) * 5)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), np.ones(10),
                               atol=1e-9)


def test_backward_sum_gives_ones():
    p = Parameter("p", np.random.default_rng(7).standard_normal((3, 2)))
    tape = Tape()
    tape.backward(T.tsum(p.node(tape)))
    np.testing.assert_array_equal(p.grad, np.ones((3, 2)))


def test_backward_unreachable_param_zero_grad():
    p = Parameter("p", np.ones(3))
    q = Parameter("q", np.ones(3))
    tape = Tape()
    p.node(tape)  # watched but unused in the loss
    tape.backward(T.tsum(T.mul(q.node(tape), q.node(tape))))
    np.testing.assert_array_equal(p.grad, np.zeros(3))


def test_backward_twice_rejected():
    p = Parameter("p", np.ones(2))
    tape = Tape()
    root = T.tsum(p.node(tape))
    tape.backward(root)
    with pytest.raises(StaleTapeError):
        tape.backward(root)


def test_backward_nonscalar_root_rejected():
    p = Parameter("p", np.ones(2))
    tape = Tape()
    out = T.mul(p.node(tape), p.node(tape))
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_frozen_param_zero_grad_and_constant_value():
    p = Parameter("p", np.ones(3), frozen=True)
    q = Parameter("q", np.full(3, 2.0))
    before = p.value.tobytes()
    tape = Tape()
    tape.backward(T.tsum(T.mul(p.node(tape), q.node(tape))))
    np.testing.assert_array_equal(p.grad, np.zeros(3))
    np.testing.assert_array_equal(q.grad, np.ones(3))
    assert p.value.tobytes() == before


def test_grad_check_quadratic():
    p = Parameter("x", np.random.default_rng(8).standard_normal(6))
    report = grad_check(
        lambda t: T.scale(T.tsum(T.mul(p.node(t), p.node(t))), 0.5), [p])
    assert report["x"] <= 1e-8
    # analytic gradient is x itself
    tape = Tape()
    tape.backward(T.scale(T.tsum(T.mul(p.node(tape), p.node(tape))), 0.5))
    np.testing.assert_allclose(p.grad, p.value, atol=1e-12)


def test_grad_check_cosine():
    rng = np.random.default_rng(9)
    p = Parameter("x", rng.standard_normal((1, 5)))
    const = Tensor(rng.standard_normal((1, 5)))

    def cosine(t):
        xn = T.l2_normalize(p.node(t))
        cn = T.l2_normalize(const)
        return T.tsum(T.mul(xn, cn))

    assert grad_check(cosine, [p])["x"] <= 1e-5


def test_random_op_gradients_match_fd():
    # property: all differentiable ops agree with central differences on
    # random inputs of moderate magnitude
    rng = np.random.default_rng(10)
    for trial in range(5):
        a = Parameter("a", rng.uniform(-5, 5, (3, 4)))
        b = Parameter("b", rng.uniform(-5, 5, (4, 2)))

        def f(t):
            h = T.tanh(T.matmul(a.node(t), b.node(t)))
            return T.tmean(T.mul(h, h))

        assert max(grad_check(f, [a, b]).values()) <= 1e-4


def test_forward_outputs_finite_for_bounded_inputs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-1e3, 1e3, (4, 4)))
    for out in (T.relu(x), T.tanh(x), T.matmul(x, x),
                T.log_softmax_rows(x), T.tmean(x)):
        assert np.all(np.isfinite(out.data))
