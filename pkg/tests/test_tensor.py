import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from badgan import tensor as T
from badgan.models import MLP
from badgan.optim import Adam, AdamState, adam_step
from badgan.tensor import ContractError, DimensionError, DomainError, Tape, Tensor, grad_check


def _grad_of(fn, *leaves):
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).values, [[1, 2], [3, 4]])


def test_matmul_orthogonal_rows():
    assert T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).values.tolist() == [[0.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), True)
    b = Tensor(rng.standard_normal((4, 2)), True)
    w = Tensor(rng.standard_normal((3, 2)))
    err = grad_check(lambda: T.sum(T.matmul(a, b) * w), [a, b])
    assert err < 1e-6


# -- elementwise ------------------------------------------------------------


def test_relu_values():
    assert T.relu(Tensor([-1.0, 2.0])).values.tolist() == [0.0, 2.0]


def test_square_derivative_at_three():
    x = Tensor(3.0, True)
    (g,) = _grad_of(lambda: T.square(x), x)
    assert g == pytest.approx(6.0)


def test_tanh_gradient_fd():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal(7), True)
    assert grad_check(lambda: T.sum(T.tanh(x)), [x]) < 1e-6


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_scalar_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert (a + 2.0).values.sum() == 18.0
    assert (Tensor([2.0]) * a).values.sum() == 12.0
    with pytest.raises(DimensionError):
        a + Tensor(np.ones((1, 3)))


def test_scalar_broadcast_gradient_folds():
    a = Tensor(np.ones((2, 3)), True)
    s = Tensor(2.0, True)
    ga, gs = _grad_of(lambda: T.sum(a * s), a, s)
    np.testing.assert_array_equal(ga, np.full((2, 3), 2.0))
    assert gs == pytest.approx(6.0)


def test_clamp_blocks_gradient_outside_range():
    x = Tensor([-2.0, 0.5, 3.0], True)
    (g,) = _grad_of(lambda: T.sum(T.clamp(x, -1.0, 1.0)), x)
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_elementwise_dispatch():
    np.testing.assert_allclose(T.elementwise("exp", Tensor([0.0])).values, [1.0])
    with pytest.raises(ValueError):
        T.elementwise("cosh", Tensor([0.0]))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.exp(x),
        lambda x: T.log(T.square(x) + 1.0),
        lambda x: T.sigmoid(x),
        lambda x: T.leaky_relu(x, 0.2),
        lambda x: T.sqrt(T.square(x) + 0.5),
        lambda x: x / (T.square(x) + 2.0),
        lambda x: T.neg(x) - x * 3.0,
        lambda x: T.square(T.rows(x, 1, 3)),
        lambda x: T.exp(T.concat([x, T.rows(x, 0, 1)], axis=0)),
    ],
    ids=["exp", "log", "sigmoid", "leaky_relu", "sqrt", "div", "neg_sub_mul", "rows", "concat_rows"],
)
def test_primitive_gradients_fd(fn):
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(0.1, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), True)
    assert grad_check(lambda: T.sum(fn(x)), [x], h=1e-5) < 1e-5


def test_rows_rejects_bad_range():
    with pytest.raises(T.DimensionError):
        T.rows(Tensor(np.zeros((3, 2))), 2, 5)


# -- reductions and logsumexp -----------------------------------------------


def test_logsumexp_zeros():
    assert T.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_logsumexp_no_overflow():
    v = T.logsumexp(Tensor([1000.0, 1000.0])).item()
    assert v == pytest.approx(1000.0 + math.log(2), abs=1e-9)


def test_logsumexp_vs_extended_precision():
    import mpmath

    mpmath.mp.dps = 50
    rng = np.random.default_rng(3)
    x = rng.standard_normal(5) * 10
    ref = float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in x)))
    got = T.logsumexp(Tensor(x)).item()
    assert abs(got - ref) / abs(ref) < 1e-12


def test_logsumexp_axis_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 3)), True)
    w = Tensor(rng.standard_normal(4))
    assert grad_check(lambda: T.sum(T.logsumexp(x, axis=1) * w), [x]) < 1e-6


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_logsumexp_bounds(x):
    lse = T.logsumexp(Tensor(x)).item()
    assert lse >= x.max() - 1e-12
    assert lse <= x.max() + math.log(len(x)) + 1e-9


def test_sum_backward_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), True)
    (g,) = _grad_of(lambda: T.sum(x), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_mean_value():
    assert T.mean(Tensor([2.0, 4.0])).item() == 3.0
    assert T.reduce("mean", Tensor([2.0, 4.0])).item() == 3.0


def test_backward_on_non_scalar_rejected():
    x = Tensor([1.0, 2.0], True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_grad_zero_until_touched():
    x = Tensor(np.ones(3), True)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_no_recording_outside_tape():
    x = Tensor([1.0], True)
    with Tape() as tape:
        pass
    _ = T.exp(x)
    assert tape.nodes == []


def test_tape_topological_order():
    x = Tensor([1.0, 2.0], True)
    with Tape() as tape:
        y = T.square(x)
        z = T.sum(y)
    ids = [id(n[0]) for n in tape.nodes]
    assert ids == [id(y), id(z)]
    assert y.tape_id == z.tape_id == tape.id


def test_mlp_grad_check():
    rng = np.random.default_rng(5)
    net = MLP.init((2, 8, 8, 3), rng, "tanh")
    x = rng.standard_normal((6, 2))
    target = Tensor(rng.standard_normal((6, 3)))
    assert grad_check(lambda: T.mean(T.square(net(x) - target)), net.params(), h=1e-5) < 1e-5


def test_backward_deterministic():
    rng = np.random.default_rng(6)
    net = MLP.init((2, 16, 4), rng)
    x = rng.standard_normal((10, 2))

    def grads():
        for p in net.params():
            p.zero_grad()
        with Tape() as tape:
            loss = T.sum(T.logsumexp(net(x), axis=1))
        tape.backward(loss)
        return [p.grad.copy() for p in net.params()]

    for a, b in zip(grads(), grads()):
        assert a.tobytes() == b.tobytes()


def test_relative_error_definition():
    assert T.relative_error(np.array([2.0]), np.array([2.5])) == pytest.approx(0.2)
    # below the floor the error is measured against the floor
    assert T.relative_error(np.array([0.0]), np.array([1e-9]), floor=1e-4) == pytest.approx(1e-5)


# -- adam -------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    adam_step([p], [g], AdamState(), lr=0.01)
    np.testing.assert_allclose(p, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, 2.0])
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_minimises_quadratic():
    x = Tensor([0.0], True)
    opt = Adam([x], lr=0.1, betas=(0.9, 0.999))
    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            loss = T.sum(T.square(x - 5.0))
        tape.backward(loss)
        opt.step()
    assert abs(x.values[0] - 5.0) < 1e-3
