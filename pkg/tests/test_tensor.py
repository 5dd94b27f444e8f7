import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdresnet.tensor import (
    Parameter,
    ShapeError,
    Tensor,
    finite_diff_check,
    get_default_dtype,
    matmul,
    no_grad,
    precision,
)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_add_and_broadcast_bias():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([10.0, 20.0], requires_grad=True)
    out = a + b
    np.testing.assert_array_equal(out.data, [[11, 22], [13, 24]])
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
    np.testing.assert_array_equal(b.grad, [2.0, 2.0])


def test_broadcast_outside_rule_is_rejected():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2, 1)))
    with pytest.raises(ShapeError):
        a + b


def test_matmul_identity_and_hand_value():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError, match="inner"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradient_formula_and_fd(rng):
    with precision("float64"):
        a = t64(rng.normal(size=(4, 3)))
        b = t64(rng.normal(size=(3, 2)))
        g = rng.normal(size=(4, 2))
        (a @ b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)
        r = Tensor(g)
        assert finite_diff_check(lambda: ((a @ b) * r).sum(), [a, b]) < 1e-5


def test_quadratic_backward():
    w = t64([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_without_zero_grad():
    w = t64([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [4.0, 8.0, 12.0])


def test_zero_grad_then_backward_equals_fresh(rng):
    x = rng.normal(size=(3, 4))
    w = t64(rng.normal(size=(4, 2)))
    loss = lambda: (Tensor(x, dtype=np.float64) @ w).relu().sum()  # noqa: E731
    loss().backward()
    fresh = w.grad.copy()
    loss().backward()
    w.zero_grad()
    loss().backward()
    np.testing.assert_array_equal(w.grad, fresh)


def test_backward_errors():
    w = t64([1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        (w * w).backward()
    with pytest.raises(RuntimeError, match="no recorded tape"):
        Tensor([1.0]).backward()


def test_tape_freed_after_backward_unless_retained():
    w = t64([1.0, 2.0])
    loss = (w * w).sum()
    loss.backward(retain_graph=True)
    loss.backward()
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])
    with pytest.raises(RuntimeError):
        loss.backward()


def test_shared_subexpression_visited_once():
    w = t64([3.0])
    y = w * w
    z = y + y
    z.sum().backward()
    np.testing.assert_array_equal(w.grad, [12.0])


def test_no_grad_records_nothing():
    w = t64([1.0])
    with no_grad():
        y = w * 2.0
    assert y._ctx is None and not y.requires_grad


def test_precision_mode_scopes_default_dtype():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_fd_check_scalar_square():
    p = t64([3.0])
    assert finite_diff_check(lambda: (p * p).sum(), [p], eps=1e-4) < 1e-8


def test_fd_check_dead_relu_region():
    p = t64([-2.0, -1.0, -3.0])
    err, details = finite_diff_check(lambda: p.relu().sum(), [p], return_details=True)
    assert err == 0.0
    assert details[0][2] == 0.0 and details[0][3] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_reports_nonfinite_coordinate():
    p = t64([1.0, 1e-300])
    with pytest.raises(FloatingPointError, match="coordinate"):
        finite_diff_check(lambda: (p * 1.0).log().sum(), [p], eps=1e-4)


def test_fd_check_detects_wrong_gradient():
    from fdresnet.tensor import Function

    class BadSquare(Function):
        def forward(self, a):
            self.a = a
            return a * a

        def backward(self, g):
            return (g * self.a,)  # missing factor 2

    p = t64([1.5, -0.5])
    assert finite_diff_check(lambda: BadSquare.apply(p).sum(), [p]) > 0.4


def test_parameter_is_leaf_tensor():
    p = Parameter(np.zeros(3))
    assert p.requires_grad and p._ctx is None and p.decay


def test_zero_sized_tensor_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


_UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "softplus": lambda t: t.softplus(),
    "pow3": lambda t: t**3,
    "relu": lambda t: t.relu(),
    "neg": lambda t: -t,
    "mean": lambda t: t.mean(axis=0),
    "transpose": lambda t: t.transpose(1, 0),
    "reshape": lambda t: t.reshape(-1),
    "div": lambda t: t / (t * t + 2.0),
}


@given(
    seed=st.integers(0, 10_000),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    op=st.sampled_from(sorted(_UNARY)),
)
def test_primitive_gradients_match_fd(seed, rows, cols, op):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, cols))
    if op == "relu":
        x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    with precision("float64"):
        p = t64(x)
        fn = _UNARY[op]
        r = Tensor(rng.normal(size=fn(Tensor(x)).shape))
        assert finite_diff_check(lambda: (fn(p) * r).sum(), [p]) < 1e-4


@given(seed=st.integers(0, 10_000))
def test_binary_broadcast_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.uniform(0.5, 2.0, size=(4,)))
        r = Tensor(rng.normal(size=(3, 4)))
        f = lambda: ((a * b + a / b - b) * r).sum()  # noqa: E731
        assert finite_diff_check(f, [a, b]) < 1e-4


def test_tape_replay_bit_identical(rng):
    x = rng.normal(size=(5, 4)).astype(np.float32)
    w0 = rng.normal(size=(4, 3)).astype(np.float32)
    results = []
    for _ in range(2):
        w = Tensor(w0.copy(), requires_grad=True)
        loss = (Tensor(x) @ w).relu().softplus().sum()
        loss.backward()
        results.append((loss.data.copy(), w.grad.copy()))
    assert results[0][0].tobytes() == results[1][0].tobytes()
    assert results[0][1].tobytes() == results[1][1].tobytes()
