import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kbir_forge import tensor as T
from kbir_forge.tensor import NumericFault, Parameter, Tensor, grad_check
from kbir_forge.verify import PRIMITIVE_TOLERANCE, check_primitives


def test_gelu_values():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    x = 0.7
    want = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert T.gelu(Tensor(x)).item() == pytest.approx(want, abs=1e-15)


def test_layer_norm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.all(T.layer_norm(Tensor(np.full((1, 2), 3.0)), g, b).data == 0.0)
    got = T.layer_norm(Tensor(np.array([[1.0, -1.0]])), g, b).data
    np.testing.assert_allclose(got, [[1 / math.sqrt(1 + 1e-5), -1 / math.sqrt(1 + 1e-5)]], rtol=1e-12)
    rng = np.random.default_rng(0)
    bias = rng.normal(size=6)
    out = T.layer_norm(Tensor(rng.normal(size=(4, 6))), Tensor(np.ones(6)), Tensor(bias)).data
    assert np.all(np.abs(out.mean(axis=1) - bias.mean()) < 1e-9)


def test_cross_entropy_examples():
    assert T.softmax_cross_entropy(Tensor(np.zeros((3, 8))), [0, 3, 7]).item() == pytest.approx(math.log(8), abs=1e-12)
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    assert T.softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-12
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_bce_is_stable():
    assert T.bce_with_logits(Tensor(np.array([0.0])), [1]).item() == pytest.approx(math.log(2))
    assert T.bce_with_logits(Tensor(np.array([800.0, -800.0])), [1, 0]).item() == pytest.approx(0.0, abs=1e-300)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_faults():
    with pytest.raises(NumericFault):
        Tensor(np.array([1.0])) * np.inf
    big = Tensor(np.array([1e308]))
    with pytest.raises(NumericFault):
        big + big


def test_backward_accumulates_over_reuse():
    x = Parameter("x", np.array([2.0, -3.0]))
    y = T.tsum(x * x + x)
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_broadcast_gradients_are_reduced():
    a = Parameter("a", np.ones((3, 4)))
    b = Parameter("b", np.ones(4))
    T.tsum(a + b).backward()
    assert b.grad.shape == (4,) and np.all(b.grad == 3)


def test_no_grad_builds_no_graph():
    x = Parameter("x", np.ones(3))
    with T.no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    run = lambda: T.softmax(T.gelu(T.matmul(Tensor(a), Tensor(b))), axis=-1).data.tobytes()  # noqa: E731
    assert run() == run()


def test_grad_check_linear_is_exact():
    x = Parameter("x", np.random.default_rng(0).normal(size=(8, 9)))
    assert grad_check(lambda: T.tsum(x), [x]) <= 1e-10


def test_grad_check_detects_corruption():
    x = Parameter("x", np.random.default_rng(0).normal(size=(4, 5)))
    f = lambda: T.tsum(T.gelu(x) * x)  # noqa: E731
    assert grad_check(f, [x]) <= 1e-6
    assert grad_check(f, [x], grad_transform=lambda g: g * 1.01) >= 5e-3


def test_grad_check_probes_at_least_64_coordinates():
    seen = []
    x = Parameter("x", np.zeros(100))

    def f():
        seen.append(1)
        return T.tsum(x)

    grad_check(f, [x])
    assert len(seen) == 1 + 2 * 64


def test_every_primitive_passes_in_isolation():
    results = check_primitives()
    names = {r.name for r in results}
    assert {"matmul", "add", "index", "softmax", "layer_norm", "gelu", "concat", "transpose", "mean"} <= names
    for r in results:
        assert r.max_rel_error <= PRIMITIVE_TOLERANCE, r


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_matmul_and_softmax_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    a = Parameter("a", rng.normal(size=(n, m)))
    b = Parameter("b", rng.normal(size=(m, 3)))
    w = rng.normal(size=(n, 3))
    f = lambda: T.tsum(T.softmax(a @ b, axis=-1) * Tensor(w))  # noqa: E731
    assert grad_check(f, [a, b]) <= 1e-6
