import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vrx import tensor as T
from vrx.tensor import BatchNorm, ShapeError, TapeError, Tensor

from helpers import REL_TOL, gradcheck, numeric_grad, primitive_cases, rel_err


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    out = T.matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0], [7.0]])).data
    np.testing.assert_array_equal(out, [[5.0], [0.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_gradient_tight():
    rng = np.random.default_rng(3)
    err = gradcheck(T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    assert err < 1e-6


def test_concat_examples():
    np.testing.assert_array_equal(T.concat([Tensor([[1.0, 2]]), Tensor([[3.0]])], axis=1).data, [[1, 2, 3]])
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.concat([Tensor(a)], axis=0).data, a)
    with pytest.raises(ShapeError):
        T.concat([], axis=0)
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_concat_sum_gradient_is_ones():
    a = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape():
        y = T.sum(T.concat([a, b], axis=1))
    T.backward(y)
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0, 2])).data, [0, 0, 2])
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 2)))
    assert T.l1_loss(x, x).item() == 0.0
    with pytest.raises(ShapeError):
        T.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_batch_norm_gradient_8x4():
    rng = np.random.default_rng(7)

    def build(x, g, b):
        s = BatchNorm(4)
        s.gamma, s.beta = g, b
        return T.batch_norm(x, s, training=True)

    err = gradcheck(build, [rng.normal(size=(8, 4)), rng.normal(size=4), rng.normal(size=4)])
    assert err < 1e-5


def test_batch_norm_zero_variance_is_finite():
    out = T.batch_norm(Tensor(np.ones((5, 3))), BatchNorm(3), training=True).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, 0.0)


def test_batch_norm_inference_bitwise():
    rng = np.random.default_rng(2)
    s = BatchNorm(4)
    s.running_mean, s.running_var = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
    x = Tensor(rng.normal(size=(6, 4)))
    a = T.batch_norm(x, s, training=False).data
    b = T.batch_norm(x, s, training=False).data
    assert a.tobytes() == b.tobytes()


def test_backward_sum_of_three():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    with T.Tape():
        y = T.sum(x)
    T.backward(y)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_softmax_l1_chain():
    rng = np.random.default_rng(11)
    x, t = rng.normal(size=(5, 1)), T.softmax(Tensor(rng.normal(size=(1, 3)))).data

    def build(W):
        return T.l1_loss(T.softmax(T.transpose(T.matmul(W, Tensor(x)))), Tensor(t))

    assert gradcheck(build, [rng.normal(size=(3, 5))]) < 1e-4


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape():
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        T.backward(y)
    with T.Tape():
        s = T.sum(x)
    T.backward(s)
    with pytest.raises(TapeError):
        T.backward(s)


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.full((2, 2), 4.0), requires_grad=True)
    with T.Tape():
        _ = T.sum(z)
        y = T.sum(x)
    T.backward(y)
    np.testing.assert_array_equal(z.grad, np.zeros((2, 2)))


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(5)
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

    def run():
        a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
        with T.Tape():
            y = T.sum(T.softmax(T.matmul(a, b)))
        T.backward(y)
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def test_backward_returns_intermediate_gradients():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Tape():
        h = T.scale(x, 3.0)
        y = T.sum(T.mul(h, h))
    (gh,) = T.backward(y, wrt=[h])
    np.testing.assert_allclose(gh, 2 * h.data)
    np.testing.assert_allclose(x.grad, 6 * h.data)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    T.adam_step([p], [np.ones(3)], {}, lr=0.01)
    np.testing.assert_allclose(p.data, -0.01, rtol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    before = p.data.copy()
    T.adam_step([p], [np.zeros(2)], {}, lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_defaults():
    opt = T.Adam([Tensor(np.zeros(1), requires_grad=True)])
    assert opt.betas == (0.9, 0.999)
    with pytest.raises(ValueError):
        T.adam_step([Tensor(np.zeros(1))], [], {}, lr=0.1)


def test_container_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    T.save_tensor(x, tmp_path / "x.tensor")
    y = T.load_tensor(tmp_path / "x.tensor").data
    assert y.tobytes() == x.tobytes()
    header = (tmp_path / "x.tensor").read_text().splitlines()[0]
    assert '"f64"' in header and "base64-le" in header


def test_container_rejects_bad_payload():
    text = T.dumps_tensor(np.zeros(4)).replace('"shape": [4]', '"shape": [5]')
    with pytest.raises(ValueError):
        T.loads_tensor(text)


@pytest.mark.parametrize("seed", range(5))
def test_every_primitive_matches_finite_differences(seed):
    for name, (build, arrays) in primitive_cases(seed).items():
        err = gradcheck(build, arrays, seed)
        assert err < REL_TOL, f"{name}: {err:.2e}"


def test_numeric_grad_helper_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert rel_err(2 * x, g) < 1e-9


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.max(np.abs(T.softmax(Tensor(x + c)).data - s)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 4)), elements=finite))
def test_batch_norm_outputs_finite(x):
    assert np.all(np.isfinite(T.batch_norm(Tensor(x), BatchNorm(x.shape[1]), training=True).data))
