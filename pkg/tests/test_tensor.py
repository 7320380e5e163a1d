import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtwins import tensor as T
from seqtwins.exceptions import ContractError, DimensionError, NormalizationError
from seqtwins.tensor import Tensor, Tape, backward, numerical_gradient, relative_error

from oracles import GRAD_CASES, op_gradient_errors


def grad_of(fn, *params):
    """Backward gradients of scalar fn(*params) w.r.t. each param."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn(*params)
    backward(tape, loss)
    return [p.grad for p in params]


def fd_check(fn, *params, tol=1e-6):
    grads = grad_of(fn, *params)
    for p, g in zip(params, grads):
        num = numerical_gradient(lambda: fn(*params).item(), p, h=1e-5)
        assert relative_error(g, num) < tol, p.name


def weighted_sum(x: Tensor, seed: int = 0) -> Tensor:
    # random weights so every output element matters with a distinct coefficient
    w = np.random.default_rng(seed + 7919).normal(size=x.shape)
    return T.sum(T.mul(x, Tensor(w)))


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_case(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="b")
        fd_check(lambda a, b: T.sum(T.matmul(a, b)), a, b)


class TestConv1d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(5.0).reshape(1, 1, 5))
        out = T.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_convolution(self):
        out = T.conv1d(Tensor([[[1.0, 2, 3, 4]]]), Tensor([[[1.0, 1, 1]]]), Tensor([0.0]))
        assert out.data.ravel().tolist() == [3.0, 6.0, 9.0, 7.0]

    def test_no_kernel_flip(self):
        out = T.conv1d(Tensor([[[1.0, 2, 3]]]), Tensor([[[1.0, 0, 0]]]))
        # cross-correlation: out[t] = x[t-1]
        assert out.data.ravel().tolist() == [0.0, 1.0, 2.0]

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv1d(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 3))))

    def test_even_width_rejected(self):
        with pytest.raises(ContractError):
            T.conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))))

    def test_against_loop(self, rng):
        x = rng.normal(size=(2, 3, 8))
        k = rng.normal(size=(4, 3, 3))
        bias = rng.normal(size=4)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        ref = np.zeros((2, 4, 8))
        for b in range(2):
            for o in range(4):
                for t in range(8):
                    ref[b, o, t] = bias[o] + sum(
                        k[o, c, j] * xp[b, c, t + j] for c in range(3) for j in range(3)
                    )
        np.testing.assert_allclose(T.conv1d(Tensor(x), Tensor(k), Tensor(bias)).data, ref, atol=1e-12)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True, name="x")
        k = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True, name="k")
        b = Tensor(rng.normal(size=4), requires_grad=True, name="b")
        fd_check(lambda x, k, b: weighted_sum(T.conv1d(x, k, b)), x, k, b)


class TestMaxPool:
    def test_hand_max(self):
        out = T.maxpool1d(Tensor([[[5.0, 1, 2, 0, 9, 3]]]), 3)
        assert out.data.ravel().tolist() == [5.0, 9.0]

    def test_window_one_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 7))
        np.testing.assert_array_equal(T.maxpool1d(Tensor(x), 1).data, x)

    def test_floor_length(self):
        assert T.maxpool1d(Tensor(np.zeros((1, 1, 16))), 3).shape == (1, 1, 5)

    def test_degenerate_length(self):
        with pytest.raises(DimensionError):
            T.maxpool1d(Tensor(np.zeros((1, 1, 2))), 3)

    def test_tie_goes_to_lowest_index(self):
        x = Tensor([[[2.0, 2.0, 1.0]]], requires_grad=True)
        grad_of(lambda x: T.sum(T.maxpool1d(x, 3)), x)
        assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0]

    def test_remainder_gets_no_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 7)), requires_grad=True)
        grad_of(lambda x: T.sum(T.maxpool1d(x, 3)), x)
        assert np.all(x.grad[:, :, 6] == 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_gradient_mass_conserved(self, seed, window):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(2, 3, 9)), requires_grad=True)
        w = r.normal(size=(2, 3, 9 // window))
        with Tape() as tape:
            loss = T.sum(T.mul(T.maxpool1d(x, window), Tensor(w)))
        backward(tape, loss)
        assert x.grad.sum() == pytest.approx(w.sum(), abs=1e-12)


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor([-2.0, 0.0, 5.0])).data.tolist() == [0.0, 0.0, 5.0]

    def test_mean_center(self):
        assert T.mean_center_columns(Tensor([[1.0], [3.0]])).data.tolist() == [[-1.0], [1.0]]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 9), st.integers(1, 6))
    def test_mean_center_column_sums_vanish(self, seed, b, d):
        x = np.random.default_rng(seed).normal(scale=100, size=(b, d))
        out = T.mean_center_columns(Tensor(x)).data
        assert np.all(np.abs(out.sum(axis=0)) <= 1e-9)

    def test_softmax_ce_uniform(self):
        assert T.softmax_cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_l2_normalize_zero_column(self):
        out = T.l2_normalize_columns(Tensor([[0.0, 3.0], [0.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.0, 0.6], [0.0, 0.8]], atol=1e-12)
        with pytest.raises(NormalizationError):
            T.l2_normalize_columns(Tensor([[0.0, 1.0]]), eps=0.0)

    def test_add_broadcast_bias_gradient(self, rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True, name="x")
        b = Tensor(rng.normal(size=3), requires_grad=True, name="b")
        fd_check(lambda x, b: weighted_sum(T.add(x, b)), x, b)

    def test_add_shape_error(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_ops_match_finite_differences(name, seed):
    assert max(op_gradient_errors(name, seed)) < 1e-4


def test_every_public_op_is_covered():
    ops = {"add", "sub", "mul", "mul_scalar", "relu", "square", "sum", "mean", "transpose", "reshape",
           "concat_rows", "rows", "diagonal", "matmul", "linear", "embedding", "conv1d", "maxpool1d",
           "mean_center_columns", "l2_normalize_columns", "softmax_cross_entropy"}
    assert ops <= set(GRAD_CASES)


def test_composite_graph_matches_finite_differences(seed=0):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(3, 4)), requires_grad=True, name="a")
    b = Tensor(r.normal(size=(4, 2)), requires_grad=True, name="b")
    c = Tensor(r.normal(size=(3, 2)), requires_grad=True, name="c")
    w = Tensor(r.normal(size=(7, 5)), requires_grad=True, name="w")

    def fn(a, b, c, w):
        prod = T.matmul(a, b)
        mixed = T.sub(T.mul(prod, c), T.add(prod, c))
        looked = T.embedding(w, np.array([[0, 3], [3, 6]]))
        return T.add(weighted_sum(mixed, seed), weighted_sum(looked, seed + 1))

    fd_check(fn, a, b, c, w, tol=1e-4)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        (g,) = grad_of(lambda x: T.sum(x), x)
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_half_square_gives_x(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        (g,) = grad_of(lambda x: T.mul_scalar(T.sum(T.mul(x, x)), 0.5), x)
        np.testing.assert_allclose(g, x.data, atol=1e-15)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.relu(x)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_unreachable_loss(self):
        with pytest.raises(ContractError):
            backward(Tape(), Tensor(1.0))

    def test_reused_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        (g,) = grad_of(lambda x: T.sum(T.add(x, T.mul(x, x))), x)
        assert g.tolist() == [5.0]

    def test_deterministic(self, rng):
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        f = lambda x: T.sum(T.square(T.l2_normalize_columns(T.mean_center_columns(x))))  # noqa: E731
        g1 = grad_of(f, x)[0].copy()
        g2 = grad_of(f, x)[0]
        assert np.array_equal(g1, g2)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = T.relu(x)
        assert not y.requires_grad

    def test_forward_is_pure(self, rng):
        x = rng.normal(size=(2, 3, 8))
        k = rng.normal(size=(4, 3, 3))
        a = T.conv1d(Tensor(x), Tensor(k)).data
        b = T.conv1d(Tensor(x), Tensor(k)).data
        assert a.tobytes() == b.tobytes()


def test_debug_mode_flags_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.mul_scalar(Tensor([1e308]), 10.0)
    finally:
        T.set_debug(False)
