import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textcast.gradcheck import check_gradients
from textcast.rng import stream
from textcast.tensor import (
    MASK_VALUE,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    UndefinedLossError,
    add,
    cross_entropy,
    dropout_apply,
    matmul,
    mul,
    rmsnorm,
    softmax_rows,
    sum_all,
    swiglu_ffn,
)


def tensor(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        eye = tensor(np.eye(2), grad=False)
        m = tensor([[1.0, 2.0], [3.0, 4.0]], grad=False)
        assert np.array_equal(matmul(eye, m).data, m.data)

    def test_hand_computed(self):
        a = tensor([[1.0, 2.0]], grad=False)
        b = tensor([[3.0], [4.0]], grad=False)
        assert matmul(a, b).data.item() == pytest.approx(11.0)

    def test_grad_of_sum_is_ones_times_bt(self):
        a = tensor(stream(0, "a").normal(size=(3, 4)))
        b = tensor(stream(0, "b").normal(size=(4, 2)))
        with Tape() as tape:
            loss = sum_all(matmul(a, b))
        tape.backward(loss)
        assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


class TestSoftmaxRows:
    def test_symmetry(self):
        out = softmax_rows(tensor([[0.0, 0.0]]))
        assert out.data == pytest.approx(np.array([[0.5, 0.5]]))

    def test_stability_at_large_inputs(self):
        out = softmax_rows(tensor([[1000.0, 1000.1]]), scale=1.0)
        assert np.isfinite(out.data).all()
        assert out.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_closed_form(self):
        out = softmax_rows(tensor([[0.0, np.log(3.0)]]))
        assert out.data == pytest.approx(np.array([[0.25, 0.75]]))

    def test_rows_sum_to_one_and_shift_invariant(self):
        x = stream(1, "sm").normal(size=(5, 7))
        p = softmax_rows(tensor(x)).data
        assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-12
        p_shift = softmax_rows(tensor(x + 13.7)).data
        assert np.allclose(p, p_shift, atol=1e-12)

    def test_mask_value_rows_still_normalize(self):
        p = softmax_rows(tensor([[0.0, MASK_VALUE, 1.0]])).data
        assert p[0, 1] == 0.0
        assert p.sum() == pytest.approx(1.0)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            softmax_rows(tensor([[np.inf, 0.0]]))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            softmax_rows(tensor([[1.0, 2.0]]), scale=0.0)


class TestRmsnorm:
    def test_constant_vector_normalizes_to_sign(self):
        for c in (2.5, -4.0):
            x = tensor(np.full((1, 6), c))
            gain = tensor(np.ones(6))
            out = rmsnorm(x, gain, eps=1e-12)
            assert out.data == pytest.approx(np.sign(c) * np.ones((1, 6)), abs=1e-6)

    def test_hand_rms(self):
        out = rmsnorm(tensor([[3.0, 4.0]]), tensor(np.ones(2)), eps=1e-300)
        assert out.data == pytest.approx(np.array([[3.0, 4.0]]) / np.sqrt(12.5))

    def test_gradient_matches_finite_differences(self):
        x = tensor(stream(2, "x").normal(size=(3, 5)))
        gain = tensor(stream(2, "g").normal(1.0, 0.3, size=5))
        coeffs = stream(2, "c").normal(size=(3, 5))
        err = check_gradients(
            lambda: sum_all(mul(rmsnorm(x, gain, 1e-6), Tensor(coeffs))), [x, gain]
        )
        assert err < 1e-4


class TestSwiglu:
    def test_zero_input_gives_zero(self):
        x = tensor(np.zeros((2, 3)))
        w = lambda shape: tensor(stream(3, str(shape)).normal(size=shape))
        out = swiglu_ffn(x, w((3, 5)), w((3, 5)), w((5, 3)))
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_scalar_chain(self):
        one = tensor([[1.0]])
        out = swiglu_ffn(one, tensor([[1.0]]), tensor([[1.0]]), tensor([[1.0]]))
        assert out.data.item() == pytest.approx(0.7310585786300049)

    def test_gradient_matches_finite_differences(self):
        rng = stream(4, "sw")
        x = tensor(rng.normal(size=(2, 4)))
        wg = tensor(rng.normal(size=(4, 6)))
        wu = tensor(rng.normal(size=(4, 6)))
        wd = tensor(rng.normal(size=(6, 4)))
        coeffs = rng.normal(size=(2, 4))
        err = check_gradients(
            lambda: sum_all(mul(swiglu_ffn(x, wg, wu, wd), Tensor(coeffs))), [x, wg, wu, wd]
        )
        assert err < 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = tensor(np.zeros((1, 4)))
        out = cross_entropy(logits, np.array([2]))
        assert float(out.data) == pytest.approx(np.log(4.0))

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((1, 5))
        logits[0, 3] = 60.0
        out = cross_entropy(tensor(logits), np.array([3]))
        assert float(out.data) == pytest.approx(0.0, abs=1e-12)

    def test_masked_position_contributes_nothing(self):
        rng = stream(5, "ce")
        logits = rng.normal(size=(2, 6))
        targets = np.array([1, 4])
        masked = cross_entropy(tensor(logits), targets, np.array([False, True]))
        single = cross_entropy(tensor(logits[:1]), targets[:1])
        assert float(masked.data) == pytest.approx(float(single.data))

    def test_all_masked_is_an_error(self):
        with pytest.raises(UndefinedLossError):
            cross_entropy(tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([True, True]))

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(tensor(np.zeros((1, 3))), np.array([3]))

    def test_sum_is_count_times_mean(self):
        rng = stream(6, "ce2")
        logits = rng.normal(size=(4, 5))
        targets = rng.integers(0, 5, size=4)
        mean = cross_entropy(tensor(logits), targets, reduction="mean")
        total = cross_entropy(tensor(logits), targets, reduction="sum")
        assert float(total.data) == pytest.approx(4 * float(mean.data))


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = tensor(stream(7, "b").normal(size=(3, 4)))
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_grad_of_sum_of_squares_is_2x(self):
        x = tensor(stream(8, "b").normal(size=(2, 5)))
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        tape.backward(loss)
        assert np.allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = tensor(np.ones((2, 2)))
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_repeated_backward_accumulates(self):
        x = tensor(np.ones((2, 2)))
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        tape.backward(loss)
        # second seed adds another unit of upstream gradient
        assert np.array_equal(x.grad, 2 * np.ones((2, 2)))

    def test_backward_deterministic_after_reset(self):
        rng = stream(9, "det")
        x = tensor(rng.normal(size=(3, 3)))
        y = tensor(rng.normal(size=(3, 3)))
        with Tape() as tape:
            loss = sum_all(mul(add(x, y), x))
        tape.backward(loss)
        gx = x.grad.copy()
        x.grad = None
        y.grad = None
        loss.grad = None
        tape.backward(loss)
        assert np.array_equal(x.grad, gx)

    def test_no_tape_means_no_recording(self):
        x = tensor(np.ones((2, 2)))
        out = mul(x, x)
        assert out.requires_grad  # value-level propagation still happens
        tape = Tape()
        assert len(tape) == 0


class TestDropout:
    def test_p_zero_is_identity(self):
        x = tensor(np.ones((4, 4)))
        assert dropout_apply(x, 0.0, stream(0, "d")) is x

    def test_eval_mode_is_identity(self):
        x = tensor(np.ones((4, 4)))
        assert dropout_apply(x, 0.5, stream(0, "d"), training=False) is x

    def test_zero_fraction_and_scaling(self):
        x = tensor(np.ones((400, 250)))
        out = dropout_apply(x, 0.5, stream(1, "d"))
        zero_frac = float((out.data == 0).mean())
        assert abs(zero_frac - 0.5) < 0.01
        survivors = out.data[out.data != 0]
        assert np.allclose(survivors, 2.0)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            dropout_apply(tensor(np.ones(3)), 1.0, stream(0, "d"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_property_gradcheck_add_mul_chain(seed):
    rng = stream(seed, "prop")
    x = tensor(rng.normal(size=(2, 3)))
    y = tensor(rng.normal(size=(2, 3)))
    coeffs = rng.normal(size=(2, 3))
    err = check_gradients(
        lambda: sum_all(mul(mul(add(x, y), x), Tensor(coeffs))), [x, y]
    )
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_property_softmax_rows_sum_to_one(seed):
    x = stream(seed, "smprop").normal(size=(4, 6)) * 10
    p = softmax_rows(tensor(x)).data
    assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-12
