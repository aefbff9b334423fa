import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kneemorph import autodiff as ad
from kneemorph.autodiff import NonFiniteError, Tape, TapeError, Tensor

from gradcases import CASES, N_SEEDS, check_case


@pytest.mark.parametrize("seed", range(N_SEEDS))
@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name, seed):
    tol = CASES[name][1]
    assert check_case(name, seed) < tol


# ---------------------------------------------------------------- tensor/tape

def test_tensor_rejects_non_finite_and_rank_5():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_tensor_is_float64():
    assert Tensor([1, 2]).data.dtype == np.float64


def test_mean_square_gradient_closed_form():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    grads = ad.backward(ad.reduce_mean(ad.square(x)))
    assert np.allclose(grads[x], 2 * x.data / 6, atol=1e-15)


def test_unreachable_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    grads = ad.backward(ad.reduce_sum(ad.square(x)), wrt=[x, y])
    assert np.array_equal(grads[y], np.zeros(2))


def test_backward_twice_on_same_tape_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.square(x))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ad.square(x)
        with pytest.raises(TapeError):
            tape.backward(out)


def test_gradients_accumulate_for_shared_leaf():
    x = Tensor([3.0], requires_grad=True)
    grads = ad.backward(ad.reduce_sum(ad.add(ad.square(x), ad.scale(x, 2.0))))
    assert grads[x][0] == pytest.approx(2 * 3.0 + 2.0, abs=1e-15)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            ad.square(x)
        assert len(tape.records) == 0


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_op_output_raises():
    x = Tensor([1e200], requires_grad=True)
    with pytest.raises(NonFiniteError):
        ad.square(x)


# ------------------------------------------------------------ elementwise ops

def test_swish_zero_and_one():
    assert ad.swish(Tensor([0.0])).data[0] == 0.0
    oracle = 1.0 / (1.0 + math.exp(-1.0))
    assert ad.swish(Tensor([1.0])).data[0] == pytest.approx(oracle, abs=1e-15)
    assert oracle == pytest.approx(0.731058, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)))
def test_add_negate_is_zero(a):
    x = Tensor(a)
    assert np.array_equal(ad.add(x, ad.negate(x)).data, np.zeros_like(a))


def test_sqrt_of_negative_raises():
    with pytest.raises(ValueError):
        ad.sqrt(Tensor([-1.0]))


def test_elementwise_dispatch():
    x, y = Tensor([2.0]), Tensor([3.0])
    assert ad.elementwise("mul", x, y).data[0] == 6.0
    assert ad.elementwise("add", x, y).data[0] == 5.0
    with pytest.raises(ValueError):
        ad.elementwise("pow", x, y)


# --------------------------------------------------------------------- conv

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv_all_ones_sums_entries():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), None, 1, 0)
    assert out.data.tolist() == [[[[10.0]]]]


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    acc = b[o]
                    for c in range(3):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[n, c, 2 * i + di, 2 * j + dj] * w[o, c, di, dj]
                    ref[n, o, i, j] = acc
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))


def test_conv_transpose_single_tap_expansion():
    v = 1.5
    k = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.conv_transpose2d(Tensor([[[[v]]]]), Tensor(k[None, None]), None).data[0, 0]
    assert np.array_equal(out, v * k)


def test_conv_transpose_doubles_size():
    out = ad.conv_transpose2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((2, 3, 2, 2))))
    assert out.shape == (1, 3, 16, 16)


# --------------------------------------------------------------- group norm

def test_group_norm_constant_input_gives_beta():
    x = Tensor(np.full((1, 4, 3, 3), 2.5))
    out = ad.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.full(4, 0.7)))
    assert np.allclose(out.data, 0.7, atol=1e-12)


def test_group_norm_hand_values():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    out = ad.group_norm(x, 1, Tensor([1.0]), Tensor([0.0])).data.ravel()
    mean = 2.5
    var = np.mean((np.array([1.0, 2, 3, 4]) - mean) ** 2)
    oracle = (np.array([1.0, 2, 3, 4]) - mean) / math.sqrt(var + 1e-5)
    assert np.allclose(out, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3)
    assert np.allclose(out, oracle, atol=1e-12)


def test_group_norm_indivisible_raises():
    with pytest.raises(ValueError):
        ad.group_norm(Tensor(np.zeros((1, 3, 2, 2))), 2, Tensor(np.ones(3)), Tensor(np.zeros(3)))


# ------------------------------------------------------------------- linear

def test_linear_identity_and_bias():
    x = np.random.default_rng(1).standard_normal((2, 3))
    assert np.array_equal(ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = ad.linear(Tensor(x), Tensor(np.zeros((4, 3))), Tensor(np.full(4, 2.0))).data
    assert np.array_equal(out, np.full((2, 4), 2.0))


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    out = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[j, k]
            ref[i, j] = acc
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- attention

def test_attention_single_token():
    rng = np.random.default_rng(4)
    c = 3
    x = rng.standard_normal((1, c, 1, 1))
    wq, wk, wv, wo = (rng.standard_normal((c, c)) for _ in range(4))
    out = ad.self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo)).data
    v = x[0, :, 0, 0]
    assert np.allclose(out[0, :, 0, 0], v + wo @ (wv @ v), atol=1e-12)


def test_attention_zero_values_is_residual():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 3, 3))
    ws = [Tensor(rng.standard_normal((4, 4))) for _ in range(2)]
    out = ad.self_attention(Tensor(x), ws[0], ws[1], Tensor(np.zeros((4, 4))), Tensor(rng.standard_normal((4, 4))))
    assert np.array_equal(out.data, x)


# --------------------------------------------------------------- reductions

def test_mean_of_constant():
    assert ad.reduce_mean(Tensor(np.full((2, 3), 4.25))).item() == 4.25


def test_sum_matches_sequential_accumulation():
    a = np.random.default_rng(6).standard_normal((2, 3))
    acc = 0.0
    for v in a.ravel():
        acc += v
    assert ad.reduce_sum(Tensor(a)).item() == pytest.approx(acc, abs=1e-14)


def test_reduce_of_empty_raises():
    with pytest.raises(ValueError):
        ad.reduce("mean", Tensor(np.zeros((0,))))


# ------------------------------------------------------------------- concat

def test_concat_single_is_identity():
    x = Tensor(np.ones((1, 2, 3, 3)))
    assert np.array_equal(ad.concat_channels(x).data, x.data)


def test_concat_full_scale_shape():
    parts = [Tensor(np.zeros((1, 1, 224, 224))) for _ in range(3)]
    assert ad.concat_channels(*parts).shape == (1, 3, 224, 224)


def test_concat_backward_all_ones():
    a = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
    grads = ad.backward(ad.reduce_sum(ad.concat_channels(a, b)))
    assert np.array_equal(grads[a], np.ones(a.shape))
    assert np.array_equal(grads[b], np.ones(b.shape))


# ------------------------------------------------------------------ dropout

def test_dropout_identities():
    x = Tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert ad.dropout(x, 0.5, False) is x


def test_dropout_preserves_mean():
    x = Tensor(np.ones(10 ** 6))
    out = ad.dropout(x, 0.5, True, np.random.default_rng(11))
    assert abs(out.data.mean() - 1.0) < 0.01


# ------------------------------------------------------------ cross entropy

def test_cross_entropy_uniform_is_ln2():
    assert ad.cross_entropy(Tensor([0.3, 0.3]), 1).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_confident_limit():
    assert ad.cross_entropy(Tensor([50.0, -50.0]), 0).item() < 1e-40


def test_cross_entropy_closed_form():
    assert ad.cross_entropy(Tensor([1.0, 0.0]), 0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=1e-4)


def test_cross_entropy_bad_target():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor([1.0, 0.0]), 2)
