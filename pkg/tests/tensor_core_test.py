import math

import numpy as np
import pytest

from src.errors import ContractError, DimensionError, FormatError, LengthError, NonFiniteError
from src.tensor_core import (
    FlopCounter,
    Tape,
    Tensor,
    activation,
    add,
    backward,
    bce_with_logits,
    check_gradients,
    checkpoint,
    conv1d,
    exp,
    layer_norm,
    matmul,
    mul,
    relu,
    softplus,
    sum_all,
    swish,
    tensor_from_bytes,
    tensor_to_bytes,
)


def _leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# =============================================================================
# 1) matmul
# =============================================================================
def test_matmul_hand_expansion():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_batch_axes_broadcast_over_weight():
    a = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    b = Tensor(np.ones((4, 5)))
    out = matmul(a, b)
    assert out.shape == (2, 3, 5)
    np.testing.assert_allclose(out.data[1, 2], np.full(5, a.data[1, 2].sum()))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_add_rejects_non_suffix_broadcast():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_bias_gradient_sums_over_batch_axes():
    x = _leaf(np.ones((4, 3)))
    bias = _leaf(np.zeros(3))
    with Tape() as tape:
        loss = sum_all(add(x, bias))
    backward(tape, loss)
    np.testing.assert_array_equal(bias.grad, [4.0, 4.0, 4.0])


# =============================================================================
# 2) conv1d
# =============================================================================
def test_conv1d_sliding_window():
    x = Tensor([[[1.0, 2.0, 3.0, 4.0]]])
    w = Tensor([[[1.0, 1.0]]])
    np.testing.assert_array_equal(conv1d(x, w, Tensor([0.0])).data, [[[3.0, 5.0, 7.0]]])


def test_conv1d_non_overlapping_output_length():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 8)))
    assert conv1d(x, Tensor(np.ones((1, 1, 4))), stride=4).shape == (1, 1, 2)


def test_conv1d_single_tap_identity():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 7)))
    out = conv1d(x, Tensor(np.ones((1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_stride_equal_kernel_partitions_input():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 1, 12)))
    k = 3
    # one-hot kernels pick each position of every receptive field
    fields = [conv1d(x, Tensor(np.eye(k)[j][None, None, :]), stride=k).data[0, 0] for j in range(k)]
    rebuilt = np.stack(fields, axis=1).reshape(-1)
    np.testing.assert_array_equal(rebuilt, x.data[0, 0])


@pytest.mark.parametrize("padding", ["causal_left", "zero_symmetric"])
def test_conv1d_padded_modes_preserve_length(padding):
    x = Tensor(np.ones((1, 2, 9)))
    assert conv1d(x, Tensor(np.ones((3, 2, 4))), padding=padding).shape == (1, 3, 9)


def test_conv1d_causal_output_ignores_future_samples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 10))
    w = Tensor(rng.standard_normal((2, 1, 3)))
    base = conv1d(Tensor(x), w, padding="causal_left", groups=2).data
    x[:, :, 6:] += 10.0
    changed = conv1d(Tensor(x), w, padding="causal_left", groups=2).data
    np.testing.assert_array_equal(base[:, :, :6], changed[:, :, :6])


def test_conv1d_kernel_longer_than_input():
    with pytest.raises(DimensionError, match="longer than padded input"):
        conv1d(Tensor(np.ones((1, 1, 3))), Tensor(np.ones((1, 1, 5))))


def test_conv1d_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    x = _leaf(rng.standard_normal((2, 3, 10)))
    w = _leaf(rng.standard_normal((2, 3, 4)))
    b = _leaf(rng.standard_normal(2))
    weights = rng.standard_normal((2, 2, 5))

    def _loss():
        return sum_all(mul(conv1d(x, w, b, stride=2, padding="zero_symmetric"), Tensor(weights)))

    assert check_gradients(_loss, [x, w, b]) < 1e-4


# =============================================================================
# 3) activations
# =============================================================================
def test_activation_fixed_points():
    assert softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0))
    assert swish(Tensor(0.0)).item() == 0.0
    assert relu(Tensor(-3.0)).item() == 0.0


def test_softplus_stable_for_large_magnitudes():
    out = softplus(Tensor([-20.0, 800.0, -800.0])).data
    assert out[0] == pytest.approx(2.061153622e-9, rel=1e-8)
    assert out[1] == 800.0
    assert out[2] == 0.0
    assert np.all(np.isfinite(out))


def test_activation_recompute_halves_saved_bytes():
    x = _leaf(np.ones(16))
    with Tape() as recompute_tape:
        activation("swish", x, recompute=True)
    with Tape() as cached_tape:
        activation("swish", x, recompute=False)
    assert cached_tape.saved_bytes("activations") == 2 * recompute_tape.saved_bytes("activations")


# =============================================================================
# 4) layer_norm
# =============================================================================
def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(
        layer_norm(Tensor([1.0, 2.0, 3.0]), ones, zeros, eps=0.0).data,
        [-1.224744871, 0.0, 1.224744871], atol=1e-9,
    )
    np.testing.assert_array_equal(layer_norm(Tensor([5.0, 5.0, 5.0]), ones, zeros).data, np.zeros(3))


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(5)
    d = 16
    out = layer_norm(Tensor(rng.standard_normal((4, 7, d)) * 3.0 + 1.0),
                     Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-12
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-9


def test_layer_norm_gamma_shape_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# =============================================================================
# 5) backward / tape
# =============================================================================
def test_backward_linear_and_quadratic_functionals():
    x = _leaf([1.0, -2.0, 3.5])
    with Tape() as tape:
        loss = sum_all(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))

    with Tape() as tape:
        loss = mul(sum_all(mul(x, x)), 0.5)
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_rejects_non_scalar_loss():
    x = _leaf(np.ones(3))
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(ContractError, match="scalar"):
        backward(tape, y)


def test_tape_records_topologically_and_replays_bit_exactly():
    rng = np.random.default_rng(6)
    x = _leaf(rng.standard_normal((3, 4)))
    w = _leaf(rng.standard_normal((4, 2)))
    with Tape() as tape:
        h = swish(matmul(x, w))
        loss = sum_all(mul(exp(mul(h, 0.1)), h))
    seen = {x.id, w.id}
    for entry in tape.entries:
        assert all(t.id in seen or not t.requires_grad for t in entry.inputs)
        seen.add(entry.output.id)
    assert tape.replay() == []
    assert loss.requires_grad


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = _leaf(rng.standard_normal((2, 5)))
    w = _leaf(rng.standard_normal((5, 3)))
    g, b = _leaf(rng.uniform(0.5, 1.5, 3)), _leaf(rng.standard_normal(3))

    def _loss():
        return sum_all(softplus(layer_norm(matmul(x, w), g, b)))

    assert check_gradients(_loss, [x, w, g, b]) < 1e-4


def test_flop_counter_counts_matmul_macs_twice():
    with FlopCounter() as counter:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert counter.total == 2 * 2 * 3 * 4
    assert counter.by_op["matmul"] == 48


def test_checkpoint_keeps_one_entry_and_matches_direct_gradients():
    rng = np.random.default_rng(8)
    x = _leaf(rng.standard_normal((3, 4)))
    w = _leaf(rng.standard_normal((4, 4)))

    def _segment(x_in, *_):
        return swish(matmul(swish(matmul(x_in, w)), w))

    with Tape() as direct:
        loss = sum_all(mul(_segment(x), 0.5))
    expected = direct.backward(loss, fill_leaves=False)

    with Tape() as tape:
        out = checkpoint("segment", _segment, [x, w])
        loss = sum_all(mul(out, 0.5))
    assert [e.op for e in tape.entries][0] == "segment"
    assert tape.saved_bytes("layer_outputs") == out.nbytes
    grads = tape.backward(loss, fill_leaves=False)
    for t in (x, w):
        np.testing.assert_array_equal(grads[t.id], expected[t.id])
    assert tape.replay() == []

    # outside a tape the segment simply runs
    np.testing.assert_array_equal(checkpoint("segment", _segment, [x, w]).data, out.data)


def test_backward_from_a_seed_gradient():
    x = _leaf(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        y = mul(x, x)
    grads = tape.backward(y, fill_leaves=False, seed=np.array([1.0, 0.0, -1.0]))
    np.testing.assert_allclose(grads[x.id], [2.0, 0.0, -6.0])
    with pytest.raises(DimensionError):
        tape.backward(y, seed=np.ones(2))


# =============================================================================
# 6) loss
# =============================================================================
def test_bce_with_logits_values():
    assert bce_with_logits(Tensor(np.zeros((2, 3))), np.ones((2, 3))).item() == pytest.approx(math.log(2.0))
    assert bce_with_logits(Tensor([[1.0, -1.0]]), np.array([[1, 0]])).item() == pytest.approx(0.313262, abs=1e-6)
    saturated = bce_with_logits(Tensor([[40.0, -40.0]]), np.array([[1, 0]])).item()
    assert saturated < 1e-12


# =============================================================================
# 7) checked mode
# =============================================================================
def test_checked_mode_flags_overflow(checked):
    with pytest.raises(NonFiniteError, match="exp"):
        exp(Tensor([1000.0]))


def test_unchecked_mode_lets_overflow_through():
    with np.errstate(over="ignore"):
        assert np.isinf(exp(Tensor([1000.0])).data[0])


# =============================================================================
# 8) TSR1 serialization
# =============================================================================
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_tensor_bytes_header_layout(dtype):
    t = Tensor(np.arange(6, dtype=dtype).reshape(2, 3))
    buf = tensor_to_bytes(t)
    assert buf[:4] == b"TSR1"
    assert buf[4] == (0 if dtype == np.float64 else 1)
    assert buf[5] == 2
    assert int.from_bytes(buf[6:10], "little") == 2
    assert int.from_bytes(buf[10:14], "little") == 3
    decoded, offset = tensor_from_bytes(buf)
    assert offset == len(buf)
    assert decoded.dtype == dtype
    np.testing.assert_array_equal(decoded.data, t.data)


def test_tensor_bytes_bad_magic_and_truncation():
    buf = tensor_to_bytes(Tensor(np.ones(4)))
    with pytest.raises(FormatError, match="magic"):
        tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(LengthError):
        tensor_from_bytes(buf[:-1])
