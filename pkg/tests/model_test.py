import math

import numpy as np
import pytest

from src.config import ModelConfig
from src.errors import ConfigError, DimensionError, FormatError
from src.model import (
    CHECKPOINT_MAGIC,
    Conv1d,
    EcgMambaModel,
    FeedForward,
    Linear,
    MambaBlockParams,
    MambaLayer,
    count_params,
    count_params_flops,
    ffn,
    load_checkpoint,
    mamba_block,
    positional_encoding,
    save_checkpoint,
)
from src.tensor_core import Tape, Tensor, bce_with_logits, check_gradients, matmul, mul, relu, sum_all


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n_classes=3, n_leads=2, signal_length=64, n_layers=1, d_model=4, ssm_state=4, conv_kernel=2,
                expand=2, encoder=[(4, 8, 8)], ffn_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


def _zero(*layers):
    for layer in layers:
        for _, t in layer.named_parameters(""):
            t.data[...] = 0.0


# =============================================================================
# 1) Encoder and positional encoding
# =============================================================================
def test_default_encoder_maps_1000_samples_to_10_tokens():
    cfg = ModelConfig(n_classes=5)
    assert cfg.encoder == [(64, 5, 5), (128, 5, 5), (128, 4, 4)]
    assert cfg.sequence_length() == 10


def test_encoder_output_shape_and_variants():
    rng = np.random.default_rng(0)
    signal = rng.standard_normal((2, 2, 64))
    model = EcgMambaModel(tiny_config(), seed=0)
    assert model.encoder(Tensor(signal)).shape == (2, 8, 4)

    projection = EcgMambaModel(tiny_config(encoder=[(4, 1, 1)]), seed=0)
    assert projection.encoder(Tensor(signal)).shape == (2, 64, 4)

    lead_mix = EcgMambaModel(tiny_config(use_encoder=False), seed=0)
    assert lead_mix.encoder.lead_projection is not None
    assert lead_mix.encoder(Tensor(signal)).shape == (2, 64, 4)


def test_signal_too_short_for_stride_chain():
    with pytest.raises(ConfigError, match="too short"):
        tiny_config(signal_length=6, encoder=[(4, 8, 8)])


def test_positional_encoding_values():
    pe = positional_encoding(50, 16).data
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert pe[7, 5] == pytest.approx(math.cos(7 / 10000 ** (4 / 16)))


def test_positional_encoding_rejects_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(10, 7)


# =============================================================================
# 2) Mamba block / FFN / layer
# =============================================================================
def test_mamba_block_preserves_shape():
    rng = np.random.default_rng(1)
    block = MambaBlockParams.initialize(tiny_config(), rng)
    x = Tensor(rng.standard_normal((3, 8, 4)))
    assert mamba_block(x, block).shape == (3, 8, 4)


def test_mamba_block_with_zero_weights_outputs_zero():
    rng = np.random.default_rng(2)
    block = MambaBlockParams.initialize(tiny_config(), rng)
    for _, t in block.named_parameters("block"):
        t.data[...] = 0.0
    out = mamba_block(Tensor(rng.standard_normal((1, 8, 4))), block)
    np.testing.assert_array_equal(out.data, 0.0)


def test_mamba_block_gradients():
    rng = np.random.default_rng(3)
    block = MambaBlockParams.initialize(tiny_config(), rng)
    x = Tensor(rng.standard_normal((1, 8, 4)), requires_grad=True)
    weights = Tensor(rng.standard_normal((1, 8, 4)))
    params = [x] + [t for _, t in block.named_parameters("block")]
    err = check_gradients(lambda: sum_all(mul(mamba_block(x, block), weights)), params, max_coords=5)
    assert err < 1e-4


@pytest.mark.parametrize("length", [1, 2, 9])
def test_ffn_preserves_length(length):
    rng = np.random.default_rng(4)
    layer = FeedForward(4, 8, 3, rng)
    assert ffn(Tensor(rng.standard_normal((2, length, 4))), layer).shape == (2, length, 4)


def test_ffn_with_zero_weights_outputs_zero():
    rng = np.random.default_rng(5)
    layer = FeedForward(4, 8, 3, rng)
    _zero(layer)
    np.testing.assert_array_equal(ffn(Tensor(rng.standard_normal((1, 5, 4))), layer).data, 0.0)


def test_ffn_kernel_one_is_a_positionwise_mlp():
    rng = np.random.default_rng(6)
    layer = FeedForward(4, 8, 1, rng)
    x = Tensor(rng.standard_normal((2, 6, 4)))
    w1 = Tensor(layer.conv1.weight.data[:, :, 0].T.copy())
    w2 = Tensor(layer.conv2.weight.data[:, :, 0].T.copy())
    hidden = relu(matmul(x, w1) + layer.conv1.bias)
    expected = matmul(hidden, w2) + layer.conv2.bias
    np.testing.assert_allclose(ffn(x, layer).data, expected.data, rtol=1e-12, atol=1e-14)


def test_layer_without_ln_or_ffn_and_zero_block_is_identity():
    rng = np.random.default_rng(7)
    layer = MambaLayer(tiny_config(use_ln=False, use_ffn=False), rng)
    for _, t in layer.block.named_parameters("block"):
        t.data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 8, 4)))
    np.testing.assert_array_equal(layer(x).data, x.data)


def test_mamba_layer_gradients():
    rng = np.random.default_rng(8)
    layer = MambaLayer(tiny_config(), rng)
    x = Tensor(rng.standard_normal((1, 8, 4)), requires_grad=True)
    weights = Tensor(rng.standard_normal((1, 8, 4)))
    params = [x] + [t for _, t in layer.named_parameters("layer")]
    assert check_gradients(lambda: sum_all(mul(layer(x), weights)), params, max_coords=4) < 1e-4


# =============================================================================
# 3) Full model
# =============================================================================
def test_forward_shape_finite_and_deterministic():
    rng = np.random.default_rng(9)
    model = EcgMambaModel(tiny_config(n_layers=2), seed=9).eval()
    x = rng.standard_normal((2, 2, 64))
    first = model.forward(x).data
    assert first.shape == (2, 3)
    assert np.all(np.isfinite(first))
    np.testing.assert_array_equal(first, model(x).data)


def test_same_seed_builds_identical_models():
    a = EcgMambaModel(tiny_config(), seed=4)
    b = EcgMambaModel(tiny_config(), seed=4)
    for (name_a, ta), (name_b, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        np.testing.assert_array_equal(ta.data, tb.data)


def test_forward_rejects_wrong_input_shape():
    model = EcgMambaModel(tiny_config(), seed=0)
    with pytest.raises(DimensionError, match=r"\(B, 2, 64\)"):
        model.forward(np.zeros((1, 3, 64)))


def test_batch_permutation_permutes_logits_in_eval_mode():
    rng = np.random.default_rng(10)
    model = EcgMambaModel(tiny_config(), seed=10).eval()
    x = rng.standard_normal((5, 2, 64))
    perm = rng.permutation(5)
    np.testing.assert_allclose(model.forward(x[perm]).data, model.forward(x).data[perm], rtol=0, atol=1e-12)


def test_training_forward_updates_batchnorm_statistics_only_in_train_mode():
    rng = np.random.default_rng(11)
    model = EcgMambaModel(tiny_config(), seed=11)
    bn = model.encoder.blocks[0][1]
    x = rng.standard_normal((4, 2, 64))
    model.eval().forward(x)
    np.testing.assert_array_equal(bn.running_mean, 0.0)
    model.train().forward(x)
    assert not np.allclose(bn.running_mean, 0.0)

    sink = []
    before = bn.running_mean.copy()
    model.forward(x, stats_sink=sink)
    np.testing.assert_array_equal(bn.running_mean, before)
    assert len(sink) == 1 and sink[0][0] is bn


def test_full_model_gradients():
    cfg = tiny_config(d_model=8, ssm_state=4, conv_kernel=4, encoder=[(8, 8, 8)], ffn_hidden=16)
    model = EcgMambaModel(cfg, seed=12).train()
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 2, 64))
    targets = (rng.random((2, 3)) > 0.5).astype(np.float64)
    err = check_gradients(lambda: bce_with_logits(model.forward(x, stats_sink=[]), targets),
                          model.parameters(), max_coords=2)
    assert err < 1e-4


def test_tape_of_full_model_replays_bit_exactly():
    model = EcgMambaModel(tiny_config(), seed=13).train()
    with Tape() as tape:
        model.forward(np.random.default_rng(13).standard_normal((2, 2, 64)), stats_sink=[])
    assert tape.replay() == []


def test_embedding_of_zero_weight_model_is_zero():
    model = EcgMambaModel(tiny_config(use_encoder=False, use_ln=False, use_ffn=False), seed=14)
    for t in model.parameters():
        t.data[...] = 0.0
    model.pe = Tensor(np.zeros_like(model.pe.data))
    emb = model.embed(np.random.default_rng(14).standard_normal((3, 2, 64)))
    np.testing.assert_array_equal(emb.data, 0.0)


# =============================================================================
# 4) Counting
# =============================================================================
def test_parameter_counts_of_single_layers():
    rng = np.random.default_rng(15)
    assert count_params(Linear(4, 3, rng)) == 15
    assert count_params(Conv1d(2, 3, 4, rng)) == 27


def test_count_params_flops_matches_named_parameters():
    model = EcgMambaModel(tiny_config(), seed=16)
    params, flops = count_params_flops(model, (1, 2, 64))
    assert params == sum(t.size for t in model.parameters())
    assert flops > 0
    deeper = EcgMambaModel(tiny_config(n_layers=2), seed=16)
    assert count_params_flops(deeper, (1, 2, 64))[1] > flops


# =============================================================================
# 5) Checkpoints
# =============================================================================
def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    model = EcgMambaModel(tiny_config(), seed=17).train()
    x = rng.standard_normal((3, 2, 64))
    model.forward(x)
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), model, ["A", "B", "C"], extra={"epoch": 2})

    loaded, class_names, manifest = load_checkpoint(str(path))
    assert class_names == ["A", "B", "C"]
    assert manifest["extra"] == {"epoch": 2}
    assert not loaded.training
    np.testing.assert_array_equal(loaded.forward(x).data, model.eval().forward(x).data)
    assert path.read_bytes()[:8] == CHECKPOINT_MAGIC


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    model = EcgMambaModel(tiny_config(), seed=18)
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), model, ["A", "B", "C"])
    data = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"ECGM9999" + data[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(str(bad))

    short = tmp_path / "short.ckpt"
    short.write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(str(short))


def test_ablations_have_distinct_smaller_parameter_counts():
    full = EcgMambaModel(ModelConfig(n_classes=5), seed=0).num_params()
    counts = [
        EcgMambaModel(ModelConfig(n_classes=5, **{flag: False}), seed=0).num_params()
        for flag in ("use_encoder", "use_ln", "use_ffn")
    ]
    assert len(set(counts)) == 3
    assert all(c < full for c in counts)


def test_disabling_layer_norm_drops_its_parameters(tmp_path):
    cfg = ModelConfig(n_classes=5)
    full = EcgMambaModel(cfg, seed=0).num_params()
    no_ln = EcgMambaModel(ModelConfig(n_classes=5, use_ln=False), seed=0)
    # two LayerNorms of (gamma, beta) per layer
    assert full - no_ln.num_params() == cfg.n_layers * 2 * 2 * cfg.d_model
    assert not any(".ln" in name for name, _ in no_ln.named_parameters())

    model = EcgMambaModel(tiny_config(use_ln=False), seed=19)
    x = np.random.default_rng(19).standard_normal((2, 2, 64))
    path = tmp_path / "no_ln.ckpt"
    save_checkpoint(str(path), model, ["A", "B", "C"])
    loaded, _, _ = load_checkpoint(str(path))
    assert loaded.layers[0].ln1 is None and loaded.layers[0].ln2 is None
    np.testing.assert_array_equal(loaded.forward(x).data, model.eval().forward(x).data)


def test_layer_checkpointing_keeps_gradients_and_drops_layer_internals():
    rng = np.random.default_rng(20)
    x = rng.standard_normal((2, 2, 64))
    targets = (rng.random((2, 3)) > 0.5).astype(np.float64)
    results = {}
    for enabled in (True, False):
        model = EcgMambaModel(tiny_config(n_layers=2, dropout=0.2, checkpoint_layers=enabled), seed=20).train()
        with Tape() as tape:
            loss = bce_with_logits(model.forward(x, stats_sink=[]), targets)
        held = sum(e.output.nbytes for e in tape.entries)
        grads = tape.backward(loss, fill_leaves=False)
        results[enabled] = (held, [grads[p.id] for p in model.parameters()], loss.item())

    held_on, grads_on, loss_on = results[True]
    held_off, grads_off, loss_off = results[False]
    assert loss_on == loss_off
    for g1, g2 in zip(grads_on, grads_off):
        np.testing.assert_array_equal(g1, g2)
    assert held_on < held_off / 2
