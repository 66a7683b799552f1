import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocap.checkpoint import load_checkpoint, read_config, save_checkpoint, to_bytes
from audiocap.errors import ConfigurationError, DimensionError, FormatError, SequenceTooShort
from audiocap.model import (
    DecoderState,
    GruParams,
    ModelConfig,
    bidir_layer,
    decode_step,
    encode,
    encoder_hidden_sequences,
    final_length,
    forward_loss,
    greedy_decode,
    gru,
    gru_step,
    init_params,
    param_count,
    param_shapes,
    subsample,
)
from audiocap.numcore import grad_check, make_rng
from audiocap.textproc import uniform_weights


def tiny_cfg(**kw):
    base = dict(num_layers=3, encoder_size=2, decoder_size=3, subsample_factor=2, num_features=3,
                vocab_size=5, dropout_p=0.0, max_decode_steps=6)
    base.update(kw)
    return ModelConfig(**base)


def random_gru(rng, I, H, scale=0.5):
    return GruParams(rng.normal(scale=scale, size=(I, 3 * H)), rng.normal(scale=scale, size=(H, 3 * H)),
                     rng.normal(scale=scale, size=3 * H), rng.normal(scale=scale, size=3 * H))


# scalar loop oracles --------------------------------------------------------------

def sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def oracle_gru_step(x, h, p):
    H = len(h)
    out = []
    for j in range(H):
        def pre(gate, vec, W, b):
            return sum(vec[i] * W[i][gate * H + j] for i in range(len(vec))) + b[gate * H + j]
        r = sig(pre(0, x, p.W_x, p.b_x) + pre(0, h, p.W_h, p.b_h))
        u = sig(pre(1, x, p.W_x, p.b_x) + pre(1, h, p.W_h, p.b_h))
        n = math.tanh(pre(2, x, p.W_x, p.b_x) + r * pre(2, h, p.W_h, p.b_h))
        out.append((1 - u) * n + u * h[j])
    return out


def oracle_bidir(X, fwd, bwd):
    T, H = len(X), fwd.W_h.shape[0]
    f, h = [], [0.0] * H
    for t in range(T):
        h = oracle_gru_step(X[t], h, fwd)
        f.append(h)
    b, h = [None] * T, [0.0] * H
    for t in reversed(range(T)):
        h = oracle_gru_step(X[t], h, bwd)
        b[t] = h
    return [f[t] + b[t] for t in range(T)]


def oracle_encoder(X, params, cfg):
    H = oracle_bidir([list(r) for r in X], gru(params, "enc.1.fwd"), gru(params, "enc.1.bwd"))
    for layer in range(2, cfg.num_layers + 1):
        Hs = [H[i] for i in range(0, (len(H) // cfg.subsample_factor) * cfg.subsample_factor,
                                   cfg.subsample_factor)]
        out = oracle_bidir(Hs, gru(params, f"enc.{layer}.fwd"), gru(params, f"enc.{layer}.bwd"))
        H = [[a + b for a, b in zip(o, s)] for o, s in zip(out, Hs)]
    return H


# gru_step ---------------------------------------------------------------------------

def zero_gru(I, H):
    return GruParams(np.zeros((I, 3 * H)), np.zeros((H, 3 * H)), np.zeros(3 * H), np.zeros(3 * H))


def test_gru_step_origin_is_fixed_point():
    np.testing.assert_array_equal(gru_step(np.zeros(3), np.zeros(2), zero_gru(3, 2)), np.zeros(2))


def test_gru_step_zero_params_halves_state():
    h = np.array([0.4, -0.8])
    np.testing.assert_array_equal(gru_step(np.ones(3), h, zero_gru(3, 2)), 0.5 * h)


def test_gru_step_matches_scalar_oracle():
    rng = make_rng(10)
    p = random_gru(rng, 3, 3)
    x, h = rng.normal(size=3), np.tanh(rng.normal(size=3))
    np.testing.assert_allclose(gru_step(x, h, p), oracle_gru_step(x, h, p), rtol=0, atol=1e-12)


def test_gru_step_dimension_mismatch():
    with pytest.raises(DimensionError):
        gru_step(np.zeros(4), np.zeros(2), zero_gru(3, 2))


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_gru_output_stays_in_unit_interval(seed):
    rng = make_rng(seed)
    p = random_gru(rng, 3, 4, scale=3.0)
    h = np.tanh(rng.normal(size=4))
    # strict in exact arithmetic; tanh saturates to exactly 1.0 in float64 for large inputs
    assert (np.abs(gru_step(rng.normal(size=3) * 5, h, p)) <= 1).all()
    small = random_gru(rng, 3, 4, scale=0.5)
    assert (np.abs(gru_step(rng.normal(size=3), h, small)) < 1).all()


# bidir_layer ------------------------------------------------------------------------

def test_bidir_single_step():
    rng = make_rng(11)
    fwd, bwd = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    x = rng.normal(size=(1, 3))
    out = bidir_layer(x, fwd, bwd)
    np.testing.assert_allclose(out[0, :2], gru_step(x[0], np.zeros(2), fwd), atol=1e-15)
    np.testing.assert_allclose(out[0, 2:], gru_step(x[0], np.zeros(2), bwd), atol=1e-15)


def test_bidir_reversal_symmetry():
    rng = make_rng(12)
    fwd, bwd = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    X = rng.normal(size=(6, 3))
    a = bidir_layer(X, fwd, bwd)
    b = bidir_layer(X[::-1], bwd, fwd)
    np.testing.assert_allclose(b[::-1], np.concatenate([a[:, 2:], a[:, :2]], axis=1), atol=1e-14)


def test_bidir_matches_loop_oracle():
    rng = make_rng(13)
    fwd, bwd = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    X = rng.normal(size=(3, 3))
    np.testing.assert_allclose(bidir_layer(X, fwd, bwd), oracle_bidir(X.tolist(), fwd, bwd), atol=1e-12)


def test_bidir_batched_equals_per_item():
    rng = make_rng(14)
    fwd, bwd = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    X = rng.normal(size=(4, 5, 3))
    batched = bidir_layer(X, fwd, bwd)
    for b in range(4):
        np.testing.assert_allclose(batched[b], bidir_layer(X[b], fwd, bwd), atol=1e-14)


def test_bidir_rejects_empty_and_mismatch():
    with pytest.raises(DimensionError):
        bidir_layer(np.zeros((0, 3)), zero_gru(3, 2), zero_gru(3, 2))
    with pytest.raises(DimensionError):
        bidir_layer(np.zeros((4, 5)), zero_gru(3, 2), zero_gru(3, 2))


# sub-sampling -------------------------------------------------------------------------

def test_subsample_keeps_every_mth_row_from_the_first():
    H = np.arange(2584)[:, None] * np.ones((1, 2))
    out = subsample(H, 2)
    assert out.shape == (1292, 2)
    # 1-based rows 1, 3, ..., 2583
    assert out[0, 0] == 0 and out[-1, 0] == 2582


def test_subsample_identity_and_table_lengths():
    H = make_rng(0).normal(size=(323, 3))
    np.testing.assert_array_equal(subsample(H, 1), H)
    assert subsample(H, 8).shape == (40, 3)
    assert subsample(subsample(np.zeros((2584, 1)), 8), 8).shape == (40, 1)


def test_subsample_too_short_names_lengths():
    with pytest.raises(SequenceTooShort, match="3.*4|4.*3"):
        subsample(np.zeros((3, 2)), 4)


@pytest.mark.parametrize("M", [1, 2, 4, 8, 16])
def test_length_law(M):
    for T in range(1, 3001):
        expected = T
        for _ in range(2):
            expected = math.floor(expected / M)
        assert final_length(T, M, 3) == expected


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.sampled_from([1, 2, 4]))
def test_encode_length_matches_law(T, M):
    cfg = tiny_cfg(subsample_factor=M)
    params = init_params(cfg, 1)
    X = make_rng(T).normal(size=(T, 3))
    if final_length(T, M, 3) < 1:
        with pytest.raises(SequenceTooShort):
            encode(X, params, cfg)
    else:
        z, T_L = encode(X, params, cfg)
        assert T_L == final_length(T, M, 3)
        assert z.shape == (4,)


@pytest.mark.parametrize("T,M,T_L", [(2584, 2, 646), (1292, 16, 5), (2584, 8, 40), (1292, 4, 80)])
def test_encode_lengths_at_full_width(T, M, T_L):
    cfg = ModelConfig(subsample_factor=M, encoder_size=8, num_features=4, vocab_size=5)
    z, got = encode(make_rng(1).normal(size=(T, 4)), init_params(cfg, 0), cfg)
    assert got == T_L
    assert ModelConfig().context_size == 512 and z.shape == (16,)


def test_encode_full_size_context_width():
    cfg = ModelConfig(subsample_factor=16, vocab_size=10)
    z, T_L = encode(make_rng(2).normal(size=(1292, 64)), init_params(cfg, 0), cfg)
    assert z.shape == (512,) and T_L == 5


def test_encoder_matches_loop_oracle():
    cfg = tiny_cfg()
    params = init_params(cfg, 3)
    rng = make_rng(3, 1)
    for name in params.names():
        params.set_value(name, rng.normal(scale=0.5, size=params[name].shape))
    X = make_rng(4).normal(size=(8, 3))
    expected = oracle_encoder(X, params, cfg)
    z, T_L = encode(X, params, cfg)
    assert T_L == len(expected) == 2
    np.testing.assert_allclose(z, expected[-1], atol=1e-12)
    np.testing.assert_allclose(encoder_hidden_sequences(X, params, cfg)[-1], expected, atol=1e-12)


def test_residual_passes_subsampled_input_when_layer_is_zero():
    cfg = tiny_cfg()
    params = init_params(cfg, 5)
    for name in params.names():
        if name.startswith("enc.2."):
            params.set_value(name, np.zeros_like(params[name]))
    X = make_rng(6).normal(size=(8, 3))
    H1, H2, _ = encoder_hidden_sequences(X, params, cfg)
    np.testing.assert_array_equal(H2, subsample(H1, 2))


def test_encode_is_deterministic_in_inference():
    cfg = tiny_cfg(dropout_p=0.5)
    params = init_params(cfg, 0)
    X = make_rng(7).normal(size=(9, 3))
    a, _ = encode(X, params, cfg)
    b, _ = encode(X, params, cfg)
    assert a.tobytes() == b.tobytes()
    c, _ = encode(X, params, cfg, training=True, rng=make_rng(1))
    assert not np.array_equal(a, c)


def test_zero_prefix_leaves_forward_state_at_origin():
    cfg = tiny_cfg(subsample_factor=1)
    params = init_params(cfg, 8)
    for name in params.names():
        if name.endswith(".b_x") or name.endswith(".b_h"):
            params.set_value(name, np.zeros_like(params[name]))
    X = np.concatenate([np.zeros((4, 3)), make_rng(9).normal(size=(5, 3))])
    H1 = encoder_hidden_sequences(X, params, cfg)[0]
    np.testing.assert_array_equal(H1[:4, :2], 0.0)
    assert np.abs(H1[4:, :2]).sum() > 0


# decoder --------------------------------------------------------------------------------

def test_decode_step_is_a_distribution():
    cfg = tiny_cfg()
    params = init_params(cfg, 0)
    yhat, state = decode_step(make_rng(0).normal(size=4), DecoderState.initial(cfg), params)
    assert yhat.shape == (5,) and abs(yhat.sum() - 1) < 1e-12
    assert state.step == 1 and state.u.shape == (3,)


def test_zero_decoder_is_uniform():
    cfg = tiny_cfg()
    params = init_params(cfg, 0)
    for name in params.names():
        if not name.startswith("enc."):
            params.set_value(name, np.zeros_like(params[name]))
    state = DecoderState.initial(cfg)
    for _ in range(3):
        yhat, state = decode_step(np.ones(4), state, params)
        np.testing.assert_allclose(yhat, 0.2, atol=1e-15)


def test_two_decode_steps_match_oracle():
    cfg = tiny_cfg()
    params = init_params(cfg, 2)
    z = make_rng(1).normal(size=4)
    state = DecoderState.initial(cfg)
    u = [0.0] * 3
    for _ in range(2):
        yhat, state = decode_step(z, state, params)
        u = oracle_gru_step(z, u, gru(params, "dec"))
        logits = [sum(u[i] * params["cls.W"][i][k] for i in range(3)) + params["cls.b"][k] for k in range(5)]
        e = [math.exp(v) for v in logits]
        np.testing.assert_allclose(yhat, [v / sum(e) for v in e], atol=1e-12)


def biased_classifier(cfg, favorite):
    params = init_params(cfg, 0)
    params.set_value("cls.W", np.zeros_like(params["cls.W"]))
    b = np.zeros(cfg.vocab_size)
    b[favorite] = 5.0
    params.set_value("cls.b", b)
    return params


def test_greedy_stops_at_eos():
    cfg = tiny_cfg()
    assert greedy_decode(np.ones(4), biased_classifier(cfg, 0), cfg, eos_index=0) == [0]


def test_greedy_cap_appends_eos():
    cfg = tiny_cfg()
    out = greedy_decode(np.ones(4), biased_classifier(cfg, 3), cfg, eos_index=0)
    assert out == [3] * 6 + [0]
    assert len(out) == cfg.max_decode_steps + 1


def test_greedy_ties_pick_lowest_index():
    cfg = tiny_cfg()
    params = biased_classifier(cfg, 0)
    params.set_value("cls.b", np.zeros(5))
    assert greedy_decode(np.ones(4), params, cfg, eos_index=4) == [0] * 6 + [4]


def test_greedy_matches_stepwise_oracle():
    cfg = tiny_cfg()
    params = init_params(cfg, 4)
    params.set_value("cls.W", make_rng(5).normal(scale=3.0, size=(3, 5)))
    z = make_rng(6).normal(size=4)
    expected, u = [], [0.0] * 3
    for _ in range(cfg.max_decode_steps):
        u = oracle_gru_step(z, u, gru(params, "dec"))
        logits = [sum(u[i] * params["cls.W"][i][k] for i in range(3)) + params["cls.b"][k] for k in range(5)]
        k = max(range(5), key=lambda j: (logits[j], -j))
        expected.append(k)
        if k == 2:
            break
    else:
        expected.append(2)
    assert greedy_decode(z, params, cfg, eos_index=2) == expected


# loss ----------------------------------------------------------------------------------

def test_uniform_classifier_loss_is_log_vocab():
    cfg = tiny_cfg()
    params = biased_classifier(cfg, 0)
    params.set_value("cls.b", np.zeros(5))
    X = make_rng(0).normal(size=(8, 3))
    loss = forward_loss(X, [1, 2, 0], params, cfg, uniform_weights(5), compute_grad=False)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_halving_weights_halves_loss():
    cfg = tiny_cfg()
    params = init_params(cfg, 1)
    X = make_rng(1).normal(size=(8, 3))
    w = [0.7, 1.0, 0.5, 0.9, 0.6]
    full = forward_loss(X, [1, 3, 0], params, cfg, w, compute_grad=False)
    half = forward_loss(X, [1, 3, 0], params, cfg, [v / 2 for v in w], compute_grad=False)
    assert half == pytest.approx(full / 2, rel=1e-14)


def test_forward_loss_rejects_empty_targets():
    cfg = tiny_cfg()
    with pytest.raises(DimensionError):
        forward_loss(np.zeros((8, 3)), [], init_params(cfg), cfg, uniform_weights(5))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("mode", ["categorical", "binary"])
def test_end_to_end_gradient(seed, mode):
    cfg = tiny_cfg(encoder_size=3)
    params = init_params(cfg, seed)
    X = make_rng(seed, 5).normal(size=(8, 3))
    Y = [1, 3, 4, 0]
    w = [0.5, 1.0, 0.8, 0.6, 0.9]

    def loss(p):
        return forward_loss(X, Y, p, cfg, w, mode=mode)

    def value(p):
        return forward_loss(X, Y, p, cfg, w, mode=mode, compute_grad=False)

    assert grad_check(loss, params, value_fn=value) < 1e-4


# parameter count -------------------------------------------------------------------------

def test_param_count_enumerates_tensors():
    cfg = ModelConfig()
    manual = 0
    for layer in range(3):
        I = 64 if layer == 0 else 512
        manual += 2 * (3 * 256 * (I + 256) + 2 * 3 * 256)
    manual += 3 * 256 * (512 + 256) + 2 * 3 * 256
    manual += 256 * 4366 + 4366
    assert param_count(cfg) == manual == 4_573_454
    assert abs(manual - 4_573_711) / 4_573_711 < 0.005
    assert init_params(tiny_cfg()).num_elements() == param_count(tiny_cfg())


def test_param_count_independent_of_factor():
    assert param_count(ModelConfig(subsample_factor=1)) == param_count(ModelConfig(subsample_factor=16))


def test_doubling_vocabulary_adds_classifier_rows():
    assert param_count(ModelConfig(vocab_size=8732)) - param_count(ModelConfig()) == 257 * 4366


def test_model_config_validation(caplog):
    with pytest.raises(ConfigurationError):
        ModelConfig(num_layers=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(dropout_p=1.0)
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"layers": 3})
    with caplog.at_level("WARNING"):
        ModelConfig(subsample_factor=3)
    assert "outside" in caplog.text


# checkpoints -------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    params = init_params(cfg, 7)
    save_checkpoint(tmp_path / "m.sscp", params, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "m.sscp", expected=cfg)
    assert cfg2 == cfg and read_config(tmp_path / "m.sscp") == cfg
    assert loaded.equals(params)
    assert to_bytes(loaded, cfg2) == (tmp_path / "m.sscp").read_bytes()
    assert list(param_shapes(cfg)) == loaded.names()


def test_checkpoint_refuses_mismatched_config(tmp_path):
    cfg = tiny_cfg()
    save_checkpoint(tmp_path / "m.sscp", init_params(cfg), cfg)
    with pytest.raises(ConfigurationError, match="subsample_factor: expected 4, checkpoint has 2"):
        load_checkpoint(tmp_path / "m.sscp", expected=tiny_cfg(subsample_factor=4))


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = tiny_cfg()
    p = tmp_path / "m.sscp"
    save_checkpoint(p, init_params(cfg), cfg)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(p)
