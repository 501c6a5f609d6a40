import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfpl import autodiff as ad
from dfpl.autodiff import ShapeError, Tensor, backward
from dfpl.nets import (NetConfig, NetParams, Optimizer, clip_weights, critic_forward, critic_lipschitz_bound,
                       direct_generate, enc_forward, generator_forward, init_critic, init_encoder, init_generator,
                       init_lstm, init_predictor, load_params, lstm_rollout, lstm_step, lstm_zero_state,
                       optimizer_step, params_from_json, params_to_json, predictor_forward, rollout_batch,
                       save_params)
from dfpl.verify import block_checks

CFG = NetConfig()


def zero_last_layer(params, name="w1"):
    params[name].data[...] = 0.0


# encoder

def test_encoder_zero_final_layer_returns_bias():
    enc = init_encoder(CFG, 0)
    zero_last_layer(enc)
    enc["b1"].data[...] = np.arange(CFG.feat_dim)
    x = Tensor(np.random.default_rng(0).normal(size=CFG.obs_dim))
    assert np.array_equal(enc_forward(enc, x).data, np.arange(CFG.feat_dim))


def test_encoder_is_bitwise_deterministic():
    x = Tensor(np.random.default_rng(3).normal(size=(5, CFG.obs_dim)))
    a = enc_forward(init_encoder(CFG, 7), x).data
    b = enc_forward(init_encoder(CFG, 7), x).data
    assert a.tobytes() == b.tobytes()


def test_encoder_dimension_mismatch():
    with pytest.raises(ShapeError):
        enc_forward(init_encoder(CFG, 0), Tensor(np.zeros(CFG.obs_dim + 1)))


# lstm

def test_lstm_zero_parameters_give_zero_hidden():
    lstm = init_lstm(CFG, 0)
    for t in lstm:
        t.data[...] = 0.0
    state = lstm_step(lstm, lstm_zero_state(CFG.hidden_dim), Tensor(np.ones(CFG.feat_dim + CFG.attr_dim)))
    assert np.array_equal(state.hidden.data, np.zeros(CFG.hidden_dim))


def test_lstm_hidden_bounded_when_saturated():
    lstm = init_lstm(CFG, 1)
    lstm["w"].data *= 50.0
    state = lstm_zero_state(CFG.hidden_dim)
    x = Tensor(np.random.default_rng(0).normal(size=CFG.feat_dim + CFG.attr_dim) * 10)
    for _ in range(5):
        state = lstm_step(lstm, state, x)
        assert np.all(np.abs(state.hidden.data) <= 1.0)


def test_lstm_state_evolves():
    lstm = init_lstm(CFG, 2)
    x = Tensor(np.random.default_rng(1).normal(size=CFG.feat_dim + CFG.attr_dim))
    one = lstm_step(lstm, lstm_zero_state(CFG.hidden_dim), x)
    two = lstm_step(lstm, one, x)
    assert not np.allclose(one.hidden.data, two.hidden.data)


def test_lstm_state_dim_mismatch():
    with pytest.raises(ShapeError):
        lstm_step(init_lstm(CFG, 0), lstm_zero_state(CFG.hidden_dim + 1), Tensor(np.zeros(22)))


# rollout

def _rollout_inputs(times, seed=0):
    rng = np.random.default_rng(seed)
    feats = [Tensor(rng.normal(size=CFG.feat_dim)) for _ in times]
    attrs = [Tensor(rng.normal(size=CFG.attr_dim)) for _ in times]
    return feats, attrs


def test_rollout_minimal_horizon():
    feats, attrs = _rollout_inputs([4])
    out = lstm_rollout(init_lstm(CFG, 0), init_generator(CFG, 0), feats, attrs, [4], 5)
    assert list(out.generated) == [5]


def test_rollout_five_steps_closed_loop():
    lstm, gen = init_lstm(CFG, 0), init_generator(CFG, 0)
    feats, attrs = _rollout_inputs([1])
    out = lstm_rollout(lstm, gen, feats, attrs, [1], 6)
    assert list(out.generated) == [2, 3, 4, 5, 6]
    # step 2 consumed the generated feature of time 2
    state = lstm_step(lstm, lstm_zero_state(CFG.hidden_dim), ad.concat([feats[0], attrs[0]]))
    state = lstm_step(lstm, state, ad.concat([out.generated[2], attrs[0]]))
    assert np.allclose(state.hidden.data, out.hidden[2].data, atol=0, rtol=0)


def test_rollout_reuses_observed_features():
    lstm, gen = init_lstm(CFG, 3), init_generator(CFG, 3)
    feats, attrs = _rollout_inputs([1, 2, 3])
    out = lstm_rollout(lstm, gen, feats, attrs, [1, 2, 3], 5)
    assert list(out.generated) == [2, 3, 4, 5]
    # hand trace: observed at 1, 2, 3 then closed loop at 4
    state = lstm_zero_state(CFG.hidden_dim)
    for f, a in zip(feats, attrs):
        state = lstm_step(lstm, state, ad.concat([f, a]))
    expect4 = generator_forward(gen, state.hidden, attrs[2], Tensor(np.zeros(CFG.noise_dim)))
    assert np.array_equal(out.generated[4].data, expect4.data)
    state = lstm_step(lstm, state, ad.concat([expect4, attrs[2]]))
    expect5 = generator_forward(gen, state.hidden, attrs[2], Tensor(np.zeros(CFG.noise_dim)))
    assert np.array_equal(out.generated[5].data, expect5.data)


def test_rollout_time_errors():
    feats, attrs = _rollout_inputs([2, 1])
    with pytest.raises(ValueError):
        lstm_rollout(init_lstm(CFG, 0), init_generator(CFG, 0), feats, attrs, [2, 1], 5)
    feats, attrs = _rollout_inputs([5])
    with pytest.raises(ValueError):
        lstm_rollout(init_lstm(CFG, 0), init_generator(CFG, 0), feats, attrs, [5], 5)


def test_batched_rollout_matches_single_subject():
    rng = np.random.default_rng(4)
    lstm, gen = init_lstm(CFG, 4), init_generator(CFG, 4)
    T = 6
    windows = [[1], [2, 4], [3, 4, 5]]
    feats = rng.normal(size=(3, T, CFG.feat_dim))
    attrs = rng.normal(size=(3, T, CFG.attr_dim))
    noise = rng.normal(size=(3, T, CFG.noise_dim))
    observed = np.zeros((3, T), dtype=bool)
    for i, w in enumerate(windows):
        observed[i, np.array(w) - 1] = True
    batch = rollout_batch(lstm, gen, feats, attrs, observed, T, noise)
    for i, w in enumerate(windows):
        single = lstm_rollout(lstm, gen, [Tensor(feats[i, t - 1]) for t in w], [Tensor(attrs[i, t - 1]) for t in w],
                              w, T, [Tensor(noise[i, t - 1]) for t in range(w[0], T)])
        for t, f in single.generated.items():
            assert np.allclose(batch.generated[t].data[i], f.data, atol=1e-12)


def test_direct_generator_shape():
    gen = init_generator(CFG, 0, input_dim=CFG.feat_dim + 1)
    f = Tensor(np.ones((4, CFG.feat_dim)))
    a = Tensor(np.ones((4, CFG.attr_dim)))
    out = direct_generate(gen, f, a, np.array([1, 2, 3, 4]), 6)
    assert out.shape == (4, CFG.feat_dim)


# generator / critic / predictor

def test_generator_output_matches_encoder_shape():
    for cfg in (CFG, NetConfig(feat_dim=7, hidden_dim=5, noise_dim=3)):
        gen = init_generator(cfg, 0)
        out = generator_forward(gen, Tensor(np.zeros(cfg.hidden_dim)), Tensor(np.zeros(cfg.attr_dim)),
                                Tensor(np.zeros(cfg.noise_dim)))
        enc = enc_forward(init_encoder(cfg, 0), Tensor(np.zeros(cfg.obs_dim)))
        assert out.shape == enc.shape


def test_generator_noise_matters():
    gen = init_generator(CFG, 5)
    rng = np.random.default_rng(0)
    h, a = Tensor(rng.normal(size=CFG.hidden_dim)), Tensor(rng.normal(size=CFG.attr_dim))
    zero = generator_forward(gen, h, a, Tensor(np.zeros(CFG.noise_dim))).data
    noisy = generator_forward(gen, h, a, Tensor(rng.normal(size=CFG.noise_dim))).data
    assert not np.allclose(zero, noisy)


def test_generator_zero_final_layer_returns_bias():
    gen = init_generator(CFG, 0)
    zero_last_layer(gen)
    gen["b1"].data[...] = 0.25
    out = generator_forward(gen, Tensor(np.ones(CFG.hidden_dim)), Tensor(np.ones(CFG.attr_dim)),
                            Tensor(np.ones(CFG.noise_dim)))
    assert np.all(out.data == 0.25)


def test_generator_dim_mismatch():
    with pytest.raises(ShapeError):
        generator_forward(init_generator(CFG, 0), Tensor(np.zeros(CFG.hidden_dim)), Tensor(np.zeros(5)),
                          Tensor(np.zeros(CFG.noise_dim)))


def test_zero_critic_scores_zero():
    critic = init_critic(CFG, 0)
    for t in critic:
        t.data[...] = 0.0
    assert critic_forward(critic, Tensor(np.ones(CFG.feat_dim))).item() == 0.0


def test_critic_lipschitz_bound_holds():
    critic = init_critic(CFG, 1, clip=0.01)
    bound = critic_lipschitz_bound(critic)
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.normal(size=(2, CFG.feat_dim)) * 3
        gap = abs(critic_forward(critic, Tensor(a)).item() - critic_forward(critic, Tensor(b)).item())
        assert gap <= bound * np.linalg.norm(a - b) + 1e-12


def test_predictor_zero_final_layer_is_half():
    pred = init_predictor(CFG, 0, CFG.feat_dim)
    zero_last_layer(pred)
    assert predictor_forward(pred, Tensor(np.ones(CFG.feat_dim)), Tensor(np.ones(6))).item() == 0.5


def test_predictor_output_open_interval():
    pred = init_predictor(CFG, 3, CFG.feat_dim)
    x = Tensor(np.random.default_rng(0).normal(size=(1000, CFG.feat_dim)) * 20)
    p = predictor_forward(pred, x, None).data
    assert np.all((p > 0) & (p < 1))


def test_predictor_missing_attrs_are_zero_vector():
    pred = init_predictor(CFG, 3, CFG.feat_dim)
    f = Tensor(np.random.default_rng(1).normal(size=(4, CFG.feat_dim)))
    assert np.array_equal(predictor_forward(pred, f, None).data,
                          predictor_forward(pred, f, Tensor(np.zeros((4, 6)))).data)


# optimizers and clipping

def _params(values):
    return NetParams({"w": Tensor(np.array(values, dtype=float), requires_grad=True)})


def test_sgd_step():
    p = _params([0.0, 0.0])
    p["w"].grad = np.array([1.0, -2.0])
    optimizer_step(Optimizer("sgd", 0.1), p)
    assert np.allclose(p["w"].data, [-0.1, 0.2], atol=1e-15)


def test_zero_grad_leaves_params():
    p = _params([0.5, -0.5])
    p["w"].grad = np.zeros(2)
    for rule in ("sgd", "rmsprop"):
        optimizer_step(Optimizer(rule, 0.1), p)
    assert np.array_equal(p["w"].data, [0.5, -0.5])


def test_rmsprop_matches_hand_simulation():
    lr, g, decay, eps = 1e-2, 0.3, 0.99, 1e-8
    p = _params([1.0])
    opt = Optimizer("rmsprop", lr, decay=decay, eps=eps)
    w, acc = 1.0, 0.0
    for _ in range(10):
        p["w"].grad = np.array([g])
        optimizer_step(opt, p)
        acc = decay * acc + (1 - decay) * g * g
        w -= lr * g / (np.sqrt(acc) + eps)
    assert p["w"].data[0] == pytest.approx(w, abs=1e-14)
    # first step magnitude lr * g / (|g| sqrt(1 - decay) + eps)
    q = _params([0.0])
    q["w"].grad = np.array([g])
    optimizer_step(Optimizer("rmsprop", lr, decay=decay, eps=eps), q)
    assert -q["w"].data[0] == pytest.approx(lr * g / (abs(g) * np.sqrt(1 - decay) + eps), rel=1e-12)


def test_weight_decay_is_l2_shrinkage():
    p = _params([2.0])
    p["w"].grad = np.array([0.0])
    optimizer_step(Optimizer("sgd", 0.1, weight_decay=0.5), p)
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_nonfinite_grad_aborts_before_any_update():
    p = NetParams({"a": Tensor([1.0], requires_grad=True), "b": Tensor([1.0], requires_grad=True)})
    p["a"].grad = np.array([1.0])
    p["b"].grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'b'"):
        optimizer_step(Optimizer("sgd", 0.1), p)
    assert p["a"].data[0] == 1.0


def test_clip_examples():
    p = _params([0.5, -0.003, -2.0])
    clip_weights(p, 0.01)
    assert np.array_equal(p["w"].data, [0.01, -0.003, -0.01])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1.0))
def test_clip_bound_property(seed, c):
    critic = init_critic(CFG, seed)
    for t in critic:
        t.data[...] = np.random.default_rng(seed).normal(size=t.shape)
    clip_weights(critic, c)
    assert max(np.max(np.abs(t.data)) for t in critic) <= c


# checkpoints and determinism

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    params = init_lstm(CFG, 11)
    params["w"].data[0, 0] = 1 / 3
    save_params(params, tmp_path / "p.json")
    back = load_params(tmp_path / "p.json")
    for name, t in params.items():
        assert back[name].data.tobytes() == t.data.tobytes()
    assert params_from_json(json.loads(json.dumps(params_to_json(params))))["b"].shape == params["b"].shape


def test_training_steps_are_deterministic():
    def run():
        pred = init_predictor(CFG, 9, CFG.feat_dim)
        opt = Optimizer("rmsprop", 1e-3, 1e-4)
        rng = np.random.default_rng(0)
        x, a = Tensor(rng.normal(size=(8, CFG.feat_dim))), Tensor(rng.normal(size=(8, 6)))
        for _ in range(5):
            pred.zero_grad()
            backward(ad.mean(predictor_forward(pred, x, a)))
            optimizer_step(opt, pred)
        return b"".join(t.data.tobytes() for t in pred)

    assert run() == run()


@pytest.mark.parametrize("block", ["enc", "lstm", "gen", "critic", "predictor"])
def test_block_gradients(block):
    worst = max(block_checks(seed)[block](np.random.default_rng(seed)) for seed in range(10))
    assert worst <= 1e-4
