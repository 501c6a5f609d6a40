from dataclasses import replace

import numpy as np
import pytest

from dfpl import autodiff as ad
from dfpl.autodiff import Tensor
from dfpl.calculus import combine_t
from dfpl.losses import (GanPairs, LossBreakdown, MissingLabelError, compose_total, critic_loss_on, gan_pairs, hinge,
                         loss_current_total, loss_deterioration_margin, loss_erm_current, loss_future,
                         loss_generative, loss_progression_ce, nll)
from dfpl.model import forward
from dfpl.nets import NetConfig, Optimizer, clip_weights, critic_forward, init_critic, optimizer_step
from dfpl.verify import loss_checks, tiny_problem


# tensor-level oracles

def test_nll_perfect_predictor_is_zero():
    y = np.array([1, 0, 1, 1])
    p = Tensor(np.where(y == 1, 1 - 1e-12, 1e-12))
    assert nll(p, y).item() <= len(y) * 1e-11


def test_nll_fair_coin():
    assert nll(Tensor(np.full(7, 0.5)), np.array([1, 0, 1, 0, 0, 1, 1])).item() == pytest.approx(7 * np.log(2))


def test_nll_single_term():
    assert nll(Tensor([0.25]), np.array([1])).item() == pytest.approx(np.log(4), abs=1e-12)
    assert nll(Tensor([0.8]), np.array([1])).item() == pytest.approx(0.2231435513, abs=1e-9)


def test_nll_rejects_hidden_labels():
    with pytest.raises(MissingLabelError):
        nll(Tensor([0.5]), np.array([-1]))


def test_hinge_examples():
    assert hinge(Tensor([-0.5]), 0.1).item() == 0.0
    assert hinge(Tensor([0.2]), 0.1).item() == pytest.approx(0.3)
    assert hinge(Tensor([-0.1]), 0.1).item() == 0.0


def test_combined_cross_entropy_examples():
    one = lambda v: Tensor([v])  # noqa: E731
    # a certainly diseased current state short-circuits the progression head
    for p_prog in (0.0, 0.4, 1.0):
        assert nll(combine_t(one(1.0), one(p_prog)), np.array([1])).item() <= 1e-11
    assert nll(combine_t(one(0.3), one(0.5)), np.array([1])).item() == pytest.approx(-np.log(0.65), abs=1e-12)
    assert nll(combine_t(one(0.3), one(0.5)), np.array([0])).item() == pytest.approx(-np.log(0.35), abs=1e-12)
    assert -np.log(0.65) == pytest.approx(0.4308, abs=1e-4)
    assert -np.log(0.35) == pytest.approx(1.0498, abs=1e-4)


def test_current_total_arithmetic():
    assert compose_total(0.0, 2.0 + 0.1 * 0.3, 0.0, 0.0, 1.0, 0.0, 0.0, 1) == pytest.approx(2.03)


def test_breakdown_identity():
    parts = LossBreakdown(0.1, 2.0, 0.5, 0.7, compose_total(0.1, 2.0, 0.5, 0.7, 0.1, 1.0, 1.0, 2))
    assert parts.total == pytest.approx(0.1 + 0.1 * 2.0 + 0.5 + 0.7)
    assert compose_total(0.1, 2.0, 0.5, 0.7, 0.1, 1.0, 1.0, 1) == pytest.approx(0.1 + 0.2 + 0.5)


# model-level losses

@pytest.fixture(scope="module")
def problem():
    return tiny_problem(0, order_k=2)


def test_current_total_with_zero_alpha_is_erm(problem):
    model, batch = problem
    assert loss_current_total(model, batch, 0.0, 0.05).item() == loss_erm_current(model, batch).item()


def test_current_total_composition(problem):
    model, batch = problem
    erm = loss_erm_current(model, batch).item()
    margin = loss_deterioration_margin(model, batch, 0.05).item()
    assert loss_current_total(model, batch, 0.1, 0.05).item() == pytest.approx(erm + 0.1 * margin, abs=1e-12)


def test_erm_term_count(problem):
    model, batch = problem
    # uninformative predictor: zero the output layer so every probability is 1/2
    saved = model.cur["w1"].data.copy(), model.cur["b1"].data.copy()
    model.cur["w1"].data[...] = 0.0
    model.cur["b1"].data[...] = 0.0
    try:
        n_terms = len(batch.real_labels[1]) + len(batch.real_labels[batch.horizon]) + batch.size
        assert loss_erm_current(model, batch).item() == pytest.approx(n_terms * np.log(2))
    finally:
        model.cur["w1"].data[...], model.cur["b1"].data[...] = saved


def test_erm_requires_visible_labels(problem):
    model, batch = problem
    hidden = dict(batch.real_labels)
    hidden[1] = np.full_like(hidden[1], -1)
    with pytest.raises(MissingLabelError):
        loss_erm_current(model, replace(batch, real_labels=hidden))


def test_future_loss_counts_every_observed_time(problem):
    model, batch = problem
    fwd = forward(model, batch)
    manual = sum(nll(p, batch.y_T).item() for p in fwd.p_fut)
    assert loss_future(model, batch, fwd).item() == pytest.approx(manual)
    assert len(fwd.p_fut) == 2


def test_progression_ce_uses_high_order_current_state(problem):
    model, batch = problem
    fwd = forward(model, batch)
    p_current = (fwd.p_cur_tk.data + fwd.p_fut[0].data) / 2
    p = p_current + (1 - p_current) * fwd.p_prog.data
    manual = -np.sum(np.log(np.where(batch.y_T == 1, p, 1 - p)))
    assert loss_progression_ce(model, batch, fwd).item() == pytest.approx(manual, abs=1e-12)


def test_zero_critic_gives_zero_gan_losses(problem):
    model, batch = problem
    for t in model.critic:
        t.data[...] = 0.0
    c, g = loss_generative(model, batch)
    assert c.item() == 0.0 and g.item() == 0.0


def test_gan_pairs_cover_generated_times():
    model, batch = tiny_problem(1, order_k=2)
    fwd = forward(model, batch)
    pairs = gan_pairs(batch, fwd, horizon_only=False)
    assert batch.horizon in pairs.weights
    for t, w in pairs.weights.items():
        assert np.array_equal(w, ((t > batch.times[:, 0]) & batch.recorded[:, t - 1]).astype(float))
    assert list(gan_pairs(batch, fwd, horizon_only=True).weights) == [batch.horizon]


def test_critic_loss_zero_for_identical_distributions():
    # fixed critic, fake and real drawn from one distribution
    cfg = NetConfig(feat_dim=4, critic_width=8)
    critic = init_critic(cfg, 3)
    rng = np.random.default_rng(0)
    n = 10_000
    fake, real = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    pairs = GanPairs({1: Tensor(fake)}, {1: real}, {1: np.ones(n)}, n)
    value = critic_loss_on(critic, pairs).item()
    d = critic_forward(critic, Tensor(fake)).data - critic_forward(critic, Tensor(real)).data
    assert abs(value) <= 3 * d.std() / np.sqrt(n)


def test_critic_training_lowers_critic_loss():
    cfg = NetConfig(feat_dim=4, critic_width=8)
    critic = init_critic(cfg, 1, clip=0.01)
    rng = np.random.default_rng(1)
    fake, real = rng.normal(size=(64, 4)), rng.normal(loc=1.0, size=(64, 4))
    pairs = GanPairs({1: Tensor(fake)}, {1: real}, {1: np.ones(64)}, 64)
    opt = Optimizer("rmsprop", 1e-3)
    trace = []
    for _ in range(50):
        critic.zero_grad()
        loss = critic_loss_on(critic, pairs)
        trace.append(loss.item())
        ad.backward(loss)
        optimizer_step(opt, critic)
        clip_weights(critic, 0.01)
    smooth = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0]
    assert np.mean(np.diff(smooth) <= 1e-12) >= 0.9


@pytest.mark.parametrize("name", ["loss_erm", "loss_margin", "loss_progression_ce", "loss_future",
                                  "loss_critic", "loss_gen"])
def test_loss_gradients(name):
    worst = max(loss_checks(seed)[name](np.random.default_rng(seed)) for seed in range(10))
    assert worst <= 1e-4
