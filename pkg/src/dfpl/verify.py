"""Property suites behind ``dfpl verify`` (also reused by the test-suite).

Each suite returns a :class:`SuiteResult`.  ``fault`` deliberately corrupts
the named suite's computation so the failure path can itself be tested.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check_report
from .calculus import build_residual_set, combine_current_progression, stencil_indices
from .cohort import CohortSpec, generate_cohort, mask_labels
from .losses import (loss_deterioration_margin, loss_erm_current, loss_future, loss_generative,
                     loss_progression_ce)
from .metrics import auc, auc_bruteforce
from .model import DfplModel, cohort_arrays, init_model, make_batch, make_samples
from .nets import (NetConfig, critic_forward, enc_forward, generator_forward, init_critic, init_encoder,
                   init_generator, init_lstm, init_predictor, lstm_step, lstm_zero_state, predictor_forward)
from .seeding import substream

SUITES = ("calculus", "stencil", "auc", "gradcheck", "clipping", "monotonicity")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------- calculus


def enumerate_chain(p_diseased_now: float, transitions: np.ndarray, start_state: int | None = None) -> float:
    """P(diseased at the end) by brute-force enumeration of every state path.

    The chain has states 0 (healthy) / 1 (diseased) and per-step transition
    matrices ``[[1 - q, q], [0, 1]]``.  ``start_state`` conditions the first
    state; otherwise it is drawn with ``P(1) = p_diseased_now``.
    """
    n = len(transitions)
    total = 0.0
    for path in itertools.product((0, 1), repeat=n + 1):
        if start_state is None:
            prob = p_diseased_now if path[0] == 1 else 1.0 - p_diseased_now
        else:
            prob = 1.0 if path[0] == start_state else 0.0
        for step, (a, b) in enumerate(zip(path[:-1], path[1:])):
            q = transitions[step]
            prob *= ((1.0 - q) if b == 0 else q) if a == 0 else (0.0 if b == 0 else 1.0)
        if path[-1] == 1:
            total += prob
    return total


def calculus_oracle_error(n_chains: int = 1000, seed: int = 0, fault: bool = False) -> float:
    """max |combine(p_cur, p_prog) - enumeration| over random irreversible chains."""
    rng = substream(seed, "verify/chains")
    worst = 0.0
    for _ in range(n_chains):
        steps = int(rng.integers(1, 6))
        q = rng.random(steps)
        p_now = float(rng.random())
        exact = enumerate_chain(p_now, q)
        p_prog = enumerate_chain(0.0, q, start_state=0)
        got = combine_current_progression(p_now, p_prog) + (1e-6 if fault else 0.0)
        worst = max(worst, abs(got - exact))
    return worst


def dominance_violations(n: int = 1001, fault: bool = False) -> int:
    grid = np.linspace(0.0, 1.0, n)
    p_cur, p_prog = np.meshgrid(grid, grid, indexing="ij")
    out = combine_current_progression(p_cur, p_prog)
    if fault:
        out = out - 1e-3
    return int(np.sum(out < p_cur))


def suite_calculus(fault: bool = False) -> SuiteResult:
    err = calculus_oracle_error(fault=fault)
    viol = dominance_violations(fault=fault)
    ok = err <= 1e-12 and viol == 0
    return SuiteResult("calculus", ok, f"oracle max|d|={err:.2e}, dominance violations={viol}")


# ----------------------------------------------------------------- stencil


def stencil_oracle(k: int) -> dict[int, set[tuple]]:
    """Index tuples enumerated straight from the residual formulas, underflow dropped.

    Index 0 denotes the generated horizon feature, 1..K the observed times.
    """
    out: dict[int, set[tuple]] = {}
    for j in range(1, k + 1):
        if j == 1:
            cand = [(0, k)] + [(k - i, k - i - 1) for i in range(k - 1)]
        else:
            cand = [(0, k + 2 - j, k, k + 1 - j)] + \
                   [(k - i, k - i + 1 - j, k - i - 1, k - i - j) for i in range(k - 1)]
        # index 0 is legal only in the leading slot (the generated feature)
        out[j] = {c for c in cand if all(v >= 1 for v in c[1:]) and c[0] >= 0}
    return out


def stencil_mismatches(max_k: int = 5, fault: bool = False) -> list[str]:
    problems = []
    rng = substream(0, "verify/stencil")
    for k in range(1, max_k + 1):
        got: dict[int, set[tuple]] = {}
        for j, (a, b, c, d) in stencil_indices(k):
            got.setdefault(j, set()).add((a, b) if c is None else (a, b, c, d))
        if fault and k == 3:
            got[2] = set(list(got[2])[:-1])
        want = stencil_oracle(k)
        if got != want:
            problems.append(f"K={k}: indices {got} != oracle {want}")
        # value check against direct evaluation of the oracle tuples
        feats = [rng.normal(size=4) for _ in range(k + 1)]
        res = build_residual_set(feats[1:], feats[0], k)
        for j in range(1, k + 1):
            direct = sorted(tuple(feats[t[0]] - feats[t[1]]) if len(t) == 2 else
                            tuple((feats[t[0]] - feats[t[1]]) - (feats[t[2]] - feats[t[3]])) for t in want[j])
            built = sorted(tuple(v) for v in res.of_order(j))
            if direct != built:
                problems.append(f"K={k}, order {j}: values differ")
    return problems


def suite_stencil(fault: bool = False) -> SuiteResult:
    problems = stencil_mismatches(fault=fault)
    return SuiteResult("stencil", not problems, "; ".join(problems) or "K=1..5 match the enumeration oracle")


# --------------------------------------------------------------------- auc


def auc_mismatches(n_instances: int = 500, max_n: int = 200, seed: int = 0, fault: bool = False) -> int:
    rng = substream(seed, "verify/auc")
    bad = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, max_n + 1))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        # coarse scores so ties occur
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        fast = auc(s, y) + (1e-9 if fault else 0.0)
        if fast != auc_bruteforce(s, y):
            bad += 1
    return bad


def suite_auc(fault: bool = False) -> SuiteResult:
    bad = auc_mismatches(fault=fault)
    return SuiteResult("auc", bad == 0, f"{bad} of 500 instances differ from brute force")


# --------------------------------------------------------------- gradcheck


TINY = NetConfig(obs_dim=5, feat_dim=3, attr_dim=6, hidden_dim=4, noise_dim=2,
                 enc_width=4, gen_width=4, critic_width=4, pred_width=4)
TINY_HORIZON = 4


def tiny_problem(seed: int, order_k: int = 1, variant: str = "combined+MA", n_subjects: int = 6):
    """Small random model plus one batch, for gradient checks."""
    spec = CohortSpec(n_subjects=n_subjects, obs_dim=TINY.obs_dim, t_max=TINY_HORIZON, missing_rate=0.0,
                      seed=seed)
    cohort = mask_labels(generate_cohort(spec))
    enc = init_encoder(TINY, seed)
    enc.freeze()
    model = init_model(TINY, enc, order_k, TINY_HORIZON, seed, variant)
    # move every critic weight off zero and unclip it so the scores are not degenerate
    rng = substream(seed, "verify/critic")
    for t in model.critic:
        t.data[...] = rng.normal(size=t.shape) * 0.5
    arrays = cohort_arrays(cohort, enc, TINY_HORIZON)
    samples = make_samples(arrays, order_k)
    rng = substream(seed, "verify/batch")
    idx = rng.choice(len(samples), size=min(4, len(samples)), replace=False)
    return model, make_batch(arrays, samples, np.sort(idx))


def _check_params(fn: Callable[[], Tensor], target: Tensor, rng: np.random.Generator, n_coords: int) -> float:
    coords = rng.choice(target.size, size=min(n_coords, target.size), replace=False)
    was = target.requires_grad
    try:
        return grad_check_report(lambda _x: fn(), target, coords=coords).max_error
    finally:
        target.requires_grad = was
        target.grad = None


def block_checks(seed: int) -> dict[str, Callable[[np.random.Generator], float]]:
    """Gradient checks of each network block w.r.t. its input and one weight."""
    rng = substream(seed, "verify/blocks")
    b, c = 3, TINY
    x = Tensor(rng.normal(size=(b, c.obs_dim)))
    f = Tensor(rng.normal(size=(b, c.feat_dim)))
    a = Tensor(rng.normal(size=(b, c.attr_dim)))
    z = Tensor(rng.normal(size=(b, c.noise_dim)))
    h = Tensor(rng.normal(size=(b, c.hidden_dim)))
    w = Tensor(rng.normal(size=(b,)))
    enc = init_encoder(c, seed)
    lstm = init_lstm(c, seed)
    gen = init_generator(c, seed)
    critic = init_critic(c, seed)
    pred = init_predictor(c, seed, c.feat_dim)
    st = lstm_zero_state(c.hidden_dim, b)

    def lstm_loss():
        s1 = lstm_step(lstm, st, ad.concat([f, a]))
        s2 = lstm_step(lstm, s1, ad.concat([f, a]))
        return ad.add(ad.sum(ad.mul(s2.hidden, s2.hidden)), ad.sum(s2.cell))

    fns = {
        "enc": (lambda: ad.sum(ad.mul(enc_forward(enc, x), enc_forward(enc, x))), [x, enc["w0"], enc["w1"]]),
        "lstm": (lstm_loss, [f, lstm["w"], lstm["b"]]),
        "gen": (lambda: ad.sum(ad.tanh(generator_forward(gen, h, a, z))), [h, z, gen["w0"]]),
        "critic": (lambda: ad.sum(ad.mul(critic_forward(critic, f), w)), [f, critic["w0"], critic["w1"]]),
        "predictor": (lambda: ad.sum(ad.log(predictor_forward(pred, f, a))), [f, a, pred["w0"], pred["w1"]]),
    }
    return {name: (lambda r, fn=fn, ts=ts: max(_check_params(fn, t, r, 4) for t in ts))
            for name, (fn, ts) in fns.items()}


def loss_checks(seed: int) -> dict[str, Callable[[np.random.Generator], float]]:
    """Gradient checks of each loss w.r.t. the heads and the generative path."""
    m1, b1 = tiny_problem(seed, 1)
    m2, b2 = tiny_problem(seed, 2)

    def wrt(model: DfplModel, names: list[str]) -> list[Tensor]:
        blocks = model.blocks()
        return [blocks[n][k] for n in names for k in ("w0", "w") if k in blocks[n].tensors]

    fns = {
        "loss_erm": (lambda: loss_erm_current(m1, b1), wrt(m1, ["cur", "gen", "lstm"])),
        "loss_margin": (lambda: loss_deterioration_margin(m1, b1, 0.05), wrt(m1, ["cur"])),
        "loss_progression_ce": (lambda: loss_progression_ce(m2, b2), wrt(m2, ["cur", "prog", "fut", "gen", "lstm"])),
        "loss_future": (lambda: loss_future(m2, b2), wrt(m2, ["fut"])),
        "loss_critic": (lambda: loss_generative(m2, b2)[0], wrt(m2, ["critic", "gen"])),
        "loss_gen": (lambda: loss_generative(m2, b2)[1], wrt(m2, ["gen", "lstm"])),
    }
    return {name: (lambda r, fn=fn, ts=ts: max(_check_params(fn, t, r, 2) for t in ts))
            for name, (fn, ts) in fns.items()}


def gradcheck_errors(n_seeds: int = 100, fault: bool = False) -> dict[str, float]:
    """Worst relative error per block/loss over ``n_seeds`` random instances."""
    worst: dict[str, float] = {}
    for seed in range(n_seeds):
        rng = substream(seed, "verify/coords")
        for name, check in {**block_checks(seed), **loss_checks(seed)}.items():
            worst[name] = max(worst.get(name, 0.0), check(rng))
    if fault:
        worst["enc"] = 1.0
    return worst


def suite_gradcheck(fault: bool = False, n_seeds: int = 100) -> SuiteResult:
    worst = gradcheck_errors(n_seeds, fault)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return SuiteResult("gradcheck", not bad, f"{n_seeds} seeds; {detail}")


# ---------------------------------------------------------------- clipping


def clipping_violations(epochs: int = 2, seed: int = 0, fault: bool = False) -> tuple[int, int]:
    """(critic updates, violations) over a short real training run."""
    from .training import TrainConfig, train

    spec = CohortSpec(n_subjects=40, obs_dim=TINY.obs_dim, seed=seed)
    cohort = mask_labels(generate_cohort(spec))
    enc = init_encoder(TINY, seed)
    enc.freeze()
    cfg = TrainConfig(epochs=epochs, seed=seed, clip_c=0.01)
    counts = [0, 0]

    def check(model):
        counts[0] += 1
        if fault and counts[0] == 3:
            model.critic["w0"].data[0, 0] = 0.5
        if max(float(np.max(np.abs(t.data))) for t in model.critic) > cfg.clip_c:
            counts[1] += 1

    train(cohort, cfg, enc, None, TINY, spec.t_max, on_critic_step=check)
    return counts[0], counts[1]


def suite_clipping(fault: bool = False) -> SuiteResult:
    n, bad = clipping_violations(fault=fault)
    return SuiteResult("clipping", bad == 0 and n > 0, f"{bad} violations in {n} critic updates")


# ------------------------------------------------------------ monotonicity


def cohort_irreversibility(n_cohorts: int = 10, n_subjects: int = 500, fault: bool = False) -> tuple[int, int]:
    """(1 -> 0 transitions, cohorts with a prevalence decrease) over generated cohorts."""
    flips = drops = 0
    for seed in range(n_cohorts):
        spec = CohortSpec(n_subjects=n_subjects, seed=seed)
        cohort = generate_cohort(spec)
        full = np.zeros((n_subjects, spec.t_max))
        seen = np.zeros((n_subjects, spec.t_max))
        for i, s in enumerate(cohort):
            y = s.y.copy()
            if fault and i == 0:
                y[-1] = 0
                y[0] = 1
            flips += int(np.sum(np.diff(y) < 0))
            full[i, np.array(s.times) - 1] = y
            seen[i, np.array(s.times) - 1] = 1
        prevalence = full.sum(axis=0) / seen.sum(axis=0)
        drops += int(np.any(np.diff(prevalence) < 0))
    return flips, drops


def suite_monotonicity(fault: bool = False) -> SuiteResult:
    flips, drops = cohort_irreversibility(fault=fault)
    return SuiteResult("monotonicity", flips == 0 and drops == 0,
                       f"{flips} label reversals, {drops} cohorts with falling prevalence")


RUNNERS = {"calculus": suite_calculus, "stencil": suite_stencil, "auc": suite_auc,
           "gradcheck": suite_gradcheck, "clipping": suite_clipping, "monotonicity": suite_monotonicity}


def run_suites(names=None, fault: str | None = None) -> list[SuiteResult]:
    names = list(names or SUITES)
    unknown = [n for n in names if n not in RUNNERS]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        res = RUNNERS[name](fault=fault == name)
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
