"""The DFPL model bundle, sample/batch construction and the forward pass.

A *sample* is one subject plus ``K`` consecutive recorded times
``t_1 < ... < t_K < T``; its target is ``y_T``.  Features come from the
frozen encoder and are cached per subject, so batches are plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .calculus import build_residual_set, combine_t, current_high_order_t, ensemble_t, residual_count
from .cohort import SubjectTrajectory
from .nets import (NetConfig, NetParams, direct_generate, enc_forward, init_critic, init_generator,
                   init_lstm, init_predictor, predictor_forward, rollout_batch)
from .seeding import derive_seed

# variant -> (objective, inference rule, recurrent rollout)
VARIANTS = {
    "combined+MA": ("full", "ensemble", True),
    "combined": ("full", "combined", True),
    "cur-only": ("cur", "cur", True),
    "prog-only": ("prog", "prog", True),
    "combined-no-lstm": ("full", "ensemble", False),
}
DEFAULT_VARIANT = "combined+MA"


@dataclass
class DfplModel:
    net_cfg: NetConfig
    order_k: int
    horizon: int
    variant: str
    enc: NetParams
    lstm: NetParams | None
    gen: NetParams
    critic: NetParams
    cur: NetParams
    prog: NetParams
    fut: NetParams

    @property
    def objective(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def inference(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def uses_lstm(self) -> bool:
        return VARIANTS[self.variant][2]

    def generative_params(self) -> list[NetParams]:
        return [p for p in (self.lstm, self.gen) if p is not None]

    def head_params(self) -> list[NetParams]:
        return [self.cur, self.prog, self.fut]

    def blocks(self) -> dict[str, NetParams]:
        out = {"enc": self.enc, "gen": self.gen, "critic": self.critic,
               "cur": self.cur, "prog": self.prog, "fut": self.fut}
        if self.lstm is not None:
            out["lstm"] = self.lstm
        return out

    def predict(self, batch: "Batch") -> np.ndarray:
        return predict(self, batch)

    def score_cohort(self, cohort, order_k=None, gaps=None):
        return score_cohort(self, cohort, order_k or self.order_k, gaps)


def init_model(net_cfg: NetConfig, enc: NetParams, order_k: int, horizon: int, seed: int,
               variant: str = DEFAULT_VARIANT, clip_c: float = 0.01) -> DfplModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    if not 1 <= order_k < horizon:
        raise ValueError(f"order K={order_k} needs 1 <= K < horizon={horizon}")
    s = lambda name: derive_seed(seed, f"init/{name}")  # noqa: E731
    use_lstm = VARIANTS[variant][2]
    lstm = init_lstm(net_cfg, s("lstm")) if use_lstm else None
    gen_in = None if use_lstm else net_cfg.feat_dim + 1
    n_res = residual_count(order_k)
    return DfplModel(
        net_cfg, order_k, horizon, variant, enc, lstm,
        init_generator(net_cfg, s("gen"), input_dim=gen_in),
        init_critic(net_cfg, s("critic"), clip=clip_c),
        init_predictor(net_cfg, s("cur"), net_cfg.feat_dim),
        init_predictor(net_cfg, s("prog"), n_res * net_cfg.feat_dim, order_k * net_cfg.attr_dim),
        init_predictor(net_cfg, s("fut"), net_cfg.feat_dim),
    )


# ------------------------------------------------------------------ arrays


@dataclass
class CohortArrays:
    """Dense per-subject tables indexed ``[subject, time - 1]``."""

    subject_ids: np.ndarray  # (N,)
    feats: np.ndarray  # (N, T, D) encoder features, zero where unrecorded
    attrs: np.ndarray  # (N, T, A)
    recorded: np.ndarray  # (N, T) bool
    labels: np.ndarray  # (N, T) int, -1 where hidden or unrecorded
    horizon: int

    def __len__(self) -> int:
        return len(self.subject_ids)


def cohort_arrays(cohort: list[SubjectTrajectory], enc: NetParams, horizon: int) -> CohortArrays:
    n = len(cohort)
    if n == 0:
        raise ValueError("empty cohort")
    attr_dim = cohort[0].a.shape[1]
    xs, rows, cols = [], [], []
    attrs = np.zeros((n, horizon, attr_dim))
    recorded = np.zeros((n, horizon), dtype=bool)
    labels = np.full((n, horizon), -1, dtype=int)
    for i, subj in enumerate(cohort):
        for j, t in enumerate(subj.times):
            if t > horizon:
                continue
            xs.append(subj.x[j])
            rows.append(i)
            cols.append(t - 1)
            attrs[i, t - 1] = subj.a[j]
            recorded[i, t - 1] = True
            if subj.label_visible[j]:
                labels[i, t - 1] = int(subj.y[j])
    f = enc_forward(enc, Tensor(np.array(xs))).data
    feats = np.zeros((n, horizon, f.shape[1]))
    feats[rows, cols] = f
    return CohortArrays(np.array([s.subject_id for s in cohort]), feats, attrs, recorded, labels, horizon)


@dataclass
class Samples:
    subject: np.ndarray  # (S,) row into CohortArrays
    times: np.ndarray  # (S, K) absolute times

    def __len__(self) -> int:
        return len(self.subject)


def make_samples(arrays: CohortArrays, order_k: int, gaps=None) -> Samples:
    """All windows of ``order_k`` consecutive recorded times ending before the horizon.

    Only subjects whose horizon label is visible produce samples.
    """
    T = arrays.horizon
    subj, times = [], []
    for i in range(len(arrays)):
        if arrays.labels[i, T - 1] < 0:
            continue
        rec = [t for t in range(1, T) if arrays.recorded[i, t - 1]]
        for s in range(len(rec) - order_k + 1):
            window = rec[s:s + order_k]
            if gaps is not None and T - window[-1] not in gaps:
                continue
            subj.append(i)
            times.append(window)
    return Samples(np.array(subj, dtype=int), np.array(times, dtype=int).reshape(-1, order_k))


def sample_gaps(arrays: CohortArrays, samples: Samples) -> np.ndarray:
    return arrays.horizon - samples.times[:, -1]


@dataclass
class Batch:
    feats: np.ndarray  # (B, T, D)
    attrs: np.ndarray  # (B, T, A)
    observed: np.ndarray  # (B, T) bool, the sample's input times
    recorded: np.ndarray  # (B, T) bool
    times: np.ndarray  # (B, K)
    y_T: np.ndarray  # (B,)
    # distinct subjects of the batch, for the labelled real terms at t = 1 and T
    real_feats: dict[int, np.ndarray] = field(default_factory=dict)
    real_attrs: dict[int, np.ndarray] = field(default_factory=dict)
    real_labels: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.times)

    @property
    def order_k(self) -> int:
        return self.times.shape[1]

    @property
    def horizon(self) -> int:
        return self.feats.shape[1]

    def at(self, t_index: np.ndarray, what: str = "feats") -> np.ndarray:
        """Per-row values at 1-based times ``t_index`` (shape ``(B,)``)."""
        src = self.feats if what == "feats" else self.attrs
        return src[np.arange(self.size), t_index - 1]


def make_batch(arrays: CohortArrays, samples: Samples, idx: np.ndarray) -> Batch:
    rows = samples.subject[idx]
    times = samples.times[idx]
    T = arrays.horizon
    observed = np.zeros((len(idx), T), dtype=bool)
    observed[np.arange(len(idx))[:, None], times - 1] = True
    uniq = np.unique(rows)
    real_feats = {t: arrays.feats[uniq, t - 1] for t in (1, T)}
    real_attrs = {t: arrays.attrs[uniq, t - 1] for t in (1, T)}
    real_labels = {t: arrays.labels[uniq, t - 1] for t in (1, T)}
    return Batch(arrays.feats[rows], arrays.attrs[rows], observed, arrays.recorded[rows], times,
                 arrays.labels[rows, T - 1], real_feats, real_attrs, real_labels)


# ----------------------------------------------------------------- forward


@dataclass
class Forward:
    generated: dict[int, Tensor]  # absolute time -> (B, D)
    f_T: Tensor  # generated horizon feature
    p_cur_tk: Tensor  # f_cur(F_tK, a_tK)
    p_fut: list[Tensor]  # f_fut(F_tj, a_tj), j = 1..K
    p_current: Tensor  # current-state probability (high-order average when K > 1)
    p_prog: Tensor
    p_combined: Tensor
    p_cur_gen: Tensor  # f_cur(F~_T, 0)
    p_ensemble: Tensor


def forward(model: DfplModel, batch: Batch, noise: np.ndarray | None = None) -> Forward:
    """Full pipeline for one batch; ``noise`` is ``(B, T, noise_dim)`` or None for zeros."""
    k, T = batch.order_k, batch.horizon
    if k != model.order_k:
        raise ValueError(f"batch has order {k}, model was built for order {model.order_k}")
    t_k = batch.times[:, -1]
    if model.uses_lstm:
        generated = rollout_batch(model.lstm, model.gen, batch.feats, batch.attrs, batch.observed, T,
                                  noise).generated
    else:
        z = None if noise is None else Tensor(noise[np.arange(batch.size), t_k - 1])
        generated = {T: direct_generate(model.gen, Tensor(batch.at(t_k)), Tensor(batch.at(t_k, "attrs")),
                                        T - t_k, T, z)}
    f_T = generated[T]
    f_obs = [Tensor(batch.at(batch.times[:, j])) for j in range(k)]
    a_obs = [Tensor(batch.at(batch.times[:, j], "attrs")) for j in range(k)]
    p_cur_tk = predictor_forward(model.cur, f_obs[-1], a_obs[-1])
    p_fut = [predictor_forward(model.fut, f, a) for f, a in zip(f_obs, a_obs)]
    p_current = p_cur_tk if k == 1 else current_high_order_t(p_cur_tk, p_fut[:-1])
    residuals = build_residual_set(f_obs, f_T, k)
    p_prog = predictor_forward(model.prog, ad.concat(residuals.values()), ad.concat(a_obs))
    p_combined = combine_t(p_current, p_prog)
    p_cur_gen = predictor_forward(model.cur, f_T, None)
    p_ensemble = ensemble_t(p_combined, p_cur_gen, p_fut)
    return Forward(generated, f_T, p_cur_tk, p_fut, p_current, p_prog, p_combined, p_cur_gen, p_ensemble)


def predict(model: DfplModel, batch: Batch) -> np.ndarray:
    """Scores for ``y_T = 1`` under the model's inference rule (zero generator noise)."""
    fwd = forward(model, batch)
    pick = {"ensemble": fwd.p_ensemble, "combined": fwd.p_combined,
            "cur": fwd.p_cur_gen, "prog": fwd.p_prog}[model.inference]
    return pick.data.copy()


def score_cohort(model, cohort, order_k: int, gaps=None, chunk: int = 512):
    """Scores, labels and gaps over every order-``order_k`` sample of ``cohort``.

    ``cohort`` may be a subject list or prebuilt :class:`CohortArrays`.
    """
    arrays = cohort if isinstance(cohort, CohortArrays) else cohort_arrays(cohort, model.enc, model.horizon)
    samples = make_samples(arrays, order_k, gaps)
    if len(samples) == 0:
        raise ValueError(f"no order-{order_k} samples with a visible horizon label")
    scores = np.concatenate([model.predict(make_batch(arrays, samples, np.arange(i, min(i + chunk, len(samples)))))
                             for i in range(0, len(samples), chunk)])
    labels = arrays.labels[samples.subject, arrays.horizon - 1]
    return scores, labels, sample_gaps(arrays, samples)
