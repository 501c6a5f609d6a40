"""Loss terms.  Each model-level loss returns a *sum* over its terms; the
trainer divides by the batch size.

The model-level functions accept an optional precomputed :class:`Forward`
so one forward pass can feed every term of the objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .calculus import LOG_CLAMP
from .model import Batch, DfplModel, Forward, forward
from .nets import NetParams, critic_forward, predictor_forward


class MissingLabelError(ValueError):
    """A loss needed a label that the batch does not expose."""


# ------------------------------------------------------------ tensor level


def nll(p: Tensor, y: np.ndarray) -> Tensor:
    """Sum of ``-log P(y)`` for Bernoulli probabilities ``p`` of the label 1."""
    y = np.asarray(y, dtype=float)
    if y.shape != p.shape:
        raise ad.ShapeError(f"nll: probabilities {p.shape} vs labels {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise MissingLabelError("labels must be 0 or 1")
    # P(y) = y p + (1 - y)(1 - p) = (1 - y) + (2y - 1) p
    likelihood = ad.add(Tensor(1.0 - y), ad.mul(Tensor(2.0 * y - 1.0), p))
    return ad.scale(ad.sum(ad.log(ad.clamp(likelihood, LOG_CLAMP, 1.0 - LOG_CLAMP))), -1.0)


def hinge(diff: Tensor, theta: float) -> Tensor:
    """Sum of ``max(0, diff + theta)``."""
    return ad.sum(ad.maximum(ad.add(diff, Tensor(np.full(diff.shape, theta))), 0.0))


def masked_mean(values: Tensor, weights: np.ndarray, count: float) -> Tensor:
    return ad.scale(ad.sum(ad.mul(values, Tensor(weights))), 1.0 / count)


# ------------------------------------------------------------- model level


def _fwd(model: DfplModel, batch: Batch, fwd: Forward | None) -> Forward:
    return fwd if fwd is not None else forward(model, batch)


def _visible(labels: np.ndarray, what: str) -> np.ndarray:
    if np.any(labels < 0):
        raise MissingLabelError(f"{what}: {int(np.sum(labels < 0))} required labels are hidden or missing")
    return labels


def loss_erm_current(model: DfplModel, batch: Batch, fwd: Forward | None = None) -> Tensor:
    """NLL of f_cur on labelled real features at t = 1 and T, plus on F~_T with zero attributes."""
    fwd = _fwd(model, batch, fwd)
    total = None
    for t in (1, batch.horizon):
        y = _visible(batch.real_labels[t], f"labels at t={t}")
        p = predictor_forward(model.cur, Tensor(batch.real_feats[t]), Tensor(batch.real_attrs[t]))
        term = nll(p, y)
        total = term if total is None else ad.add(total, term)
    y_T = _visible(batch.y_T, "horizon labels")
    return ad.add(total, nll(fwd.p_cur_gen, y_T))


def loss_deterioration_margin(model: DfplModel, batch: Batch, theta: float,
                              fwd: Forward | None = None) -> Tensor:
    """Sum of ``max(0, p_cur(F_tK) - p_cur(F_T) + theta)`` over the batch's samples."""
    fwd = _fwd(model, batch, fwd)
    T = np.full(batch.size, batch.horizon)
    p_T = predictor_forward(model.cur, Tensor(batch.at(T)), Tensor(batch.at(T, "attrs")))
    return hinge(ad.sub(fwd.p_cur_tk, p_T), theta)


def loss_current_total(model: DfplModel, batch: Batch, alpha: float, theta: float,
                       fwd: Forward | None = None) -> Tensor:
    fwd = _fwd(model, batch, fwd)
    erm = loss_erm_current(model, batch, fwd)
    if alpha == 0.0:
        return erm
    return ad.add(erm, ad.scale(loss_deterioration_margin(model, batch, theta, fwd), alpha))


def loss_progression_ce(model: DfplModel, batch: Batch, fwd: Forward | None = None) -> Tensor:
    """NLL of the current/progression combination for ``y_T``."""
    fwd = _fwd(model, batch, fwd)
    return nll(fwd.p_combined, _visible(batch.y_T, "horizon labels"))


def loss_prog_only(model: DfplModel, batch: Batch, fwd: Forward | None = None) -> Tensor:
    """NLL of f_prog alone for ``y_T`` (the progression-only ablation)."""
    fwd = _fwd(model, batch, fwd)
    return nll(fwd.p_prog, _visible(batch.y_T, "horizon labels"))


def loss_future(model: DfplModel, batch: Batch, fwd: Forward | None = None) -> Tensor:
    """NLL of f_fut for ``y_T`` from every observed time of every sample."""
    fwd = _fwd(model, batch, fwd)
    y_T = _visible(batch.y_T, "horizon labels")
    total = nll(fwd.p_fut[0], y_T)
    for p in fwd.p_fut[1:]:
        total = ad.add(total, nll(p, y_T))
    return total


@dataclass
class GanPairs:
    """Generated/real feature pairs: ``weights[t]`` is 1 where time t of a row is matched."""

    fake: dict[int, Tensor]
    real: dict[int, np.ndarray]
    weights: dict[int, np.ndarray]
    count: int


def gan_pairs(batch: Batch, fwd: Forward, horizon_only: bool) -> GanPairs:
    """Match each generated time with the subject's real feature there.

    Order 1 (or no rollout) matches at T only; higher orders match every
    generated time with a recorded feature.
    """
    start = batch.times[:, 0]
    fake, real, weights = {}, {}, {}
    for t, f in sorted(fwd.generated.items()):
        if horizon_only and t != batch.horizon:
            continue
        w = ((t > start) & batch.recorded[:, t - 1]).astype(float)
        if t == batch.horizon and not np.all(w):
            raise ValueError("no matched real feature at the horizon for some rows")
        if w.any():
            fake[t], real[t], weights[t] = f, batch.feats[:, t - 1], w
    return GanPairs(fake, real, weights, int(sum(w.sum() for w in weights.values())))


def critic_loss_on(critic: NetParams, pairs: GanPairs, detach: bool = True) -> Tensor:
    """mean D(fake) - mean D(real) over matched pairs."""
    total = None
    for t, w in pairs.weights.items():
        f = Tensor(pairs.fake[t].data) if detach else pairs.fake[t]
        term = ad.sub(masked_mean(critic_forward(critic, f), w, pairs.count),
                      masked_mean(critic_forward(critic, Tensor(pairs.real[t])), w, pairs.count))
        total = term if total is None else ad.add(total, term)
    return total


def gen_loss_on(critic: NetParams, pairs: GanPairs) -> Tensor:
    """-mean D(fake), with gradients reaching the generator (and rollout)."""
    total = None
    for t, w in pairs.weights.items():
        term = masked_mean(critic_forward(critic, pairs.fake[t]), w, pairs.count)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0)


def loss_generative(model: DfplModel, batch: Batch, fwd: Forward | None = None) -> tuple[Tensor, Tensor]:
    fwd = _fwd(model, batch, fwd)
    pairs = gan_pairs(batch, fwd, horizon_only=model.order_k == 1 or not model.uses_lstm)
    return critic_loss_on(model.critic, pairs, detach=False), gen_loss_on(model.critic, pairs)


# ------------------------------------------------------------- breakdown


@dataclass
class LossBreakdown:
    gen: float
    cur: float
    ce: float
    fut: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def compose_total(gen: float, cur: float, ce: float, fut: float, lambda1: float, lambda2: float,
                  lambda3: float, order_k: int) -> float:
    """gen + l1 cur + l2 ce (+ l3 fut when K > 1)."""
    total = gen + lambda1 * cur + lambda2 * ce
    return total + lambda3 * fut if order_k > 1 else total
