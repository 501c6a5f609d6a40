"""Encoder pre-training, the joint adversarial/predictive training loop, and
the direct current-to-future baseline."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import SubjectTrajectory
from .losses import (LossBreakdown, compose_total, critic_loss_on, gan_pairs, gen_loss_on,
                     loss_current_total, loss_future, loss_prog_only, loss_progression_ce, nll)
from .metrics import report_by_gap
from .model import (DEFAULT_VARIANT, VARIANTS, Batch, CohortArrays, DfplModel, cohort_arrays, forward,
                    init_model, make_batch, make_samples, score_cohort)
from .nets import (NetConfig, NetParams, Optimizer, clip_weights, enc_forward, init_encoder,
                   init_predictor, optimizer_step, params_from_json, params_to_json,
                   predictor_forward)
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A loss or gradient became non-finite."""


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0
    alpha: float = 0.1
    theta: float = 0.05
    clip_c: float = 0.01
    epochs: int = 120
    lr_decay: float = 0.2
    lr_decay_every: int = 60
    batch_size: int = 20
    critic_steps_per_gen: int = 5
    seed: int = 0
    order_k: int = 1
    variant: str = DEFAULT_VARIANT
    gen_lr: float = 1e-4
    gen_weight_decay: float = 1e-4
    cls_lr: float = 0.02
    cls_weight_decay: float = 1e-4
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    select_on_val: bool = True

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.alpha) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.epochs <= 0 or self.batch_size <= 0 or self.critic_steps_per_gen < 0:
            raise ValueError("epochs and batch_size must be positive, critic steps nonnegative")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.order_k < 1:
            raise ValueError("order_k must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def lr_factor(self, epoch: int) -> float:
        return self.lr_decay ** (epoch // self.lr_decay_every)


# ------------------------------------------------------- encoder pretraining


def _pretrain_tasks(cohort: list[SubjectTrajectory], horizon: int):
    """Task (i): (x_t, y_t) for t in {1, T}; task (ii): (x_t, y_T) for t < T."""
    xs, ys, task = [], [], []
    for subj in cohort:
        if not subj.has(horizon) or not subj.label_visible[subj.index(horizon)]:
            continue
        y_T = int(subj.y[subj.index(horizon)])
        for j, t in enumerate(subj.times):
            if t in (1, horizon) and subj.label_visible[j]:
                xs.append(subj.x[j]); ys.append(int(subj.y[j])); task.append(0)  # noqa: E702
            if t < horizon:
                xs.append(subj.x[j]); ys.append(y_T); task.append(1)  # noqa: E702
    return np.array(xs), np.array(ys), np.array(task)


def pretrain_encoder(cohort: list[SubjectTrajectory], net_cfg: NetConfig, cfg: TrainConfig,
                     horizon: int) -> NetParams:
    """Train Enc under two throwaway heads (current and future labels); return Enc frozen."""
    enc = init_encoder(net_cfg, derive_seed(cfg.seed, "init/enc"))
    heads = [init_predictor(net_cfg, derive_seed(cfg.seed, "init/pretrain-head", i), net_cfg.feat_dim, 0)
             for i in range(2)]
    x, y, task = _pretrain_tasks(cohort, horizon)
    if len(x) == 0:
        raise ValueError("no labelled records for encoder pretraining")
    opt = Optimizer("sgd", cfg.pretrain_lr, cfg.cls_weight_decay)
    for epoch in range(cfg.pretrain_epochs):
        order = substream(cfg.seed, "pretrain-shuffle", epoch).permutation(len(x))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = None
            for k, head in enumerate(heads):
                sel = idx[task[idx] == k]
                if sel.size == 0:
                    continue
                feats = enc_forward(enc, Tensor(x[sel]))
                term = nll(predictor_forward(head, feats, None), y[sel])
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.scale(loss, 1.0 / len(idx))
            for p in (enc, *heads):
                p.zero_grad()
            ad.backward(loss)
            for p in (enc, *heads):
                optimizer_step(opt, p)
    enc.freeze()
    return enc


# -------------------------------------------------------------- main loop


@dataclass
class TrainResult:
    model: DfplModel
    history: list[dict]
    best_epoch: int
    critic_updates: int = 0
    clip_violations: int = 0


def _validation_score(model, val: CohortArrays | None, order_k: int) -> tuple[float, float]:
    if val is None:
        return float("nan"), float("nan")
    scores, labels, gaps = score_cohort(model, val, order_k)
    avg = report_by_gap(scores, labels, gaps, order_k, 0)[-1]
    return avg.acc, avg.auc


def _snapshot(blocks: dict[str, NetParams]) -> dict[str, dict[str, np.ndarray]]:
    return {name: {k: t.data.copy() for k, t in p.items()} for name, p in blocks.items()}


def _restore(blocks: dict[str, NetParams], snap) -> None:
    for name, p in blocks.items():
        for k, t in p.items():
            t.data[...] = snap[name][k]


def _set_requires_grad(params: NetParams, flag: bool) -> None:
    for t in params:
        t.requires_grad = flag


def _check_finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} loss at epoch {epoch}, batch {batch}")


def train(train_cohort: list[SubjectTrajectory] | CohortArrays, cfg: TrainConfig, enc: NetParams,
          val_cohort: list[SubjectTrajectory] | CohortArrays | None = None, net_cfg: NetConfig | None = None,
          horizon: int = 6, log_path: str | Path | None = None,
          on_critic_step: Callable[[DfplModel], None] | None = None) -> TrainResult:
    """Alternate critic updates (clipped after each) with joint updates of the rest.

    Per batch: ``critic_steps_per_gen`` critic steps on the batch's detached
    generated features, then one step of the generator, rollout and heads on
    the variant's objective.  The best validation epoch (accuracy, then AUC)
    is restored at the end.
    """
    net_cfg = net_cfg or NetConfig()
    model = init_model(net_cfg, enc, cfg.order_k, horizon, cfg.seed, cfg.variant, cfg.clip_c)
    tr = train_cohort if isinstance(train_cohort, CohortArrays) else cohort_arrays(train_cohort, enc, horizon)
    va = val_cohort if val_cohort is None or isinstance(val_cohort, CohortArrays) \
        else cohort_arrays(val_cohort, enc, horizon)
    samples = make_samples(tr, cfg.order_k)
    if len(samples) == 0:
        raise ValueError(f"no order-{cfg.order_k} training samples")

    opt_gen = Optimizer("rmsprop", cfg.gen_lr, cfg.gen_weight_decay)
    opt_critic = Optimizer("rmsprop", cfg.gen_lr, cfg.gen_weight_decay)
    opt_heads = Optimizer("sgd", cfg.cls_lr, cfg.cls_weight_decay)
    horizon_only = cfg.order_k == 1 or not model.uses_lstm
    trainable = {k: v for k, v in model.blocks().items() if k != "enc"}
    noise_dim = net_cfg.noise_dim

    history: list[dict] = []
    best, best_epoch, best_snap = None, -1, None
    result = TrainResult(model, history, -1)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            factor = cfg.lr_factor(epoch)
            for opt, base in ((opt_gen, cfg.gen_lr), (opt_critic, cfg.gen_lr), (opt_heads, cfg.cls_lr)):
                opt.learning_rate = base * factor
            order = substream(cfg.seed, "shuffle", epoch).permutation(len(samples))
            noise_rng = substream(cfg.seed, "noise", epoch)
            sums = np.zeros(5)
            n_batches = 0
            for b, i in enumerate(range(0, len(order), cfg.batch_size)):
                batch = make_batch(tr, samples, order[i:i + cfg.batch_size])
                noise = noise_rng.normal(size=(batch.size, horizon, noise_dim))
                try:
                    parts = _train_step(model, batch, noise, cfg, opt_gen, opt_critic, opt_heads, horizon_only,
                                        result, on_critic_step, epoch, b)
                except ad.DomainError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
                sums += parts
                n_batches += 1
            parts = LossBreakdown(*(float(v) for v in sums / n_batches))
            val_acc, val_auc = _validation_score(model, va, cfg.order_k)
            record = {"epoch": epoch, **parts.to_dict(), "val_acc": val_acc, "val_auc": val_auc}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d total %.4f val_acc %.4f val_auc %.4f", epoch, parts.total, val_acc, val_auc)
            key = (val_acc, np.nan_to_num(val_auc, nan=0.0))
            if cfg.select_on_val and va is not None and (best is None or key > best):
                best, best_epoch, best_snap = key, epoch, _snapshot(trainable)
    finally:
        if log_fh:
            log_fh.close()
    if best_snap is not None:
        _restore(trainable, best_snap)
    result.best_epoch = best_epoch if best_snap is not None else cfg.epochs - 1
    return result


def joint_objective(model: DfplModel, batch: Batch, fwd, pairs, cfg: TrainConfig) -> tuple[Tensor, list[float]]:
    """The variant's objective for the non-critic parameters, plus its logged components.

    Components are per-sample means: gen, cur (ERM + alpha margin), ce and
    fut.  f_fut feeds the ensemble even at K = 1, so it is trained whenever
    model averaging is used; the logged total counts it only for K > 1.
    """
    n = batch.size
    gen = gen_loss_on(model.critic, pairs)
    zero = Tensor(np.zeros(()))
    cur = ce = fut = zero
    if model.objective in ("full", "cur"):
        cur = ad.scale(loss_current_total(model, batch, cfg.alpha, cfg.theta, fwd), 1.0 / n)
    if model.objective == "full":
        ce = ad.scale(loss_progression_ce(model, batch, fwd), 1.0 / n)
    elif model.objective == "prog":
        ce = ad.scale(loss_prog_only(model, batch, fwd), 1.0 / n)
    if cfg.order_k > 1 or model.inference == "ensemble":
        fut = ad.scale(loss_future(model, batch, fwd), 1.0 / (n * cfg.order_k))
    loss = ad.add(ad.add(gen, ad.scale(cur, cfg.lambda1)), ad.scale(ce, cfg.lambda2))
    loss = ad.add(loss, ad.scale(fut, cfg.lambda3))
    return loss, [gen.item(), cur.item(), ce.item(), fut.item()]


def _train_step(model: DfplModel, batch: Batch, noise: np.ndarray, cfg: TrainConfig, opt_gen: Optimizer,
                opt_critic: Optimizer, opt_heads: Optimizer, horizon_only: bool, result: TrainResult,
                on_critic_step, epoch: int, b: int) -> np.ndarray:
    fwd = forward(model, batch, noise)
    pairs = gan_pairs(batch, fwd, horizon_only)

    for _ in range(cfg.critic_steps_per_gen):
        model.critic.zero_grad()
        c_loss = critic_loss_on(model.critic, pairs, detach=True)
        _check_finite(c_loss.item(), "critic", epoch, b)
        ad.backward(c_loss)
        optimizer_step(opt_critic, model.critic)
        clip_weights(model.critic, cfg.clip_c)
        result.critic_updates += 1
        if max(float(np.max(np.abs(t.data))) for t in model.critic) > cfg.clip_c:
            result.clip_violations += 1
        if on_critic_step is not None:
            on_critic_step(model)

    _set_requires_grad(model.critic, False)
    try:
        loss, values = joint_objective(model, batch, fwd, pairs, cfg)
        for name, v in zip(("gen", "cur", "ce", "fut"), values):
            _check_finite(v, name, epoch, b)
        for p in (*model.generative_params(), *model.head_params()):
            p.zero_grad()
        ad.backward(loss)
        try:
            for p in model.generative_params():
                optimizer_step(opt_gen, p)
            for p in model.head_params():
                optimizer_step(opt_heads, p)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
    finally:
        _set_requires_grad(model.critic, True)
    total = compose_total(*values, cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.order_k)
    return np.array([*values, total])


# --------------------------------------------------------------- baseline


@dataclass
class BaselineModel:
    """Direct predictor ``(F_tK, a_tK) -> y_T`` on the same frozen encoder."""

    enc: NetParams
    head: NetParams
    horizon: int
    order_k: int = 1
    variant: str = "baseline"

    def predict(self, batch: Batch) -> np.ndarray:
        t_k = batch.times[:, -1]
        p = predictor_forward(self.head, Tensor(batch.at(t_k)), Tensor(batch.at(t_k, "attrs")))
        return p.data.copy()

    def score_cohort(self, cohort, order_k=None, gaps=None):
        return score_cohort(self, cohort, order_k or self.order_k, gaps)


def train_baseline(train_cohort, cfg: TrainConfig, enc: NetParams, val_cohort=None,
                   net_cfg: NetConfig | None = None, horizon: int = 6) -> TrainResult:
    net_cfg = net_cfg or NetConfig()
    head = init_predictor(net_cfg, derive_seed(cfg.seed, "init/baseline"), net_cfg.feat_dim)
    model = BaselineModel(enc, head, horizon)
    tr = train_cohort if isinstance(train_cohort, CohortArrays) else cohort_arrays(train_cohort, enc, horizon)
    va = val_cohort if val_cohort is None or isinstance(val_cohort, CohortArrays) \
        else cohort_arrays(val_cohort, enc, horizon)
    samples = make_samples(tr, 1)
    opt = Optimizer("sgd", cfg.cls_lr, cfg.cls_weight_decay)
    history, best, best_epoch, snap = [], None, -1, None
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.cls_lr * cfg.lr_factor(epoch)
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(samples))
        total, n_batches = 0.0, 0
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            batch = make_batch(tr, samples, order[i:i + cfg.batch_size])
            t_k = batch.times[:, -1]
            p = predictor_forward(head, Tensor(batch.at(t_k)), Tensor(batch.at(t_k, "attrs")))
            loss = ad.scale(nll(p, batch.y_T), 1.0 / batch.size)
            _check_finite(loss.item(), "baseline", epoch, b)
            head.zero_grad()
            ad.backward(loss)
            optimizer_step(opt, head)
            total += loss.item()
            n_batches += 1
        val_acc, val_auc = _validation_score(model, va, 1)
        history.append({"epoch": epoch, "total": total / n_batches, "val_acc": val_acc, "val_auc": val_auc})
        key = (val_acc, np.nan_to_num(val_auc, nan=0.0))
        if cfg.select_on_val and va is not None and (best is None or key > best):
            best, best_epoch, snap = key, epoch, _snapshot({"head": head})
    if snap is not None:
        _restore({"head": head}, snap)
    return TrainResult(model, history, best_epoch if snap is not None else cfg.epochs - 1)


# ------------------------------------------------------------ checkpoints


def save_model(model: DfplModel, path: str | Path, extra: dict | None = None) -> None:
    obj = {"kind": "dfpl", "variant": model.variant, "order_k": model.order_k, "horizon": model.horizon,
           "net_cfg": asdict(model.net_cfg),
           "blocks": {name: params_to_json(p) for name, p in model.blocks().items()},
           "extra": extra or {}}
    Path(path).write_text(json.dumps(obj))


def save_baseline(model: BaselineModel, path: str | Path, extra: dict | None = None) -> None:
    obj = {"kind": "baseline", "order_k": model.order_k, "horizon": model.horizon,
           "blocks": {"enc": params_to_json(model.enc), "head": params_to_json(model.head)},
           "extra": extra or {}}
    Path(path).write_text(json.dumps(obj))


def load_model(path: str | Path):
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict) or "blocks" not in obj:
        raise CheckpointFormatError(f"{path}: not a model checkpoint")
    blocks = {name: params_from_json(p, requires_grad=name != "enc") for name, p in obj["blocks"].items()}
    if obj.get("kind") == "baseline":
        return BaselineModel(blocks["enc"], blocks["head"], obj["horizon"], obj["order_k"])
    if obj.get("kind") != "dfpl":
        raise CheckpointFormatError(f"{path}: unknown checkpoint kind {obj.get('kind')!r}")
    return DfplModel(NetConfig(**obj["net_cfg"]), obj["order_k"], obj["horizon"], obj["variant"],
                     blocks["enc"], blocks.get("lstm"), blocks["gen"], blocks["critic"], blocks["cur"],
                     blocks["prog"], blocks["fut"])
