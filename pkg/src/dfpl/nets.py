"""Dense network blocks: encoder, LSTM cell, generator, critic, predictor heads.

Each block is a plain :class:`NetParams` bundle plus a forward function, so
blocks can be checkpointed, clipped and grad-checked uniformly.  Forward
functions accept either a single vector ``(D,)`` or a batch ``(B, D)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ATTR_DIM = 6
PROB_FLOOR = 1e-7


@dataclass
class NetConfig:
    obs_dim: int = 32
    feat_dim: int = 16
    attr_dim: int = ATTR_DIM
    hidden_dim: int = 32
    noise_dim: int = 8
    enc_width: int = 32
    gen_width: int = 32
    critic_width: int = 32
    pred_width: int = 32


@dataclass
class NetParams:
    tensors: dict[str, Tensor]
    init_seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def copy(self) -> "NetParams":
        return NetParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                          for k, v in self.tensors.items()}, self.init_seed)

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


def _dense_init(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def _mlp_params(seed: int, sizes: list[int]) -> NetParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        tensors[f"w{i}"] = Tensor(_dense_init(rng, n_in, n_out), requires_grad=True)
        tensors[f"b{i}"] = Tensor(np.zeros(n_out), requires_grad=True)
    return NetParams(tensors, seed)


def _check_dim(what: str, x: Tensor, expected: int) -> None:
    if x.shape[-1] != expected:
        raise ShapeError(f"{what}: input has last dimension {x.shape[-1]}, config expects {expected}")


def _linear(params: NetParams, i: int, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"w{i}"]), params[f"b{i}"])


def _squeeze_last(x: Tensor) -> Tensor:
    # (B, 1) -> (B,), (1,) -> ()
    return ad.reshape(x, x.shape[:-1])


def _zeros_like_batch(x: Tensor, width: int) -> Tensor:
    return Tensor(np.zeros(x.shape[:-1] + (width,)))


# ------------------------------------------------------------------ encoder


def init_encoder(cfg: NetConfig, seed: int) -> NetParams:
    return _mlp_params(seed, [cfg.obs_dim, cfg.enc_width, cfg.feat_dim])


def enc_forward(params: NetParams, x: Tensor) -> Tensor:
    """Feature vector F_t = W1 relu(W0 x + b0) + b1."""
    _check_dim("enc_forward", x, params["w0"].shape[0])
    return _linear(params, 1, ad.relu(_linear(params, 0, x)))


# --------------------------------------------------------------------- LSTM


def init_lstm(cfg: NetConfig, seed: int, input_dim: int | None = None) -> NetParams:
    rng = np.random.default_rng(seed)
    n_in = (cfg.feat_dim + cfg.attr_dim) if input_dim is None else input_dim
    h = cfg.hidden_dim
    bias = np.zeros(4 * h)
    bias[h:2 * h] = 1.0  # forget gate starts open
    return NetParams({
        "w": Tensor(_dense_init(rng, n_in + h, 4 * h), requires_grad=True),
        "b": Tensor(bias, requires_grad=True),
    }, seed)


def lstm_zero_state(hidden_dim: int, batch: int | None = None) -> LstmState:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def lstm_step(params: NetParams, state: LstmState, inp: Tensor) -> LstmState:
    """One gated update; gate order in the packed weight is (input, forget, cell, output)."""
    w = params["w"]
    h = w.shape[1] // 4
    if state.hidden.shape[-1] != h or state.cell.shape != state.hidden.shape:
        raise ShapeError(f"lstm_step: state shapes {state.hidden.shape}/{state.cell.shape} "
                         f"do not match hidden dim {h}")
    _check_dim("lstm_step", inp, w.shape[0] - h)
    z = ad.add(ad.matmul(ad.concat([inp, state.hidden]), w), params["b"])
    i = ad.sigmoid(ad.slice_last(z, 0, h))
    f = ad.sigmoid(ad.slice_last(z, h, 2 * h))
    g = ad.tanh(ad.slice_last(z, 2 * h, 3 * h))
    o = ad.sigmoid(ad.slice_last(z, 3 * h, 4 * h))
    cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
    hidden = ad.mul(o, ad.tanh(cell))
    return LstmState(hidden, cell)


# ---------------------------------------------------------------- generator


def init_generator(cfg: NetConfig, seed: int, input_dim: int | None = None) -> NetParams:
    n_in = cfg.hidden_dim if input_dim is None else input_dim
    return _mlp_params(seed, [n_in + cfg.attr_dim + cfg.noise_dim, cfg.gen_width, cfg.feat_dim])


def generator_forward(params: NetParams, hidden: Tensor, attrs: Tensor, noise: Tensor) -> Tensor:
    """Next-stage feature vector from (recurrent state, attributes, noise)."""
    z = ad.concat([hidden, attrs, noise])
    _check_dim("generator_forward", z, params["w0"].shape[0])
    return _linear(params, 1, ad.relu(_linear(params, 0, z)))


# ------------------------------------------------------------------- critic


def init_critic(cfg: NetConfig, seed: int, clip: float | None = None) -> NetParams:
    params = _mlp_params(seed, [cfg.feat_dim, cfg.critic_width, 1])
    if clip is not None:
        clip_weights(params, clip)
    return params


def critic_forward(params: NetParams, feats: Tensor) -> Tensor:
    """Unbounded Wasserstein critic score; ``(B,)`` for a batch, scalar for one vector."""
    _check_dim("critic_forward", feats, params["w0"].shape[0])
    return _squeeze_last(_linear(params, 1, ad.leaky_relu(_linear(params, 0, feats), 0.2)))


def critic_lipschitz_bound(params: NetParams) -> float:
    """Product of layer spectral norms; leaky relu is 1-Lipschitz."""
    return float(np.linalg.norm(params["w0"].data, 2) * np.linalg.norm(params["w1"].data, 2))


def clip_weights(params: NetParams, c: float) -> None:
    for t in params:
        np.clip(t.data, -c, c, out=t.data)


# --------------------------------------------------------------- predictors


def init_predictor(cfg: NetConfig, seed: int, feature_dim: int, attr_dim: int | None = None) -> NetParams:
    n_attr = cfg.attr_dim if attr_dim is None else attr_dim
    return _mlp_params(seed, [feature_dim + n_attr, cfg.pred_width, 1])


def predictor_forward(params: NetParams, features: Tensor, attrs: Tensor | None = None) -> Tensor:
    """Disease probability in ``[1e-7, 1 - 1e-7]``; missing attributes become zeros."""
    n_in = params["w0"].shape[0]
    if attrs is None:
        attrs = _zeros_like_batch(features, n_in - features.shape[-1])
    x = ad.concat([features, attrs])
    _check_dim("predictor_forward", x, n_in)
    logit = _linear(params, 1, ad.tanh(_linear(params, 0, x)))
    return _squeeze_last(ad.clamp(ad.sigmoid(logit), PROB_FLOOR, 1.0 - PROB_FLOOR))


# --------------------------------------------------------------- optimizers


@dataclass
class Optimizer:
    """``rule`` is ``"rmsprop"`` (adaptive-rms) or ``"sgd"``; weight decay is L2 shrinkage."""

    rule: str
    learning_rate: float
    weight_decay: float = 0.0
    decay: float = 0.99
    eps: float = 1e-8
    accumulators: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")


def optimizer_step(opt: Optimizer, params: NetParams) -> None:
    live = [(name, t) for name, t in params.items() if t.grad is not None]
    for name, t in live:
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}; step aborted")
    for name, t in live:
        g = t.grad + opt.weight_decay * t.data if opt.weight_decay else t.grad
        if opt.rule == "sgd":
            t.data -= opt.learning_rate * g
        else:
            acc = opt.accumulators.get(id(t))
            if acc is None:
                acc = np.zeros_like(t.data)
                opt.accumulators[id(t)] = acc
            acc *= opt.decay
            acc += (1.0 - opt.decay) * g * g
            t.data -= opt.learning_rate * g / (np.sqrt(acc) + opt.eps)


# -------------------------------------------------------------- checkpoints


def params_to_json(params: NetParams) -> dict:
    return {
        "init_seed": params.init_seed,
        "params": {name: {"shape": list(t.shape), "data": [float(v).hex() for v in t.data.reshape(-1)]}
                   for name, t in params.items()},
    }


def params_from_json(obj: dict, requires_grad: bool = True) -> NetParams:
    tensors = {}
    for name, entry in obj["params"].items():
        data = np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64)
        tensors[name] = Tensor(data.reshape(entry["shape"]), requires_grad=requires_grad)
    return NetParams(tensors, int(obj.get("init_seed", 0)))


def save_params(params: NetParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path: str | Path) -> NetParams:
    return params_from_json(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ rollout


@dataclass
class Rollout:
    """Generated features keyed by absolute time.

    ``hidden[t]`` is the recurrent state after consuming the input at time
    ``t``; ``generated[t + 1]`` is the generator output produced from it.
    """

    hidden: dict[int, Tensor]
    generated: dict[int, Tensor]


def _check_times(times, horizon: int) -> None:
    if len(times) == 0:
        raise ValueError("at least one observed time is required")
    if any(b <= a for a, b in zip(times[:-1], times[1:])):
        raise ValueError(f"observed times must be strictly increasing, got {list(times)}")
    if horizon <= times[-1]:
        raise ValueError(f"horizon {horizon} must exceed the last observed time {times[-1]}")


def lstm_rollout(lstm: NetParams, gen: NetParams, feats: list[Tensor], attrs: list[Tensor],
                 times: list[int], horizon: int, noise: list[Tensor] | None = None) -> Rollout:
    """Single-subject rollout from ``times[0]`` to ``horizon``.

    Observed features are fed at observed times; everywhere else the
    previous generator output is fed back.  Attributes are the most recent
    observed ones.  ``noise[k]`` drives the k-th generator call (zeros if None).
    """
    _check_times(times, horizon)
    h_dim = lstm["w"].shape[1] // 4
    noise_dim = gen["w0"].shape[0] - h_dim - attrs[0].shape[-1]
    observed = {t: (f, a) for t, f, a in zip(times, feats, attrs)}
    state = lstm_zero_state(h_dim)
    out = Rollout({}, {})
    prev_gen = None
    current_attrs = attrs[0]
    for k, t in enumerate(range(times[0], horizon)):
        if t in observed:
            inp, current_attrs = observed[t]
        else:
            inp = prev_gen
        state = lstm_step(lstm, state, ad.concat([inp, current_attrs]))
        z = noise[k] if noise is not None else Tensor(np.zeros(noise_dim))
        prev_gen = generator_forward(gen, state.hidden, current_attrs, z)
        out.hidden[t] = state.hidden
        out.generated[t + 1] = prev_gen
    return out


def rollout_batch(lstm: NetParams, gen: NetParams, feats: np.ndarray, attrs: np.ndarray,
                  observed: np.ndarray, horizon: int, noise: np.ndarray | None = None) -> Rollout:
    """Vectorised rollout for a batch of subjects sharing one horizon.

    ``feats`` is ``(B, horizon, D)`` and ``attrs`` ``(B, horizon, A)``, indexed
    by absolute time minus one; ``observed`` marks the sample's input times.
    Rows that have not started yet keep a zero state; ``generated[t]`` rows
    are meaningful only where ``t`` exceeds that row's first observed time.
    ``noise`` is ``(B, horizon, noise_dim)`` or None for zeros.
    """
    b, n_t, _ = feats.shape
    if n_t < horizon:
        raise ShapeError(f"rollout_batch: feature tensor covers {n_t} times, horizon is {horizon}")
    if not observed[:, :horizon - 1].any(axis=1).all():
        raise ValueError("every row needs an observed time before the horizon")
    h_dim = lstm["w"].shape[1] // 4
    noise_dim = gen["w0"].shape[0] - h_dim - attrs.shape[-1]
    start = observed.argmax(axis=1) + 1
    # most recent observed attributes at each time
    last_obs = np.where(observed, np.arange(n_t)[None, :], -1)
    last_obs = np.maximum.accumulate(last_obs, axis=1)
    cur_attrs = attrs[np.arange(b)[:, None], np.maximum(last_obs, 0)]

    state = lstm_zero_state(h_dim, b)
    out = Rollout({}, {})
    prev_gen = Tensor(np.zeros((b, feats.shape[-1])))
    for t in range(int(start.min()), horizon):
        col = t - 1
        obs_m = np.repeat(observed[:, col:col + 1].astype(float), feats.shape[-1], axis=1)
        inp = ad.add(Tensor(feats[:, col] * obs_m), ad.mul(prev_gen, Tensor(1.0 - obs_m)))
        a_t = Tensor(cur_attrs[:, col])
        new = lstm_step(lstm, state, ad.concat([inp, a_t]))
        act = (start <= t)[:, None]
        if act.all():
            state = new
        else:
            keep = Tensor(np.repeat(act.astype(float), h_dim, axis=1))
            drop = Tensor(np.repeat((~act).astype(float), h_dim, axis=1))
            state = LstmState(ad.add(ad.mul(new.hidden, keep), ad.mul(state.hidden, drop)),
                              ad.add(ad.mul(new.cell, keep), ad.mul(state.cell, drop)))
        z = Tensor(noise[:, col] if noise is not None else np.zeros((b, noise_dim)))
        prev_gen = generator_forward(gen, state.hidden, a_t, z)
        out.hidden[t] = state.hidden
        out.generated[t + 1] = prev_gen
    return out


def direct_generate(gen: NetParams, feats: Tensor, attrs: Tensor, gap: np.ndarray,
                    horizon: int, noise: Tensor | None = None) -> Tensor:
    """Recurrence-free generator: F~_T = G([F_tK, gap / horizon], a_tK, noise)."""
    gap_col = Tensor(np.asarray(gap, dtype=float).reshape(feats.shape[:-1] + (1,)) / horizon)
    z_dim = gen["w0"].shape[0] - feats.shape[-1] - 1 - attrs.shape[-1]
    if noise is None:
        noise = _zeros_like_batch(feats, z_dim)
    return generator_forward(gen, ad.concat([feats, gap_col]), attrs, noise)
