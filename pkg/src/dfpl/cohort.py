"""Synthetic longitudinal cohorts with irreversible disease dynamics.

Each subject has a latent progression rate ``r`` (logit-normal, bounded by
``rate_max``) and a latent severity that only ever grows:

    s_1     = r * baseline_exposure
    s_{t+1} = s_t + r * g(a_t) + severity_jitter * |eps_t|
    g(a)    = exp(attr_effect * (a_0 + a_1) / sqrt(2))

The disease label is ``y_t = 1[s_t >= threshold]``, so labels are monotone by
construction.  Observations embed the severity nonlinearly and add a
per-subject nuisance offset (which cancels in time differences) plus noise:

    x_t = phi(s_t) @ A + u @ B + noise_scale * eps

The embedding ``A, B`` and the threshold belong to the "world" (seeded by
``world_seed``); ``seed`` draws subjects from that world.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .seeding import substream

N_ATTRS = 6
INFORMATIVE_ATTRS = (0, 1)


class CohortFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 834
    obs_dim: int = 32
    t_max: int = 6
    noise_scale: float = 1.0
    trait_scale: float = 1.0
    trait_dim: int = 4
    signal_scale: float = 0.3
    hazard_mu: float = 0.0
    hazard_sigma: float = 1.5
    rate_max: float = 1.0
    attr_effect: float = 0.5
    attr_drift: float = 0.1
    baseline_exposure: float = 0.5
    severity_jitter: float = 0.0
    prevalence: float = 0.35
    missing_rate: float = 0.15
    world_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        if self.noise_scale < 0 or self.severity_jitter < 0:
            raise ValueError("noise scales must be nonnegative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if self.t_max < 3:
            raise ValueError("t_max must be at least 3")

    def replace(self, **changes) -> "CohortSpec":
        return CohortSpec(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubjectTrajectory:
    """Records of one subject at its recorded times (a subset of 1..t_max)."""

    subject_id: int
    times: list[int]
    x: np.ndarray  # (n_records, obs_dim)
    a: np.ndarray  # (n_records, 6)
    y: np.ndarray  # (n_records,) in {0, 1}
    label_visible: np.ndarray = field(default=None)  # (n_records,) bool

    def __post_init__(self):
        if self.label_visible is None:
            self.label_visible = np.ones(len(self.times), dtype=bool)

    def index(self, t: int) -> int:
        return self.times.index(t)

    def has(self, t: int) -> bool:
        return t in self.times

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectTrajectory):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.times == other.times
                and np.array_equal(self.x, other.x) and np.array_equal(self.a, other.a)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.label_visible, other.label_visible))


# ------------------------------------------------------------------- world


@dataclass(frozen=True)
class World:
    signal: np.ndarray  # (3, obs_dim)
    traits: np.ndarray  # (trait_dim, obs_dim)
    drift: np.ndarray  # (6,)
    threshold: float


def embed_severity(s: np.ndarray, threshold: float) -> np.ndarray:
    """phi(s): three smooth coordinates of severity relative to threshold."""
    r = np.asarray(s, dtype=float) / threshold
    return np.stack([r, np.tanh(3.0 * (r - 1.0)), np.sqrt(np.maximum(r, 0.0))], axis=-1)


def rate_from_latent(spec: CohortSpec, z: np.ndarray) -> np.ndarray:
    return spec.rate_max / (1.0 + np.exp(-(spec.hazard_mu + spec.hazard_sigma * np.asarray(z))))


def exposure_steps(spec: CohortSpec, a: np.ndarray) -> np.ndarray:
    """g(a_t) for attribute rows ``a``."""
    a = np.asarray(a)
    return np.exp(spec.attr_effect * (a[..., 0] + a[..., 1]) / np.sqrt(2.0))


def attributes_over_time(spec: CohortSpec, world: World, a_at: np.ndarray, t: int) -> np.ndarray:
    """Full ``(t_max, 6)`` attribute path implied by the attributes seen at time ``t``."""
    base = np.asarray(a_at) - world.drift * (t - 1)
    return base[None, :] + world.drift[None, :] * np.arange(spec.t_max)[:, None]


def cumulative_exposure(spec: CohortSpec, attr_path: np.ndarray) -> np.ndarray:
    """c_t with s_t = r * c_t (no jitter), for t = 1..t_max."""
    steps = exposure_steps(spec, attr_path[:-1])
    return spec.baseline_exposure + np.concatenate([[0.0], np.cumsum(steps)])


_SUBJECT_ONLY = ("n_subjects", "seed", "missing_rate", "noise_scale")


def world_for(spec: CohortSpec) -> World:
    """The embedding and threshold shared by every cohort drawn with these world parameters."""
    return _world(spec.replace(**{k: getattr(CohortSpec, k) for k in _SUBJECT_ONLY}))


@lru_cache(maxsize=64)
def _world(spec: CohortSpec) -> World:
    rng = substream(spec.world_seed, "embed", spec.obs_dim, spec.trait_dim)
    signal = rng.normal(size=(3, spec.obs_dim)) * spec.signal_scale
    traits = rng.normal(size=(spec.trait_dim, spec.obs_dim)) * spec.trait_scale / np.sqrt(spec.trait_dim)
    drift = np.full(N_ATTRS, spec.attr_drift / np.sqrt(N_ATTRS))
    # threshold: (1 - prevalence) quantile of s_T over a large reference population
    ref = substream(spec.world_seed, "threshold")
    n_ref = 20000
    a0 = ref.normal(size=(n_ref, N_ATTRS))
    z = ref.normal(size=n_ref)
    paths = a0[:, None, :] + drift[None, None, :] * np.arange(spec.t_max)[None, :, None]
    c = spec.baseline_exposure + np.sum(exposure_steps(spec, paths[:, :-1]), axis=1)
    s_t = rate_from_latent(spec, z) * c
    if spec.severity_jitter > 0:
        s_t = s_t + spec.severity_jitter * np.abs(ref.normal(size=(n_ref, spec.t_max - 1))).sum(axis=1)
    threshold = float(np.quantile(s_t, 1.0 - spec.prevalence))
    if spec.rate_max * spec.baseline_exposure >= threshold:
        raise ValueError("spec allows diseased subjects at t=1; lower rate_max or baseline_exposure")
    return World(signal, traits, drift, threshold)


# -------------------------------------------------------------- generation


def _record_times(spec: CohortSpec, rng: np.random.Generator) -> list[int]:
    inner = [t for t in range(2, spec.t_max) if rng.random() >= spec.missing_rate]
    if not inner:
        inner = [int(rng.integers(2, spec.t_max))]
    return [1, *inner, spec.t_max]


def generate_subject(spec: CohortSpec, subject_id: int, world: World | None = None) -> SubjectTrajectory:
    world = world or world_for(spec)
    rng = substream(spec.seed, "subject", subject_id)
    a0 = rng.normal(size=N_ATTRS)
    z = rng.normal()
    u = rng.normal(size=spec.trait_dim)
    jitter = np.abs(rng.normal(size=spec.t_max - 1)) * spec.severity_jitter
    times = _record_times(spec, rng)
    eps = rng.normal(size=(spec.t_max, spec.obs_dim)) * spec.noise_scale

    a_path = a0[None, :] + world.drift[None, :] * np.arange(spec.t_max)[:, None]
    r = float(rate_from_latent(spec, z))
    s = r * cumulative_exposure(spec, a_path) + np.concatenate([[0.0], np.cumsum(jitter)])
    y = (s >= world.threshold).astype(int)
    x = embed_severity(s, world.threshold) @ world.signal + u @ world.traits + eps
    idx = np.array(times) - 1
    return SubjectTrajectory(subject_id, times, x[idx], a_path[idx], y[idx])


def generate_cohort(spec: CohortSpec) -> list[SubjectTrajectory]:
    world = world_for(spec)
    return [generate_subject(spec, i, world) for i in range(spec.n_subjects)]


def split_dataset(cohort: list[SubjectTrajectory], ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Subject-level train/val/test split; sizes round(n*r0), round(n*r1), remainder."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(cohort)
    order = substream(seed, "split").permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    pick = lambda ix: [cohort[i] for i in sorted(ix)]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:]))


def mask_labels(cohort: list[SubjectTrajectory], t_max: int | None = None) -> list[SubjectTrajectory]:
    """Hide labels strictly between the first grade and the horizon."""
    out = []
    for subj in cohort:
        horizon = t_max if t_max is not None else max(subj.times)
        visible = np.array([t in (1, horizon) for t in subj.times])
        out.append(SubjectTrajectory(subj.subject_id, list(subj.times), subj.x, subj.a, subj.y, visible))
    return out


def full_time_subjects(cohort: list[SubjectTrajectory], t_max: int) -> list[SubjectTrajectory]:
    return [s for s in cohort if s.times == list(range(1, t_max + 1))]


# ---------------------------------------------------------------------- I/O


def _hex(arr: np.ndarray) -> list:
    return [[float(v).hex() for v in row] for row in np.atleast_2d(arr)]


def subject_to_json(subj: SubjectTrajectory) -> dict:
    return {
        "subject_id": int(subj.subject_id),
        "times": [int(t) for t in subj.times],
        "x": _hex(subj.x),
        "a": _hex(subj.a),
        "y": [int(v) for v in subj.y],
        "label_visible": [bool(v) for v in subj.label_visible],
    }


def subject_from_json(obj: dict) -> SubjectTrajectory:
    def unhex(rows):
        return np.array([[float.fromhex(v) for v in row] for row in rows], dtype=np.float64)

    times = [int(t) for t in obj["times"]]
    x, a = unhex(obj["x"]), unhex(obj["a"])
    y = np.array(obj["y"], dtype=int)
    visible = np.array(obj["label_visible"], dtype=bool)
    if not (len(times) == len(x) == len(a) == len(y) == len(visible)):
        raise ValueError("record arrays have inconsistent lengths")
    return SubjectTrajectory(int(obj["subject_id"]), times, x, a, y, visible)


def save_cohort(cohort: list[SubjectTrajectory], path: str | Path) -> None:
    with open(path, "w") as fh:
        for subj in cohort:
            fh.write(json.dumps(subject_to_json(subj)) + "\n")


def load_cohort(path: str | Path) -> list[SubjectTrajectory]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(subject_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CohortFormatError(f"{path}: line {lineno}: {exc}") from exc
    return out
