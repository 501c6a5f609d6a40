"""Accuracy, AUC, the Bayes-oracle ceiling, and per-gap report assembly."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .autodiff import Tensor
from .cohort import (CohortSpec, SubjectTrajectory, attributes_over_time, cumulative_exposure,
                     embed_severity, rate_from_latent, world_for)
from .model import CohortArrays, cohort_arrays
from .nets import predictor_forward


class UndefinedMetricError(ValueError):
    """AUC asked for a label vector containing a single class."""


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be non-empty and of equal length")
    return float(np.mean((s >= threshold).astype(int) == y))


def _twice_u(scores: np.ndarray, labels: np.ndarray) -> int:
    """2 * Mann-Whitney U (concordant pairs count 2, ties 1), by a sort sweep."""
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    cut = np.flatnonzero(np.diff(s)) + 1
    total = 0
    neg_below = 0
    for grp in np.split(y, cut):
        p = int(grp.sum())
        q = grp.size - p
        total += 2 * p * neg_below + p * q
        neg_below += q
    return total


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC with ties counted as half concordant."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return _twice_u(s, y) / (2 * n_pos * n_neg)


def auc_bruteforce(scores: Sequence[float], labels: Sequence[int]) -> float:
    """O(n^2) pairwise concordance; the reference the fast path must match exactly."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else (1 if p == q else 0)
    return twice / (2 * pos.size * neg.size)


# ------------------------------------------------------------- Bayes oracle


def _quadrature(n_grid: int) -> np.ndarray:
    # equal-probability nodes of the standard normal latent
    return norm.ppf((np.arange(n_grid) + 0.5) / n_grid)


def bayes_posterior(subject: SubjectTrajectory, spec: CohortSpec, condition_times: Sequence[int],
                    n_grid: int = 1000) -> float:
    """P(y_T = 1 | x, a at ``condition_times``) under the known generative process.

    The nuisance trait offset is Gaussian and shared across times, so it is
    integrated analytically; the latent rate is integrated on ``n_grid``
    equal-probability nodes.
    """
    if spec.severity_jitter > 0:
        raise NotImplementedError("the closed-form oracle assumes severity_jitter == 0")
    world = world_for(spec)
    idx = [subject.index(t) for t in condition_times]
    a_path = attributes_over_time(spec, world, subject.a[idx[0]], condition_times[0])
    c = cumulative_exposure(spec, a_path)
    rates = rate_from_latent(spec, _quadrature(n_grid))
    k = len(idx)

    # mean over the grid: (G, K * obs_dim)
    cond = np.array(condition_times) - 1
    severity = rates[:, None] * c[None, cond]
    mu = (embed_severity(severity, world.threshold) @ world.signal).reshape(n_grid, -1)
    trait_cov = world.traits.T @ world.traits
    cov = np.kron(np.ones((k, k)), trait_cov) + (spec.noise_scale ** 2 + 1e-12) * np.eye(k * spec.obs_dim)
    chol = np.linalg.cholesky(cov)
    resid = subject.x[idx].reshape(-1)[None, :] - mu
    white = np.linalg.solve(chol, resid.T)
    loglik = -0.5 * np.sum(white * white, axis=0)
    w = np.exp(loglik - loglik.max())
    diseased = rates * c[-1] >= world.threshold
    return float(np.sum(w * diseased) / np.sum(w))


def bayes_oracle_auc(cohort: Sequence[SubjectTrajectory], spec: CohortSpec,
                     condition_times: Sequence[int], n_grid: int = 1000) -> float:
    subjects = [s for s in cohort if all(s.has(t) for t in condition_times)]
    post = [bayes_posterior(s, spec, condition_times, n_grid) for s in subjects]
    labels = [int(s.y[s.index(spec.t_max)]) for s in subjects]
    return auc(post, labels)


def bayes_oracle_by_gap(cohort: Sequence[SubjectTrajectory], spec: CohortSpec, order: int = 1,
                        gaps: Sequence[int] | None = None, n_grid: int = 1000) -> dict[int, float]:
    """Oracle AUC per gap for windows of ``order`` consecutive times ending at T - gap."""
    t_max = spec.t_max
    gaps = gaps if gaps is not None else range(1, t_max - order + 1)
    return {g: bayes_oracle_auc(cohort, spec, tuple(range(t_max - g - order + 1, t_max - g + 1)), n_grid)
            for g in gaps}


# ---------------------------------------------------------------- reporting


@dataclass
class MetricsReport:
    order_k: int
    delta_t: int | None  # None marks the across-gap average row
    acc: float
    auc: float
    n: int
    seed: int
    method: str = "dfpl"
    per_seed: list[dict] = field(default_factory=list)


def report_by_gap(scores: np.ndarray, labels: np.ndarray, gaps: np.ndarray, order_k: int,
                  seed: int, method: str = "dfpl") -> list[MetricsReport]:
    """One row per gap present, plus an average row (mean of the per-gap rows)."""
    rows = []
    for g in sorted(set(int(v) for v in gaps)):
        sel = gaps == g
        try:
            a = auc(scores[sel], labels[sel])
        except UndefinedMetricError:
            a = float("nan")
        rows.append(MetricsReport(order_k, g, accuracy(scores[sel], labels[sel]), a, int(sel.sum()), seed, method))
    rows.append(MetricsReport(order_k, None, float(np.mean([r.acc for r in rows])),
                              float(np.nanmean([r.auc for r in rows])), int(len(scores)), seed, method))
    return rows


def aggregate_seeds(runs: Sequence[Sequence[MetricsReport]]) -> list[dict]:
    """Mean and std (population) over seed runs, row by row."""
    table: dict[tuple, list[MetricsReport]] = {}
    for run in runs:
        for r in run:
            table.setdefault((r.method, r.order_k, r.delta_t), []).append(r)
    out = []
    for (method, k, dt), rows in sorted(table.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 99)):
        accs = np.array([r.acc for r in rows])
        aucs = np.array([r.auc for r in rows])
        out.append({"method": method, "order_k": k, "delta_t": dt, "n_seeds": len(rows),
                    "acc_mean": float(accs.mean()), "acc_std": float(accs.std()),
                    "auc_mean": float(aucs.mean()), "auc_std": float(aucs.std()),
                    "seeds": [r.seed for r in rows]})
    return out


def write_reports(rows: Sequence[MetricsReport], json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps([asdict(r) for r in rows], indent=2))
    cols = ["method", "order_k", "delta_t", "seed", "n", "acc", "auc"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            dt = "avg" if r.delta_t is None else r.delta_t
            w.writerow([r.method, r.order_k, dt, r.seed, r.n, f"{r.acc:.6f}", f"{r.auc:.6f}"])


def evaluate_model(model, test_cohort, order_k: int, seed: int = 0, gaps: Sequence[int] | None = None,
                   method: str | None = None) -> list[MetricsReport]:
    """Per-gap and average ACC/AUC of a frozen model on every order-``order_k`` test sample.

    ``model`` needs ``score_cohort(cohort, order_k, gaps) -> (scores, labels, gaps)``.
    """
    scores, labels, sample_gaps = model.score_cohort(test_cohort, order_k, gaps)
    return report_by_gap(scores, labels, sample_gaps, order_k, seed, method or getattr(model, "variant", "model"))


def evaluate_seeds(models: Sequence, test_cohort, order_k: int, seeds: Sequence[int],
                   gaps: Sequence[int] | None = None) -> tuple[list[MetricsReport], list[dict]]:
    """Evaluate one model per seed; returns all rows and their mean/std aggregate."""
    if len(models) != len(seeds):
        raise ValueError("need exactly one model per seed")
    runs = [evaluate_model(m, test_cohort, order_k, s, gaps) for m, s in zip(models, seeds)]
    return [r for run in runs for r in run], aggregate_seeds(runs)


def deterioration_violations(model, test_cohort) -> tuple[int, int]:
    """Count (t, T) pairs where f_cur scores a subject's earlier record above its record at T.

    Uses real features and attributes on both sides.  Returns (violations, pairs).
    """
    T = model.horizon
    arr = test_cohort if isinstance(test_cohort, CohortArrays) else cohort_arrays(test_cohort, model.enc, T)
    rows = np.flatnonzero(arr.recorded[:, T - 1])
    p = predictor_forward(model.cur, Tensor(arr.feats[rows].reshape(-1, arr.feats.shape[2])),
                          Tensor(arr.attrs[rows].reshape(-1, arr.attrs.shape[2]))).data.reshape(len(rows), T)
    earlier = arr.recorded[rows, :T - 1]
    bad = (p[:, :T - 1] > p[:, T - 1:T]) & earlier
    return int(bad.sum()), int(earlier.sum())
