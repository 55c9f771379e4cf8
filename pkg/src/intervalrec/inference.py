"""Deconfounded scoring: interval prior, fusion, and the two ranking policies.

Policy 1 scores an example at its observed interval a:
    y = beta * m + (1 - beta) * sigmoid(t[a])
Policy 2 marginalizes the interval out against the training-split prior,
so its output cannot depend on the example's own interval:
    y = sigmoid( sum_a (beta * m + (1 - beta) * t[a]) * prior[a] )
with m entering policy 2 as a probability by default (raw scores t stay
unsquashed there). The prior is the empirical interval frequency of the
training split, frozen into the model bundle; zero-frequency intervals
keep probability zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .dataio import EncodedDataset
from .numerics import ComputeTape, sigmoid_value

POLICIES = ("policy1", "policy2", "backbone-only")


@dataclass
class FusionConfig:
    policy: str = "policy1"
    beta: float = 0.5
    policy2_matching_input: str = "probability"  # "probability" | "logit"

    def validate(self, strict_beta: bool = True) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy: {self.policy!r}")
        lo_ok = self.beta > 0.0 if strict_beta else self.beta >= 0.0
        hi_ok = self.beta < 1.0 if strict_beta else self.beta <= 1.0
        if not (lo_ok and hi_ok):
            bounds = "(0,1)" if strict_beta else "[0,1]"
            raise ValueError(f"beta must be in {bounds}, got {self.beta}")
        if self.policy2_matching_input not in ("probability", "logit"):
            raise ValueError(f"unknown policy2 matching input: {self.policy2_matching_input!r}")


def estimate_interval_prior(intervals: np.ndarray, horizon: int) -> np.ndarray:
    """Empirical frequency of each interval bucket; sums to 1 exactly."""
    intervals = np.asarray(intervals, dtype=np.int64)
    if intervals.size == 0:
        raise ValueError("cannot estimate a prior from zero intervals")
    if intervals.min() < 0 or intervals.max() >= horizon:
        raise ValueError("interval outside [0, horizon) in prior estimation")
    counts = np.bincount(intervals, minlength=horizon).astype(np.float64)
    prior = counts / counts.sum()
    return prior / prior.sum()


def fuse(beta: float, matching: np.ndarray, recency: np.ndarray) -> np.ndarray:
    """Elementwise beta * m + (1-beta) * t over a per-interval score vector."""
    matching = np.asarray(matching, dtype=np.float64)
    recency = np.asarray(recency, dtype=np.float64)
    return beta * matching[..., None] + (1.0 - beta) * recency if matching.ndim else beta * matching + (1.0 - beta) * recency


def infer_policy1(beta: float, matching: np.ndarray, recency_at_interval: np.ndarray) -> np.ndarray:
    """Fused score at the observed interval; both operands are probabilities."""
    m = np.asarray(matching, dtype=np.float64)
    return beta * m + (1.0 - beta) * sigmoid_value(recency_at_interval)


def infer_policy2(
    beta: float,
    matching: np.ndarray,
    recency: np.ndarray,
    prior: np.ndarray,
    matching_input: str = "probability",
) -> np.ndarray:
    """Interval-marginalized score; `recency` is (..., horizon) raw scores."""
    prior = np.asarray(prior, dtype=np.float64)
    if abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("prior must sum to 1")
    m = np.asarray(matching, dtype=np.float64)
    if matching_input == "logit":
        m = _logit(m)
    elif matching_input != "probability":
        raise ValueError(f"unknown matching input: {matching_input!r}")
    t = np.asarray(recency, dtype=np.float64)
    inner = (beta * m[..., None] + (1.0 - beta) * t) @ prior if m.ndim else (beta * m + (1.0 - beta) * t) @ prior
    return sigmoid_value(inner)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(p / (1.0 - p))


@dataclass
class ScoreBatchResult:
    scores: np.ndarray        # fused score per example
    matching: np.ndarray      # m-hat per example
    recency_at: np.ndarray    # sigmoid(t[a]) at the observed interval
    policy: str
    rankings: dict[str, list[int]] = dc_field(default_factory=dict)  # user -> example rows, best first


def model_outputs(bundle, batch: EncodedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Forward both models in eval mode: (matching probability, raw recency scores)."""
    tape = ComputeTape(training=False)
    m = sigmoid_value(bundle.backbone.forward_logit(tape, batch).value)
    t = bundle.perceptron.forward_scores(tape, batch).value
    return m, t


def score_batch(bundle, batch: EncodedDataset, config: FusionConfig) -> ScoreBatchResult:
    """Score every example under the configured policy and rank per user.

    Ties in the per-user ranking break by ascending video id. Policy 2
    reads only the frozen prior, never the example's own interval.
    """
    config.validate(strict_beta=False)
    m, t = model_outputs(bundle, batch)
    rows = np.arange(len(batch))
    recency_at = sigmoid_value(t[rows, batch.interval])
    if config.policy == "policy1":
        scores = infer_policy1(config.beta, m, t[rows, batch.interval])
    elif config.policy == "policy2":
        scores = infer_policy2(config.beta, m, t, bundle.prior, config.policy2_matching_input)
    else:
        scores = m

    rankings: dict[str, list[int]] = {}
    for i in rows:
        rankings.setdefault(batch.user_ids[i], []).append(int(i))
    for user, idxs in rankings.items():
        idxs.sort(key=lambda i: (-scores[i], batch.video_ids[i]))
    return ScoreBatchResult(scores=scores, matching=m, recency_at=recency_at, policy=config.policy, rankings=rankings)


def write_scores_csv(path: str | Path, batch: EncodedDataset, result: ScoreBatchResult) -> None:
    """One row per example with components, fused score, and per-user rank."""
    rank_of: dict[int, int] = {}
    for idxs in result.rankings.values():
        for pos, i in enumerate(idxs, start=1):
            rank_of[i] = pos
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "video_id", "interval", "matching", "recency", "score", "policy", "rank"])
        for i in range(len(batch)):
            writer.writerow([
                batch.user_ids[i],
                batch.video_ids[i],
                int(batch.interval[i]),
                repr(float(result.matching[i])),
                repr(float(result.recency_at[i])),
                repr(float(result.scores[i])),
                result.policy,
                rank_of[i],
            ])
