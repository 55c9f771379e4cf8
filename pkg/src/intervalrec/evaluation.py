"""Top-K evaluation over logged test impressions, plus diagnostic reports.

Candidates for a user are exactly that user's test impressions (no
sampled negatives); users with no positive test impression are excluded
and counted. Binary-gain NDCG uses gain 1/log2(rank+1) with the ideal DCG
over min(K, n_positives) positions; MAP@K averages precision at the hit
ranks, normalized by min(K, n_positives).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .dataio import EncodedDataset

METRICS = ("recall", "ndcg", "map", "hr")


# -- single-list metrics --------------------------------------------------


def recall_at_k(ranked: list[str], positives: set[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not positives:
        raise ValueError("recall is undefined with no positives")
    hits = sum(1 for v in ranked[:k] if v in positives)
    return hits / len(positives)


def hr_at_k(ranked: list[str], positives: set[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not positives:
        raise ValueError("hit rate is undefined with no positives")
    return 1.0 if any(v in positives for v in ranked[:k]) else 0.0


def ndcg_at_k(ranked: list[str], positives: set[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not positives:
        raise ValueError("NDCG is undefined with no positives")
    dcg = sum(1.0 / math.log2(rank + 1) for rank, v in enumerate(ranked[:k], start=1) if v in positives)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(positives)) + 1))
    return dcg / ideal


def map_at_k(ranked: list[str], positives: set[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not positives:
        raise ValueError("MAP is undefined with no positives")
    hits = 0
    precision_sum = 0.0
    for rank, v in enumerate(ranked[:k], start=1):
        if v in positives:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / min(k, len(positives))


_METRIC_FNS = {"recall": recall_at_k, "ndcg": ndcg_at_k, "map": map_at_k, "hr": hr_at_k}


# -- grouping -------------------------------------------------------------


@dataclass
class UserEvalGroup:
    user_id: str
    ranked_videos: list[str]           # candidate video ids, best score first
    intervals: dict[str, int]          # video id -> interval of the kept impression
    positives: set[str]


def build_user_groups(
    batch: EncodedDataset, scores: np.ndarray
) -> tuple[list[UserEvalGroup], int]:
    """Per-user candidate rankings from logged impressions.

    Repeated (user, video) impressions collapse to one candidate - the
    one with the smallest interval (first seen on ties); the video counts
    as positive if any of its impressions was. Returns the groups with at
    least one positive and the number of users excluded for having none.
    """
    per_user: dict[str, dict[str, int]] = {}
    positives: dict[str, set[str]] = {}
    for i in range(len(batch)):
        u, v = batch.user_ids[i], batch.video_ids[i]
        seen = per_user.setdefault(u, {})
        if v not in seen or batch.interval[i] < batch.interval[seen[v]]:
            seen[v] = i
        if batch.label[i] > 0:
            positives.setdefault(u, set()).add(v)

    groups: list[UserEvalGroup] = []
    excluded = 0
    for u in sorted(per_user):
        pos = positives.get(u, set())
        if not pos:
            excluded += 1
            continue
        rows = per_user[u]
        ranked = sorted(rows, key=lambda v: (-scores[rows[v]], v))
        groups.append(
            UserEvalGroup(
                user_id=u,
                ranked_videos=ranked,
                intervals={v: int(batch.interval[rows[v]]) for v in rows},
                positives=pos,
            )
        )
    return groups, excluded


# -- reports --------------------------------------------------------------


@dataclass
class MetricReport:
    overall: dict[str, dict[int, float]]
    evaluated_users: int
    excluded_users: int
    per_interval: dict[int, dict] | None = None
    cold_start: dict | None = None

    def to_json(self) -> str:
        payload = {
            "overall": {m: {str(k): v for k, v in per_k.items()} for m, per_k in self.overall.items()},
            "evaluated_users": self.evaluated_users,
            "excluded_users": self.excluded_users,
        }
        if self.per_interval is not None:
            payload["per_interval"] = {str(a): row for a, row in self.per_interval.items()}
        if self.cold_start is not None:
            payload["cold_start"] = self.cold_start
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"users evaluated: {self.evaluated_users}  (excluded, no positives: {self.excluded_users})"]
        ks = sorted(next(iter(self.overall.values())).keys()) if self.overall else []
        header = "metric".ljust(8) + "".join(f"@{k}".rjust(12) for k in ks)
        lines.append(header)
        for metric in METRICS:
            if metric not in self.overall:
                continue
            row = metric.ljust(8) + "".join(f"{self.overall[metric][k]:12.6f}" for k in ks)
            lines.append(row)
        if self.per_interval is not None:
            lines.append("")
            lines.append("interval".ljust(10) + "users".rjust(8) + "ndcg".rjust(12))
            for a in sorted(self.per_interval):
                row = self.per_interval[a]
                nd = "-" if row["ndcg"] is None else f"{row['ndcg']:.6f}"
                lines.append(f"{a:<10d}{row['users']:>8d}{nd:>12}")
        if self.cold_start is not None:
            lines.append("")
            cs = self.cold_start
            lines.append(
                f"cold-start: {cs['videos']} videos, {cs['users']} users"
            )
            for metric in METRICS:
                if cs["metrics"].get(metric) is not None:
                    vals = ", ".join(f"@{k}={v:.6f}" for k, v in sorted(cs["metrics"][metric].items()))
                    lines.append(f"  {metric}: {vals}")
        return "\n".join(lines) + "\n"


def mean_metric(groups: list[UserEvalGroup], metric: str, k: int) -> float:
    fn = _METRIC_FNS[metric]
    return float(np.mean([fn(g.ranked_videos, g.positives, k) for g in groups]))


def evaluate(
    batch: EncodedDataset,
    scores: np.ndarray,
    k_list: list[int],
    per_interval: bool = False,
    per_interval_k: int = 10,
    cold_start_train_videos: set[str] | None = None,
    horizon: int | None = None,
) -> MetricReport:
    """Full logged-impression evaluation at each K in k_list."""
    if not k_list or any(k < 1 for k in k_list):
        raise ValueError(f"invalid K list: {k_list}")
    groups, excluded = build_user_groups(batch, scores)
    if not groups:
        raise ValueError("no user has a positive test impression; nothing to evaluate")
    overall = {m: {k: mean_metric(groups, m, k) for k in k_list} for m in METRICS}
    report = MetricReport(overall=overall, evaluated_users=len(groups), excluded_users=excluded)
    if per_interval:
        if horizon is None:
            horizon = int(max(max(g.intervals.values()) for g in groups)) + 1
        report.per_interval = per_interval_breakdown(groups, per_interval_k, horizon)
    if cold_start_train_videos is not None:
        report.cold_start = cold_start_eval(batch, scores, cold_start_train_videos, k_list)
    return report


def per_interval_breakdown(groups: list[UserEvalGroup], k: int, horizon: int) -> dict[int, dict]:
    """NDCG@K per interval: candidates restricted to that interval."""
    out: dict[int, dict] = {}
    for a in range(horizon):
        vals = []
        for g in groups:
            restricted = [v for v in g.ranked_videos if g.intervals[v] == a]
            pos = g.positives & set(restricted)
            if not pos:
                continue
            vals.append(ndcg_at_k(restricted, pos, k))
        out[a] = {"users": len(vals), "ndcg": float(np.mean(vals)) if vals else None}
    return out


def cold_start_videos(batch: EncodedDataset, train_videos: set[str], max_interval: int = 2) -> set[str]:
    """Test videos absent from training whose impressions all sit at small intervals."""
    max_seen: dict[str, int] = {}
    for i in range(len(batch)):
        v = batch.video_ids[i]
        if v in train_videos:
            continue
        max_seen[v] = max(max_seen.get(v, 0), int(batch.interval[i]))
    return {v for v, m in max_seen.items() if m <= max_interval}


def cold_start_eval(
    batch: EncodedDataset,
    scores: np.ndarray,
    train_videos: set[str],
    k_list: list[int],
    max_interval: int = 2,
) -> dict:
    """All four metrics over candidates restricted to cold-start videos."""
    cold = cold_start_videos(batch, train_videos, max_interval)
    groups, _ = build_user_groups(batch, scores)
    restricted: list[UserEvalGroup] = []
    for g in groups:
        ranked = [v for v in g.ranked_videos if v in cold]
        pos = g.positives & set(ranked)
        if not pos:
            continue
        restricted.append(UserEvalGroup(g.user_id, ranked, g.intervals, pos))
    if not restricted:
        return {"videos": len(cold), "users": 0, "metrics": {m: None for m in METRICS}}
    metrics = {m: {k: mean_metric(restricted, m, k) for k in k_list} for m in METRICS}
    return {"videos": len(cold), "users": len(restricted), "metrics": metrics}


# -- case study: prediction score vs release interval ---------------------


def weighted_ols_slope(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Slope of the count-weighted least-squares line through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two points for a slope")
    wsum = w.sum()
    xbar = (w * x).sum() / wsum
    ybar = (w * y).sum() / wsum
    denom = (w * (x - xbar) ** 2).sum()
    if denom == 0.0:
        raise ValueError("degenerate x values in slope fit")
    return float((w * (x - xbar) * (y - ybar)).sum() / denom)


@dataclass
class IntervalCaseStudy:
    rows: list[dict] = dc_field(default_factory=list)   # class, interval, count, mean_score
    slopes: dict[str, float] = dc_field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        import csv as _csv

        with Path(path).open("w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["class", "interval", "count", "mean_score"])
            for r in self.rows:
                writer.writerow([r["class"], r["interval"], r["count"], repr(r["mean_score"])])


def report_prediction_by_interval(
    batch: EncodedDataset,
    scores: np.ndarray,
    video_classes: dict[str, str],
) -> IntervalCaseStudy:
    """Mean prediction per (sensitivity class, interval) with OLS slopes.

    Slopes are fitted per class over (interval, mean score) points,
    weighted by example counts. Videos missing from `video_classes` are
    skipped.
    """
    sums: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    for i in range(len(batch)):
        cls = video_classes.get(batch.video_ids[i])
        if cls is None:
            continue
        key = (cls, int(batch.interval[i]))
        sums[key] = sums.get(key, 0.0) + float(scores[i])
        counts[key] = counts.get(key, 0) + 1
    study = IntervalCaseStudy()
    for cls in sorted({c for c, _ in sums}):
        pts = sorted(a for c, a in sums if c == cls)
        for a in pts:
            study.rows.append(
                {
                    "class": cls,
                    "interval": a,
                    "count": counts[(cls, a)],
                    "mean_score": sums[(cls, a)] / counts[(cls, a)],
                }
            )
        study.slopes[cls] = weighted_ols_slope(
            np.array(pts, dtype=np.float64),
            np.array([sums[(cls, a)] / counts[(cls, a)] for a in pts]),
            np.array([counts[(cls, a)] for a in pts], dtype=np.float64),
        )
    return study


def interval_profile(batch: EncodedDataset, horizon: int) -> list[dict]:
    """Exposure count and positive rate per interval bucket."""
    out = []
    for a in range(horizon):
        mask = batch.interval == a
        n = int(mask.sum())
        rate = float(batch.label[mask].mean()) if n else None
        out.append({"interval": a, "count": n, "positive_rate": rate})
    return out


def write_interval_profile_csv(path: str | Path, profile: list[dict]) -> None:
    import csv as _csv

    with Path(path).open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["interval", "count", "positive_rate"])
        for row in profile:
            rate = "" if row["positive_rate"] is None else repr(row["positive_rate"])
            writer.writerow([row["interval"], row["count"], rate])
