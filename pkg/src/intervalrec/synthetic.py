"""Synthetic short-video world with known per-topic recency curves.

Ground truth: every video belongs to a topic with a click-probability
curve over its age a (days since release): decaying (strictly
decreasing), flat (age-independent), or gently rising (saturating at a
cap; classed "insensitive" alongside flat for the two-class case study).
A (user, video) pair's true click probability is
sigmoid(affinity + curve(a)).

Training logs are exposure-biased the way a feed is: each day's
impressions pick videos with weight exp(-a/tau) (fresh first), and - when
fan selection is on - freshly released videos reach users with
above-average affinity for them first, a tilt that fades as the audience
broadens over the first few days. Creator quality also drifts downward
across release cohorts through a creator_score the models can observe.
The test log is exposure-unbiased: uniform over live videos, uniform
users, same label law, so per-interval behavior at test reflects the true
curves rather than the logging policy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .dataio import SECONDS_PER_DAY, ColumnConfig

EPOCH0 = (1_600_000_000 // SECONDS_PER_DAY) * SECONDS_PER_DAY  # day-aligned

SYNTH_COLUMNS = ColumnConfig(
    user_id="user_id",
    video_id="video_id",
    interaction_time="interaction_time",
    release_time="release_time",
    label="click",
    user_categorical=[],
    video_categorical=["topic"],
    user_dense=["user_activity"],
    video_dense=["creator_score", "duration"],
)


@dataclass
class TopicSpec:
    name: str
    kind: str            # "decaying" | "flat" | "rising"
    base: float          # curve value at age 0, in logits
    rate: float = 0.0    # per-day change magnitude
    cap: int = 0         # rising saturates here

    def curve(self, age: np.ndarray) -> np.ndarray:
        age = np.asarray(age, dtype=np.float64)
        if self.kind == "decaying":
            return self.base - self.rate * age
        if self.kind == "flat":
            return np.full_like(age, self.base)
        if self.kind == "rising":
            return self.base + self.rate * np.minimum(age, self.cap)
        raise ValueError(f"unknown topic kind: {self.kind!r}")

    @property
    def sensitivity_class(self) -> str:
        return "sensitive" if self.kind == "decaying" else "insensitive"


def default_topics() -> list[TopicSpec]:
    return [
        TopicSpec("decay_fast", "decaying", base=0.7, rate=0.13),
        TopicSpec("decay_slow", "decaying", base=0.45, rate=0.07),
        TopicSpec("flat", "flat", base=0.0),
        TopicSpec("rising", "rising", base=-0.4, rate=0.035, cap=14),
    ]


@dataclass
class WorldConfig:
    n_users: int = 500
    n_videos: int = 2000
    latent_dim: int = 8
    horizon: int = 30
    train_days: int = 20
    test_days: int = 7
    train_impressions: int = 50_000
    test_impressions: int = 35_000
    exposure_tau: float = 3.0
    affinity_scale: float = 0.8
    creator_effect: float = 2.0   # logit shift per unit of (creator_score - 0.5)
    creator_drift: float = 0.65   # creator-quality decline from first to last release day
    creator_noise: float = 0.12
    fan_selection: float = 0.6       # fan-audience tilt for fresh videos (0 = uniform users)
    selection_plateau_days: int = 2  # fan tilt stays at full strength through this age
    selection_fade_days: int = 8     # ... then fades linearly to zero by this age
    seed: int = 0
    topics: list[TopicSpec] = dc_field(default_factory=default_topics)

    def validate(self) -> None:
        if min(self.n_users, self.n_videos, self.latent_dim, self.train_days, self.test_days) < 1:
            raise ValueError("world dimensions must all be >= 1")
        if self.horizon < self.train_days + self.test_days:
            raise ValueError("horizon must cover train_days + test_days")
        if self.exposure_tau <= 0:
            raise ValueError("exposure_tau must be positive")
        if self.train_impressions < 1 or self.test_impressions < 1:
            raise ValueError("impression counts must be >= 1")
        if not self.topics:
            raise ValueError("need at least one topic")
        if self.fan_selection < 0:
            raise ValueError("fan_selection must be >= 0")
        if not 0 <= self.selection_plateau_days < self.selection_fade_days:
            raise ValueError("need 0 <= selection_plateau_days < selection_fade_days")


class World:
    """Sampled latent state plus ground-truth scoring helpers."""

    def __init__(self, config: WorldConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        n_u, n_v, d = config.n_users, config.n_videos, config.latent_dim
        total_days = config.train_days + config.test_days
        self.user_latent = rng.standard_normal((n_u, d))
        self.video_latent = rng.standard_normal((n_v, d))
        self.video_topic = rng.integers(0, len(config.topics), n_v)
        self.release_day = rng.integers(1, total_days + 1, n_v)
        # Creator quality drifts downward over the release calendar: early
        # cohorts come from established creators, later cohorts from the
        # long-tail influx. This is what makes old videos genuinely better
        # on average, so a matching model acquires a real cohort slope.
        mid = (1 + total_days) / 2.0
        span = max(total_days - 1, 1)
        drift = config.creator_drift * (mid - self.release_day) / span
        noise = config.creator_noise * rng.standard_normal(n_v)
        self.creator_score = np.clip(0.5 + drift + noise, 0.0, 1.0)
        self.duration = rng.uniform(0.0, 1.0, n_v)
        self.user_activity = rng.uniform(0.0, 1.0, n_u)

        dot = (self.user_latent @ self.video_latent.T) / np.sqrt(d)
        self.affinity = config.affinity_scale * dot + config.creator_effect * (self.creator_score - 0.5)
        std = self.affinity.std(axis=0)
        self.affinity_z = (self.affinity - self.affinity.mean(axis=0)) / np.where(std > 0, std, 1.0)

        self.user_ids = np.array([f"u{i:04d}" for i in range(n_u)], dtype=object)
        self.video_ids = np.array([f"v{i:04d}" for i in range(n_v)], dtype=object)

    def curve_at(self, video_idx: np.ndarray, age: np.ndarray) -> np.ndarray:
        out = np.empty(len(video_idx), dtype=np.float64)
        topics = self.video_topic[video_idx]
        for t, spec in enumerate(self.config.topics):
            mask = topics == t
            if mask.any():
                out[mask] = spec.curve(np.asarray(age)[mask])
        return out

    def true_click_prob(self, user_idx: np.ndarray, video_idx: np.ndarray, age: np.ndarray) -> np.ndarray:
        logit = self.affinity[user_idx, video_idx] + self.curve_at(video_idx, age)
        return 1.0 / (1.0 + np.exp(-logit))

    def sensitivity_classes(self) -> dict[str, str]:
        return {
            self.video_ids[v]: self.config.topics[self.video_topic[v]].sensitivity_class
            for v in range(self.config.n_videos)
        }


def generate_world(config: WorldConfig) -> World:
    return World(config, np.random.default_rng(config.seed))


def _per_day(total: int, days: int) -> list[int]:
    base, rem = divmod(total, days)
    return [base + (1 if d < rem else 0) for d in range(days)]


def _selection_fade(age: np.ndarray, plateau_days: int, fade_days: int) -> np.ndarray:
    """Full fan tilt through plateau_days, linear fade to zero by fade_days."""
    return np.clip((fade_days - age) / float(fade_days - plateau_days), 0.0, 1.0)


def _simulate_day(
    world: World,
    rng: np.random.Generator,
    day: int,
    count: int,
    biased: bool,
) -> dict[str, np.ndarray]:
    cfg = world.config
    live = np.flatnonzero(world.release_day <= day)
    age_live = (day - world.release_day[live]).astype(np.float64)
    if biased:
        w = np.exp(-age_live / cfg.exposure_tau)
        videos = live[rng.choice(len(live), size=count, p=w / w.sum())]
    else:
        videos = live[rng.integers(0, len(live), count)]

    ages = (day - world.release_day[videos]).astype(np.int64)
    users = rng.integers(0, cfg.n_users, count)
    if biased and cfg.fan_selection > 0.0:
        # Fresh videos reach their fan base first (subscriptions, push
        # notifications); the audience broadens to everyone as the video
        # ages. Applies to the user draw only, so the exposure law over
        # videos stays exactly exp(-age/tau).
        strength = cfg.fan_selection * _selection_fade(
            ages.astype(np.float64), cfg.selection_plateau_days, cfg.selection_fade_days
        )
        for v in np.unique(videos):
            rows = np.flatnonzero(videos == v)
            s = strength[rows[0]]
            if s <= 0.0:
                continue
            logits = s * world.affinity_z[:, v]
            p = np.exp(logits - logits.max())
            users[rows] = rng.choice(cfg.n_users, size=len(rows), p=p / p.sum())

    prob = world.true_click_prob(users, videos, ages)
    clicks = (rng.random(count) < prob).astype(np.int64)
    offsets = rng.integers(0, SECONDS_PER_DAY, count)
    return {
        "user": users,
        "video": videos,
        "click": clicks,
        "interaction_time": EPOCH0 + (day - 1) * SECONDS_PER_DAY + offsets,
        "release_time": EPOCH0 + (world.release_day[videos] - 1) * SECONDS_PER_DAY,
    }


def simulate_logs(world: World) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Biased train log over train days, unbiased test log over test days."""
    cfg = world.config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    train_parts = []
    for day, n in enumerate(_per_day(cfg.train_impressions, cfg.train_days), start=1):
        train_parts.append(_simulate_day(world, rng, day, n, biased=True))
    test_parts = []
    for offset, n in enumerate(_per_day(cfg.test_impressions, cfg.test_days)):
        day = cfg.train_days + 1 + offset
        test_parts.append(_simulate_day(world, rng, day, n, biased=False))

    def merge(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}

    return merge(train_parts), merge(test_parts)


def rows_to_csv(world: World, rows: dict[str, np.ndarray], path: str | Path) -> None:
    import pandas as pd

    users = rows["user"]
    videos = rows["video"]
    frame = pd.DataFrame(
        {
            "user_id": world.user_ids[users],
            "video_id": world.video_ids[videos],
            "interaction_time": rows["interaction_time"],
            "release_time": rows["release_time"],
            "click": rows["click"],
            "topic": [world.config.topics[t].name for t in world.video_topic[videos]],
            "user_activity": np.round(world.user_activity[users], 6),
            "creator_score": np.round(world.creator_score[videos], 6),
            "duration": np.round(world.duration[videos], 6),
        }
    )
    frame.to_csv(path, index=False)


def write_ground_truth(world: World, path: str | Path) -> None:
    cfg = world.config
    payload = {
        "seed": cfg.seed,
        "config": {**asdict(cfg), "topics": [asdict(t) for t in cfg.topics]},
        "topics": [
            {**asdict(t), "sensitivity_class": t.sensitivity_class} for t in cfg.topics
        ],
        "videos": {
            world.video_ids[v]: {
                "topic": cfg.topics[world.video_topic[v]].name,
                "sensitivity_class": cfg.topics[world.video_topic[v]].sensitivity_class,
                "release_day": int(world.release_day[v]),
                "creator_score": float(world.creator_score[v]),
            }
            for v in range(cfg.n_videos)
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit_dataset(config: WorldConfig, out_dir: str | Path) -> dict:
    """Write train.csv, test.csv, and ground_truth.json; return a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(config)
    train_rows, test_rows = simulate_logs(world)
    rows_to_csv(world, train_rows, out / "train.csv")
    rows_to_csv(world, test_rows, out / "test.csv")
    write_ground_truth(world, out / "ground_truth.json")

    def interval_hist(rows: dict[str, np.ndarray]) -> list[int]:
        ages = (rows["interaction_time"] - rows["release_time"]) // SECONDS_PER_DAY
        ages = np.minimum(ages, config.horizon - 1)
        return np.bincount(ages.astype(np.int64), minlength=config.horizon).tolist()

    return {
        "train_rows": int(len(train_rows["click"])),
        "test_rows": int(len(test_rows["click"])),
        "train_positive_rate": float(train_rows["click"].mean()),
        "test_positive_rate": float(test_rows["click"].mean()),
        "train_interval_histogram": interval_hist(train_rows),
        "test_interval_histogram": interval_hist(test_rows),
        "files": [str(out /
            name) for name in ("train.csv", "test.csv", "ground_truth.json")],
    }


def expected_train_interval_weights(world: World) -> np.ndarray:
    """Closed-form expected interval distribution of the biased train log.

    Accounts for which cohorts are live on each day and the per-day
    impression allocation; used as the oracle for exposure-law checks.
    """
    cfg = world.config
    horizon = cfg.horizon
    weights = np.zeros(horizon)
    counts = _per_day(cfg.train_impressions, cfg.train_days)
    cohort = np.bincount(world.release_day, minlength=cfg.train_days + cfg.test_days + 1)
    for day, n in enumerate(counts, start=1):
        ages = np.arange(day)  # possible ages on this day
        avail = cohort[day - ages]  # videos released on day-age
        w = avail * np.exp(-ages / cfg.exposure_tau)
        z = w.sum()
        if z > 0:
            weights[ages] += n * w / z
    return weights / weights.sum()


def oracle_best_ranking(world: World, user_id: str, candidates: list[tuple[str, int]]) -> list[str]:
    """True-probability ranking of (video_id, interval) pairs; ties by video id."""
    u = int(np.flatnonzero(world.user_ids == user_id)[0])
    scored = []
    for video_id, interval in candidates:
        v = int(np.flatnonzero(world.video_ids == video_id)[0])
        p = float(world.true_click_prob(np.array([u]), np.array([v]), np.array([interval]))[0])
        scored.append((video_id, p))
    return [vid for vid, _ in sorted(scored, key=lambda t: (-t[1], t[0]))]
