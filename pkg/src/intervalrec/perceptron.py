"""Per-video recency-sensitivity model and its smoothed supervision.

The model maps video-side features (id embedding, categorical embeddings,
dense attributes - never anything about the user) to one raw score per
release-interval bucket. Supervision at an observed interval a uses the
window-smoothed score: the mean of the raw scores over [a-N, a+N]
truncated to valid buckets, divided by the actual bucket count, pushed
through a sigmoid into binary cross-entropy against the feedback label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EncodedDataset, FeatureSchema
from .numerics import (
    ComputeTape,
    Node,
    ParamTensor,
    init_affine_weights,
    init_embedding,
)


@dataclass
class RecencyConfig:
    embedding_dim: int = 16
    hidden: int = 64
    dropout: float = 0.3
    # Decoupled weight decay on the video-id embedding only. Per-interval
    # click rates are sparse, and an unpenalized id table memorizes their
    # sampling noise; shrinking it pushes the score vector onto the content
    # features (topic, creator, duration), which generalize across videos.
    id_decay: float = 5.0

    def validate(self) -> None:
        if self.embedding_dim < 1 or self.hidden < 1:
            raise ValueError("embedding_dim and hidden must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0,1): {self.dropout}")
        if self.id_decay < 0:
            raise ValueError(f"id_decay must be >= 0, got {self.id_decay}")


class RecencyPerceptron:
    """Input projection -> one residual block -> per-interval score head."""

    def __init__(self, schema: FeatureSchema, config: RecencyConfig, rng: np.random.Generator):
        config.validate()
        self.schema_hash = schema.schema_hash()
        self.config = config
        self.horizon = schema.horizon
        d, h = config.embedding_dim, config.hidden
        self.fields = schema.video_fields
        self.embeddings = [
            ParamTensor(f"recency.emb.{f.name}", init_embedding(rng, (f.size, d))) for f in self.fields
        ]
        # video_fields[0] is always the id field; the rest are content fields.
        self.embeddings[0].decay = config.id_decay
        in_dim = len(self.fields) * d + len(schema.video_dense)
        self.proj_w = ParamTensor("recency.proj.w", init_affine_weights(rng, in_dim, h))
        self.proj_b = ParamTensor("recency.proj.b", np.zeros(h))
        self.res_w1 = ParamTensor("recency.res.w1", init_affine_weights(rng, h, h))
        self.res_b1 = ParamTensor("recency.res.b1", np.zeros(h))
        self.res_w2 = ParamTensor("recency.res.w2", init_affine_weights(rng, h, h))
        self.res_b2 = ParamTensor("recency.res.b2", np.zeros(h))
        self.head_w = ParamTensor("recency.head.w", init_affine_weights(rng, h, schema.horizon))
        self.head_b = ParamTensor("recency.head.b", np.zeros(schema.horizon))

    def parameters(self) -> list[ParamTensor]:
        return self.embeddings + [
            self.proj_w, self.proj_b,
            self.res_w1, self.res_b1, self.res_w2, self.res_b2,
            self.head_w, self.head_b,
        ]

    def forward_scores(self, tape: ComputeTape, batch: EncodedDataset) -> Node:
        """Raw per-interval scores, shape (batch, horizon). Video-side input only."""
        if batch.schema_hash != self.schema_hash:
            raise ValueError("schema hash mismatch between model and batch")
        parts = [tape.embed(t, batch.video_idx[:, i]) for i, t in enumerate(self.embeddings)]
        if batch.video_dense.shape[1]:
            parts.append(tape.constant(batch.video_dense))
        x = tape.concat(parts, axis=1)
        h = tape.dropout(tape.relu(tape.affine(x, self.proj_w, self.proj_b)), self.config.dropout)
        inner = tape.relu(tape.affine(h, self.res_w1, self.res_b1))
        inner = tape.relu(tape.affine(inner, self.res_w2, self.res_b2))
        h = tape.dropout(tape.add(h, inner), self.config.dropout)
        return tape.affine(h, self.head_w, self.head_b)


# -- window smoothing -----------------------------------------------------


def smoothing_matrix(horizon: int, window: int) -> np.ndarray:
    """S with S[a, j] = 1/|W_a| for j in the truncated window around a.

    Rows sum to 1; window=0 gives the identity. Smoothed scores for a whole
    batch are then raw @ S.T.
    """
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    if 2 * window + 1 > horizon:
        raise ValueError(f"window {window} too wide for horizon {horizon}")
    s = np.zeros((horizon, horizon))
    for a in range(horizon):
        lo, hi = max(0, a - window), min(horizon - 1, a + window)
        s[a, lo : hi + 1] = 1.0 / (hi - lo + 1)
    return s


def window_smooth(scores: np.ndarray, interval: int, window: int) -> float:
    """Smoothed score at one interval; mean over the truncated window."""
    scores = np.asarray(scores, dtype=np.float64)
    horizon = scores.shape[-1]
    if not (0 <= interval < horizon):
        raise ValueError(f"interval {interval} outside [0, {horizon})")
    lo, hi = max(0, interval - window), min(horizon - 1, interval + window)
    return float(scores[lo : hi + 1].mean())


def recency_loss(
    tape: ComputeTape,
    raw_scores: Node,
    intervals: np.ndarray,
    labels: np.ndarray,
    smoothing: np.ndarray,
) -> Node:
    """Mean BCE of sigmoid(smoothed score at the observed interval)."""
    smoothed = tape.matmul_const(raw_scores, smoothing.T)
    at = tape.select_index(smoothed, intervals)
    return tape.mean(tape.bce(tape.sigmoid(at), labels))


# -- optional per-video score cache ---------------------------------------


def save_recency_cache(path: str | Path, schema_hash: str, vectors: dict[str, np.ndarray]) -> None:
    payload = {
        "schema_hash": schema_hash,
        "vectors": {vid: [float(x) for x in vec] for vid, vec in vectors.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_recency_cache(path: str | Path, schema_hash: str) -> dict[str, np.ndarray]:
    """Load cached per-video score vectors; a schema mismatch invalidates the cache."""
    payload = json.loads(Path(path).read_text())
    if payload.get("schema_hash") != schema_hash:
        raise ValueError("recency cache was built for a different schema")
    return {vid: np.asarray(vec, dtype=np.float64) for vid, vec in payload["vectors"].items()}
