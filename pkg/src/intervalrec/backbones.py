"""User-video matching backbones: factorization machine and a DeepFM variant.

Both consume every categorical field (user and video ids included) through
per-field embedding tables and produce a raw matching logit per example;
the matching probability is sigmoid(logit). Dense features feed only the
MLP branch of the deep variant - the FM terms are purely categorical.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .dataio import EncodedDataset, FeatureSchema
from .numerics import (
    ComputeTape,
    Node,
    ParamTensor,
    fm_second_order,
    init_affine_weights,
    init_embedding,
)


@dataclass
class BackboneConfig:
    backbone: str = "deepfm"  # "fm" | "deepfm"
    embedding_dim: int = 16
    hidden: tuple[int, ...] = (64, 32)
    dropout: float = 0.3

    def validate(self) -> None:
        if self.backbone not in ("fm", "deepfm"):
            raise ValueError(f"unknown backbone: {self.backbone!r}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0,1): {self.dropout}")


class FMBackbone:
    """Second-order factorization machine over all categorical fields."""

    name = "fm"

    def __init__(self, schema: FeatureSchema, config: BackboneConfig, rng: np.random.Generator):
        self.schema_hash = schema.schema_hash()
        self.config = config
        self.fields = schema.user_fields + schema.video_fields
        d = config.embedding_dim
        self.bias = ParamTensor("fm.bias", np.zeros(1))
        self.first_order = [
            ParamTensor(f"fm.first.{f.name}", init_embedding(rng, (f.size, 1))) for f in self.fields
        ]
        self.embeddings = [
            ParamTensor(f"fm.emb.{f.name}", init_embedding(rng, (f.size, d))) for f in self.fields
        ]

    def parameters(self) -> list[ParamTensor]:
        return [self.bias] + self.first_order + self.embeddings

    def _field_indices(self, batch: EncodedDataset) -> np.ndarray:
        return np.concatenate([batch.user_idx, batch.video_idx], axis=1)

    def _check_batch(self, batch: EncodedDataset) -> None:
        if batch.schema_hash != self.schema_hash:
            raise ValueError("schema hash mismatch between model and batch")

    def field_embedding_nodes(self, tape: ComputeTape, batch: EncodedDataset) -> list[Node]:
        idx = self._field_indices(batch)
        return [tape.embed(table, idx[:, i]) for i, table in enumerate(self.embeddings)]

    def fm_logit(self, tape: ComputeTape, batch: EncodedDataset, emb_nodes: list[Node]) -> Node:
        idx = self._field_indices(batch)
        first = [tape.embed(t, idx[:, i]) for i, t in enumerate(self.first_order)]  # (B,1) each
        first_sum = tape.sum(tape.concat(first, axis=1), axis=1)                    # (B,)
        pairwise = fm_second_order(tape, tape.stack(emb_nodes, axis=1))             # (B,)
        return tape.add_scalar_param(tape.add(first_sum, pairwise), self.bias)

    def forward_logit(self, tape: ComputeTape, batch: EncodedDataset) -> Node:
        self._check_batch(batch)
        return self.fm_logit(tape, batch, self.field_embedding_nodes(tape, batch))


class DeepFMBackbone(FMBackbone):
    """FM plus an MLP over shared field embeddings and dense features.

    logit = fm_logit + mlp_logit; with all MLP weights at zero this
    reduces exactly to the FM.
    """

    name = "deepfm"

    def __init__(self, schema: FeatureSchema, config: BackboneConfig, rng: np.random.Generator):
        super().__init__(schema, config, rng)
        d = config.embedding_dim
        n_dense = len(schema.user_dense) + len(schema.video_dense)
        dims = [len(self.fields) * d + n_dense, *config.hidden, 1]
        self.mlp_weights: list[ParamTensor] = []
        self.mlp_biases: list[ParamTensor] = []
        for i, (f_in, f_out) in enumerate(zip(dims[:-1], dims[1:])):
            self.mlp_weights.append(
                ParamTensor(f"deepfm.mlp.w{i}", init_affine_weights(rng, f_in, f_out))
            )
            self.mlp_biases.append(ParamTensor(f"deepfm.mlp.b{i}", np.zeros(f_out)))

    def parameters(self) -> list[ParamTensor]:
        return super().parameters() + self.mlp_weights + self.mlp_biases

    def forward_logit(self, tape: ComputeTape, batch: EncodedDataset) -> Node:
        self._check_batch(batch)
        emb_nodes = self.field_embedding_nodes(tape, batch)
        fm = self.fm_logit(tape, batch, emb_nodes)

        parts = list(emb_nodes)
        if batch.user_dense.shape[1]:
            parts.append(tape.constant(batch.user_dense))
        if batch.video_dense.shape[1]:
            parts.append(tape.constant(batch.video_dense))
        h = tape.concat(parts, axis=1)
        last = len(self.mlp_weights) - 1
        for i, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            h = tape.affine(h, w, b)
            if i < last:
                h = tape.dropout(tape.relu(h), self.config.dropout)
        mlp = tape.sum(h, axis=1)  # (B,1) -> (B,)
        return tape.add(fm, mlp)


def build_backbone(schema: FeatureSchema, config: BackboneConfig, rng: np.random.Generator):
    config.validate()
    cls = {"fm": FMBackbone, "deepfm": DeepFMBackbone}[config.backbone]
    return cls(schema, config, rng)


def match_forward(model, tape: ComputeTape, batch: EncodedDataset) -> Node:
    """Matching probability node: sigmoid of the backbone logit."""
    return tape.sigmoid(model.forward_logit(tape, batch))
