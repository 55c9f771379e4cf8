"""CSV ingestion, feature schemas, release-interval computation, and splits.

The on-disk contract is one interaction per row: user id, video id, an
interaction timestamp plus either a release timestamp or a precomputed
interval-in-days column, a binary label, and optional categorical/dense
side features. Vocabularies and dense normalization stats come from the
training split only; index 0 of every vocabulary is reserved for
out-of-vocabulary values seen at inference time.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

SECONDS_PER_DAY = 86_400
SCHEMA_VERSION = 1
OOV_INDEX = 0
_MS_THRESHOLD = 10**11  # epoch seconds are ~2e9; anything bigger is milliseconds


@dataclass
class ColumnConfig:
    """Maps logical roles onto CSV column names.

    Exactly one of `release_time` / `interval` must be set. With
    `interval`, the column holds whole days between release and
    interaction, and a release timestamp is reconstructed from it.
    """

    user_id: str = "user_id"
    video_id: str = "video_id"
    interaction_time: str = "interaction_time"
    release_time: str | None = "release_time"
    interval: str | None = None
    label: str = "label"
    user_categorical: list[str] = dc_field(default_factory=list)
    video_categorical: list[str] = dc_field(default_factory=list)
    user_dense: list[str] = dc_field(default_factory=list)
    video_dense: list[str] = dc_field(default_factory=list)

    def validate(self) -> None:
        if (self.release_time is None) == (self.interval is None):
            raise ValueError("exactly one of release_time / interval must be configured")
        declared = self.declared_columns()
        if len(declared) != len(set(declared)):
            raise ValueError("duplicate column names in column config")

    def declared_columns(self) -> list[str]:
        cols = [self.user_id, self.video_id, self.interaction_time, self.label]
        if self.release_time is not None:
            cols.append(self.release_time)
        if self.interval is not None:
            cols.append(self.interval)
        return cols + self.user_categorical + self.video_categorical + self.user_dense + self.video_dense


# Column preset for the public KuaiRand-Pure/1K logs after joining the
# interaction log with the basic video-features file (upload_dt supplies
# the release date; is_click is the default positive signal).
KUAIRAND_COLUMNS = ColumnConfig(
    user_id="user_id",
    video_id="video_id",
    interaction_time="time_ms",
    release_time="upload_dt",
    label="is_click",
    user_categorical=["user_active_degree"],
    video_categorical=["video_type", "tag"],
    user_dense=[],
    video_dense=["duration_ms"],
)


@dataclass
class InteractionRecord:
    user_id: str
    video_id: str
    interaction_time: int  # epoch seconds
    release_time: int      # epoch seconds
    label: int
    categorical: dict[str, str] = dc_field(default_factory=dict)
    dense: dict[str, float] = dc_field(default_factory=dict)


@dataclass
class IngestSummary:
    rows_read: int = 0
    kept: int = 0
    dropped_negative_interval: int = 0
    dropped_bad_row: int = 0
    time_units: dict[str, str] = dc_field(default_factory=dict)


@dataclass
class IngestResult:
    records: list[InteractionRecord]
    summary: IngestSummary


def compute_interval(interaction_time: int, release_time: int, horizon: int) -> int:
    """Whole days between release and interaction, clamped to horizon-1.

    A negative raw difference is a defect here: ingestion drops such rows
    before they can reach this function.
    """
    diff = int(interaction_time) - int(release_time)
    if diff < 0:
        raise ValueError(f"interaction precedes release by {-diff} seconds")
    return min(diff // SECONDS_PER_DAY, horizon - 1)


def _parse_timestamp(raw: str, units: str) -> int:
    if units == "date":
        text = raw.strip()
        fmt = "%Y-%m-%d %H:%M:%S" if (" " in text or ":" in text) else "%Y-%m-%d"
        dt = datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    value = int(float(raw))
    return value // 1000 if units == "milliseconds" else value


def _detect_time_units(raw: str) -> str:
    text = raw.strip()
    try:
        value = int(float(text))
    except ValueError:
        datetime.strptime(text, "%Y-%m-%d %H:%M:%S" if (" " in text or ":" in text) else "%Y-%m-%d")
        return "date"
    return "milliseconds" if abs(value) > _MS_THRESHOLD else "seconds"


def ingest_csv(path: str | Path, columns: ColumnConfig) -> IngestResult:
    """Read interactions, dropping malformed rows and negative intervals.

    Raises on a missing file, a missing declared column, or an empty
    result set. Per-row problems (unparseable label/timestamp/dense value,
    interaction before release) are dropped and counted in the summary;
    timestamp-unit detection per column is recorded there too.
    """
    columns.validate()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns.declared_columns() if c not in header]
        if missing:
            raise ValueError(f"{path.name} is missing declared column(s): {missing}")
        return _ingest_rows(reader, columns, path.name)


def _ingest_rows(rows, columns: ColumnConfig, source: str) -> IngestResult:
    summary = IngestSummary()
    records: list[InteractionRecord] = []
    for row in rows:
        summary.rows_read += 1
        try:
            record = _parse_row(row, columns, summary)
        except (ValueError, KeyError):
            summary.dropped_bad_row += 1
            continue
        if record.interaction_time < record.release_time:
            summary.dropped_negative_interval += 1
            continue
        records.append(record)
        summary.kept += 1
    if not records:
        raise ValueError(f"{source}: no usable rows after ingestion")
    return IngestResult(records, summary)


def _parse_row(row: dict[str, str], columns: ColumnConfig, summary: IngestSummary) -> InteractionRecord:
    t_col = columns.interaction_time
    if t_col not in summary.time_units:
        summary.time_units[t_col] = _detect_time_units(row[t_col])
    interaction_time = _parse_timestamp(row[t_col], summary.time_units[t_col])

    if columns.release_time is not None:
        r_col = columns.release_time
        if r_col not in summary.time_units:
            summary.time_units[r_col] = _detect_time_units(row[r_col])
        release_time = _parse_timestamp(row[r_col], summary.time_units[r_col])
    else:
        days = int(float(row[columns.interval]))
        release_time = interaction_time - days * SECONDS_PER_DAY

    label_raw = float(row[columns.label])
    if label_raw not in (0.0, 1.0):
        raise ValueError(f"label must be 0/1, got {label_raw}")

    categorical = {c: row[c] for c in columns.user_categorical + columns.video_categorical}
    dense = {c: float(row[c]) for c in columns.user_dense + columns.video_dense}
    if any(not np.isfinite(v) for v in dense.values()):
        raise ValueError("non-finite dense feature")
    return InteractionRecord(
        user_id=row[columns.user_id],
        video_id=row[columns.video_id],
        interaction_time=interaction_time,
        release_time=release_time,
        label=int(label_raw),
        categorical=categorical,
        dense=dense,
    )


def ingest_kuairand(
    log_csv: str | Path,
    video_features_csv: str | Path | None = None,
    columns: ColumnConfig | None = None,
) -> IngestResult:
    """Load a KuaiRand-style log, optionally joining video features.

    The public release keeps `upload_dt` in a separate video-features
    file; when given, it is merged onto the log by video id before
    ingestion runs with the KuaiRand column preset.
    """
    import pandas as pd

    columns = columns or KUAIRAND_COLUMNS
    log = pd.read_csv(log_csv)
    if video_features_csv is not None:
        feats = pd.read_csv(video_features_csv)
        join_cols = [c for c in columns.declared_columns() if c in feats.columns and c not in log.columns]
        log = log.merge(feats[[columns.video_id] + join_cols], on=columns.video_id, how="left")
    missing = [c for c in columns.declared_columns() if c not in log.columns]
    if missing:
        raise ValueError(f"KuaiRand input is missing declared column(s): {missing}")
    rows = log.astype(str).to_dict("records")
    return _ingest_rows(rows, columns, str(log_csv))


# -- schema ---------------------------------------------------------------


@dataclass
class FieldVocab:
    name: str
    mapping: dict[str, int]  # raw value -> index >= 1; 0 is reserved for OOV

    def index_of(self, value: str) -> int:
        return self.mapping.get(value, OOV_INDEX)

    @property
    def size(self) -> int:
        """Table size including the OOV row."""
        return len(self.mapping) + 1


@dataclass
class DenseStat:
    name: str
    minimum: float
    maximum: float

    def normalize(self, value: float) -> float:
        if self.maximum == self.minimum:
            return 0.5
        scaled = (value - self.minimum) / (self.maximum - self.minimum)
        return min(max(scaled, 0.0), 1.0)


@dataclass
class FeatureSchema:
    user_fields: list[FieldVocab]
    video_fields: list[FieldVocab]
    user_dense: list[DenseStat]
    video_dense: list[DenseStat]
    horizon: int
    label_column: str
    version: int = SCHEMA_VERSION

    _hash: str | None = dc_field(default=None, repr=False, compare=False)

    def schema_hash(self) -> str:
        if self._hash is None:
            payload = json.dumps(schema_to_dict(self), sort_keys=True).encode()
            self._hash = hashlib.sha256(payload).hexdigest()
        return self._hash


def build_schema(train_records: list[InteractionRecord], columns: ColumnConfig, horizon: int) -> FeatureSchema:
    """Vocabularies and dense stats from the training split only.

    The id columns are themselves categorical fields (the models' id
    embeddings), listed first on each side.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not train_records:
        raise ValueError("cannot build a schema from zero training records")

    def vocab(name: str, values) -> FieldVocab:
        uniq = sorted(set(values))
        return FieldVocab(name, {v: i + 1 for i, v in enumerate(uniq)})

    user_fields = [vocab(columns.user_id, (r.user_id for r in train_records))]
    for c in columns.user_categorical:
        user_fields.append(vocab(c, (r.categorical[c] for r in train_records)))
    video_fields = [vocab(columns.video_id, (r.video_id for r in train_records))]
    for c in columns.video_categorical:
        video_fields.append(vocab(c, (r.categorical[c] for r in train_records)))

    def stats(names: list[str]) -> list[DenseStat]:
        out = []
        for c in names:
            vals = [r.dense[c] for r in train_records]
            out.append(DenseStat(c, min(vals), max(vals)))
        return out

    return FeatureSchema(
        user_fields=user_fields,
        video_fields=video_fields,
        user_dense=stats(columns.user_dense),
        video_dense=stats(columns.video_dense),
        horizon=horizon,
        label_column=columns.label,
    )


def schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "version": schema.version,
        "horizon": schema.horizon,
        "label_column": schema.label_column,
        "user_fields": [{"name": f.name, "mapping": f.mapping} for f in schema.user_fields],
        "video_fields": [{"name": f.name, "mapping": f.mapping} for f in schema.video_fields],
        "user_dense": [{"name": s.name, "min": s.minimum, "max": s.maximum} for s in schema.user_dense],
        "video_dense": [{"name": s.name, "min": s.minimum, "max": s.maximum} for s in schema.video_dense],
    }


def schema_from_dict(payload: dict) -> FeatureSchema:
    if payload.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version: {payload.get('version')}")
    return FeatureSchema(
        user_fields=[FieldVocab(f["name"], dict(f["mapping"])) for f in payload["user_fields"]],
        video_fields=[FieldVocab(f["name"], dict(f["mapping"])) for f in payload["video_fields"]],
        user_dense=[DenseStat(s["name"], s["min"], s["max"]) for s in payload["user_dense"]],
        video_dense=[DenseStat(s["name"], s["min"], s["max"]) for s in payload["video_dense"]],
        horizon=payload["horizon"],
        label_column=payload["label_column"],
    )


# -- encoding -------------------------------------------------------------


@dataclass
class EncodedExample:
    user_id: str
    video_id: str
    user_indices: np.ndarray   # (n_user_fields,) int64
    video_indices: np.ndarray  # (n_video_fields,) int64
    user_dense: np.ndarray     # (n_user_dense,) float64 in [0,1]
    video_dense: np.ndarray    # (n_video_dense,) float64 in [0,1]
    interval: int
    label: float


def encode(record: InteractionRecord, schema: FeatureSchema) -> EncodedExample:
    """Pure mapping from a record to model-ready arrays; OOV values hit index 0."""

    def side_indices(fields: list[FieldVocab], id_value: str) -> np.ndarray:
        out = np.empty(len(fields), dtype=np.int64)
        out[0] = fields[0].index_of(id_value)
        for i, f in enumerate(fields[1:], start=1):
            out[i] = f.index_of(record.categorical.get(f.name, ""))
        return out

    return EncodedExample(
        user_id=record.user_id,
        video_id=record.video_id,
        user_indices=side_indices(schema.user_fields, record.user_id),
        video_indices=side_indices(schema.video_fields, record.video_id),
        user_dense=np.array([s.normalize(record.dense[s.name]) for s in schema.user_dense]),
        video_dense=np.array([s.normalize(record.dense[s.name]) for s in schema.video_dense]),
        interval=compute_interval(record.interaction_time, record.release_time, schema.horizon),
        label=float(record.label),
    )


class EncodedDataset:
    """Columnar view over encoded examples for fast batched access."""

    def __init__(
        self,
        user_idx: np.ndarray,
        video_idx: np.ndarray,
        user_dense: np.ndarray,
        video_dense: np.ndarray,
        interval: np.ndarray,
        label: np.ndarray,
        user_ids: np.ndarray,
        video_ids: np.ndarray,
        schema_hash: str,
    ):
        self.user_idx = user_idx
        self.video_idx = video_idx
        self.user_dense = user_dense
        self.video_dense = video_dense
        self.interval = interval
        self.label = label
        self.user_ids = user_ids
        self.video_ids = video_ids
        self.schema_hash = schema_hash

    def __len__(self) -> int:
        return self.label.shape[0]

    def take(self, indices: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(
            self.user_idx[indices],
            self.video_idx[indices],
            self.user_dense[indices],
            self.video_dense[indices],
            self.interval[indices],
            self.label[indices],
            self.user_ids[indices],
            self.video_ids[indices],
            self.schema_hash,
        )


def encode_dataset(records: list[InteractionRecord], schema: FeatureSchema) -> EncodedDataset:
    n = len(records)
    examples = [encode(r, schema) for r in records]
    return EncodedDataset(
        user_idx=np.stack([e.user_indices for e in examples]) if n else np.zeros((0, len(schema.user_fields)), np.int64),
        video_idx=np.stack([e.video_indices for e in examples]) if n else np.zeros((0, len(schema.video_fields)), np.int64),
        user_dense=np.array([e.user_dense for e in examples]).reshape(n, len(schema.user_dense)),
        video_dense=np.array([e.video_dense for e in examples]).reshape(n, len(schema.video_dense)),
        interval=np.array([e.interval for e in examples], dtype=np.int64),
        label=np.array([e.label for e in examples], dtype=np.float64),
        user_ids=np.array([e.user_id for e in examples], dtype=object),
        video_ids=np.array([e.video_id for e in examples], dtype=object),
        schema_hash=schema.schema_hash(),
    )


# -- splitting ------------------------------------------------------------


@dataclass
class SplitConfig:
    mode: str = "ratio"  # "ratio" | "by-date"
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0
    train_end_day: int = 0  # by-date boundaries, 1-based day numbers
    val_end_day: int = 0

    def validate(self) -> None:
        if self.mode == "ratio":
            if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ValueError(f"split fractions must be non-negative and sum to 1: {self.fractions}")
        elif self.mode == "by-date":
            if not (1 <= self.train_end_day <= self.val_end_day):
                raise ValueError("by-date split needs 1 <= train_end_day <= val_end_day")
        else:
            raise ValueError(f"unknown split mode: {self.mode!r}")


@dataclass
class RecordSplit:
    train: list[InteractionRecord]
    validation: list[InteractionRecord]
    test: list[InteractionRecord]


def split_records(records: list[InteractionRecord], config: SplitConfig) -> RecordSplit:
    """Deterministic train/validation/test partition of raw records."""
    config.validate()
    if config.mode == "ratio":
        rng = np.random.default_rng(config.seed)
        order = rng.permutation(len(records))
        f1, f2, _ = config.fractions
        i1 = int(len(records) * f1)
        i2 = int(len(records) * (f1 + f2))
        pick = lambda sl: [records[i] for i in order[sl]]
        return RecordSplit(pick(slice(0, i1)), pick(slice(i1, i2)), pick(slice(i2, None)))

    base_day = min(r.interaction_time for r in records) // SECONDS_PER_DAY
    split = RecordSplit([], [], [])
    for r in records:
        day = r.interaction_time // SECONDS_PER_DAY - base_day + 1
        if day <= config.train_end_day:
            split.train.append(r)
        elif day <= config.val_end_day:
            split.validation.append(r)
        else:
            split.test.append(r)
    return split


def write_split_manifest(path: str | Path, config: SplitConfig, split: RecordSplit) -> None:
    manifest = {
        "version": SCHEMA_VERSION,
        "mode": config.mode,
        "fractions": list(config.fractions),
        "seed": config.seed,
        "train_end_day": config.train_end_day,
        "val_end_day": config.val_end_day,
        "counts": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
