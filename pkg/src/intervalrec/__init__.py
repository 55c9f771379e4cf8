"""Release-interval-aware short-video recommendation.

Joint training of a user-video matching backbone and a per-video
recency-sensitivity head, with interval-marginalized inference that
corrects for freshness-biased exposure in logged training data.
"""

__version__ = "0.1.0"

from .dataio import ColumnConfig, FeatureSchema, compute_interval, encode_dataset, ingest_csv
from .inference import FusionConfig, estimate_interval_prior, fuse, infer_policy1, infer_policy2
from .trainer import ModelBundle, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "__version__",
    "ColumnConfig",
    "FeatureSchema",
    "FusionConfig",
    "ModelBundle",
    "TrainConfig",
    "compute_interval",
    "encode_dataset",
    "estimate_interval_prior",
    "fuse",
    "infer_policy1",
    "infer_policy2",
    "ingest_csv",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
