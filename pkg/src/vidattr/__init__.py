"""Temporal-attention pedestrian attribute recognition on precomputed frame features."""
from .data import (
    UNKNOWN,
    Batch,
    LabeledTracklet,
    TrackletFeatures,
    load_dataset,
    load_tracklet_features,
    parse_annotations,
    sample_batch,
    split_eval_groups,
    write_tracklet_features,
)
from .model import ModelConfig, ModelParams, Variant, build_model, forward
from .schema import AttributeGroup, AttributeSchema, Channel, bundled_schema, parse_schema
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "UNKNOWN",
    "AttributeGroup",
    "AttributeSchema",
    "Batch",
    "Channel",
    "LabeledTracklet",
    "ModelConfig",
    "ModelParams",
    "TrackletFeatures",
    "TrainConfig",
    "Variant",
    "build_model",
    "bundled_schema",
    "forward",
    "load_checkpoint",
    "load_dataset",
    "load_tracklet_features",
    "parse_annotations",
    "parse_schema",
    "sample_batch",
    "save_checkpoint",
    "split_eval_groups",
    "train",
    "write_tracklet_features",
]
