"""Tracklet features, annotations and the batch/evaluation frame samplers.

File formats
------------
TFEAT (binary, little-endian)::

    b"TFEA" | u32 version=1 | u32 F | u32 D_c | u32 H_g | u32 W_g
    F*D_c*H_g*W_g float32 values, frame-major then channel-major, row-major grid

Annotations (text): a header ``tracklet_id<TAB>group1<TAB>...`` in schema
order, then one row per tracklet with class names or ``?`` for unknown.

Manifest (text): ``tracklet_id<TAB>relative/path.tfeat`` per line, paths
relative to the manifest's directory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError
from .schema import AttributeSchema

TFEAT_MAGIC = b"TFEA"
TFEAT_VERSION = 1
_TFEAT_HEADER = struct.Struct("<4sIIIII")
UNKNOWN = -1
UNKNOWN_TOKEN = "?"


@dataclass(frozen=True)
class TrackletFeatures:
    tracklet_id: str
    frames: np.ndarray  # (F, D_c, H_g, W_g) float32

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (F>=1, D_c, H_g, W_g), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass(frozen=True)
class LabeledTracklet:
    features: TrackletFeatures
    labels: np.ndarray  # (groups,) int64, UNKNOWN = -1

    @property
    def tracklet_id(self) -> str:
        return self.features.tracklet_id


@dataclass(frozen=True)
class Batch:
    tracklet_indices: np.ndarray  # (K,)
    frame_indices: np.ndarray  # (K, n)
    features: np.ndarray  # (K, n, D_c, H_g, W_g)
    labels: np.ndarray  # (K, groups)

    @property
    def K(self) -> int:
        return self.frame_indices.shape[0]

    @property
    def n(self) -> int:
        return self.frame_indices.shape[1]


# --------------------------------------------------------------------------
# TFEAT


def encode_tfeat(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"expected (F, D_c, H_g, W_g), got shape {frames.shape}")
    header = _TFEAT_HEADER.pack(TFEAT_MAGIC, TFEAT_VERSION, *frames.shape)
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def write_tracklet_features(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_tfeat(frames))


def decode_tfeat(blob: bytes, tracklet_id: str, source="<bytes>") -> TrackletFeatures:
    if len(blob) < _TFEAT_HEADER.size:
        raise DataFormatError("truncated TFEAT header", source)
    magic, version, F, D, H, W = _TFEAT_HEADER.unpack_from(blob)
    if magic != TFEAT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {TFEAT_MAGIC!r}", source)
    if version != TFEAT_VERSION:
        raise DataFormatError(f"unsupported TFEAT version {version}", source)
    if min(F, D, H, W) < 1:
        raise DataFormatError(f"non-positive dimension in header {(F, D, H, W)}", source)
    expected = F * D * H * W * 4
    payload = len(blob) - _TFEAT_HEADER.size
    if payload < expected:
        raise DataFormatError(
            f"truncated payload: header declares F={F} ({expected} bytes), found {payload}",
            source,
        )
    if payload > expected:
        raise DataFormatError(
            f"payload size {payload} does not match declared dims ({expected} bytes)", source
        )
    frames = np.frombuffer(blob, dtype="<f4", offset=_TFEAT_HEADER.size)
    frames = frames.reshape(F, D, H, W).astype(np.float32)
    if not np.isfinite(frames).all():
        raise DataFormatError("non-finite feature values", source)
    return TrackletFeatures(tracklet_id, frames)


def load_tracklet_features(path, tracklet_id: str | None = None) -> TrackletFeatures:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError("feature file not found", path) from None
    return decode_tfeat(blob, tracklet_id or path.stem, source=path)


# --------------------------------------------------------------------------
# annotations and manifests


def parse_annotations(path, schema: AttributeSchema) -> dict[str, np.ndarray]:
    """Read an annotation table into ``{tracklet_id: label index vector}``."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataFormatError("annotation file not found", path) from None
    if not lines:
        raise DataFormatError("empty annotation file", path)
    header = lines[0].split("\t")
    expected = ["tracklet_id", *schema.names]
    if header != expected:
        raise DataFormatError(
            f"header {header} does not match schema order {expected}", path, 1
        )
    records: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(expected):
            raise DataFormatError(
                f"expected {len(expected)} columns, found {len(cols)}", path, lineno
            )
        tid = cols[0]
        if tid in records:
            raise DataFormatError(f"duplicate tracklet_id {tid!r}", path, lineno)
        labels = np.full(len(schema), UNKNOWN, dtype=np.int64)
        for gi, (group, value) in enumerate(zip(schema.groups, cols[1:])):
            if value == UNKNOWN_TOKEN:
                continue
            try:
                labels[gi] = group.index(value)
            except ValueError:
                raise DataFormatError(
                    f"unknown class {value!r} for group {group.name!r}", path, lineno
                ) from None
        records[tid] = labels
    return records


def format_annotations(records: dict[str, np.ndarray], schema: AttributeSchema) -> str:
    out = ["\t".join(["tracklet_id", *schema.names])]
    for tid, labels in records.items():
        cells = [
            UNKNOWN_TOKEN if lab == UNKNOWN else g.classes[lab]
            for g, lab in zip(schema.groups, labels)
        ]
        out.append("\t".join([tid, *cells]))
    return "\n".join(out) + "\n"


def write_annotations(path, records: dict[str, np.ndarray], schema: AttributeSchema) -> None:
    Path(path).write_text(format_annotations(records, schema), encoding="utf-8")


def parse_manifest(path) -> list[tuple[str, Path]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataFormatError("manifest not found", path) from None
    entries = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DataFormatError("expected 'tracklet_id<TAB>path'", path, lineno)
        if cols[0] in seen:
            raise DataFormatError(f"duplicate tracklet_id {cols[0]!r}", path, lineno)
        seen.add(cols[0])
        entries.append((cols[0], path.parent / cols[1]))
    return entries


def load_dataset(manifest_path, annotations, schema: AttributeSchema) -> list[LabeledTracklet]:
    """Load every tracklet listed in a manifest together with its labels.

    ``annotations`` is either a path or an already parsed record dict.
    """
    if not isinstance(annotations, dict):
        annotations = parse_annotations(annotations, schema)
    dataset = []
    dims = None
    for tid, fpath in parse_manifest(manifest_path):
        if tid not in annotations:
            raise DataFormatError(f"no annotation for tracklet {tid!r}", manifest_path)
        feats = load_tracklet_features(fpath, tid)
        if dims is None:
            dims = feats.dims
        elif feats.dims != dims:
            raise DataFormatError(
                f"tracklet {tid!r} has dims {feats.dims}, expected {dims}", fpath
            )
        dataset.append(LabeledTracklet(feats, annotations[tid]))
    if not dataset:
        raise DataFormatError("manifest lists no tracklets", manifest_path)
    return dataset


# --------------------------------------------------------------------------
# samplers


def _sample_frames(num_frames: int, n: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(num_frames, size=n, replace=num_frames < n)
    return np.sort(idx)


def sample_batch(
    dataset: Sequence[LabeledTracklet], K: int, n: int, rng: np.random.Generator
) -> Batch:
    """Draw K tracklets and n frames from each.

    Tracklets are drawn without replacement unless the dataset has fewer
    than K of them; frames likewise unless a tracklet is shorter than n.
    """
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    if K < 1 or n < 1:
        raise ValueError(f"K and n must be >= 1 (got K={K}, n={n})")
    chosen = rng.choice(len(dataset), size=K, replace=len(dataset) < K)
    frame_idx = np.stack(
        [_sample_frames(dataset[i].features.num_frames, n, rng) for i in chosen]
    )
    feats = np.stack(
        [dataset[i].features.frames[fi] for i, fi in zip(chosen, frame_idx)]
    )
    labels = np.stack([dataset[i].labels for i in chosen])
    return Batch(chosen, frame_idx, feats, labels)


def split_eval_groups(tracklet, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Randomly split a tracklet's frames into floor(F/n) groups of n.

    Leftover frames are dropped. A tracklet shorter than n yields a single
    group sampled with replacement.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1 (got {n})")
    num_frames = tracklet if isinstance(tracklet, (int, np.integer)) else _num_frames(tracklet)
    if num_frames < n:
        return [rng.choice(num_frames, size=n, replace=True)]
    perm = rng.permutation(num_frames)
    count = num_frames // n
    return [perm[i * n:(i + 1) * n] for i in range(count)]


def _num_frames(tracklet) -> int:
    if isinstance(tracklet, LabeledTracklet):
        return tracklet.features.num_frames
    return tracklet.num_frames
