"""Desk-scale datasets with planted key frames.

Each attribute class owns a template vector. For every tracklet and group a
class is drawn and its template is added, uniformly over the spatial grid,
to ``signal_frames`` randomly chosen frames; everything else is Gaussian
noise. The chosen frames are written to a sidecar so attention can be
scored against them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard

from .data import (
    UNKNOWN,
    LabeledTracklet,
    TrackletFeatures,
    write_annotations,
    write_tracklet_features,
)
from .schema import AttributeGroup, AttributeSchema, Channel, write_schema

DEFAULT_GROUPS = (
    ("motion", "mp", 3),
    ("gender", "id", 2),
    ("top_color", "id", 4),
)


@dataclass
class SyntheticSpec:
    num_train: int = 400
    num_test: int = 100
    num_frames: int = 12
    D_c: int = 64
    H_g: int = 2
    W_g: int = 2
    groups: tuple = DEFAULT_GROUPS  # (name, channel tag, class count)
    signal_frames: int = 1
    noise_sigma: float = 0.5
    template_norm: float = 8.0
    conflict_mode: bool = False
    conflict_strength: float = 0.8
    unknown_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.groups = tuple(tuple(g) for g in self.groups)
        if not 1 <= self.signal_frames <= self.num_frames:
            raise ValueError(
                f"signal_frames={self.signal_frames} must lie in [1, num_frames={self.num_frames}]"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.num_train, self.num_test, self.D_c, self.H_g, self.W_g) < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        return d

    @property
    def schema(self) -> AttributeSchema:
        return AttributeSchema(
            tuple(
                AttributeGroup(name, tuple(f"c{i}" for i in range(k)), Channel(tag))
                for name, tag, k in self.groups
            )
        )


@dataclass
class SyntheticData:
    schema: AttributeSchema
    train: list[LabeledTracklet]
    test: list[LabeledTracklet]
    signal_frames: dict[tuple[str, str], list[int]]
    templates: dict[str, np.ndarray] = field(default_factory=dict)  # group -> (C, D_c)


def _orthogonal_directions(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` mutually orthogonal unit vectors; +-1 patterns when dim is a power of two."""
    if count <= dim and dim & (dim - 1) == 0:
        rows = hadamard(dim).astype(np.float64)[rng.permutation(dim)[:count]]
        return rows * rng.choice([-1.0, 1.0], size=(count, 1)) / np.sqrt(dim)
    if count <= dim:
        q, _ = np.linalg.qr(rng.choice([-1.0, 1.0], size=(dim, count)))
        return q.T
    # more classes than dimensions: random sign vectors, orthogonality impossible
    return rng.choice([-1.0, 1.0], size=(count, dim)) / np.sqrt(dim)


def make_templates(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    schema = spec.schema
    total = schema.total_classes
    dirs = _orthogonal_directions(total, spec.D_c, rng)
    templates, start = {}, 0
    for g in schema.groups:
        templates[g.name] = dirs[start:start + g.num_classes]
        start += g.num_classes
    if spec.conflict_mode:
        # motion/pose templates are pulled onto the negated ID-relevant ones,
        # so both channels' signals live on the same coordinates
        id_dirs = np.concatenate(
            [templates[g.name] for g in schema.groups if g.channel is Channel.ID_RELEVANT]
            or [np.zeros((0, spec.D_c))]
        )
        if len(id_dirs):
            a = spec.conflict_strength
            for g in schema.groups:
                if g.channel is not Channel.MOTION_POSE:
                    continue
                t = templates[g.name]
                partner = id_dirs[np.arange(g.num_classes) % len(id_dirs)]
                mixed = -a * partner + np.sqrt(max(0.0, 1 - a * a)) * t
                templates[g.name] = mixed / np.linalg.norm(mixed, axis=1, keepdims=True)
    return {k: v * spec.template_norm for k, v in templates.items()}


def _make_tracklet(tid, spec, schema, templates, rng):
    F, G = spec.num_frames, len(schema)
    frames = rng.normal(0.0, spec.noise_sigma, size=(F, spec.D_c, spec.H_g, spec.W_g))
    labels = np.array([rng.integers(g.num_classes) for g in schema.groups], dtype=np.int64)
    k = spec.signal_frames
    if G * k <= F:
        perm = rng.permutation(F)
        chosen = [np.sort(perm[i * k:(i + 1) * k]) for i in range(G)]
    else:
        chosen = [np.sort(rng.choice(F, size=k, replace=False)) for _ in range(G)]
    for g, lab, idx in zip(schema.groups, labels, chosen):
        frames[idx] += templates[g.name][lab][None, :, None, None]
    if spec.unknown_rate > 0:
        hide = rng.random(G) < spec.unknown_rate
        labels = np.where(hide, UNKNOWN, labels)
    feats = TrackletFeatures(tid, frames.astype(np.float32))
    sidecar = {(tid, g.name): [int(i) for i in idx] for g, idx in zip(schema.groups, chosen)}
    return LabeledTracklet(feats, labels), sidecar


def generate_tracklets(spec: SyntheticSpec) -> SyntheticData:
    """Build the dataset in memory; identical specs give identical data."""
    schema = spec.schema
    template_seq, data_seq = np.random.SeedSequence(spec.seed).spawn(2)
    templates = make_templates(spec, np.random.default_rng(template_seq))
    rng = np.random.default_rng(data_seq)
    signal: dict[tuple[str, str], list[int]] = {}
    splits = {}
    for split, count in (("train", spec.num_train), ("test", spec.num_test)):
        items = []
        for i in range(count):
            item, side = _make_tracklet(f"{split}_{i:05d}", spec, schema, templates, rng)
            items.append(item)
            signal.update(side)
        splits[split] = items
    return SyntheticData(schema, splits["train"], splits["test"], signal, templates)


def generate(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    """Write schema, annotations, manifests, TFEAT files and the signal sidecar."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    data = generate_tracklets(spec)
    paths = {
        "schema": out_dir / "schema.txt",
        "annotations": out_dir / "annotations.tsv",
        "train_manifest": out_dir / "train_manifest.tsv",
        "test_manifest": out_dir / "test_manifest.tsv",
        "signal_frames": out_dir / "signal_frames.tsv",
        "spec": out_dir / "synth_spec.json",
    }
    write_schema(data.schema, paths["schema"])
    records = {}
    for split, items in (("train", data.train), ("test", data.test)):
        lines = []
        for t in items:
            rel = f"features/{t.tracklet_id}.tfeat"
            write_tracklet_features(out_dir / rel, t.features.frames)
            lines.append(f"{t.tracklet_id}\t{rel}\n")
            records[t.tracklet_id] = t.labels
        paths[f"{split}_manifest"].write_text("".join(lines))
    write_annotations(paths["annotations"], records, data.schema)
    paths["signal_frames"].write_text(
        "".join(
            f"{tid}\t{group}\t{','.join(map(str, idx))}\n"
            for (tid, group), idx in data.signal_frames.items()
        )
    )
    paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def read_signal_frames(path) -> dict[tuple[str, str], list[int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            tid, group, idx = line.split("\t")
            out[(tid, group)] = [int(i) for i in idx.split(",")]
    return out


def attention_hit_rate(predictions, signal_frames: dict[tuple[str, str], list[int]]) -> float:
    """Fraction of tracklet-groups whose top attention frame is a planted one.

    Only frame groups that contain a planted frame are scored; a
    tracklet-group counts once, using the first such frame group.
    """
    hits = total = 0
    for pred in predictions:
        for name, weights in pred.attention.items():
            planted = set(signal_frames[(pred.tracklet_id, name)])
            for gi, frames in enumerate(pred.frame_groups):
                if planted.intersection(int(f) for f in frames):
                    total += 1
                    hits += int(frames[int(np.argmax(weights[gi]))]) in planted
                    break
    return hits / total if total else 0.0
