"""Group-averaged test predictions, accuracy/F1 reports and attention dumps."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import UNKNOWN, LabeledTracklet, TrackletFeatures, split_eval_groups
from .model import VARIANT_LABELS, ModelParams, Variant, forward
from .schema import AttributeSchema
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_ORDER = (
    Variant.TEMPORAL_POOLING,
    Variant.TEMPORAL_POOLING_SEPARATED,
    Variant.SHARED_CHANNEL,
    Variant.PROPOSED,
)


@dataclass
class TrackletPrediction:
    tracklet_id: str
    probabilities: dict[str, np.ndarray]
    predicted: dict[str, int]
    frame_groups: list[np.ndarray] = field(default_factory=list)
    attention: dict[str, np.ndarray] = field(default_factory=dict)  # (groups, n) per attribute


def _features(tracklet) -> TrackletFeatures:
    return tracklet.features if isinstance(tracklet, LabeledTracklet) else tracklet


def predict_tracklet(
    model: ModelParams, tracklet, n: int, rng: np.random.Generator
) -> TrackletPrediction:
    """Average the softmax outputs over floor(F/n) random frame groups."""
    feats = _features(tracklet)
    groups = split_eval_groups(feats.num_frames, n, rng)
    batch = np.stack([feats.frames[g] for g in groups])
    out = forward(model, batch)
    probs, predicted, attention = {}, {}, {}
    for name, logits in out.logits.items():
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        avg = p.mean(axis=0)
        probs[name] = avg
        predicted[name] = int(np.argmax(avg))  # first maximum wins ties
        attention[name] = np.asarray(out.attention[name].data, dtype=np.float64)
    return TrackletPrediction(feats.tracklet_id, probs, predicted, groups, attention)


def predict_dataset(
    model: ModelParams,
    tracklets: Sequence,
    n: int,
    seed: int = 0,
    threads: int = 1,
) -> list[TrackletPrediction]:
    """Predict every tracklet; tracklet i uses its own stream seeded by (seed, i)."""

    def one(i):
        return predict_tracklet(model, tracklets[i], n, np.random.default_rng([seed, i]))

    if threads <= 1:
        return [one(i) for i in range(len(tracklets))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(tracklets))))


# --------------------------------------------------------------------------
# metrics


def macro_f1(confusion: np.ndarray) -> float:
    """Mean per-class F1 over classes seen in the labels or the predictions.

    ``confusion[t, p]`` counts samples of true class t predicted as p.
    """
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    present = (support + predicted) > 0
    if not present.any():
        return 0.0
    denom = support + predicted
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1[present].mean())


@dataclass
class GroupMetrics:
    name: str
    confusion: np.ndarray
    accuracy: float
    f1: float

    @property
    def n_eval(self) -> int:
        return int(self.confusion.sum())


@dataclass
class MetricsReport:
    groups: list[GroupMetrics]

    @property
    def evaluated(self) -> list[GroupMetrics]:
        return [g for g in self.groups if g.n_eval > 0]

    @property
    def excluded(self) -> list[str]:
        return [g.name for g in self.groups if g.n_eval == 0]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([g.accuracy for g in self.evaluated]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([g.f1 for g in self.evaluated]))

    def group(self, name: str) -> GroupMetrics:
        return next(g for g in self.groups if g.name == name)

    def to_text(self) -> str:
        lines = []
        for g in self.groups:
            if g.n_eval == 0:
                lines.append(f"{g.name}\tn/a\tn/a\t0")
            else:
                lines.append(f"{g.name}\t{100 * g.accuracy:.2f}\t{100 * g.f1:.2f}\t{g.n_eval}")
        total = sum(g.n_eval for g in self.groups)
        lines.append(f"average\t{100 * self.mean_accuracy:.2f}\t{100 * self.mean_f1:.2f}\t{total}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def compute_metrics(
    predictions: Sequence[TrackletPrediction],
    labels,
    schema: AttributeSchema,
) -> MetricsReport:
    """Per-group accuracy and macro F1; unknown labels are skipped.

    ``labels`` maps tracklet_id to a label vector, or is a sequence of
    :class:`LabeledTracklet`.
    """
    if not isinstance(labels, dict):
        labels = {t.tracklet_id: t.labels for t in labels}
    confusions = [np.zeros((g.num_classes, g.num_classes), dtype=np.int64) for g in schema.groups]
    for pred in predictions:
        truth = labels[pred.tracklet_id]
        for gi, g in enumerate(schema.groups):
            if truth[gi] == UNKNOWN:
                continue
            confusions[gi][truth[gi], pred.predicted[g.name]] += 1
    groups = []
    for g, cm in zip(schema.groups, confusions):
        total = cm.sum()
        acc = float(np.trace(cm) / total) if total else 0.0
        groups.append(GroupMetrics(g.name, cm, acc, macro_f1(cm) if total else 0.0))
    report = MetricsReport(groups)
    if not report.evaluated:
        raise ValueError("no group has any evaluated sample")
    if report.excluded:
        log.warning("groups with no known labels excluded from averages: %s", ", ".join(report.excluded))
    return report


# --------------------------------------------------------------------------
# attention dump


def attention_rows(predictions: Sequence[TrackletPrediction]) -> list[str]:
    rows = []
    for pred in predictions:
        for name, weights in pred.attention.items():
            for gi, frames in enumerate(pred.frame_groups):
                w = ",".join(f"{x:.6f}" for x in weights[gi])
                idx = ",".join(str(int(f)) for f in frames)
                rows.append(f"{pred.tracklet_id}\t{name}\t{w}\t{idx}")
    return rows


def attention_report(
    model: ModelParams,
    tracklets: Sequence,
    output_path,
    n: int | None = None,
    seed: int = 0,
    predictions: Sequence[TrackletPrediction] | None = None,
) -> list[str]:
    """Write one line per tracklet, attribute and frame group with its weights."""
    n = n or model.config.n
    if predictions is None:
        predictions = predict_dataset(model, tracklets, n, seed)
    rows = attention_rows(predictions)
    text = "".join(r + "\n" for r in rows)
    if not model.variant.uses_attention:
        notice = f"# notice: variant {model.variant.value} has no attention; weights are uniform"
        warnings.warn(notice[2:], stacklevel=2)
        text = notice + "\n" + text
    Path(output_path).write_text(text)
    return rows


# --------------------------------------------------------------------------
# ablation


def ablate(
    train_set: Sequence[LabeledTracklet],
    test_set: Sequence[LabeledTracklet],
    schema: AttributeSchema,
    config: TrainConfig,
    eval_seed: int | None = None,
    out_dir=None,
    threads: int = 1,
) -> dict[Variant, MetricsReport]:
    """Train and evaluate the four variants on identical batches and test splits."""
    eval_seed = config.seed if eval_seed is None else eval_seed
    reports = {}
    for variant in ABLATION_ORDER:
        sub_dir = None
        if out_dir is not None:
            sub_dir = Path(out_dir) / variant.value
            sub_dir.mkdir(parents=True, exist_ok=True)
        model, _ = train(train_set, schema, replace(config, variant=variant), out_dir=sub_dir)
        preds = predict_dataset(model, test_set, config.n, eval_seed, threads)
        reports[variant] = compute_metrics(preds, test_set, schema)
        if sub_dir is not None:
            reports[variant].write(sub_dir / "metrics.tsv")
        log.info("%s: acc %.4f f1 %.4f", variant.value, reports[variant].mean_accuracy, reports[variant].mean_f1)
    return reports


def format_ablation_table(reports: dict[Variant, MetricsReport]) -> str:
    lines = ["model\tvariant\taver. acc\taver. F1"]
    for variant in ABLATION_ORDER:
        if variant in reports:
            r = reports[variant]
            lines.append(
                f"{VARIANT_LABELS[variant]}\t{variant.value}\t{100 * r.mean_accuracy:.2f}\t{100 * r.mean_f1:.2f}"
            )
    return "\n".join(lines) + "\n"
