"""Multi-task loss, the Adam training loop and checkpoint files."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledTracklet, sample_batch
from .errors import DataFormatError, NumericalError, SchemaMismatchError
from .model import ModelConfig, ModelParams, Variant, build_model, forward, parameter_shapes
from .schema import AttributeSchema
from .tensor import AdamState, Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TATR"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII32s")


@dataclass
class TrainConfig:
    K: int = 64
    n: int = 6
    lr: float = 3e-4
    steps: int = 5000
    seed: int = 0
    variant: Variant = Variant.PROPOSED
    d_a: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_weights: dict[str, float] | None = None
    clip_norm: float | None = None
    freeze_attention: bool = False
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        if self.K < 1 or self.n < 1:
            raise ValueError("K and n must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if isinstance(self.variant, str):
            self.variant = Variant(self.variant)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["variant"] = self.variant.value
        return d


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    group_losses: list[dict[str, float]] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    snapshots: list[tuple[int, dict]] = field(default_factory=list)

    def append(self, step: int, loss: float, groups: dict[str, float], elapsed: float) -> None:
        self.steps.append(step)
        self.total_loss.append(loss)
        self.group_losses.append(groups)
        self.wall_time.append(elapsed)

    def record_line(self, i: int) -> str:
        # wall time is kept in memory only so log files stay reproducible
        return json.dumps(
            {"step": self.steps[i], "total_loss": self.total_loss[i], "group_losses": self.group_losses[i]}
        )

    def write(self, path) -> None:
        Path(path).write_text("".join(self.record_line(i) + "\n" for i in range(len(self.steps))))


def multitask_loss(
    logits: dict[str, Tensor],
    labels: np.ndarray,
    mask: np.ndarray | None = None,
    group_weights: dict[str, float] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Batch mean of the per-tracklet sum of group cross-entropies.

    ``labels`` is (B, groups) in the same order as ``logits``; entries with
    ``mask == 0`` (by default: label < 0, i.e. unknown) are skipped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[None]
        logits = {k: T.reshape(v, (1, v.shape[-1])) for k, v in logits.items()}
    mask = labels >= 0 if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("every label in the batch is unknown")
    B = labels.shape[0]
    total = None
    components: dict[str, float] = {}
    for gi, (name, lg) in enumerate(logits.items()):
        known = mask[:, gi]
        if not known.any():
            components[name] = 0.0
            continue
        safe = np.where(known, labels[:, gi], 0)
        ce = T.cross_entropy(lg, safe)
        weight = 1.0 if group_weights is None else group_weights.get(name, 1.0)
        term = T.sum(ce * (known.astype(ce.dtype) / B))
        components[name] = term.item()
        term = term * weight if weight != 1.0 else term
        total = term if total is None else total + term
    return total, components


def loss_and_grads(
    model: ModelParams,
    frames: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray | None = None,
    group_weights: dict[str, float] | None = None,
) -> tuple[float, dict[str, float], dict[str, np.ndarray]]:
    tensors = model.tensors(requires_grad=True)
    with Tape() as tape:
        out = forward(model, frames, tensors)
        loss, comps = multitask_loss(out.logits, labels, mask, group_weights)
    grads = T.backward(tape, loss, tensors.values())
    return loss.item(), comps, dict(zip(tensors, grads))


def _check_finite(loss: float, comps: dict[str, float], step: int) -> None:
    if np.isfinite(loss):
        return
    bad = [g for g, v in comps.items() if not np.isfinite(v)]
    raise NumericalError(f"non-finite loss at step {step}; offending group(s): {', '.join(bad) or 'unknown'}")


def train(
    train_set: Sequence[LabeledTracklet],
    schema: AttributeSchema,
    config: TrainConfig,
    out_dir=None,
    init_model: ModelParams | None = None,
    eval_fn: Callable[[ModelParams], dict] | None = None,
    eval_every: int = 0,
) -> tuple[ModelParams, TrainLog]:
    """Run ``config.steps`` Adam steps on random K x n batches.

    Batch sampling and weight initialisation use independent streams derived
    from ``config.seed``, so variants trained with the same seed see the same
    batches. ``eval_fn`` (if given) is called every ``eval_every`` steps and
    its result stored in ``TrainLog.snapshots``.
    """
    if not train_set:
        raise ValueError("empty training set")
    dtype = np.dtype(config.dtype)
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    if init_model is None:
        D_c = train_set[0].features.dims[0]
        mcfg = ModelConfig(n=config.n, D_c=D_c, d_a=config.d_a, variant=config.variant)
        model = build_model(schema, mcfg, np.random.default_rng(init_seq), dtype=dtype)
    else:
        model = init_model.astype(dtype)
    trainable = model.names()
    if config.freeze_attention and model.variant.uses_attention:
        for name in model.names():
            if name.endswith((".score_w", ".score_b")):
                model.params[name] = np.zeros_like(model.params[name])
        trainable = [n for n in trainable if not n.startswith("attn.")]
    rng = np.random.default_rng(sample_seq)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    tlog = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()

    for step in range(1, config.steps + 1):
        batch = sample_batch(train_set, config.K, config.n, rng)
        loss, comps, grads = loss_and_grads(
            model, batch.features, batch.labels, group_weights=config.group_weights
        )
        _check_finite(loss, comps, step)
        grads = {k: grads[k] for k in trainable}
        if config.clip_norm is not None:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            if norm > config.clip_norm:
                scale = config.clip_norm / norm
                grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
        model.params = T.adam_step(model.params, grads, state)
        tlog.append(step, loss, comps, time.perf_counter() - t0)
        if step % 100 == 0:
            log.debug("step %d loss %.5f", step, loss)
        if eval_fn is not None and eval_every and step % eval_every == 0:
            tlog.snapshots.append((step, eval_fn(model)))
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0 \
                and step != config.steps:
            save_checkpoint(model, out_dir / f"checkpoint_step{step:06d}.tatr")

    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.tatr")
        tlog.write(out_dir / "train_log.jsonl")
    return model, tlog


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(model: ModelParams) -> bytes:
    cfg = model.config
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.variant.code, cfg.n, cfg.D_c, cfg.d_a,
        model.schema.digest(),
    )
    body = b"".join(
        np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
        for name in parameter_shapes(model.schema, cfg)
    )
    return header + body


def save_checkpoint(model: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))


def load_checkpoint(path, schema: AttributeSchema) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError("checkpoint not found", path) from None
    if len(blob) < _CKPT_HEADER.size:
        raise DataFormatError("truncated checkpoint header", path)
    magic, version, vcode, n, D_c, d_a, digest = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", path)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", path)
    if digest != schema.digest():
        raise SchemaMismatchError(
            "schema digest mismatch: checkpoint was trained with a different attribute schema", path
        )
    try:
        variant = Variant.from_code(vcode)
    except IndexError:
        raise DataFormatError(f"unknown variant code {vcode}", path) from None
    cfg = ModelConfig(n=n, D_c=D_c, d_a=d_a, variant=variant)
    shapes = parameter_shapes(schema, cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 4
    body = len(blob) - _CKPT_HEADER.size
    if body != expected:
        raise DataFormatError(f"parameter payload is {body} bytes, expected {expected}", path)
    params = {}
    offset = _CKPT_HEADER.size
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += count * 4
    return ModelParams(schema, cfg, params)
