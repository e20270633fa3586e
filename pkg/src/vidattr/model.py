"""Two-channel, per-attribute temporal-attention classifier and its ablations.

Data flow for one tracklet of n frames::

    frames (n, D_c, H_g, W_g)
      -> channel unit: 1x1 conv + ReLU, spatial mean        S (n, D_c)
      -> per group: additive attention, softmax over frames  A (n,)
      -> F = A^T S                                           (D_c,)
      -> per group linear head                               logits (C_g,)

Motion/pose groups read S from their own channel unit and every other group
from the ID-relevant unit. The pooling variants replace A with 1/n.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .schema import AttributeSchema, Channel
from .tensor import Tensor


class Variant(enum.Enum):
    PROPOSED = "proposed"
    SHARED_CHANNEL = "shared"
    TEMPORAL_POOLING = "pool"
    TEMPORAL_POOLING_SEPARATED = "pool-sep"

    @property
    def separated(self) -> bool:
        return self in (Variant.PROPOSED, Variant.TEMPORAL_POOLING_SEPARATED)

    @property
    def uses_attention(self) -> bool:
        return self in (Variant.PROPOSED, Variant.SHARED_CHANNEL)

    @property
    def code(self) -> int:
        return list(Variant).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Variant":
        return list(cls)[code]


# Row labels in the order the ablation table lists them.
VARIANT_LABELS = {
    Variant.TEMPORAL_POOLING: "Temporal Pooling Baseline",
    Variant.TEMPORAL_POOLING_SEPARATED: "Baseline + separated channels",
    Variant.SHARED_CHANNEL: "Baseline + temporal attention",
    Variant.PROPOSED: "Proposed (separated + attention)",
}


@dataclass(frozen=True)
class ModelConfig:
    n: int = 6
    D_c: int = 2048
    d_a: int = 256
    variant: Variant = Variant.PROPOSED

    def __post_init__(self):
        if min(self.n, self.D_c, self.d_a) < 1:
            raise ValueError(f"model dimensions must be positive: {self}")


class ChannelUnit(NamedTuple):
    weight: Tensor  # (D_c, D_c), input channel -> output channel
    bias: Tensor  # (D_c,)


class AttentionModule(NamedTuple):
    proj_w: Tensor  # (D_c, d_a)
    proj_b: Tensor  # (d_a,)
    score_w: Tensor  # (d_a, 1)
    score_b: Tensor  # (1,)


class ClassifierHead(NamedTuple):
    weight: Tensor  # (D_c, C_g)
    bias: Tensor  # (C_g,)


def channel_unit_names(variant: Variant) -> list[str]:
    return ["mp", "id"] if variant.separated else ["shared"]


def unit_for_group(variant: Variant, channel: Channel) -> str:
    if not variant.separated:
        return "shared"
    return "mp" if channel is Channel.MOTION_POSE else "id"


def parameter_shapes(schema: AttributeSchema, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in checkpoint declaration order."""
    D, da = config.D_c, config.d_a
    shapes: dict[str, tuple[int, ...]] = {}
    for unit in channel_unit_names(config.variant):
        shapes[f"channel.{unit}.weight"] = (D, D)
        shapes[f"channel.{unit}.bias"] = (D,)
    for g in schema.groups:
        if config.variant.uses_attention:
            shapes[f"attn.{g.name}.proj_w"] = (D, da)
            shapes[f"attn.{g.name}.proj_b"] = (da,)
            shapes[f"attn.{g.name}.score_w"] = (da, 1)
            shapes[f"attn.{g.name}.score_b"] = (1,)
        shapes[f"head.{g.name}.weight"] = (D, g.num_classes)
        shapes[f"head.{g.name}.bias"] = (g.num_classes,)
    return shapes


@dataclass
class ModelParams:
    schema: AttributeSchema
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelParams":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelParams":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    @property
    def channel_units(self) -> list[str]:
        return channel_unit_names(self.variant)

    @property
    def attention_groups(self) -> list[str]:
        return self.schema.names if self.variant.uses_attention else []


def build_model(
    schema: AttributeSchema,
    config: ModelConfig,
    rng: np.random.Generator | int = 0,
    dtype=np.float32,
) -> ModelParams:
    """Fresh parameters: fan-scaled uniform weights, zero biases."""
    if len(schema) == 0:
        raise ValueError("schema has no groups")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape in parameter_shapes(schema, config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams(schema, config, params)


# --------------------------------------------------------------------------
# building blocks


def channel_reduce(frame_maps: Tensor, unit: ChannelUnit) -> Tensor:
    """(..., n, D_c, H_g, W_g) -> (..., n, D_c): 1x1 conv, ReLU, spatial mean."""
    if frame_maps.ndim < 4:
        raise ShapeError(f"channel_reduce expects (..., n, D_c, H, W), got {frame_maps.shape}")
    lead = frame_maps.shape[:-3]
    D, H, W = frame_maps.shape[-3:]
    if unit.weight.shape[0] != D:
        raise ShapeError(
            f"channel_reduce: features have D_c={D}, unit expects {unit.weight.shape[0]}"
        )
    x = T.reshape(frame_maps, (*lead, D, H * W))
    x = T.swapaxes(x, -1, -2)  # (..., n, HW, D)
    y = T.relu(T.matmul(x, unit.weight) + unit.bias)
    return T.mean(y, axis=-2)


def attention_weights(S: Tensor, module: AttentionModule) -> Tensor:
    """(..., n, D_c) -> (..., n) softmax-normalised frame weights."""
    if S.ndim < 2 or S.shape[-2] == 0:
        raise ShapeError(f"attention_weights needs at least one frame, got {S.shape}")
    hidden = T.tanh(T.matmul(S, module.proj_w) + module.proj_b)
    scores = T.matmul(hidden, module.score_w) + module.score_b
    return T.softmax(T.reshape(scores, S.shape[:-1]), axis=-1)


def attend(A: Tensor, S: Tensor) -> Tensor:
    """F = A^T S for (..., n) weights and (..., n, D_c) frame features."""
    if A.shape != S.shape[:-1]:
        raise ShapeError(f"attend: weights {A.shape} do not match features {S.shape}")
    lead, n = A.shape[:-1], A.shape[-1]
    F = T.matmul(T.reshape(A, (*lead, 1, n)), S)
    return T.reshape(F, (*lead, S.shape[-1]))


def classify(F: Tensor, head: ClassifierHead) -> Tensor:
    if F.shape[-1] != head.weight.shape[0]:
        raise ShapeError(f"classify: feature size {F.shape[-1]} != head input {head.weight.shape[0]}")
    if F.ndim == 1:
        out = T.reshape(T.matmul(T.reshape(F, (1, F.shape[0])), head.weight), (head.weight.shape[1],))
    else:
        out = T.matmul(F, head.weight)
    return out + head.bias


@dataclass
class ForwardOutput:
    logits: dict[str, Tensor]
    attention: dict[str, Tensor]
    features: dict[str, Tensor]  # per channel unit S


def forward(model: ModelParams, frames, tensors: dict[str, Tensor] | None = None) -> ForwardOutput:
    """Run the model on ``(n, D_c, H, W)`` or batched ``(B, n, D_c, H, W)`` frames.

    ``tensors`` lets the caller supply the parameter tensors it wants
    gradients for (see :meth:`ModelParams.tensors`).
    """
    if tensors is None:
        tensors = model.tensors(requires_grad=False)
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=model.dtype))
    if x.ndim not in (4, 5):
        raise ShapeError(f"forward expects (n, D_c, H, W) or (B, n, D_c, H, W), got {x.shape}")
    if x.shape[-3] != model.config.D_c:
        raise ShapeError(f"features have D_c={x.shape[-3]}, model expects {model.config.D_c}")
    n = x.shape[-4]
    if n == 0:
        raise ShapeError("no frames")

    S = {
        unit: channel_reduce(
            x, ChannelUnit(tensors[f"channel.{unit}.weight"], tensors[f"channel.{unit}.bias"])
        )
        for unit in model.channel_units
    }
    uniform = None
    logits, attention = {}, {}
    for g in model.schema.groups:
        s = S[unit_for_group(model.variant, g.channel)]
        if model.variant.uses_attention:
            module = AttentionModule(*(tensors[f"attn.{g.name}.{k}"] for k in AttentionModule._fields))
            A = attention_weights(s, module)
        else:
            if uniform is None:
                uniform = Tensor(np.full(s.shape[:-1], 1.0 / n, dtype=s.dtype))
            A = uniform
        head = ClassifierHead(tensors[f"head.{g.name}.weight"], tensors[f"head.{g.name}.bias"])
        logits[g.name] = classify(attend(A, s), head)
        attention[g.name] = A
    return ForwardOutput(logits, attention, S)
