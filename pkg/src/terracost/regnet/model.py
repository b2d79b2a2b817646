"""Residual convolutional regressor mapping a patch to (power, velocity)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from terracost.errors import EmptyBatch, InvalidArg, ShapeMismatch
from terracost.regnet.nn import (
    BatchNorm,
    Conv2d,
    Dense,
    GlobalAvgPool,
    ReLU,
    ResidualBlock,
    Sequential,
    Tensor,
)
from terracost.rng import SplitMix64, derive_seed

ALL_LAYERS = (0, 1, 2)  # ortho, class, height
HEIGHT_ONLY = (2,)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    ``channels_per_stage`` lists the width of each stage; every stage holds
    ``blocks_per_stage`` residual blocks and all stages after the first start
    with a stride-2 block.  The 3x3 stem convolution uses ``stem_stride``; the
    default of 2 brings the oversampled 40 x 40 patch back to raster pitch.
    ``input_layers`` selects which patch planes feed the network, so
    ``input_channels == len(input_layers)``.
    """

    input_side: int = 40
    input_layers: tuple = ALL_LAYERS
    stem_channels: int = 16
    stem_stride: int = 2
    channels_per_stage: tuple = (16, 32, 32)
    blocks_per_stage: int = 1
    outputs: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_layers", tuple(int(i) for i in self.input_layers))
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        if not self.input_layers or any(i not in ALL_LAYERS for i in self.input_layers):
            raise InvalidArg("input_layers must be a non-empty subset of (0, 1, 2)")
        if self.num_residual_blocks < 1:
            raise InvalidArg("at least one residual block is required")
        if self.stem_stride < 1:
            raise InvalidArg("stem_stride must be >= 1")
        if self.outputs != 2:
            raise InvalidArg("the regressor has exactly two outputs")

    @property
    def input_channels(self) -> int:
        return len(self.input_layers)

    @property
    def num_residual_blocks(self) -> int:
        return len(self.channels_per_stage) * self.blocks_per_stage

    @classmethod
    def resnet18_like(cls, input_side: int = 40, input_layers=ALL_LAYERS) -> "ModelSpec":
        return cls(input_side, input_layers, 64, 2, (64, 128, 256, 512), 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def build_network(spec: ModelSpec) -> Sequential:
    layers = [
        Conv2d("stem.conv", spec.input_channels, spec.stem_channels, 3, spec.stem_stride, 1),
        BatchNorm("stem.bn", spec.stem_channels),
        ReLU(),
    ]
    cin = spec.stem_channels
    for si, cout in enumerate(spec.channels_per_stage):
        for bi in range(spec.blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            layers.append(ResidualBlock(f"stage{si}.block{bi}", cin, cout, stride))
            cin = cout
    layers += [GlobalAvgPool(), Dense("head", cin, spec.outputs)]
    return Sequential(layers)


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    weights: dict
    max_w: float
    max_v: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # normalizers are persisted as float32; keep them f32-exact so reloads are bit-identical
        self.max_w = float(np.float32(self.max_w))
        self.max_v = float(np.float32(self.max_v))
        if not (self.max_w > 0 and self.max_v > 0):
            raise InvalidArg("normalizers must be positive")
        self.network = build_network(self.spec)

    @classmethod
    def initialise(cls, spec: ModelSpec, max_w: float, max_v: float, seed: int = 0, dtype=np.float32) -> "Model":
        params: dict = {}
        build_network(spec).init(params, SplitMix64(derive_seed(seed, "init")))
        for t in params.values():
            t.value = t.value.astype(dtype)
        return cls(spec, params, max_w, max_v, {"seed": seed})

    def astype(self, dtype) -> "Model":
        weights = {k: Tensor(v.value.astype(dtype), v.trainable) for k, v in self.weights.items()}
        return Model(self.spec, weights, self.max_w, self.max_v, dict(self.meta))

    def copy(self) -> "Model":
        return self.astype(next(iter(self.weights.values())).value.dtype)

    @property
    def trainable(self) -> dict:
        return {k: t for k, t in self.weights.items() if t.trainable}

    def num_parameters(self) -> int:
        return int(sum(t.value.size for t in self.trainable.values()))

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.grad = None

    def _prepare(self, planes) -> np.ndarray:
        planes = np.asarray(planes)
        if planes.ndim == 3:
            planes = planes[None]
        if planes.ndim != 4 or planes.shape[1] != 3 or planes.shape[2:] != (self.spec.input_side,) * 2:
            raise ShapeMismatch(
                f"expected (n, 3, {self.spec.input_side}, {self.spec.input_side}) patches, got {planes.shape}"
            )
        x = planes[:, list(self.spec.input_layers)]
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=np.float64)

    def forward_normalized(self, planes, train: bool = False) -> np.ndarray:
        """Raw head outputs (n, 2) in normalised units."""
        return self.network.forward(self.weights, self._prepare(planes), train)

    def predict(self, planes, batch_size: int = 256):
        """Physical-unit predictions ``(w_hat [W], v_hat [m/s])`` in inference mode."""
        planes = np.asarray(planes)
        if planes.ndim == 3:
            planes = planes[None]
        outs = [self.forward_normalized(planes[i : i + batch_size]) for i in range(0, len(planes), batch_size)]
        out = np.concatenate(outs) if outs else np.zeros((0, 2))
        return out[:, 0] * self.max_w, out[:, 1] * self.max_v


def forward(model: Model, patches):
    """Batch of patches (Patch objects or a plane array) -> (w_hat, v_hat)."""
    if isinstance(patches, (list, tuple)):
        patches = np.stack([getattr(p, "planes", p) for p in patches])
    return model.predict(patches)


def nrmse_loss(w_hat, v_hat, w_star, v_star, max_w: float, max_v: float):
    """Summed per-sample root of normalised squared errors, plus the batch mean.

    Returns ``(total, mean, per_sample)`` with ``alpha = 1/max_w`` and
    ``beta = 1/max_v`` weighting the squared errors in physical units.
    """
    w_hat, v_hat, w_star, v_star = (np.asarray(a, dtype=np.float64) for a in (w_hat, v_hat, w_star, v_star))
    if w_hat.size == 0:
        raise EmptyBatch("loss of an empty batch")
    if not (w_hat.shape == v_hat.shape == w_star.shape == v_star.shape):
        raise ShapeMismatch("predictions and truths differ in length")
    if not (max_w > 0 and max_v > 0):
        raise InvalidArg("normalizers must be positive")
    per = np.sqrt((w_hat - w_star) ** 2 / max_w + (v_hat - v_star) ** 2 / max_v)
    return float(per.sum()), float(per.mean()), per


def nrmse_grad(w_hat, v_hat, w_star, v_star, max_w: float, max_v: float) -> np.ndarray:
    """d(total loss)/d(normalised head outputs), shape (n, 2); zero where the radicand is zero."""
    ew = w_hat - w_star
    ev = v_hat - v_star
    per = np.sqrt(ew**2 / max_w + ev**2 / max_v)
    safe = np.where(per > 0, per, 1.0)
    gw = np.where(per > 0, (ew / max_w) / safe, 0.0) * max_w
    gv = np.where(per > 0, (ev / max_v) / safe, 0.0) * max_v
    return np.stack([gw, gv], axis=1)


def loss_and_backward(model: Model, planes, w_star, v_star) -> float:
    """Training-mode forward, summed loss, and gradients into ``model.weights``."""
    model.zero_grad()
    out = model.forward_normalized(planes, train=True)
    w_hat = out[:, 0] * model.max_w
    v_hat = out[:, 1] * model.max_v
    total, _, _ = nrmse_loss(w_hat, v_hat, w_star, v_star, model.max_w, model.max_v)
    g = nrmse_grad(w_hat, v_hat, np.asarray(w_star, float), np.asarray(v_star, float), model.max_w, model.max_v)
    model.network.backward(model.weights, g)
    return total


def backward(model: Model, planes, truths) -> dict:
    """Gradients of the batch loss w.r.t. every trainable tensor."""
    w_star, v_star = truths
    loss_and_backward(model, planes, w_star, v_star)
    return {k: t.grad for k, t in model.trainable.items()}
