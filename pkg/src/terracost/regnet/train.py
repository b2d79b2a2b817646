"""Mini-batch training of the regressor on the summed NRMSE objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from terracost.errors import DivergenceDetected, EmptyDataset, InvalidArg
from terracost.patchex import Dataset, Split
from terracost.regnet.model import Model, ModelSpec, loss_and_backward, nrmse_loss
from terracost.rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArg("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArg("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArg(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - c.beta1) * g if m is None else c.beta1 * m + (1 - c.beta1) * g
            v = (1 - c.beta2) * g * g if v is None else c.beta2 * v + (1 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.value = (p.value.astype(np.float64) - update).astype(p.value.dtype)


class SGD:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.vel: dict = {}

    def step(self, params: dict) -> None:
        c = self.cfg
        for name, p in params.items():
            if p.grad is None:
                continue
            vel = self.vel.get(name, 0.0) * c.momentum + p.grad
            self.vel[name] = vel
            p.value = (p.value.astype(np.float64) - c.learning_rate * vel).astype(p.value.dtype)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg) if cfg.optimizer == "adam" else SGD(cfg)


def evaluate_loss(model: Model, ds: Dataset, idx: np.ndarray) -> float:
    """Mean per-sample NRMSE in inference mode; NaN for an empty selection."""
    if len(idx) == 0:
        return float("nan")
    w_hat, v_hat = model.predict(ds.planes[idx])
    return nrmse_loss(w_hat, v_hat, ds.w_star[idx], ds.v_star[idx], model.max_w, model.max_v)[1]


def train(
    ds: Dataset,
    spec: ModelSpec | None = None,
    cfg: TrainConfig | None = None,
    *,
    train_idx=None,
    test_idx=None,
    init: Model | None = None,
    progress=None,
) -> Model:
    """Fit a model on the Train split (or ``train_idx``).

    Batches are drawn from a fresh seeded permutation each epoch; a final
    batch of a single sample is dropped because batch statistics are
    undefined for it.  Per-epoch train and test losses are stored in
    ``model.meta["history"]``.
    """
    spec = spec or ModelSpec(input_side=ds.s)
    cfg = cfg or TrainConfig()
    train_idx = ds.indices(Split.TRAIN) if train_idx is None else np.asarray(train_idx)
    test_idx = ds.indices(Split.TEST) if test_idx is None else np.asarray(test_idx)
    if len(train_idx) == 0:
        raise EmptyDataset("the training split is empty")
    if spec.input_side != ds.s:
        raise InvalidArg(f"spec expects {spec.input_side}-cell patches, dataset has {ds.s}")

    model = init.copy() if init is not None else Model.initialise(spec, ds.max_w, ds.max_v, cfg.seed)
    opt = make_optimizer(cfg)
    params = model.trainable
    history = []
    for epoch in range(cfg.epochs):
        perm = train_idx[SplitMix64(derive_seed(cfg.seed, "epoch", epoch)).permutation(len(train_idx))]
        total = 0.0
        seen = 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = np.sort(perm[start : start + cfg.batch_size])
            if len(batch) < 2 and len(perm) > 1:
                continue
            loss = loss_and_backward(model, ds.planes[batch], ds.w_star[batch], ds.v_star[batch])
            if not math.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss in epoch {epoch}")
            opt.step(params)
            total += loss
            seen += len(batch)
        train_loss = total / max(seen, 1)
        test_loss = evaluate_loss(model, ds, test_idx)
        history.append({"epoch": epoch, "train_loss": train_loss, "test_loss": test_loss})
        log.info("epoch %d train %.5f test %.5f", epoch, train_loss, test_loss)
        if progress is not None:
            progress(history[-1], model)
    model.zero_grad()
    model.meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "optimizer": cfg.optimizer,
        "history": history,
        "mode": "single-threaded",
    }
    return model
