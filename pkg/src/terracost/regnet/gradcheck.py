"""Central finite-difference check of the analytic gradients."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from terracost.regnet.model import Model, loss_and_backward, nrmse_loss
from terracost.regnet.nn import ReLU, iter_layers


@contextmanager
def frozen_activations(model: Model, planes):
    """Pin every ReLU to the pattern of a training-mode pass on ``planes``.

    Inside the context the network is the linear piece that contains the
    current weights, so finite differences measure the same derivative that
    backpropagation computes, even when a perturbation would flip a unit.
    """
    relus = [layer for layer in iter_layers(model.network) if isinstance(layer, ReLU)]
    for r in relus:
        r.recording = True
    try:
        model.forward_normalized(planes, train=True)
        for r in relus:
            r.frozen, r.recording, r.recorded = r.recorded, False, None
        yield
    finally:
        for r in relus:
            r.frozen = r.recorded = None
            r.recording = False


def batch_loss(model: Model, planes, w_star, v_star) -> float:
    out = model.forward_normalized(planes, train=True)
    return nrmse_loss(out[:, 0] * model.max_w, out[:, 1] * model.max_v, w_star, v_star, model.max_w, model.max_v)[0]


def gradient_check(model: Model, planes, w_star, v_star, eps: float = 1e-4, floor: float = 1e-6):
    """Return ``(max_rel_error, per_tensor_max)`` comparing analytic vs numeric gradients.

    ``model`` should hold float64 weights.  Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    with frozen_activations(model, planes):
        loss_and_backward(model, planes, w_star, v_star)
        analytic = {k: t.grad.copy() for k, t in model.trainable.items()}
        worst = {}
        for name, t in model.trainable.items():
            flat = t.value.reshape(-1)
            a = analytic[name].reshape(-1)
            err = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = batch_loss(model, planes, w_star, v_star)
                flat[i] = orig - eps
                down = batch_loss(model, planes, w_star, v_star)
                flat[i] = orig
                num = (up - down) / (2 * eps)
                err = max(err, abs(a[i] - num) / max(abs(a[i]), abs(num), floor))
            worst[name] = err
    model.zero_grad()
    return max(worst.values()), worst
