"""SGD training with optional winner-take-all pruning and occlusion augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalError
from .model import ModelSpec, backward, forward, softmax_xent
from .sin import SINConfig, exclusion_grids, pruned_forward_batch
from .windows import Window

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 32
    seed: int = 0
    winner_rate: Optional[float] = None
    superficial_layer: Optional[int] = None
    occlusion_window: Optional[int] = None  # side of the random occluder, None = off
    occlusion_prob: float = 0.5


def _occlusion_batch(model, xb, side, prob, rng, layer):
    """Zero one random ``side`` x ``side`` window in a random subset of the batch."""
    _, h, w = model.input_shape
    xb = xb.copy()
    excl = np.zeros((len(xb),) + model.shapes()[layer][1:], dtype=bool)
    hit = rng.random(len(xb)) < prob
    tops = rng.integers(0, h - side + 1, size=len(xb))
    lefts = rng.integers(0, w - side + 1, size=len(xb))
    for n in np.flatnonzero(hit):
        win = Window(int(tops[n]), int(lefts[n]), side, side)
        rs, cs = win.slices
        xb[n, :, rs, cs] = 0
        excl[n] = exclusion_grids(model, [win], layer)[0]
    return xb, excl


def train(model: ModelSpec, images, labels, config: TrainConfig) -> ModelSpec:
    """Return a trained copy of ``model``; deterministic for a given seed.

    With ``winner_rate`` set, the superficial layer is pruned per sample and
    only winners pass gradient.  The mask is recomputed for every sample at
    every step.
    """
    model = model.copy()
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    velocity = {(i, name): np.zeros_like(arr) for i, name, arr in model.parameters()}
    sin = None
    if config.winner_rate is not None:
        sin = SINConfig(config.winner_rate, config.superficial_layer)
    layer = model.superficial_layer if config.superficial_layer is None else config.superficial_layer
    lr = model.dtype.type(config.lr)
    mom = model.dtype.type(config.momentum)

    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            xb, yb = images[idx], labels[idx]
            excl = None
            if config.occlusion_window:
                xb, excl = _occlusion_batch(model, xb, config.occlusion_window,
                                            config.occlusion_prob, rng, layer)
            if sin is not None:
                tr, _ = pruned_forward_batch(model, xb, sin, excl, trace=True)
            else:
                tr = forward(model, xb, trace=True)
            loss, dlogits, _ = softmax_xent(tr.logits, yb)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            grads = backward(model, tr, dlogits)
            for i, name, arr in model.parameters():
                v = velocity[(i, name)]
                v *= mom
                v += grads[(i, name)].astype(arr.dtype, copy=False)
                arr -= lr * v
            total += loss * len(idx)
            correct += int((tr.labels == yb).sum())
        log.info("epoch %d loss %.4f acc %.3f", epoch, total / len(images), correct / len(images))
    return model


def accuracy(model: ModelSpec, images, labels, sin: Optional[SINConfig] = None, chunk=256) -> float:
    images = np.asarray(images, dtype=model.dtype)
    hits = 0
    for s in range(0, len(images), chunk):
        xb = images[s:s + chunk]
        tr = pruned_forward_batch(model, xb, sin)[0] if sin is not None else forward(model, xb)
        hits += int((tr.labels == np.asarray(labels[s:s + chunk])).sum())
    return hits / max(len(images), 1)
