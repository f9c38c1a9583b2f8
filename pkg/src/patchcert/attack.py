"""Targeted adversarial patches, optionally penalised for first-layer activation.

The objective maximised over the shared patch values is::

    J = mean_n log p(y_p | x'_n) - alpha * mean_n sum_{o, (u, v) in F_n} z0[n, o, u, v]

where ``z0`` is the first convolution's pre-activation output and ``F_n``
the first-layer positions whose receptive field touches the patch rectangle
of image n.  ``alpha = 0`` is plain targeted patch optimisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .model import ModelSpec, backward, conv_backward, forward, softmax_xent
from .sin import SINConfig, exclusion_grids, pruned_forward_batch
from .windows import Window

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    target_label: int = 0
    steps: int = 100
    step_size: float = 0.05
    patch: int = 4
    alpha: float = 0.0
    location: Optional[tuple] = None  # fixed (top, left); None = random per image
    seed: int = 0
    prune: Optional[SINConfig] = None  # attack the pruned model instead of the vanilla one

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.patch < 1 or self.step_size <= 0:
            raise ConfigError("patch must be >= 1 and step_size > 0")


def apply_patch(x, patch, loc) -> np.ndarray:
    """Paste ``patch`` (C, p, p) into image ``x`` (C, H, W) with its top-left at ``loc``."""
    x = np.asarray(x)
    patch = np.asarray(patch)
    top, left = int(loc[0]), int(loc[1])
    ph, pw = patch.shape[-2:]
    if top < 0 or left < 0 or top + ph > x.shape[-2] or left + pw > x.shape[-1]:
        raise ValueError(f"patch {ph}x{pw} at {loc} leaves the {x.shape[-2]}x{x.shape[-1]} image")
    out = x.copy()
    out[..., top:top + ph, left:left + pw] = patch
    return out


def patch_locations(n: int, shape, config: AttackConfig) -> np.ndarray:
    """One (top, left) per image: the fixed location or seeded uniform draws."""
    _, h, w = shape
    p = config.patch
    if p > min(h, w):
        raise ConfigError(f"patch {p} larger than image {h}x{w}")
    if config.location is not None:
        apply_patch(np.zeros(shape), np.zeros((shape[0], p, p)), config.location)
        return np.tile(np.asarray(config.location, dtype=np.int64), (n, 1))
    rng = np.random.default_rng(config.seed)
    return np.stack([rng.integers(0, h - p + 1, size=n), rng.integers(0, w - p + 1, size=n)], axis=1)


def _paste(images, patch, locs):
    out = images.copy()
    p = patch.shape[-1]
    for n, (t, l) in enumerate(locs):
        out[n, :, t:t + p, l:l + p] = patch
    return out


def _footprints(model: ModelSpec, locs, p):
    return exclusion_grids(model, [Window(int(t), int(l), p, p) for t, l in locs], 0)


def _objective(model, xs, foot, config):
    """Objective value and its gradient with respect to the attacked images."""
    if config.prune is not None:
        tr, _ = pruned_forward_batch(model, xs, config.prune, trace=True)
    else:
        tr = forward(model, xs, trace=True)
    n = len(xs)
    target = np.full(n, config.target_label)
    loss, dlogits, _ = softmax_xent(tr.logits, target)
    # ascend log p(target): negate the cross-entropy gradient
    g = backward(model, tr, -dlogits).input
    value = -loss
    if config.alpha:
        z0 = tr.outputs[0]
        f = foot[:, None].astype(z0.dtype)
        value -= config.alpha * float((z0 * f).sum()) / n
        first = model.layers[0]
        gz = np.broadcast_to(f, z0.shape) * z0.dtype.type(config.alpha / n)
        g = g - conv_backward(tr.input, first.weight, first.geom, gz)[2]
    if not np.isfinite(value):
        raise NumericalError("non-finite attack objective")
    return value, g


def optimize_patch(model: ModelSpec, images, config: AttackConfig, init=None):
    """Sign-gradient ascent on one patch shared across ``images``.

    A step that lowers the objective is rejected and the step size halved,
    so the recorded trace never decreases.  Returns ``(patch, trace)``.
    """
    images = np.asarray(images, dtype=model.dtype)
    if not len(images):
        raise ConfigError("optimize_patch needs at least one image")
    c = model.input_shape[0]
    p = config.patch
    patch = np.full((c, p, p), 0.5, dtype=model.dtype) if init is None else np.array(init, dtype=model.dtype)
    locs = patch_locations(len(images), model.input_shape, config)
    foot = _footprints(model, locs, p) if config.alpha else None
    step = config.step_size
    value, grad = _objective(model, _paste(images, patch, locs), foot, config)
    trace = [value]
    for it in range(config.steps):
        g = np.zeros_like(patch)
        for n, (t, l) in enumerate(locs):
            g += grad[n, :, t:t + p, l:l + p]
        cand = np.clip(patch + step * np.sign(g), 0.0, 1.0).astype(model.dtype)
        v, gr = _objective(model, _paste(images, cand, locs), foot, config)
        if v >= value:
            patch, value, grad = cand, v, gr
        else:
            step *= 0.5
        trace.append(value)
        if it % 50 == 0:
            log.debug("step %d objective %.4f step size %.4g", it, value, step)
    return patch, np.asarray(trace)


def patch_energy(model: ModelSpec, images, locs, p: int) -> float:
    """Mean channel-summed post-ReLU first-layer activation over the patch footprint."""
    images = np.asarray(images, dtype=model.dtype)
    tr = forward(model, images, trace=True)
    act = np.maximum(tr.outputs[0], 0).sum(axis=1)
    foot = _footprints(model, locs, p)
    return float((act * foot).sum() / foot.sum())


def evaluate_attack(model: ModelSpec, images, labels, patch, config: AttackConfig,
                    defense=None) -> dict:
    """Attack success and, with ``defense``, detection rate.

    success_rate: fraction of patched images classified as the target by the
    attacked model (vanilla, or pruned when ``config.prune`` is set).
    detection_rate: over patched images, fraction whose alert names a suspect
    window overlapping the patch; with benign images counted as detected when
    they are not alerted.  ``energy`` is the mean patch-region activation.
    """
    from .certify import detect_batch

    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels)
    locs = patch_locations(len(images), model.input_shape, config)
    patched = _paste(images, np.asarray(patch, dtype=model.dtype), locs)
    if config.prune is not None:
        pred = pruned_forward_batch(model, patched, config.prune)[0].labels
    else:
        pred = forward(model, patched).labels
    out = {
        "success_rate": float(np.mean(pred == config.target_label)),
        "attacked_acc": float(np.mean(pred == labels)),
        "energy": patch_energy(model, patched, locs, config.patch),
    }
    if defense is not None:
        p = config.patch
        hits = 0
        for o, (t, l) in zip(detect_batch(model, patched, defense), locs):
            rect = Window(int(t), int(l), p, p)
            hits += bool(o.is_alert and any(w.intersects(rect) for w in o.suspect_windows))
        benign_ok = sum(not o.is_alert for o in detect_batch(model, images, defense))
        out["detection_rate"] = (hits + benign_ok) / (2 * len(images))
        out["patched_detection_rate"] = hits / len(images)
    return out
