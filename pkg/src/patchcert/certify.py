"""Occlusion-based patch detection, certification and empirical recovery.

Every occluded prediction zeroes the window's pixels and removes from the
top-k competition all superficial positions whose receptive field touches the
window.  Two facts follow and the certificate rests on them:

* a window that misses the candidate region R(x) cannot change the pruned
  label (all winners and their values are untouched);
* two images that agree outside a window get the same occluded label.

Together with an occluder plan that does not depend on the image, a certified
image attacked anywhere is either labelled correctly or raises an alert.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import ModelSpec
from .sin import SINConfig, backmap_regions, exclusion_grids, pruned_forward_batch
from .windows import Window, filter_windows, generate_windows, plan_windows


@dataclass(frozen=True)
class DefenseConfig:
    patch: int = 2
    r: int = 3
    tau: float = 0.3
    sin: SINConfig = field(default_factory=SINConfig)
    alert_cluster_min: int = 1
    recover: bool = True
    chunk: int = 256

    def __post_init__(self):
        if self.patch < 1 or self.r < 1:
            raise ConfigError("patch and r must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.alert_cluster_min < 1:
            raise ConfigError("alert_cluster_min must be >= 1")

    @property
    def window_side(self) -> int:
        return self.patch + self.r - 1

    def plan(self, model: ModelSpec):
        _, h, w = model.input_shape
        return plan_windows(h, w, self.patch, self.r, float(self.tau))


@dataclass
class OcclusionPredMap:
    base_label: int
    entries: list  # (Window, label)


@dataclass
class Benign:
    label: int
    pred_map: Optional[OcclusionPredMap] = None

    is_alert = False


@dataclass
class Alert:
    suspect_windows: list
    recovered_label: Optional[int] = None
    strong: bool = True  # False for the majority-vote fallback
    pred_map: Optional[OcclusionPredMap] = None

    is_alert = True

    def __post_init__(self):
        if not self.suspect_windows:
            raise ValueError("an alert needs at least one suspect window")


@dataclass
class CertifyResult:
    certified: bool
    failing_window: Optional[Window] = None
    evaluated_count: int = 0
    pruned_label: Optional[int] = None


# ---------------------------------------------------------------------------
# occluded inference
# ---------------------------------------------------------------------------

def _occlude(x: np.ndarray, windows) -> np.ndarray:
    out = x.copy()
    for w in windows:
        rs, cs = w.slices
        out[:, rs, cs] = 0
    return out


def _check_window(model: ModelSpec, window: Window):
    _, h, w = model.input_shape
    if not isinstance(window, Window) or not window.fits(h, w):
        raise ValueError(f"window {window} does not lie inside the {h}x{w} image")


def _exclusion(model: ModelSpec, windows, layer: int) -> np.ndarray:
    if len(windows) == 1:
        return model.cached(("excl", layer, windows[0]),
                            lambda: exclusion_grids(model, windows, layer)[0])
    return exclusion_grids(model, windows, layer).any(axis=0)


def occluded_labels(model: ModelSpec, images, jobs, config: DefenseConfig) -> np.ndarray:
    """Labels for many occluded predictions.

    ``jobs`` is a list of ``(image_index, [windows...])``: the union of the
    windows is zeroed and excluded.  Work is processed in fixed chunks; the
    result for a job never depends on the other jobs.
    """
    layer = config.sin.layer_for(model)
    images = np.asarray(images)
    out = np.empty(len(jobs), dtype=np.int64)
    for start in range(0, len(jobs), config.chunk):
        part = jobs[start:start + config.chunk]
        xs = np.stack([_occlude(images[i], ws) for i, ws in part]).astype(model.dtype, copy=False)
        excl = np.stack([_exclusion(model, ws, layer) for _, ws in part])
        tr, _ = pruned_forward_batch(model, xs, config.sin, excl)
        out[start:start + len(part)] = tr.labels
    return out


def occluded_predict(model: ModelSpec, x, window: Window, config: DefenseConfig) -> int:
    _check_window(model, window)
    return int(occluded_labels(model, np.asarray(x)[None], [(0, [window])], config)[0])


def _base(model: ModelSpec, images, config: DefenseConfig):
    """Unoccluded pruned labels and candidate regions for a batch."""
    layer = config.sin.layer_for(model)
    labels, regions = [], []
    for start in range(0, len(images), config.chunk):
        tr, masks = pruned_forward_batch(model, images[start:start + config.chunk], config.sin)
        labels.append(tr.labels)
        regions.append(backmap_regions(model, masks, layer))
    return np.concatenate(labels), np.concatenate(regions)


def candidate_windows(model: ModelSpec, region: np.ndarray, config: DefenseConfig) -> list:
    return filter_windows(config.plan(model).merged, region)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def _clusters(entries):
    """Connected groups of disagreeing windows that share a label."""
    groups = []
    for label in sorted({l for _, l in entries}):
        wins = [w for w, l in entries if l == label]
        seen = [False] * len(wins)
        for s in range(len(wins)):
            if seen[s]:
                continue
            seen[s] = True
            stack, comp = [s], []
            while stack:
                a = stack.pop()
                comp.append(a)
                for b in range(len(wins)):
                    if not seen[b] and wins[a].touches(wins[b]):
                        seen[b] = True
                        stack.append(b)
            groups.append((label, [wins[i] for i in sorted(comp)]))
    return groups


def _decide(base: int, entries, config: DefenseConfig):
    disagree = [(w, l) for w, l in entries if l != base]
    pred_map = OcclusionPredMap(base, list(entries))
    if not disagree:
        return Benign(base, pred_map)
    groups = [g for g in _clusters(disagree) if len(g[1]) >= config.alert_cluster_min]
    if groups:
        # largest cluster; ties resolved by the earliest window in plan order
        order = {w: i for i, (w, _) in enumerate(entries)}
        _, wins = min(groups, key=lambda g: (-len(g[1]), min(order[w] for w in g[1])))
        return Alert(wins, strong=True, pred_map=pred_map)
    votes = Counter(l for _, l in entries)
    top = max(votes.values())
    majority = min(l for l, c in votes.items() if c == top)
    if majority != base:
        return Alert([w for w, _ in disagree], strong=False, pred_map=pred_map)
    return Benign(base, pred_map)


def detect_batch(model: ModelSpec, images, config: DefenseConfig) -> list:
    images = np.asarray(images, dtype=model.dtype)
    labels, regions = _base(model, images, config)
    cands = [candidate_windows(model, regions[n], config) for n in range(len(images))]
    jobs = [(n, [w]) for n in range(len(images)) for w in cands[n]]
    occ = occluded_labels(model, images, jobs, config)
    outcomes, pos = [], 0
    for n in range(len(images)):
        entries = [(w, int(occ[pos + i])) for i, w in enumerate(cands[n])]
        pos += len(cands[n])
        outcomes.append(_decide(int(labels[n]), entries, config))
    if config.recover:
        alerted = [n for n, o in enumerate(outcomes) if o.is_alert]
        if alerted:
            rec = occluded_labels(model, images, [(n, outcomes[n].suspect_windows) for n in alerted], config)
            for n, lab in zip(alerted, rec):
                outcomes[n].recovered_label = int(lab)
    return outcomes


def detect(model: ModelSpec, x, config: DefenseConfig):
    """Detection for one image: ``Benign(label)`` or ``Alert(suspect_windows, ...)``."""
    return detect_batch(model, np.asarray(x)[None], config)[0]


def recover(model: ModelSpec, x, outcome, config: DefenseConfig) -> int:
    """Pruned label after occluding the union of the alert's suspect windows."""
    if not isinstance(outcome, Alert):
        raise ValueError("recover needs an Alert outcome")
    for w in outcome.suspect_windows:
        _check_window(model, w)
    return int(occluded_labels(model, np.asarray(x)[None], [(0, list(outcome.suspect_windows))], config)[0])


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

def _sweep(model, x, y, windows, config, base_label) -> CertifyResult:
    if base_label != y:
        return CertifyResult(False, None, 0, base_label)
    x = np.asarray(x, dtype=model.dtype)[None]
    done = 0
    for start in range(0, len(windows), config.chunk):
        part = windows[start:start + config.chunk]
        labs = occluded_labels(model, x, [(0, [w]) for w in part], config)
        bad = np.flatnonzero(labs != y)
        if len(bad):
            return CertifyResult(False, part[bad[0]], done + int(bad[0]) + 1, base_label)
        done += len(part)
    return CertifyResult(True, None, done, base_label)


def certify(model: ModelSpec, x, y: int, config: DefenseConfig) -> CertifyResult:
    """True iff the pruned label is ``y`` and every planned window touching R(x) keeps it."""
    labels, regions = _base(model, np.asarray(x, dtype=model.dtype)[None], config)
    return _sweep(model, x, int(y), candidate_windows(model, regions[0], config), config, int(labels[0]))


def certify_oracle(model: ModelSpec, x, y: int, config: DefenseConfig) -> CertifyResult:
    """Exhaustive check over every sliding window: no region filter, no merging."""
    _, h, w = model.input_shape
    labels, _ = _base(model, np.asarray(x, dtype=model.dtype)[None], config)
    return _sweep(model, x, int(y), generate_windows(h, w, config.patch, config.r), config, int(labels[0]))


def certify_batch(model: ModelSpec, images, labels, config: DefenseConfig) -> list:
    """``certify`` for many images with shared batching (no early exit)."""
    images = np.asarray(images, dtype=model.dtype)
    base, regions = _base(model, images, config)
    cands = [candidate_windows(model, regions[n], config) for n in range(len(images))]
    jobs = [(n, [w]) for n in range(len(images)) if base[n] == labels[n] for w in cands[n]]
    occ = occluded_labels(model, images, jobs, config)
    results, pos = [], 0
    for n in range(len(images)):
        if base[n] != labels[n]:
            results.append(CertifyResult(False, None, 0, int(base[n])))
            continue
        labs = occ[pos:pos + len(cands[n])]
        pos += len(cands[n])
        bad = np.flatnonzero(labs != labels[n])
        if len(bad):
            results.append(CertifyResult(False, cands[n][bad[0]], int(bad[0]) + 1, int(base[n])))
        else:
            results.append(CertifyResult(True, None, len(cands[n]), int(base[n])))
    return results
