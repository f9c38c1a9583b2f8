"""Localisation statistics of superficial winners and occlusion stability.

Coordinates are (row, col) on the superficial grid.  A cluster's centre is
the mean of its member points and its deviation is the root mean squared
distance of the members to that centre.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import ModelSpec, forward
from .sin import SINConfig, _channel_sum, rf_table, topk_masks

log = logging.getLogger(__name__)


@dataclass
class ClusterStats:
    centers: np.ndarray      # (K, 2)
    deviations: np.ndarray   # (K,)
    sizes: np.ndarray        # (K,)
    assignment: np.ndarray   # cluster index per input point
    points: np.ndarray = field(repr=False, default=None)

    @property
    def cluster_count(self) -> int:
        return len(self.centers)

    @property
    def max_deviation(self) -> float:
        return float(self.deviations.max())

    @property
    def mean_deviation(self) -> float:
        return float(self.deviations.mean())

    def largest(self) -> int:
        """Index of the biggest cluster; ties go to the earliest cluster."""
        return int(np.argmax(self.sizes))


def deviation(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    c = pts.mean(axis=0)
    return float(np.sqrt(((pts - c) ** 2).sum(axis=1).mean()))


def mean_shift(points, bandwidth: float, tol: float = 1e-3, max_iter: int = 500) -> ClusterStats:
    """Flat-kernel mean shift.

    Every point climbs to the mean of the original points within
    ``bandwidth`` (inclusive) until it moves less than ``tol``.  Modes are then
    taken in input order; a mode within ``bandwidth / 2`` of an earlier
    cluster's mode joins it, otherwise it opens a new cluster.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or not len(pts):
        raise ConfigError(f"mean_shift needs a non-empty (n, 2) point set, got shape {pts.shape}")
    if not bandwidth > 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")
    modes = pts.copy()
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        cur = modes[active]
        d2 = ((cur[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        near = d2 <= bandwidth * bandwidth
        new = (near @ pts) / near.sum(axis=1, keepdims=True)
        moved = np.sqrt(((new - cur) ** 2).sum(axis=1))
        modes[active] = new
        idx = np.flatnonzero(active)
        active[idx[moved < tol]] = False

    reps, assign = [], np.empty(len(pts), dtype=np.int64)
    for i, m in enumerate(modes):
        for k, r in enumerate(reps):
            if np.sqrt(((m - r) ** 2).sum()) <= bandwidth / 2:
                assign[i] = k
                break
        else:
            assign[i] = len(reps)
            reps.append(m)
    k = len(reps)
    centers = np.stack([pts[assign == c].mean(axis=0) for c in range(k)])
    devs = np.array([deviation(pts[assign == c]) for c in range(k)])
    sizes = np.bincount(assign, minlength=k)
    return ClusterStats(centers, devs, sizes, assign, pts)


def default_top_n(hs: int, ws: int) -> int:
    return max(1, int(round(200 * hs * ws / (112 * 112))))


def default_bandwidth(hs: int, ws: int) -> float:
    return 0.1 * min(hs, ws)


def winner_points(model: ModelSpec, images, config: SINConfig, top_n: Optional[int] = None):
    """(N, top_n, 2) coordinates of the strongest superficial positions of the vanilla model."""
    layer = config.layer_for(model)
    hs, ws = model.shapes()[layer][1:]
    top_n = default_top_n(hs, ws) if top_n is None else top_n
    if not 1 <= top_n <= hs * ws:
        raise ConfigError(f"top_n must lie in [1, {hs * ws}], got {top_n}")
    tr = forward(model, images, trace=True)
    cmap = _channel_sum(tr.outputs[layer])
    masks = topk_masks(cmap, top_n)
    return np.stack([np.argwhere(m) for m in masks]), cmap


def sin_stats(model: ModelSpec, image, config: SINConfig, top_n: Optional[int] = None,
              bandwidth: Optional[float] = None) -> ClusterStats:
    layer = config.layer_for(model)
    hs, ws = model.shapes()[layer][1:]
    bandwidth = default_bandwidth(hs, ws) if bandwidth is None else bandwidth
    pts, _ = winner_points(model, np.asarray(image)[None], config, top_n)
    return mean_shift(pts[0], bandwidth)


def cluster_box(model: ModelSpec, stats: ClusterStats, cluster: int, layer: int):
    """Input-space bounding box (r0, c0, r1, c1) of one cluster's receptive fields."""
    table = rf_table(model, layer)
    members = stats.points[stats.assignment == cluster].astype(int)
    rf = table[members[:, 0], members[:, 1]]
    return int(rf[:, 0].min()), int(rf[:, 1].min()), int(rf[:, 2].max()), int(rf[:, 3].max())


def stability_experiment(model: ModelSpec, images, labels, config: SINConfig,
                         patched=None, top_n: Optional[int] = None,
                         bandwidth: Optional[float] = None) -> dict:
    """Occlude the bounding box of the largest winner cluster and re-predict.

    Only benign images the model already classifies correctly enter the
    benign statistics.  ``patched`` (same order as ``images``) adds the patched
    statistics.  Images whose superficial map is identically zero carry no
    localisation signal and are skipped with a counted warning.
    """
    layer = config.layer_for(model)
    hs, ws = model.shapes()[layer][1:]
    bandwidth = default_bandwidth(hs, ws) if bandwidth is None else bandwidth
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels)
    keep = forward(model, images).labels == labels
    rows, out, skipped = [], {}, 0
    sets = [("benign", images[keep], labels[keep], np.flatnonzero(keep))]
    if patched is not None:
        patched = np.asarray(patched, dtype=model.dtype)
        sets.append(("patched", patched[keep], labels[keep], np.flatnonzero(keep)))
    for name, xs, ys, ids in sets:
        if not len(xs):
            out[f"{name}_before"] = out[f"{name}_after"] = float("nan")
            continue
        pts, cmap = winner_points(model, xs, config, top_n)
        pre = forward(model, xs).labels
        occluded, used, counts = [], [], []
        for n in range(len(xs)):
            if not cmap[n].any():
                skipped += 1
                log.warning("image %d (%s): empty superficial map, skipped", ids[n], name)
                continue
            st = mean_shift(pts[n], bandwidth)
            r0, c0, r1, c1 = cluster_box(model, st, st.largest(), layer)
            x = xs[n].copy()
            x[:, r0:r1 + 1, c0:c1 + 1] = 0
            occluded.append(x)
            used.append(n)
            counts.append(st)
        post = forward(model, np.stack(occluded)).labels if occluded else np.zeros(0, int)
        for n, st, q in zip(used, counts, post):
            rows.append({"id": int(ids[n]), "is_patched": int(name == "patched"),
                         "cluster_count": st.cluster_count,
                         "max_s_c": round(st.max_deviation, 6),
                         "mean_s_c": round(st.mean_deviation, 6),
                         "pre_label": int(pre[n]), "post_label": int(q)})
        used = np.asarray(used, dtype=int)
        out[f"{name}_before"] = float(np.mean(pre[used] == ys[used])) if len(used) else float("nan")
        out[f"{name}_after"] = float(np.mean(post == ys[used])) if len(used) else float("nan")
        out[f"{name}_median_clusters"] = float(np.median([s.cluster_count for s in counts])) if counts else float("nan")
    out["benign_drop"] = out["benign_before"] - out["benign_after"]
    if patched is not None:
        out["patched_recovery"] = out["patched_after"] - out["patched_before"]
    out["skipped"] = skipped
    out["rows"] = rows
    return out


ANALYSIS_COLUMNS = ["id", "is_patched", "cluster_count", "max_s_c", "mean_s_c", "pre_label", "post_label"]


def write_rows(path, rows, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=ANALYSIS_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
