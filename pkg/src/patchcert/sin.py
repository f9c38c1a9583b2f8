"""Superficial important neurons: top-k masks, receptive fields, pruned inference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .model import ForwardTrace, LayerGeom, ModelSpec, forward
from .windows import Window


@dataclass(frozen=True)
class SINConfig:
    """Winner rate and superficial layer (``None`` -> the model's default)."""

    winner_rate: float = 0.2
    layer: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.winner_rate <= 1.0:
            raise ConfigError(f"winner_rate must lie in (0, 1], got {self.winner_rate}")

    def layer_for(self, model: ModelSpec) -> int:
        index = model.superficial_layer if self.layer is None else self.layer
        return model.check_superficial(index)


@dataclass
class SINMask:
    grid: np.ndarray  # bool (Hs, Ws)
    winners: list = field(default_factory=list)  # sorted (row, col)

    @classmethod
    def from_grid(cls, grid) -> "SINMask":
        grid = np.asarray(grid, dtype=bool)
        return cls(grid, [tuple(int(v) for v in rc) for rc in np.argwhere(grid)])

    @property
    def count(self) -> int:
        return int(self.grid.sum())


def winner_count(rate: float, positions: int) -> int:
    # guard against 0.2 * 25 == 5.000000000000001
    return max(1, min(positions, math.ceil(rate * positions - 1e-9)))


def channel_sum(trace_or_map, layer: Optional[int] = None) -> np.ndarray:
    """Sum a feature map over its channel axis, channel by channel in order.

    Accepts a ``ForwardTrace`` (with ``layer``) or an array (C,H,W)/(N,C,H,W).
    """
    if isinstance(trace_or_map, ForwardTrace):
        if trace_or_map.outputs is None:
            raise ConfigError("trace has no per-layer outputs")
        fmap = trace_or_map.outputs[layer]
        if fmap.ndim != 4:
            raise ConfigError(f"layer {layer} is not spatial")
        return _channel_sum(fmap)
    fmap = np.asarray(trace_or_map)
    if fmap.ndim == 3:
        return _channel_sum(fmap[None])[0]
    if fmap.ndim != 4:
        raise ConfigError(f"expected a (C,H,W) or (N,C,H,W) map, got {fmap.shape}")
    return _channel_sum(fmap)


def _channel_sum(fmap: np.ndarray) -> np.ndarray:
    acc = fmap[:, 0].copy()
    for c in range(1, fmap.shape[1]):
        acc += fmap[:, c]
    return acc


def topk_masks(maps: np.ndarray, k: int, exclusion: Optional[np.ndarray] = None) -> np.ndarray:
    """Batched winner selection.

    The ``k`` largest entries among non-excluded positions win; ties go to the
    lexicographically smaller coordinate.  With fewer than ``k`` candidates
    every candidate wins.
    """
    n = maps.shape[0]
    flat = maps.reshape(n, -1)
    if exclusion is None:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        masks = np.zeros(flat.shape, dtype=bool)
        np.put_along_axis(masks, order, True, axis=1)
        return masks.reshape(maps.shape)
    excl = np.broadcast_to(exclusion, maps.shape).reshape(n, -1)
    # excluded positions sort after every finite candidate
    key = np.where(excl, np.inf, -flat)
    order = np.argsort(key, axis=1, kind="stable")[:, :k]
    masks = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(masks, order, ~np.take_along_axis(excl, order, axis=1), axis=1)
    return masks.reshape(maps.shape)


def compute_sin_mask(channel_sum_map, winner_rate: float,
                     exclusion: Optional[np.ndarray] = None) -> SINMask:
    cmap = np.asarray(channel_sum_map)
    if not 0.0 < winner_rate <= 1.0:
        raise ConfigError(f"winner_rate must lie in (0, 1], got {winner_rate}")
    k = winner_count(winner_rate, cmap.size)
    excl = None if exclusion is None else as_exclusion_grid(exclusion, cmap.shape)[None]
    return SINMask.from_grid(topk_masks(cmap[None], k, excl)[0])


def as_exclusion_grid(exclusion, shape) -> np.ndarray:
    """Accept a bool grid or an iterable of (row, col) coordinates."""
    if isinstance(exclusion, np.ndarray) and exclusion.dtype == bool:
        return exclusion
    grid = np.zeros(shape, dtype=bool)
    for r, c in exclusion:
        grid[r, c] = True
    return grid


# ---------------------------------------------------------------------------
# receptive fields
# ---------------------------------------------------------------------------

def receptive_field(coord, geoms: Sequence[Optional[LayerGeom]], in_sizes: Sequence[tuple]):
    """Input rectangle feeding position ``coord`` of the last layer in ``geoms``.

    ``geoms[i]`` is the geometry of layer i (``None`` for pointwise layers) and
    ``in_sizes[i]`` the (H, W) of that layer's input.  Each step maps a
    row range [a, b] to [a*s - p, b*s - p + k - 1] and clips it to the layer
    input, so padding and uncovered trailing rows never enter the field.
    Returns ``Window`` with inclusive bounds converted to top/left/height/width.
    """
    r0 = r1 = int(coord[0])
    c0 = c1 = int(coord[1])
    for g, (h, w) in zip(reversed(list(geoms)), reversed(list(in_sizes))):
        if g is None:
            continue
        k, s, p = g.kernel, g.stride, g.padding
        r0, r1 = max(r0 * s - p, 0), min(r1 * s - p + k - 1, h - 1)
        c0, c1 = max(c0 * s - p, 0), min(c1 * s - p + k - 1, w - 1)
    return Window(r0, c0, r1 - r0 + 1, c1 - c0 + 1)


def _geometry(model: ModelSpec, layer: int):
    shapes = model.shapes()
    geoms, sizes = [], []
    for i in range(layer + 1):
        geoms.append(model.layers[i].geom)
        prev = model.input_shape if i == 0 else shapes[i - 1]
        sizes.append(tuple(prev[1:]))
    return geoms, sizes


def rf_table(model: ModelSpec, layer: int) -> np.ndarray:
    """Inclusive receptive-field bounds for every layer position: (Hs, Ws, 4) as r0, c0, r1, c1."""

    def build():
        geoms, sizes = _geometry(model, layer)
        hs, ws = model.shapes()[layer][1:]
        rr, cc = np.meshgrid(np.arange(hs), np.arange(ws), indexing="ij")
        r0, r1, c0, c1 = rr.copy(), rr.copy(), cc.copy(), cc.copy()
        for g, (h, w) in zip(reversed(geoms), reversed(sizes)):
            if g is None:
                continue
            k, s, p = g.kernel, g.stride, g.padding
            r0, r1 = np.maximum(r0 * s - p, 0), np.minimum(r1 * s - p + k - 1, h - 1)
            c0, c1 = np.maximum(c0 * s - p, 0), np.minimum(c1 * s - p + k - 1, w - 1)
        table = np.stack([r0, c0, r1, c1], axis=-1)
        table.setflags(write=False)
        return table

    return model.cached(("rf", layer), build)


def _incidence(n_out: int, n_in: int, g: LayerGeom) -> np.ndarray:
    """(n_out, n_in) bool: output index o reads input index i along one axis."""
    o = np.arange(n_out)[:, None]
    i = np.arange(n_in)[None, :]
    return (i >= o * g.stride - g.padding) & (i <= o * g.stride - g.padding + g.kernel - 1)


def field_sets(model: ModelSpec, layer: int):
    """Exact receptive fields as separable index sets.

    Every kernel footprint is a row interval times a column interval, so the
    field of position (u, v) is ``rows[u] x cols[v]`` with ``rows`` of shape
    (Hs, H) and ``cols`` of shape (Ws, W).  Unlike the bounding boxes of
    ``rf_table`` this keeps the holes left by a stride larger than the kernel.
    """

    def build():
        geoms, sizes = _geometry(model, layer)
        hs, ws = model.shapes()[layer][1:]
        rows, cols = np.eye(hs, dtype=bool), np.eye(ws, dtype=bool)
        for g, (h, w) in zip(reversed(geoms), reversed(sizes)):
            if g is None:
                continue
            rows = (rows.astype(np.int64) @ _incidence(rows.shape[1], h, g)) > 0
            cols = (cols.astype(np.int64) @ _incidence(cols.shape[1], w, g)) > 0
        rows.setflags(write=False)
        cols.setflags(write=False)
        return rows, cols

    return model.cached(("fields", layer), build)


def backmap_region(model: ModelSpec, mask, layer: Optional[int] = None) -> np.ndarray:
    """Union of the receptive fields of all winners, as a bool (H, W) pixel grid."""
    grid = mask.grid if isinstance(mask, SINMask) else np.asarray(mask, dtype=bool)
    layer = model.superficial_layer if layer is None else layer
    return backmap_regions(model, grid[None], layer)[0]


def backmap_regions(model: ModelSpec, grids: np.ndarray, layer: int) -> np.ndarray:
    rows, cols = field_sets(model, layer)
    g = np.asarray(grids, dtype=np.int64)
    return np.einsum("ui,nuv,vj->nij", rows.astype(np.int64), g, cols.astype(np.int64)) > 0


def exclusion_grids(model: ModelSpec, windows: Sequence[Window], layer: int) -> np.ndarray:
    """Layer positions whose receptive field intersects each window: (len(windows), Hs, Ws).

    Purely geometric, never depends on pixel values.
    """
    rows, cols = field_sets(model, layer)
    out = np.zeros((len(windows), rows.shape[0], cols.shape[0]), dtype=bool)
    for n, w in enumerate(windows):
        rs, cs = w.slices
        out[n] = rows[:, rs].any(axis=1)[:, None] & cols[:, cs].any(axis=1)[None, :]
    return out


def exclusion_set(model: ModelSpec, window: Window, layer: Optional[int] = None) -> np.ndarray:
    layer = model.superficial_layer if layer is None else layer
    return exclusion_grids(model, [window], layer)[0]


# ---------------------------------------------------------------------------
# pruned inference
# ---------------------------------------------------------------------------

def pruned_forward_batch(model: ModelSpec, xs, config: SINConfig,
                         exclusions: Optional[np.ndarray] = None, trace: bool = False):
    """Forward pass with winner-take-all pruning at the superficial layer.

    ``exclusions`` is an optional bool array (N, Hs, Ws) (or broadcastable)
    of positions removed from candidacy.  Returns ``(ForwardTrace, masks)``
    with ``masks`` a bool array (N, Hs, Ws).
    """
    layer = config.layer_for(model)
    hs, ws = model.shapes()[layer][1:]
    k = winner_count(config.winner_rate, hs * ws)
    kept = {}

    def gate(fmap):
        excl = None
        if exclusions is not None:
            excl = np.broadcast_to(exclusions, (fmap.shape[0], hs, ws))
        masks = topk_masks(_channel_sum(fmap), k, excl)
        kept["masks"] = masks
        return masks[:, None]

    tr = forward(model, xs, trace=trace, gate=gate, gate_layer=layer)
    return tr, kept["masks"]


def pruned_forward(model: ModelSpec, x, config: SINConfig, exclusion=None, trace: bool = False):
    """Single-image pruned forward pass returning ``(ForwardTrace, SINMask)``."""
    layer = config.layer_for(model)
    excl = None
    if exclusion is not None:
        excl = as_exclusion_grid(exclusion, model.shapes()[layer][1:])[None]
    tr, masks = pruned_forward_batch(model, np.asarray(x)[None], config, excl, trace)
    return tr, SINMask.from_grid(masks[0])
