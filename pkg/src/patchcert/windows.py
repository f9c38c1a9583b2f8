"""Occluding windows: sliding generation, region filtering and overlap merging."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, order=True)
class Window:
    """Axis-aligned pixel rectangle; sliding windows are square, merged ones need not be."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"degenerate window {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"window {self} starts outside the image")

    @property
    def bottom(self) -> int:
        return self.top + self.height - 1

    @property
    def right(self) -> int:
        return self.left + self.width - 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def fits(self, h: int, w: int) -> bool:
        return self.bottom < h and self.right < w

    def contains(self, other: "Window") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def intersection(self, other: "Window") -> int:
        dh = min(self.bottom, other.bottom) - max(self.top, other.top) + 1
        dw = min(self.right, other.right) - max(self.left, other.left) + 1
        return max(dh, 0) * max(dw, 0)

    def intersects(self, other: "Window") -> bool:
        return self.intersection(other) > 0

    def touches(self, other: "Window") -> bool:
        """Overlapping or edge/corner adjacent."""
        return (self.top <= other.bottom + 1 and other.top <= self.bottom + 1
                and self.left <= other.right + 1 and other.left <= self.right + 1)

    def union_box(self, other: "Window") -> "Window":
        top, left = min(self.top, other.top), min(self.left, other.left)
        return Window(top, left, max(self.bottom, other.bottom) - top + 1,
                      max(self.right, other.right) - left + 1)


def overlap_ratio(a: Window, b: Window) -> float:
    """Intersection area over the smaller of the two areas."""
    return a.intersection(b) / min(a.area, b.area)


def window_side(p: int, r: int) -> int:
    if p < 1 or r < 1:
        raise ConfigError(f"patch size and step must be >= 1 (p={p}, r={r})")
    return p + r - 1


def generate_windows(height: int, width: int, p: int, r: int) -> list:
    """All k_w x k_w windows at stride 1 inside the image, row-major (k_w = p + r - 1)."""
    k = window_side(p, r)
    if k > min(height, width):
        raise ConfigError(f"window side {k} exceeds image {height}x{width}")
    return [Window(i, j, k, k) for i in range(height - k + 1) for j in range(width - k + 1)]


def filter_windows(windows, region: np.ndarray) -> list:
    """Windows touching at least one pixel of ``region``, order preserved."""
    region = np.asarray(region, dtype=bool)
    h, w = region.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = region.cumsum(0).cumsum(1)
    kept = []
    for win in windows:
        b, r = min(win.bottom, h - 1) + 1, min(win.right, w - 1) + 1
        if b <= win.top or r <= win.left:
            continue
        s = integral[b, r] - integral[win.top, r] - integral[b, win.left] + integral[win.top, win.left]
        if s > 0:
            kept.append(win)
    return kept


@dataclass
class WindowPlan:
    kept: list      # input windows
    merged: list    # merged rectangles
    cover_map: list  # kept[i] is contained in merged[cover_map[i]]

    def __len__(self):
        return len(self.merged)


def merge_windows(windows, tau: float) -> WindowPlan:
    """Greedy complete-linkage merging of an arbitrary window list.

    Repeatedly takes the first pair of groups (in list order) in which every
    pair of member windows overlaps by at least ``tau`` and replaces the two
    groups by one whose occluder is their bounding box.  Stops when no pair
    qualifies.  Because the test is over original members rather than the
    growing bounding box, merging never snowballs across the whole image.
    The result depends on list order and is not monotone in ``tau`` in
    general; ``plan_windows`` uses a tiling that is.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    windows = list(windows)
    n = len(windows)
    if n == 0:
        return WindowPlan([], [], [])
    t = np.array([(w.top, w.left, w.bottom, w.right) for w in windows], dtype=np.int64)
    dh = np.minimum(t[:, None, 2], t[None, :, 2]) - np.maximum(t[:, None, 0], t[None, :, 0]) + 1
    dw = np.minimum(t[:, None, 3], t[None, :, 3]) - np.maximum(t[:, None, 1], t[None, :, 1]) + 1
    inter = np.clip(dh, 0, None) * np.clip(dw, 0, None)
    area = (t[:, 2] - t[:, 0] + 1) * (t[:, 3] - t[:, 1] + 1)
    link = inter / np.minimum(area[:, None], area[None, :])

    members = [[i] for i in range(n)]
    alive = np.ones(n, dtype=bool)
    # rows before i never regain a qualifying partner: linkage only decreases
    for i in range(n):
        if not alive[i]:
            continue
        while True:
            cand = np.flatnonzero(alive[i + 1:] & (link[i, i + 1:] >= tau))
            if not len(cand):
                break
            j = i + 1 + cand[0]
            link[i] = np.minimum(link[i], link[j])
            link[:, i] = link[i]
            members[i].extend(members[j])
            alive[j] = False

    merged, cover_map = [], [0] * n
    for i in np.flatnonzero(alive):
        box = windows[members[i][0]]
        for m in members[i][1:]:
            box = box.union_box(windows[m])
        for m in members[i]:
            cover_map[m] = len(merged)
        merged.append(box)
    return WindowPlan(windows, merged, cover_map)


def block_shape(k: int, n_rows: int, n_cols: int, tau: float):
    """Block of top-left offsets merged together in the sliding-window plan.

    Two k x k windows whose top-lefts differ by at most (gr-1, gc-1) overlap
    by at least (k-gr+1)(k-gc+1)/k^2.  Among the shapes keeping that bound at
    or above ``tau`` the one giving the fewest blocks wins (ties: larger gr,
    then larger gc).  The feasible set only shrinks as ``tau`` grows, so the
    resulting plan size is monotone in ``tau``.
    """
    if tau <= 0.0:
        return n_rows, n_cols
    best = None
    for gr in range(1, min(k, n_rows) + 1):
        for gc in range(1, min(k, n_cols) + 1):
            if (k - gr + 1) * (k - gc + 1) < tau * k * k:
                continue
            count = -(-n_rows // gr) * -(-n_cols // gc)
            key = (count, -gr, -gc)
            if best is None or key < best[0]:
                best = (key, gr, gc)
    return best[1], best[2]


@lru_cache(maxsize=64)
def plan_windows(height: int, width: int, p: int, r: int, tau: float) -> WindowPlan:
    """Image-independent occluder plan: every sliding window, merged once.

    Sliding windows are grouped by tiling their top-left grid with the block
    from ``block_shape``; each group's occluder is its bounding box.  Every
    pair inside a group overlaps by at least ``tau``.  Certification and
    detection then filter ``plan.merged`` by each image's candidate region,
    so both see the same occluder for a given rectangle.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    kept = generate_windows(height, width, p, r)
    k = window_side(p, r)
    nr, nc = height - k + 1, width - k + 1
    gr, gc = block_shape(k, nr, nc, tau)
    merged, index = [], {}
    for bi in range(0, nr, gr):
        for bj in range(0, nc, gc):
            er, ec = min(bi + gr, nr) - 1, min(bj + gc, nc) - 1
            index[bi // gr, bj // gc] = len(merged)
            merged.append(Window(bi, bj, er - bi + k, ec - bj + k))
    cover_map = [index[w.top // gr, w.left // gc] for w in kept]
    return WindowPlan(kept, merged, cover_map)
