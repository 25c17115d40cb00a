"""Pairwise match ingestion: quantization, verification, track building.

Also holds the classical grid matcher that stands in for a detector-free
network, and the plain-text match file format.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

from .geometry import Observation2D, estimate_fundamental_ransac
from .errors import InputMissingError
from .model import FeatureTrack

DEFAULT_GRID_SIZE = 8
DEFAULT_VERIFY_THRESHOLD_PX = 4.0
HIGH_RES_VERIFY_THRESHOLD_PX = 8.0
HIGH_RES_EDGE = 1500
DEFAULT_MIN_PAIR_INLIERS = 20


@dataclass
class RawMatchPair:
    image_a: Hashable
    image_b: Hashable
    xy_a: np.ndarray
    xy_b: np.ndarray
    confidence: np.ndarray = None

    def __post_init__(self):
        self.xy_a = np.asarray(self.xy_a, dtype=float).reshape(-1, 2)
        self.xy_b = np.asarray(self.xy_b, dtype=float).reshape(-1, 2)
        if self.confidence is None:
            self.confidence = np.ones(len(self.xy_a))
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not (len(self.xy_a) == len(self.xy_b) == len(self.confidence)):
            raise ValueError("match arrays have different lengths")

    def __len__(self) -> int:
        return len(self.xy_a)

    def subset(self, mask) -> "RawMatchPair":
        return type(self)(self.image_a, self.image_b, self.xy_a[mask], self.xy_b[mask],
                          self.confidence[mask], **self._extra())

    def _extra(self) -> dict:
        return {}


@dataclass
class QuantizedMatchPair(RawMatchPair):
    grid_size: float = DEFAULT_GRID_SIZE

    def _extra(self) -> dict:
        return {"grid_size": self.grid_size}


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def quantize_points(xy: np.ndarray, r: float, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    q = np.floor(np.asarray(xy, dtype=float) / r + 0.5) * r
    if size is not None:
        w, h = size
        q[:, 0] = np.clip(q[:, 0], 0, np.floor((w - 1) / r) * r)
        q[:, 1] = np.clip(q[:, 1], 0, np.floor((h - 1) / r) * r)
    return q


def quantize_matches(pair: RawMatchPair, r: float,
                     size_a: Optional[tuple[int, int]] = None,
                     size_b: Optional[tuple[int, int]] = None) -> QuantizedMatchPair:
    """Snap matches to the ``r``-pixel grid, keeping the most confident per cell pair."""
    if r < 1:
        raise ValueError("grid size must be >= 1")
    qa = quantize_points(pair.xy_a, r, size_a)
    qb = quantize_points(pair.xy_b, r, size_b)
    conf = pair.confidence
    if len(conf) == 0:
        return QuantizedMatchPair(pair.image_a, pair.image_b, qa, qb, conf, grid_size=r)
    keys = np.column_stack([qa, qb])
    # sort by cell pair, then by descending confidence, then by input order
    order = np.lexsort((np.arange(len(conf)), -conf, keys[:, 3], keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    keep = np.sort(order[first])
    return QuantizedMatchPair(pair.image_a, pair.image_b, qa[keep], qb[keep], conf[keep], grid_size=r)


def default_verify_threshold(width: int, height: int) -> float:
    return HIGH_RES_VERIFY_THRESHOLD_PX if max(width, height) > HIGH_RES_EDGE else DEFAULT_VERIFY_THRESHOLD_PX


def verify_pair_geometric(pair: QuantizedMatchPair, threshold_px: float = DEFAULT_VERIFY_THRESHOLD_PX,
                          min_inliers: int = DEFAULT_MIN_PAIR_INLIERS, seed: int = 0
                          ) -> Optional[QuantizedMatchPair]:
    """Keep the fundamental-matrix RANSAC inliers, or return ``None`` if the pair is rejected."""
    if len(pair) < max(8, min_inliers):
        return None
    F, mask = estimate_fundamental_ransac(pair.xy_a, pair.xy_b, threshold_px, seed=seed)
    if F is None or mask.sum() < min_inliers:
        return None
    return pair.subset(mask)


# ---------------------------------------------------------------------------
# Tracks
# ---------------------------------------------------------------------------


class UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        self.add(a)
        self.add(b)
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic root: the smaller key
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> dict:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return out


def build_tracks(pairs: Iterable[RawMatchPair]) -> list[FeatureTrack]:
    """Transitive closure over (image, grid node) vertices.

    Components that would put two different nodes of one image into a single
    track are dropped entirely.
    """
    uf = UnionFind()
    conf: dict = {}
    for pair in pairs:
        for (xa, ya), (xb, yb), c in zip(pair.xy_a, pair.xy_b, pair.confidence):
            va = (pair.image_a, float(xa), float(ya))
            vb = (pair.image_b, float(xb), float(yb))
            uf.union(va, vb)
            conf[va] = max(conf.get(va, 0.0), float(c))
            conf[vb] = max(conf.get(vb, 0.0), float(c))
    tracks = []
    for members in uf.groups().values():
        images = [m[0] for m in members]
        if len(members) < 2 or len(set(images)) != len(images):
            continue
        members.sort()
        tracks.append(FeatureTrack([Observation2D(i, (x, y), conf[(i, x, y)]) for i, x, y in members]))
    tracks.sort(key=lambda t: (t.observations[0].image_id, *t.observations[0].xy))
    return tracks


def dropped_nodes(pairs: Iterable[RawMatchPair], tracks: Sequence[FeatureTrack]) -> dict:
    """Grid nodes that appear in some match but in no emitted track, per image."""
    used = {(o.image_id, float(o.xy[0]), float(o.xy[1])) for t in tracks for o in t}
    out: dict = {}
    for pair in pairs:
        for image, xy in ((pair.image_a, pair.xy_a), (pair.image_b, pair.xy_b)):
            for x, y in xy:
                key = (image, float(x), float(y))
                if key not in used:
                    out.setdefault(image, set()).add((float(x), float(y)))
    return {k: np.array(sorted(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# Built-in grid matcher
# ---------------------------------------------------------------------------


def _grid_descriptors(image: np.ndarray, r: int, radius: int):
    h, w = image.shape
    xs = np.arange(0, w, r)
    ys = np.arange(0, h, r)
    xs = xs[(xs >= radius) & (xs < w - radius)]
    ys = ys[(ys >= radius) & (ys < h - radius)]
    if len(xs) == 0 or len(ys) == 0:
        return np.zeros((0, 2)), np.zeros((0, (2 * radius + 1) ** 2), np.float32)
    win = np.lib.stride_tricks.sliding_window_view(image, (2 * radius + 1, 2 * radius + 1))
    patches = win[ys[:, None] - radius, xs[None, :] - radius].reshape(len(ys) * len(xs), -1)
    patches = patches.astype(np.float64)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    good = norms > 1e-6 * np.sqrt(patches.shape[1])
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
    desc = (patches[good] / norms[good, None]).astype(np.float32)
    return nodes[good], desc


def coarse_grid_match(image_a: np.ndarray, image_b: np.ndarray, r: int = DEFAULT_GRID_SIZE,
                      min_confidence: float = 0.8, radius: Optional[int] = None,
                      image_ids: tuple = ("a", "b"), stride: Optional[int] = None) -> RawMatchPair:
    """Mutual-nearest zero-normalized cross-correlation from ``image_a``'s grid nodes.

    Candidates in ``image_b`` are sampled every ``stride`` px (default ``r // 4``):
    the true correspondence of a grid node rarely falls on the other image's
    grid, and comparing grid to grid lets unrelated patches win. Confidence is
    the NCC score mapped from ``[-1, 1]`` to ``[0, 1]``.
    """
    if r < 4:
        raise ValueError("grid size must be >= 4 for the grid matcher")
    radius = r if radius is None else radius
    stride = max(1, r // 4) if stride is None else stride
    na, da = _grid_descriptors(np.asarray(image_a, float), r, radius)
    nb, db = _grid_descriptors(np.asarray(image_b, float), stride, radius)
    empty = RawMatchPair(image_ids[0], image_ids[1], np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    if len(na) == 0 or len(nb) == 0:
        return empty
    best_b = np.empty(len(na), dtype=int)
    best_ab = np.empty(len(na), dtype=np.float32)
    best_a = np.full(len(nb), -1, dtype=int)
    best_ba = np.full(len(nb), -np.inf, dtype=np.float32)
    # bound the score block to ~80 MB
    chunk = max(1, 20_000_000 // len(nb))
    for s in range(0, len(na), chunk):
        scores = da[s:s + chunk] @ db.T
        best_b[s:s + chunk] = scores.argmax(axis=1)
        best_ab[s:s + chunk] = scores.max(axis=1)
        col_best = scores.argmax(axis=0)
        col_val = scores[col_best, np.arange(len(nb))]
        upd = col_val > best_ba
        best_ba[upd] = col_val[upd]
        best_a[upd] = col_best[upd] + s
    mutual = best_a[best_b] == np.arange(len(na))
    conf = np.clip((best_ab.astype(float) + 1.0) / 2.0, 0.0, 1.0)
    keep = mutual & (conf >= min_confidence)
    return RawMatchPair(image_ids[0], image_ids[1], na[keep], nb[best_b[keep]], conf[keep])


# ---------------------------------------------------------------------------
# Match file
# ---------------------------------------------------------------------------


def write_match_file(path, pairs: Iterable[RawMatchPair], names: Optional[dict] = None) -> None:
    """``PAIR <name_a> <name_b> <N>`` blocks followed by ``x_a y_a x_b y_b conf`` lines."""
    names = names or {}
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            na, nb = names.get(pair.image_a, pair.image_a), names.get(pair.image_b, pair.image_b)
            f.write(f"PAIR {na} {nb} {len(pair)}\n")
            for (xa, ya), (xb, yb), c in zip(pair.xy_a, pair.xy_b, pair.confidence):
                f.write(f"{xa:.6f} {ya:.6f} {xb:.6f} {yb:.6f} {c:.6f}\n")


def read_match_file(path) -> list[RawMatchPair]:
    """Parse a match file; image identifiers are the names found in the file."""
    if not os.path.exists(path):
        raise InputMissingError(f"match file not found: {path}")
    pairs = []
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "PAIR":
            raise ValueError(f"{path}: expected 'PAIR a b N', got {lines[i]!r}")
        n = int(head[3])
        rows = lines[i + 1:i + 1 + n]
        if len(rows) != n:
            raise ValueError(f"{path}: pair {head[1]} {head[2]} truncated")
        data = np.array([[float(v) for v in row.split()] for row in rows]).reshape(-1, 5)
        pairs.append(RawMatchPair(head[1], head[2], data[:, 0:2], data[:, 2:4], data[:, 4]))
        i += 1 + n
    return pairs
