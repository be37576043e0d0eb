"""Class-agnostic box proposals.

Selective search: graph-based segmentation into coherent regions, then
greedy pairwise merging by color/texture/size/fill similarity. The
bounding rectangle of every region seen at any level of the merge tree
is a proposal. A regular-grid generator is the no-segmentation fallback
and regression baseline.

All tie-breaking is fixed (edge construction order, then lowest region
ids), so identical inputs give identical proposal lists.
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxF
from .errors import ArgumentError, ConfigurationError, FormatError

TEXTURE_ORIENTATIONS = 8


@dataclass
class RegionStats:
    """Aggregates for one region; histograms kept unnormalized so merging
    two regions is plain addition."""
    size: int
    bbox: BoxF
    color_hist: np.ndarray     # 3 * bins
    texture_hist: np.ndarray   # 3 * TEXTURE_ORIENTATIONS, gradient-magnitude weighted

    def merged_with(self, other: "RegionStats") -> "RegionStats":
        a, b = self.bbox, other.bbox
        return RegionStats(
            size=self.size + other.size,
            bbox=BoxF(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)),
            color_hist=self.color_hist + other.color_hist,
            texture_hist=self.texture_hist + other.texture_hist,
        )


@dataclass
class SegmentationMap:
    labels: np.ndarray          # (W, H) int32, values in [0, region_count)
    region_count: int
    regions: list               # RegionStats per label

    def __post_init__(self):
        if self.labels.min() < 0 or self.labels.max() >= self.region_count:
            raise ArgumentError("labels out of range")
        if len(self.regions) != self.region_count:
            raise ArgumentError("stats/region count mismatch")


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple
    source: str

    def __post_init__(self):
        if self.source not in ("selective_search", "grid"):
            raise ArgumentError(f"unknown proposal source {self.source!r}")
        seen = set()
        for b in self.boxes:
            key = (b.x1, b.y1, b.x2, b.y2)
            if key in seen:
                raise ArgumentError(f"duplicate proposal {key}")
            seen.add(key)

    def __len__(self):
        return len(self.boxes)


@dataclass
class SelectiveSearchParams:
    felz_k: float = 100.0
    felz_min_size: int = 20
    sim_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    histogram_bins: int = 25
    max_proposals: int = 500

    def __post_init__(self):
        w = self.sim_weights
        if len(w) != 4 or any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ConfigurationError("sim_weights must be 4 non-negative values, not all zero")
        if self.histogram_bins < 2:
            raise ConfigurationError("histogram_bins must be >= 2")
        if self.max_proposals < 1:
            raise ConfigurationError("max_proposals must be >= 1")


def _as_pixels(image) -> np.ndarray:
    pix = getattr(image, "pixels", image)
    pix = np.asarray(pix, dtype=np.float64)
    if pix.ndim != 3 or pix.shape[0] != 3:
        raise ArgumentError(f"expected (3, W, H) image, got {pix.shape}")
    return pix


def _grid_edges(w: int, h: int):
    """4-connected edges in construction order: for each pixel in row-major
    (x, y) order, its right edge then its down edge. Flat index = x*h + y."""
    idx = np.arange(w * h, dtype=np.int64).reshape(w, h)
    right_ok = np.zeros((w, h), dtype=bool)
    right_ok[:-1, :] = True
    down_ok = np.zeros((w, h), dtype=bool)
    down_ok[:, :-1] = True
    src = np.repeat(idx.ravel(), 2)
    dst = np.stack([(idx + h).ravel(), (idx + 1).ravel()], axis=1).ravel()
    ok = np.stack([right_ok.ravel(), down_ok.ravel()], axis=1).ravel()
    return src[ok], dst[ok]


class _DSU:
    __slots__ = ("parent", "size", "internal")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n     # max weight of any edge inside the component

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, a: int, b: int, weight: float) -> None:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if weight > self.internal[a]:
            self.internal[a] = weight


def _region_histograms(pixels: np.ndarray, labels: np.ndarray, n: int, bins: int):
    flat_labels = labels.ravel()
    color = np.zeros(n * 3 * bins)
    for c in range(3):
        b = np.minimum((pixels[c] * bins).astype(np.int64), bins - 1).ravel()
        color += np.bincount(flat_labels * (3 * bins) + c * bins + b,
                             minlength=n * 3 * bins)
    nori = TEXTURE_ORIENTATIONS
    texture = np.zeros(n * 3 * nori)
    for c in range(3):
        gx, gy = np.gradient(pixels[c])
        ori = np.arctan2(gy, gx)
        b = np.minimum(((ori + np.pi) / (2 * np.pi) * nori).astype(np.int64), nori - 1)
        mag = np.hypot(gx, gy)
        texture += np.bincount(flat_labels * (3 * nori) + c * nori + b.ravel(),
                               weights=mag.ravel(), minlength=n * 3 * nori)
    return color.reshape(n, 3 * bins), texture.reshape(n, 3 * nori)


def felzenszwalb_segment(image, k: float = 100.0, min_size: int = 20,
                         histogram_bins: int = 25) -> SegmentationMap:
    """Graph-based segmentation with per-region stats for selective search.

    Edge weight = euclidean RGB distance scaled to the classic 0..255
    parameterization, so the default k matches common usage. Edges are
    processed in ascending weight order; ties keep construction order.
    """
    pixels = _as_pixels(image)
    w, h = pixels.shape[1], pixels.shape[2]
    flat = pixels.reshape(3, -1).T
    src, dst = _grid_edges(w, h)
    weights = np.sqrt(((flat[src] - flat[dst]) ** 2).sum(axis=1)) * 255.0
    order = np.argsort(weights, kind="stable")

    dsu = _DSU(w * h)
    for e in order:
        a = dsu.find(int(src[e]))
        b = dsu.find(int(dst[e]))
        if a == b:
            continue
        wt = float(weights[e])
        if wt <= dsu.internal[a] + k / dsu.size[a] and wt <= dsu.internal[b] + k / dsu.size[b]:
            dsu.union(a, b, wt)
    for e in order:
        a = dsu.find(int(src[e]))
        b = dsu.find(int(dst[e]))
        if a != b and (dsu.size[a] < min_size or dsu.size[b] < min_size):
            dsu.union(a, b, float(weights[e]))

    roots = np.fromiter((dsu.find(i) for i in range(w * h)), dtype=np.int64)
    _uniq, labels_flat = np.unique(roots, return_inverse=True)
    # canonical ids by first appearance in flat pixel order
    first_seen = {}
    remap = np.empty(len(_uniq), dtype=np.int64)
    next_id = 0
    for lab in labels_flat:
        if lab not in first_seen:
            first_seen[lab] = next_id
            next_id += 1
    for old, new in first_seen.items():
        remap[old] = new
    labels_flat = remap[labels_flat]
    labels = labels_flat.reshape(w, h).astype(np.int32)
    n = next_id

    counts = np.bincount(labels_flat, minlength=n)
    xg = np.repeat(np.arange(w), h)
    yg = np.tile(np.arange(h), w)
    xmin = np.full(n, w, dtype=np.int64)
    ymin = np.full(n, h, dtype=np.int64)
    xmax = np.full(n, -1, dtype=np.int64)
    ymax = np.full(n, -1, dtype=np.int64)
    np.minimum.at(xmin, labels_flat, xg)
    np.minimum.at(ymin, labels_flat, yg)
    np.maximum.at(xmax, labels_flat, xg)
    np.maximum.at(ymax, labels_flat, yg)
    color, texture = _region_histograms(pixels, labels, n, histogram_bins)

    regions = [
        RegionStats(size=int(counts[i]),
                    bbox=BoxF(float(xmin[i]), float(ymin[i]),
                              float(xmax[i] + 1), float(ymax[i] + 1)),
                    color_hist=color[i], texture_hist=texture[i])
        for i in range(n)
    ]
    return SegmentationMap(labels=labels, region_count=n, regions=regions)


def _intersect_normalized(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.sum(), b.sum()
    # flat regions (all-zero texture) count as identical texture
    na = a / sa if sa > 0 else np.full_like(a, 1.0 / len(a))
    nb = b / sb if sb > 0 else np.full_like(b, 1.0 / len(b))
    return float(np.minimum(na, nb).sum())


def region_similarity(r_i: RegionStats, r_j: RegionStats, image_area: float,
                      weights=(1.0, 1.0, 1.0, 1.0)) -> float:
    if r_i.size <= 0 or r_j.size <= 0:
        raise ArgumentError("zero-area region in similarity")
    s_color = _intersect_normalized(r_i.color_hist, r_j.color_hist)
    s_texture = _intersect_normalized(r_i.texture_hist, r_j.texture_hist)
    s_size = 1.0 - (r_i.size + r_j.size) / image_area
    bb = r_i.merged_with(r_j).bbox
    s_fill = 1.0 - (bb.area - r_i.size - r_j.size) / image_area
    s_fill = min(max(s_fill, 0.0), 1.0)
    a1, a2, a3, a4 = weights
    return a1 * s_color + a2 * s_texture + a3 * s_size + a4 * s_fill


def _adjacency(labels: np.ndarray) -> set:
    pairs = set()
    a, b = labels[:-1, :].ravel(), labels[1:, :].ravel()
    for i, j in zip(a[a != b], b[a != b]):
        pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    a, b = labels[:, :-1].ravel(), labels[:, 1:].ravel()
    for i, j in zip(a[a != b], b[a != b]):
        pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    return pairs


def selective_search(image, params: SelectiveSearchParams | None = None) -> ProposalSet:
    """Hierarchical grouping over the initial segmentation.

    Every region at every level contributes its bounding rectangle.
    Truncation keeps earliest-created regions (initial segmentation first,
    then merges in order), so the cap never drops the base layer.
    """
    if params is None:
        params = SelectiveSearchParams()
    pixels = _as_pixels(image)
    area = float(pixels.shape[1] * pixels.shape[2])
    seg = felzenszwalb_segment(pixels, params.felz_k, params.felz_min_size,
                               params.histogram_bins)

    stats = {i: seg.regions[i] for i in range(seg.region_count)}
    neighbors = {i: set() for i in range(seg.region_count)}
    for i, j in _adjacency(seg.labels):
        neighbors[i].add(j)
        neighbors[j].add(i)

    heap = []
    for i, j in sorted(_adjacency(seg.labels)):
        s = region_similarity(stats[i], stats[j], area, params.sim_weights)
        heapq.heappush(heap, (-s, i, j))

    alive = set(stats)
    creation_order = list(range(seg.region_count))
    next_id = seg.region_count
    while len(alive) > 1 and heap:
        _negs, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive:
            continue              # stale entry; one side already merged away
        merged = stats[i].merged_with(stats[j])
        new_id = next_id
        next_id += 1
        stats[new_id] = merged
        creation_order.append(new_id)
        nbrs = (neighbors[i] | neighbors[j]) - {i, j}
        neighbors[new_id] = nbrs
        alive.discard(i)
        alive.discard(j)
        alive.add(new_id)
        for n in nbrs:
            neighbors[n].discard(i)
            neighbors[n].discard(j)
            neighbors[n].add(new_id)
            s = region_similarity(stats[new_id], stats[n], area, params.sim_weights)
            heapq.heappush(heap, (-s, min(new_id, n), max(new_id, n)))

    boxes = []
    seen = set()
    for rid in creation_order:
        b = stats[rid].bbox
        key = (b.x1, b.y1, b.x2, b.y2)
        if key not in seen:
            seen.add(key)
            boxes.append(b)
        if len(boxes) >= params.max_proposals:
            break
    return ProposalSet(boxes=tuple(boxes), source="selective_search")


def grid_proposals(width: int, height: int, scales=(16.0, 32.0, 48.0),
                   aspect_ratios=(0.5, 1.0, 2.0), stride: int = 8) -> ProposalSet:
    """Sliding-window boxes clipped to the image, exact duplicates dropped."""
    if not scales or not aspect_ratios:
        raise ArgumentError("scales and aspect_ratios must be non-empty")
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    boxes = []
    seen = set()
    for s in scales:
        for r in aspect_ratios:
            bw = s * np.sqrt(r)
            bh = s / np.sqrt(r)
            for cx in range(0, width + 1, stride):
                for cy in range(0, height + 1, stride):
                    clipped = BoxF(cx - bw / 2, cy - bh / 2,
                                   cx + bw / 2, cy + bh / 2).clipped(width, height)
                    if clipped is None:
                        continue
                    key = (clipped.x1, clipped.y1, clipped.x2, clipped.y2)
                    if key not in seen:
                        seen.add(key)
                        boxes.append(clipped)
    return ProposalSet(boxes=tuple(boxes), source="grid")


# --- per-dataset cache ------------------------------------------------------

def proposal_cache_path(root: str, idx: int) -> str:
    return os.path.join(root, "proposals", f"{idx}.json")


def save_proposals(root: str, idx: int, pset: ProposalSet) -> None:
    os.makedirs(os.path.join(root, "proposals"), exist_ok=True)
    payload = {"boxes": [[b.x1, b.y1, b.x2, b.y2] for b in pset.boxes],
               "source": pset.source}
    with open(proposal_cache_path(root, idx), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")


def load_proposals(root: str, idx: int) -> ProposalSet | None:
    path = proposal_cache_path(root, idx)
    if not os.path.isfile(path):
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        boxes = tuple(BoxF(*b) for b in payload["boxes"])
        return ProposalSet(boxes=boxes, source=payload["source"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad proposal cache {path}: {exc}") from exc


def ensure_proposals(root: str, idx: int, pixels, params: SelectiveSearchParams) -> ProposalSet:
    cached = load_proposals(root, idx)
    if cached is not None:
        return cached
    pset = selective_search(pixels, params)
    save_proposals(root, idx, pset)
    return pset
