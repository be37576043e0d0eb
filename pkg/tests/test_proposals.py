import numpy as np
import pytest

from imdet.boxes import BoxF, iou
from imdet.errors import ArgumentError, ConfigurationError, FormatError
from imdet.proposals import (ProposalSet, RegionStats, SelectiveSearchParams,
                             ensure_proposals, felzenszwalb_segment, grid_proposals,
                             load_proposals, region_similarity, save_proposals,
                             selective_search)
from imdet.synthesis import ProceduralSpec, procedural_scene


def _gray(arr2d):
    g = np.asarray(arr2d, dtype=np.float64)
    return np.stack([g, g, g])


# --- segmentation ---


def test_constant_image_single_region():
    seg = felzenszwalb_segment(np.full((3, 16, 16), 0.3), k=100, min_size=20)
    assert seg.region_count == 1
    assert seg.regions[0].size == 256
    assert seg.regions[0].bbox == BoxF(0, 0, 16, 16)


def test_two_halves():
    img = np.zeros((3, 16, 16))
    img[:, 8:, :] = 1.0
    seg = felzenszwalb_segment(img, k=10, min_size=4)
    assert seg.region_count == 2
    assert (seg.labels[:8, :] == seg.labels[0, 0]).all()
    assert (seg.labels[8:, :] == seg.labels[8, 0]).all()
    assert seg.labels[0, 0] != seg.labels[8, 0]


def _oracle_segment(gray, k, min_size):
    """Plain edge-by-edge union-find transcription; same edge order contract."""
    w, h = gray.shape
    edges = []
    for x in range(w):
        for y in range(h):
            if x + 1 < w:
                edges.append(((x, y), (x + 1, y)))
            if y + 1 < h:
                edges.append(((x, y), (x, y + 1)))

    def weight(e):
        (x1, y1), (x2, y2) = e
        return abs(gray[x1, y1] - gray[x2, y2]) * np.sqrt(3.0) * 255.0

    order = sorted(range(len(edges)), key=lambda i: weight(edges[i]))
    parent = {(x, y): (x, y) for x in range(w) for y in range(h)}
    size = dict.fromkeys(parent, 1)
    internal = dict.fromkeys(parent, 0.0)

    def find(p):
        while parent[p] != p:
            p = parent[p]
        return p

    def union(a, b, wt):
        parent[b] = a
        size[a] += size[b]
        internal[a] = max(internal[a], internal[b], wt)

    for i in order:
        p, q = edges[i]
        a, b = find(p), find(q)
        if a == b:
            continue
        wt = weight(edges[i])
        if wt <= internal[a] + k / size[a] and wt <= internal[b] + k / size[b]:
            union(a, b, wt)
    for i in order:
        p, q = edges[i]
        a, b = find(p), find(q)
        if a != b and (size[a] < min_size or size[b] < min_size):
            union(a, b, weight(edges[i]))

    labels = np.zeros((w, h), dtype=int)
    ids = {}
    for x in range(w):
        for y in range(h):
            r = find((x, y))
            if r not in ids:
                ids[r] = len(ids)
            labels[x, y] = ids[r]
    return labels


def test_matches_union_find_oracle_on_4x4():
    grid = np.array([
        [0.00, 0.00, 0.10, 0.10],
        [0.00, 0.05, 0.10, 0.10],
        [0.60, 0.60, 0.70, 0.70],
        [0.60, 0.60, 0.70, 0.72],
    ])
    for k in (5.0, 30.0, 80.0, 200.0):
        for min_size in (1, 2, 4):
            seg = felzenszwalb_segment(_gray(grid), k=k, min_size=min_size)
            oracle = _oracle_segment(grid, k, min_size)
            assert np.array_equal(seg.labels, oracle), (k, min_size)


def test_oracle_on_random_small_grids():
    rng = np.random.default_rng(2)
    for trial in range(20):
        grid = np.round(rng.uniform(0, 1, size=(5, 4)), 2)
        seg = felzenszwalb_segment(_gray(grid), k=40, min_size=2)
        assert np.array_equal(seg.labels, _oracle_segment(grid, 40, 2)), trial


def test_min_size_enforced():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(3, 24, 24))
    seg = felzenszwalb_segment(img, k=20, min_size=30)
    assert all(r.size >= 30 for r in seg.regions)
    # coverage: region sizes add up to the full frame
    assert sum(r.size for r in seg.regions) == 24 * 24


# --- similarity ---


def _stats(size, bbox, color=None, texture=None):
    return RegionStats(size=size, bbox=bbox,
                       color_hist=np.ones(75) if color is None else color,
                       texture_hist=np.ones(24) if texture is None else texture)


def test_similarity_formula_components():
    r1 = _stats(100, BoxF(0, 0, 10, 10))
    r2 = _stats(100, BoxF(10, 0, 20, 10))
    assert region_similarity(r1, r2, 1000.0, (0, 0, 1, 0)) == pytest.approx(0.8)
    # bounding box of two touching squares is exactly tiled
    assert region_similarity(r1, r2, 1000.0, (0, 0, 0, 1)) == pytest.approx(1.0)
    # identical normalized histograms intersect to 1
    assert region_similarity(r1, r2, 1000.0, (1, 0, 0, 0)) == pytest.approx(1.0)
    assert region_similarity(r1, r2, 1000.0, (0, 1, 0, 0)) == pytest.approx(1.0)


def test_similarity_symmetry_and_range():
    rng = np.random.default_rng(5)
    for _ in range(50):
        r1 = _stats(int(rng.integers(1, 200)), BoxF(0, 0, 12, 9),
                    color=rng.uniform(0, 3, 75), texture=rng.uniform(0, 3, 24))
        r2 = _stats(int(rng.integers(1, 200)), BoxF(5, 3, 20, 14),
                    color=rng.uniform(0, 3, 75), texture=rng.uniform(0, 3, 24))
        a = region_similarity(r1, r2, 4096.0)
        b = region_similarity(r2, r1, 4096.0)
        assert a == pytest.approx(b, abs=1e-12)
        assert 0.0 <= a <= 4.0


def test_zero_area_region_rejected():
    r1 = _stats(0, BoxF(0, 0, 1, 1))
    with pytest.raises(ArgumentError):
        region_similarity(r1, _stats(5, BoxF(0, 0, 2, 2)), 100.0)


def test_params_validation():
    with pytest.raises(ConfigurationError):
        SelectiveSearchParams(sim_weights=(0, 0, 0, 0))
    with pytest.raises(ConfigurationError):
        SelectiveSearchParams(sim_weights=(-1, 1, 1, 1))
    with pytest.raises(ConfigurationError):
        SelectiveSearchParams(histogram_bins=1)
    with pytest.raises(ConfigurationError):
        SelectiveSearchParams(max_proposals=0)


# --- selective search ---


def test_uniform_image_single_proposal():
    pset = selective_search(np.full((3, 16, 16), 0.7))
    assert len(pset) == 1
    assert pset.boxes[0] == BoxF(0, 0, 16, 16)
    assert pset.source == "selective_search"


def test_square_on_plain_background_recovered():
    img = np.full((3, 64, 64), 0.5)
    img[0, 20:40, 20:40] = 0.85
    img[1, 20:40, 20:40] = 0.12
    img[2, 20:40, 20:40] = 0.12
    pset = selective_search(img)
    target = BoxF(20, 20, 40, 40)
    assert max(iou(b, target) for b in pset.boxes) >= 0.7
    # full frame appears as the root of the merge tree
    assert any(b == BoxF(0, 0, 64, 64) for b in pset.boxes)


def test_bounds_cap_and_determinism():
    spec = ProceduralSpec()
    params = SelectiveSearchParams(max_proposals=500)
    for seed in range(5):
        s = procedural_scene(spec, seed % 8, np.random.default_rng(seed))
        p1 = selective_search(s.pixels, params)
        p2 = selective_search(s.pixels, params)
        assert list(p1.boxes) == list(p2.boxes)
        assert len(p1) <= 500
        assert all(b.within(64, 64) for b in p1.boxes)


def test_truncation_keeps_earliest_regions():
    spec = ProceduralSpec()
    s = procedural_scene(spec, 0, np.random.default_rng(3))
    full = selective_search(s.pixels, SelectiveSearchParams(max_proposals=100000))
    capped = selective_search(s.pixels, SelectiveSearchParams(max_proposals=10))
    assert list(capped.boxes) == list(full.boxes)[:10]


def test_recall_on_procedural_scenes():
    spec = ProceduralSpec()
    params = SelectiveSearchParams()
    total, hit = 0, 0
    for seed in range(30):
        s = procedural_scene(spec, seed % 8, np.random.default_rng(seed + 100))
        pset = selective_search(s.pixels, params)
        assert len(pset) <= params.max_proposals
        for box, _cid in s.gt_boxes:
            total += 1
            if max(iou(b, box) for b in pset.boxes) >= 0.5:
                hit += 1
    assert hit / total >= 0.9


def test_proposal_set_rejects_duplicates():
    with pytest.raises(ArgumentError):
        ProposalSet(boxes=(BoxF(0, 0, 1, 1), BoxF(0, 0, 1, 1)), source="grid")
    with pytest.raises(ArgumentError):
        ProposalSet(boxes=(BoxF(0, 0, 1, 1),), source="magic")


# --- grid ---


def test_grid_64_single_scale():
    pset = grid_proposals(64, 64, scales=(32.0,), aspect_ratios=(1.0,), stride=32)
    assert len(pset) == 9
    assert pset.source == "grid"
    xs = sorted({(b.x1, b.x2) for b in pset.boxes})
    assert xs == [(0.0, 16.0), (16.0, 48.0), (48.0, 64.0)]


def test_grid_large_stride():
    pset = grid_proposals(64, 64, scales=(32.0,), aspect_ratios=(1.0,), stride=1000)
    assert len(pset) == 1
    assert pset.boxes[0] == BoxF(0, 0, 16, 16)


def test_grid_clipping_and_args():
    pset = grid_proposals(64, 48)
    assert all(b.within(64, 48) for b in pset.boxes)
    with pytest.raises(ArgumentError):
        grid_proposals(64, 64, scales=())
    with pytest.raises(ArgumentError):
        grid_proposals(64, 64, stride=0)


def test_grid_aspect_ratio_area_preserved():
    pset = grid_proposals(640, 640, scales=(32.0,), aspect_ratios=(0.5, 2.0), stride=640)
    # unclipped boxes away from borders would have area 32^2; at origin they clip
    full = grid_proposals(640, 640, scales=(32.0,), aspect_ratios=(1.0,), stride=64)
    inner = [b for b in full.boxes if b.x1 > 0 and b.x2 < 640 and b.y1 > 0 and b.y2 < 640]
    assert all(abs(b.area - 1024.0) < 1e-9 for b in inner)
    assert pset.boxes  # clipped but valid


# --- cache ---


def test_cache_round_trip(tmp_path):
    root = str(tmp_path)
    pset = grid_proposals(64, 64, scales=(32.0,), aspect_ratios=(1.0,), stride=32)
    save_proposals(root, 3, pset)
    back = load_proposals(root, 3)
    assert back.source == "grid"
    assert list(back.boxes) == list(pset.boxes)
    assert load_proposals(root, 99) is None

    bad = tmp_path / "proposals" / "7.json"
    bad.write_text('{"boxes": "nope"}')
    with pytest.raises(FormatError):
        load_proposals(root, 7)


def test_ensure_proposals_prefers_cache(tmp_path):
    root = str(tmp_path)
    img = np.full((3, 16, 16), 0.7)
    params = SelectiveSearchParams()
    first = ensure_proposals(root, 0, img, params)
    assert len(first) == 1
    # overwrite the cache; a second call must read it, not recompute
    save_proposals(root, 0, grid_proposals(16, 16, scales=(8.0,),
                                           aspect_ratios=(1.0,), stride=16))
    again = ensure_proposals(root, 0, img, params)
    assert again.source == "grid"
