"""
Tests για t-SNE, features και histograms.
"""

import numpy as np
import pytest
import torch

from .analysis_service import (
    FeatureVector,
    RandomProjectionExtractor,
    channel_histograms,
    drops_by_patch,
    embedding_points,
    extract_features,
    histogram_grid,
    histogram_stats,
    hsv_to_rgb,
    optimized_patches,
    rgb_to_hsv,
    source_stats,
    tsne_embed,
)
from .errors import InvalidArgumentError, UndefinedStatisticError
from .evaluation_service import EvalRecord
from .patch_core import Patch, baseline_patch, init_patch
from .schemas import ArchGroup, PatchKind


def _solid(color, source="toy-red", seed=0, size=8):
    tensor = torch.tensor(color, dtype=torch.float32).view(3, 1, 1).expand(3, size, size)
    meta = init_patch(seed, size, size, source_model=source).meta
    return Patch.from_tensor(tensor, meta)


def _vectors(X, prefix="p"):
    return [FeatureVector(values=row, patch_id=f"{prefix}{i:03d}", extractor_id="test") for i, row in enumerate(X)]


# ==================== FEATURES ====================


def test_projection_extractor_matches_oracle():
    extractor = RandomProjectionExtractor(dim=8, seed=3)
    patch = init_patch(1, 8, 8)

    rng = np.random.default_rng(3)
    weight = rng.standard_normal((8, 3))
    bias = rng.standard_normal(8) * 0.1
    pixels = patch.pixels.astype(np.float64).reshape(-1, 3)
    expected = np.mean([np.tanh(weight @ p + bias) for p in pixels], axis=0)

    vector = extract_features(extractor, patch)
    np.testing.assert_allclose(vector.values, expected, atol=1e-6)
    assert vector.patch_id == patch.patch_id
    assert vector.extractor_id == "projection-d8-s3"


def test_features_are_deterministic_and_sensitive():
    extractor = RandomProjectionExtractor(dim=16, seed=0)
    patch = init_patch(0, 8, 8)
    np.testing.assert_array_equal(extract_features(extractor, patch).values, extract_features(extractor, patch).values)

    tensor = patch.to_tensor()
    tensor[:, 3, 4] = 1.0 - tensor[:, 3, 4]
    changed = Patch.from_tensor(tensor, patch.meta)
    assert not np.array_equal(extract_features(extractor, patch).values, extract_features(extractor, changed).values)


# ==================== T-SNE ====================


def test_tsne_shape_and_determinism():
    X = np.random.default_rng(0).standard_normal((10, 6))
    a = tsne_embed(_vectors(X), perplexity=2.0, seed=1, iterations=300)
    b = tsne_embed(_vectors(X), perplexity=2.0, seed=1, iterations=300)
    assert a.shape == (10, 2)
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_tsne_ignores_input_order():
    X = np.random.default_rng(2).standard_normal((12, 4))
    vectors = _vectors(X)
    coords = tsne_embed(vectors, perplexity=3.0, seed=0, iterations=300)

    perm = np.random.default_rng(5).permutation(12)
    shuffled = tsne_embed([vectors[i] for i in perm], perplexity=3.0, seed=0, iterations=300)
    np.testing.assert_allclose(shuffled, coords[perm], rtol=0, atol=1e-10)


def test_tsne_keeps_clusters_apart():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0] * 5, [10.0] + [0.0] * 4, [0.0, 10.0, 0.0, 0.0, 0.0]])
    X = np.concatenate([c + rng.standard_normal((20, 5)) for c in centers])
    labels = np.repeat([0, 1, 2], 20)

    coords = tsne_embed(_vectors(X), perplexity=10.0, seed=0)
    distances = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    np.fill_diagonal(distances, np.inf)
    nearest = distances.argmin(axis=1)
    assert np.mean(labels[nearest] == labels) >= 0.95


def test_tsne_argument_errors():
    X = np.random.default_rng(0).standard_normal((10, 3))
    with pytest.raises(InvalidArgumentError):
        tsne_embed(_vectors(X[:3]), perplexity=0.5)
    with pytest.raises(InvalidArgumentError):
        tsne_embed(_vectors(X), perplexity=3.0)
    duplicated = _vectors(X)
    duplicated[1] = FeatureVector(values=X[1], patch_id=duplicated[0].patch_id, extractor_id="test")
    with pytest.raises(InvalidArgumentError):
        tsne_embed(duplicated, perplexity=2.0)


def test_drops_prefer_the_source_model():
    own = EvalRecord(
        model="toy-red", patch_set_id="toy-red", dataset_id="d", map_clean=1.0, map_patched=0.5,
        map_drop=0.5, per_patch_drops=[0.4, 0.6], patch_ids=["toy-red-s0", "toy-red-s1"],
        ap50_clean=1.0, ap50_patched=0.5, map_drop_normalized=0.5,
    )
    transfer = own.model_copy(update={"model": "toy-blue", "per_patch_drops": [0.1, 0.2]})
    only_transfer = transfer.model_copy(update={"patch_set_id": "toy-blue", "patch_ids": ["toy-blue-s0", "toy-blue-s1"]})

    drops = drops_by_patch([own, transfer, only_transfer])
    assert drops["toy-red-s0"] == 0.4 and drops["toy-red-s1"] == 0.6
    assert drops["toy-blue-s0"] == pytest.approx(0.1)

    patches = [init_patch(0, 8, 8, source_model="toy-red", arch_group=ArchGroup.OBJECTNESS_V7), init_patch(9, 8, 8)]
    points = embedding_points(patches, np.array([[1.0, 2.0], [3.0, 4.0]]), drops)
    assert (points[0].x, points[0].y, points[0].map_drop) == (1.0, 2.0, 0.4)
    assert points[0].arch_group == "OBJECTNESS_V7"
    assert points[1].map_drop == 0.0


# ==================== HISTOGRAMS ====================


def test_gray_patch_histograms():
    gray = baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=16, width=16)
    rgb = channel_histograms([gray], "RGB")
    for name in ("R", "G", "B"):
        assert rgb[name][128] == 256 and rgb[name].sum() == 256

    hsv = channel_histograms([gray], "HSV")
    assert hsv["S"][0] == 256
    assert hsv["V"][128] == 256
    assert hsv["H"][0] == 256


def test_red_patch_in_hsv():
    hsv = channel_histograms([_solid((1.0, 0.0, 0.0))], "HSV")
    assert hsv["H"][0] == 64
    assert hsv["S"][255] == 64 and hsv["V"][255] == 64


def test_histogram_totals():
    patches = [init_patch(seed, 8, 12) for seed in range(3)]
    for space in ("RGB", "HSV"):
        for bins in channel_histograms(patches, space).values():
            assert bins.sum() == 3 * 8 * 12
    with pytest.raises(InvalidArgumentError):
        channel_histograms([], "RGB")
    with pytest.raises(InvalidArgumentError):
        channel_histograms(patches, "LAB")


def test_stats_of_uniform_distribution():
    bins = np.zeros(256)
    bins[1:255] = 7
    stats = histogram_stats(bins)
    assert stats.mean == pytest.approx(127.5)
    assert abs(stats.skewness) < 1e-12
    assert stats.kurtosis == pytest.approx(-1.2, abs=0.01)


def test_stats_of_two_point_distribution():
    bins = np.zeros(256)
    bins[100] = bins[154] = 5
    bins[0] = bins[255] = 1000  # εκτός εύρους, αγνοούνται
    stats = histogram_stats(bins, channel="R")
    assert stats.mean == pytest.approx(127.0)
    assert stats.std == pytest.approx(27.0)
    assert stats.skewness == pytest.approx(0.0, abs=1e-12)
    assert stats.median == 127.0
    assert stats.bins[0] == 1000


def test_stats_need_two_values():
    bins = np.zeros(256)
    bins[0], bins[255], bins[40] = 50, 50, 1
    with pytest.raises(UndefinedStatisticError):
        histogram_stats(bins)
    with pytest.raises(InvalidArgumentError):
        histogram_stats(np.ones(10))


def test_stats_median_and_scale_invariance():
    bins = np.random.default_rng(4).integers(0, 20, 256).astype(float)
    stats = histogram_stats(bins)
    expanded = np.repeat(np.arange(1, 255), bins[1:255].astype(int))
    assert stats.median == float(np.median(expanded))
    assert stats.std == pytest.approx(float(np.std(expanded)))

    scaled = histogram_stats(bins * 3)
    assert scaled.mean == pytest.approx(stats.mean)
    assert scaled.skewness == pytest.approx(stats.skewness)
    assert scaled.kurtosis == pytest.approx(stats.kurtosis)


def test_constant_in_range_has_zero_shape_stats():
    bins = np.zeros(256)
    bins[128] = 10
    stats = histogram_stats(bins)
    assert stats.std == 0.0
    assert stats.skewness == 0.0 and stats.kurtosis == 0.0


def test_rgb_to_hsv_examples():
    assert rgb_to_hsv(1.0, 0.0, 0.0) == (0.0, 1.0, 1.0)
    assert rgb_to_hsv(0.5, 0.5, 0.5) == (0.0, 0.0, 0.5)
    h, s, v = rgb_to_hsv(0.0, 1.0, 0.0)
    assert h == pytest.approx(1 / 3) and (s, v) == (1.0, 1.0)


def test_hsv_round_trip():
    rng = np.random.default_rng(1)
    for r, g, b in rng.random((200, 3)):
        back = hsv_to_rgb(*rgb_to_hsv(r, g, b))
        assert back == pytest.approx((r, g, b), abs=1e-6)


def test_histogram_grid_layout():
    patches = [init_patch(seed, 8, 8, source_model=src) for seed, src in enumerate(["a", "a", "b"])]
    panels = histogram_grid(patches, "RGB", single="a-s1")
    assert len(panels) == 9
    assert [(p.channel, p.scope) for p in panels[:3]] == [("R", "single"), ("R", "per_source"), ("R", "all")]
    assert [p.label for p in panels[:3]] == ["a-s1", "a", "All"]
    assert panels[0].bins.sum() == 64 and panels[1].bins.sum() == 128 and panels[2].bins.sum() == 192

    with pytest.raises(InvalidArgumentError):
        histogram_grid(patches, single="zzz")
    with pytest.raises(InvalidArgumentError):
        histogram_grid(patches, source="c")


def test_source_stats_rows():
    patches = [init_patch(seed, 8, 8, source_model=src) for seed, src in enumerate(["b", "a", "b"])]
    rows = source_stats(patches, "HSV")
    assert [(r.channel, r.source) for r in rows[:3]] == [("H", "a"), ("H", "b"), ("H", "All")]
    assert len(rows) == 9


def test_optimized_patches_filter():
    patches = [
        init_patch(0, 8, 8, source_model="toy-red"),
        baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=8, width=8),
        baseline_patch(PatchKind.UNIFORM_NOISE, seed=1, height=8, width=8),
    ]
    assert [p.patch_id for p in optimized_patches(patches)] == ["toy-red-s0"]
