"""Tile quality metrics, the percentile filter, and loss-weight factors."""

import json

import numpy as np
import pytest

from hsiseg.cube import make_cube
from hsiseg.errors import ConfigError
from hsiseg.quality import (
    TileQuality,
    WeightConfig,
    compute_qualities,
    compute_quality,
    filter_high_quality,
    intensity_weight,
    loss_weight,
    loss_weights,
    write_quality_report,
)
from hsiseg.tiling import _tiles_from_assignment, slic_segment


def quality(i=0.3, l2=0.0, sam=0.0):
    return TileQuality(intensity=i, l2_uniformity=l2, sam_uniformity=sam)


# ---------------------------------------------------------------------------
# quality statistics


def test_quality_of_flat_tile_is_perfect():
    cube = make_cube(np.full((6, 6, 4), 0.25, dtype=np.float32))
    assignment = np.zeros((6, 6), dtype=np.int32)
    tiles = _tiles_from_assignment(assignment, cube)
    q = compute_quality(cube, tiles[0])
    assert q.intensity == pytest.approx(0.25)
    assert q.l2_uniformity == pytest.approx(0.0, abs=1e-7)
    assert q.sam_uniformity == pytest.approx(0.0, abs=1e-4)
    assert not q.degenerate


def test_quality_matches_loop_oracle():
    rng = np.random.default_rng(0)
    cube = make_cube(rng.random((10, 10, 5), dtype=np.float32) * 0.8 + 0.1)
    assignment = rng.integers(0, 4, size=(10, 10)).astype(np.int32)
    # make ids contiguous whatever the draw
    assignment = np.unique(assignment, return_inverse=True)[1].reshape(10, 10).astype(np.int32)
    tiles = _tiles_from_assignment(assignment, cube)
    for q, tile in zip(compute_qualities(cube, tiles), tiles):
        spectra = cube.data[tile.pixel_indices[:, 0], tile.pixel_indices[:, 1]].astype(np.float64)
        mean = spectra.mean(axis=0)
        assert q.intensity == pytest.approx(spectra.mean())
        assert q.l2_uniformity == pytest.approx(
            np.mean([np.linalg.norm(s - mean) for s in spectra])
        )
        angles = [
            np.arccos(np.clip(s @ mean / (np.linalg.norm(s) * np.linalg.norm(mean)), -1, 1))
            for s in spectra
        ]
        assert q.sam_uniformity == pytest.approx(np.mean(angles), abs=1e-9)


def test_dark_tile_flagged_degenerate():
    cube = make_cube(np.zeros((4, 4, 3), dtype=np.float32))
    tiles = _tiles_from_assignment(np.zeros((4, 4), dtype=np.int32), cube)
    q = compute_quality(cube, tiles[0])
    assert q.degenerate
    assert q.sam_uniformity == 0.0


# ---------------------------------------------------------------------------
# percentile filter


def test_filter_keeps_exact_counts_on_tie_free_data():
    rng = np.random.default_rng(1)
    n = 100
    base = [quality(i=0.3) for _ in range(n)]

    sam_varied = [
        TileQuality(0.3, 0.0, s) for s in rng.permutation(np.linspace(0.01, 0.5, n))
    ]
    assert filter_high_quality(sam_varied).kept.sum() == 75

    l2_varied = [
        TileQuality(0.3, v, 0.0) for v in rng.permutation(np.linspace(0.01, 0.9, n))
    ]
    assert filter_high_quality(l2_varied).kept.sum() == 75

    i_varied = [
        TileQuality(v, 0.0, 0.0) for v in rng.permutation(np.linspace(0.05, 0.95, n))
    ]
    assert filter_high_quality(i_varied).kept.sum() == 80

    assert filter_high_quality(base).kept.all()


def test_filter_reasons_and_label_cut():
    qualities = [quality() for _ in range(7)] + [quality(sam=5.0)]
    uniform = np.ones(8, dtype=bool)
    uniform[0] = False
    result = filter_high_quality(qualities, label_uniform=uniform)
    assert not result.kept[0] and result.reasons[0] == "non-uniform label"
    assert not result.kept[7] and "sam" in result.reasons[7]
    assert result.kept[1:7].all()
    np.testing.assert_array_equal(result.kept_indices, np.arange(1, 7))


def test_filter_rejects_tiny_sets():
    with pytest.raises(ConfigError):
        filter_high_quality([])
    with pytest.raises(ConfigError):
        filter_high_quality([quality()] * 3)


def test_filter_rejects_planted_degraded_tiles():
    rng = np.random.default_rng(2)
    data = rng.random((64, 64, 6), dtype=np.float32) * 0.1 + 0.35
    data[0:16, 0:16] = 1.0  # saturated block
    data[40:56, 8:24] = 0.005  # dark block
    noisy = np.clip(
        data[24:40, 40:56] + rng.normal(0, 0.3, size=(16, 16, 6)), 0, 1
    ).astype(np.float32)
    data[24:40, 40:56] = noisy
    cube = make_cube(np.clip(data, 0, 1))
    tilemap = slic_segment(cube, target_pixels_per_tile=64, distance="sam")

    degraded_mask = np.zeros((64, 64), dtype=bool)
    degraded_mask[0:16, 0:16] = degraded_mask[40:56, 8:24] = degraded_mask[24:40, 40:56] = True
    qualities = compute_qualities(cube, tilemap)
    weights = loss_weights(qualities)
    result = filter_high_quality(qualities)

    frac, kept_flags, w_deg, w_clean = [], [], [], []
    for tile, w, kept in zip(tilemap.tiles, weights, result.kept):
        xy = tile.pixel_indices
        share = degraded_mask[xy[:, 0], xy[:, 1]].mean()
        if share > 0.8:
            kept_flags.append(kept)
            w_deg.append(w)
        elif share == 0.0:
            w_clean.append(w)
    assert len(w_deg) >= 6
    # degraded tiles are mostly filtered away and carry clearly smaller weights
    assert np.mean(kept_flags) < 0.5
    assert np.mean(w_clean) - np.mean(w_deg) > 0.2


# ---------------------------------------------------------------------------
# loss weights


def test_intensity_weight_spot_values():
    assert intensity_weight(0.1) == pytest.approx(0.6)
    assert intensity_weight(0.5) == pytest.approx(1.0)
    assert intensity_weight(1.0) == pytest.approx(0.0)
    assert intensity_weight(0.3) == 1.0
    assert intensity_weight(0.75) == pytest.approx(0.5)


def test_uniformity_weight_spot_values():
    assert loss_weight(quality(i=0.3, l2=1.0)) == pytest.approx(0.7)
    assert loss_weight(quality(i=0.3, sam=1.0)) == pytest.approx(0.4)
    assert loss_weight(quality(i=0.3, l2=2.0)) == pytest.approx(0.49)


def test_weight_factors_multiply_and_clip():
    w = loss_weight(quality(i=0.1, l2=1.0, sam=1.0))
    assert w == pytest.approx(0.6 * 0.7 * 0.4)
    # just under the low breakpoint the raw ramp overshoots 1; combined clips
    assert loss_weight(quality(i=0.167, l2=0.0, sam=0.0)) == 1.0
    assert loss_weight(quality(i=2.0)) == 0.0  # ramp goes negative, clipped


def test_weight_monotonicity_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = np.sort(rng.random(2))
        assert intensity_weight(0.5 + 0.5 * a) >= intensity_weight(0.5 + 0.5 * b)
        assert intensity_weight(0.167 * a) <= intensity_weight(0.167 * b) + 1e-12
        q_lo, q_hi = quality(l2=a, sam=a), quality(l2=b, sam=b)
        assert loss_weight(q_lo) >= loss_weight(q_hi)


def test_ramp_jump_at_low_breakpoint_is_small():
    eps = 1e-9
    jump = abs(intensity_weight(0.167) - intensity_weight(0.167 + eps))
    assert jump <= 0.01


def test_weight_config_validation():
    with pytest.raises(ConfigError):
        WeightConfig(intensity_breakpoints=(0.5, 0.1))
    with pytest.raises(ConfigError):
        WeightConfig(l2_base=1.5)


def test_quality_report_lines(tmp_path):
    qualities = [quality(), quality(sam=5.0), quality(i=0.02), quality(l2=0.2)]
    weights = loss_weights(qualities)
    result = filter_high_quality(qualities)
    path = tmp_path / "quality.jsonl"
    write_quality_report(path, qualities, weights, result)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 4
    assert lines[0]["kept"] is True and lines[0]["reason"] == ""
    assert lines[1]["kept"] is False and "sam" in lines[1]["reason"]
    assert {"id", "I", "L2", "SAM", "weight", "kept", "reason"} <= lines[0].keys()
