"""Tile quality metrics, the high-quality filter, and loss weighting.

Each tile gets three quality proxies: mean intensity (exposure), and the
mean L2 / spectral-angle distance of its member spectra to the tile mean
(uniformity). The filter keeps tiles below the 75th percentile on both
uniformity metrics, inside the 10th-90th intensity percentiles, and with a
uniform ground-truth label. The loss weight multiplies three per-metric
factors so low-quality tiles contribute less to training.
"""

import json
from dataclasses import dataclass

import numpy as np

from .cube import HsiCube, l2_to_reference, sam_to_reference
from .errors import ConfigError
from .tiling import Tile, TileMap

_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class TileQuality:
    """Quality proxies for one tile.

    ``degenerate`` marks all-dark tiles whose spectral angle is undefined
    and reported as 0; the intensity cut removes those tiles anyway.
    """

    intensity: float
    l2_uniformity: float
    sam_uniformity: float
    degenerate: bool = False


@dataclass(frozen=True)
class WeightConfig:
    """Parameters of the three loss-weight factors.

    The intensity factor ramps up with slope ``intensity_slope_low`` below
    the first breakpoint, plateaus at 1, and ramps down from the second
    breakpoint with slope ``intensity_slope_high``. The uniformity factors
    decay exponentially with the given bases.
    """

    intensity_breakpoints: tuple[float, float] = (0.167, 0.5)
    intensity_slopes: tuple[float, float] = (6.0, -2.0)
    l2_base: float = 0.7
    sam_base: float = 0.4

    def __post_init__(self):
        lo, hi = self.intensity_breakpoints
        if not lo < hi:
            raise ConfigError("intensity breakpoints must be ordered")
        if not (0 < self.l2_base < 1 and 0 < self.sam_base < 1):
            raise ConfigError("decay bases must lie in (0, 1)")


def compute_quality(cube: HsiCube, tile: Tile) -> TileQuality:
    """Intensity and spectral-uniformity statistics for one tile."""
    xy = tile.pixel_indices
    spectra = cube.data[xy[:, 0], xy[:, 1]].astype(np.float64)
    mean_spectrum = spectra.mean(axis=0)
    intensity = float(spectra.mean())
    l2 = float(l2_to_reference(spectra, mean_spectrum).mean())

    norms = np.linalg.norm(spectra, axis=1)
    mean_norm = np.linalg.norm(mean_spectrum)
    degenerate = bool(mean_norm < _ZERO_NORM or np.any(norms < _ZERO_NORM))
    if mean_norm < _ZERO_NORM:
        sam = 0.0
    else:
        angles = sam_to_reference(spectra, mean_spectrum)
        angles = np.where(norms < _ZERO_NORM, 0.0, angles)
        sam = float(angles.mean())
    return TileQuality(intensity, l2, sam, degenerate)


def compute_qualities(cube: HsiCube, tiles) -> list[TileQuality]:
    """Quality stats for every tile of a TileMap (or any iterable of tiles)."""
    tiles = tiles.tiles if isinstance(tiles, TileMap) else tiles
    return [compute_quality(cube, tile) for tile in tiles]


@dataclass
class FilterResult:
    kept: np.ndarray  # bool per tile
    reasons: list[str]  # empty string for kept tiles

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)


def filter_high_quality(
    qualities: list[TileQuality],
    label_uniform: np.ndarray | None = None,
    sam_percentile: float = 75.0,
    l2_percentile: float = 75.0,
    intensity_percentiles: tuple[float, float] = (10.0, 90.0),
) -> FilterResult:
    """Apply the per-image percentile cuts plus the label-uniformity cut.

    A tile survives iff its SAM and L2 uniformity are at or below their
    respective percentile thresholds, its intensity lies within the
    [low, high] intensity percentiles, and its label is uniform.
    Percentiles use linear interpolation between order statistics.
    """
    if len(qualities) == 0:
        raise ConfigError("cannot filter an empty tile set")
    if len(qualities) < 4:
        raise ConfigError("need at least 4 tiles for meaningful percentiles")

    sam = np.array([q.sam_uniformity for q in qualities])
    l2 = np.array([q.l2_uniformity for q in qualities])
    intensity = np.array([q.intensity for q in qualities])
    sam_cut = np.percentile(sam, sam_percentile)
    l2_cut = np.percentile(l2, l2_percentile)
    i_lo = np.percentile(intensity, intensity_percentiles[0])
    i_hi = np.percentile(intensity, intensity_percentiles[1])

    kept = np.ones(len(qualities), dtype=bool)
    reasons = []
    for i, q in enumerate(qualities):
        why = []
        if q.sam_uniformity > sam_cut:
            why.append("sam")
        if q.l2_uniformity > l2_cut:
            why.append("l2")
        if q.intensity < i_lo:
            why.append("intensity-low")
        elif q.intensity > i_hi:
            why.append("intensity-high")
        if label_uniform is not None and not label_uniform[i]:
            why.append("non-uniform label")
        kept[i] = not why
        reasons.append(",".join(why))
    return FilterResult(kept=kept, reasons=reasons)


def loss_weight(quality: TileQuality, cfg: WeightConfig = WeightConfig()) -> float:
    """Combined per-tile loss weight in [0, 1]: w_I * w_L2 * w_SAM."""
    w = (
        intensity_weight(quality.intensity, cfg)
        * cfg.l2_base**quality.l2_uniformity
        * cfg.sam_base**quality.sam_uniformity
    )
    return float(np.clip(w, 0.0, 1.0))


def intensity_weight(intensity: float, cfg: WeightConfig = WeightConfig()) -> float:
    """Piecewise intensity factor: ramp up, plateau at 1, ramp down."""
    lo, hi = cfg.intensity_breakpoints
    s_lo, s_hi = cfg.intensity_slopes
    if intensity <= lo:
        return float(s_lo * intensity)
    if intensity < hi:
        return 1.0
    return float(max(0.0, 1.0 + s_hi * (intensity - hi)))


def loss_weights(qualities: list[TileQuality], cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    return np.array([loss_weight(q, cfg) for q in qualities], dtype=np.float64)


def write_quality_report(
    path,
    qualities: list[TileQuality],
    weights: np.ndarray,
    result: FilterResult,
) -> None:
    """Emit one JSON line per tile: id, metrics, weight, verdict, reason."""
    with open(path, "w") as f:
        for i, q in enumerate(qualities):
            record = {
                "id": i,
                "I": q.intensity,
                "L2": q.l2_uniformity,
                "SAM": q.sam_uniformity,
                "weight": float(weights[i]),
                "kept": bool(result.kept[i]),
                "reason": result.reasons[i],
            }
            f.write(json.dumps(record) + "\n")
