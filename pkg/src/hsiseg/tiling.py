"""Superpixel tiling of hyperspectral cubes.

A modified SLIC clusters pixels by a combined spatial + spectral distance,
where the spectral term is either the spectral angle or the Euclidean
distance to the cluster's mean spectrum. Tiles of roughly
``target_pixels_per_tile`` pixels are produced, post-processed to be
4-connected, and can be cropped into fixed-size zero-padded patches.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cube import HsiCube, l2_to_reference, sam_to_reference
from .errors import ConfigError, FormatError, ShapeError

TIL1_MAGIC = b"TIL1"

# Spatial/spectral trade-off constants chosen so both distance scales are
# comparable on [0, 1] reflectance data (radians vs. euclidean norm).
DEFAULT_COMPACTNESS = {"sam": 0.1, "l2": 1.0}
DEFAULT_TARGET_PIXELS = 200
DEFAULT_MAX_ITERS = 10
CONVERGENCE_PX = 0.1
LABEL_UNIFORM_THRESHOLD = 0.99


@dataclass
class Tile:
    """One superpixel: pixel membership plus aggregate statistics."""

    id: int
    pixel_indices: np.ndarray  # (n, 2) int array of (x, y) pairs
    centroid: tuple[float, float]
    mean_spectrum: np.ndarray
    pixel_count: int
    label: int | None = None
    label_fraction: float = 0.0  # fraction of pixels sharing the majority label

    @property
    def label_uniform(self) -> bool:
        return self.label is not None and self.label_fraction >= LABEL_UNIFORM_THRESHOLD


@dataclass
class TileMap:
    """Per-pixel tile assignment plus the tile list.

    ``assignment[x, y]`` holds the id of the owning tile; ids are contiguous
    ``0..len(tiles)-1``. ``objective_trace`` records the total combined
    distance after each SLIC assignment sweep.
    """

    width: int
    height: int
    assignment: np.ndarray
    tiles: list[Tile]
    objective_trace: list[float] = field(default_factory=list)
    grid_step: float = 0.0

    def __post_init__(self):
        if self.assignment.shape != (self.width, self.height):
            raise ShapeError(
                f"assignment shape {self.assignment.shape} does not match "
                f"({self.width}, {self.height})"
            )

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def labels(self) -> np.ndarray:
        return np.array([-1 if t.label is None else t.label for t in self.tiles])

    def centroids(self) -> np.ndarray:
        return np.array([t.centroid for t in self.tiles], dtype=np.float64)


def _spectral_distance(pixels: np.ndarray, reference: np.ndarray, metric: str):
    if metric == "sam":
        return sam_to_reference(pixels, reference)
    if metric == "l2":
        return l2_to_reference(pixels, reference)
    raise ConfigError(f"unknown spectral distance {metric!r}, expected 'sam' or 'l2'")


def _tiles_from_assignment(assignment: np.ndarray, cube: HsiCube) -> list[Tile]:
    """Recompute per-tile statistics from a contiguous assignment map."""
    w, h = assignment.shape
    flat = assignment.ravel()
    n_tiles = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=n_tiles)

    xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    cx = np.bincount(flat, weights=xs.ravel(), minlength=n_tiles) / counts
    cy = np.bincount(flat, weights=ys.ravel(), minlength=n_tiles) / counts

    data = cube.data.reshape(-1, cube.channels)
    spectra = np.empty((n_tiles, cube.channels), dtype=np.float64)
    for c in range(cube.channels):
        spectra[:, c] = np.bincount(flat, weights=data[:, c], minlength=n_tiles) / counts

    # One stable argsort gives every tile's pixel list without per-tile scans.
    order = np.argsort(flat, kind="stable")
    pix_xy = np.stack([xs.ravel()[order], ys.ravel()[order]], axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    tiles = []
    for tid in range(n_tiles):
        tiles.append(
            Tile(
                id=tid,
                pixel_indices=pix_xy[offsets[tid] : offsets[tid + 1]],
                centroid=(float(cx[tid]), float(cy[tid])),
                mean_spectrum=spectra[tid].astype(np.float32),
                pixel_count=int(counts[tid]),
            )
        )
    return tiles


def slic_segment(
    cube: HsiCube,
    target_pixels_per_tile: int = DEFAULT_TARGET_PIXELS,
    compactness: float | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    distance: str = "sam",
) -> TileMap:
    """Segment a cube into superpixels of ~``target_pixels_per_tile`` pixels.

    Cluster centers start on a regular grid of step ``S = sqrt(target)``.
    Each sweep assigns every pixel, within a 2S x 2S window around each
    center, to the center minimizing
    ``sqrt(d_spectral^2 + compactness^2 * (d_spatial / S)^2)``,
    then recenters clusters on their means. Iteration stops at
    ``max_iters``, when total center movement drops below 0.1 px, or when
    the total objective stops improving (the last sweep is then discarded,
    keeping the recorded objective trace non-increasing).

    The returned map has connectivity enforced and contiguous tile ids.
    """
    if compactness is None:
        compactness = DEFAULT_COMPACTNESS.get(distance, 1.0)
    if cube.width < 8 or cube.height < 8:
        raise ConfigError(f"cube {cube.width}x{cube.height} too small to tile (min 8x8)")
    if target_pixels_per_tile < 4:
        raise ConfigError("target_pixels_per_tile must be >= 4")
    if compactness <= 0:
        raise ConfigError("compactness must be > 0")

    w, h = cube.width, cube.height
    step = float(np.sqrt(target_pixels_per_tile))
    if step > max(w, h):
        raise ConfigError(
            f"grid step {step:.1f} exceeds both image sides ({w}x{h}); "
            "reduce target_pixels_per_tile"
        )
    nx = max(1, round(w / step))
    ny = max(1, round(h / step))
    centers_x = (np.arange(nx) + 0.5) * (w / nx)
    centers_y = (np.arange(ny) + 0.5) * (h / ny)
    gx, gy = np.meshgrid(centers_x, centers_y, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (K, 2)
    n_centers = centers.shape[0]

    data = cube.data.astype(np.float64)
    px = np.clip(np.round(centers[:, 0]).astype(int), 0, w - 1)
    py = np.clip(np.round(centers[:, 1]).astype(int), 0, h - 1)
    center_spectra = data[px, py].copy()

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    half = int(np.ceil(step))

    assignment = None
    best_dist = None
    trace: list[float] = []

    for _ in range(max_iters):
        dist = np.full((w, h), np.inf)
        label = np.full((w, h), -1, dtype=np.int32)
        for k in range(n_centers):
            cx, cy = centers[k]
            x0 = max(0, int(np.floor(cx)) - half)
            x1 = min(w, int(np.ceil(cx)) + half + 1)
            y0 = max(0, int(np.floor(cy)) - half)
            y1 = min(h, int(np.ceil(cy)) + half + 1)
            window = data[x0:x1, y0:y1].reshape(-1, cube.channels)
            d_spec = _spectral_distance(window, center_spectra[k], distance)
            dx = xs[x0:x1, None] - cx
            dy = ys[None, y0:y1] - cy
            d_spat = np.sqrt(dx * dx + dy * dy).ravel()
            d = np.sqrt(d_spec**2 + (compactness * d_spat / step) ** 2)
            d = d.reshape(x1 - x0, y1 - y0)
            sub_d = dist[x0:x1, y0:y1]
            sub_l = label[x0:x1, y0:y1]
            better = d < sub_d
            sub_d[better] = d[better]
            sub_l[better] = k

        if np.any(label < 0):  # windows missed a pixel; fall back to nearest center
            miss = np.argwhere(label < 0)
            d2 = (miss[:, :1] - centers[:, 0]) ** 2 + (miss[:, 1:] - centers[:, 1]) ** 2
            label[miss[:, 0], miss[:, 1]] = np.argmin(d2, axis=1)

        objective = float(dist[np.isfinite(dist)].sum())
        if trace and objective > trace[-1] + 1e-9:
            break  # no further improvement; keep the previous sweep's result
        trace.append(objective)
        assignment = label
        best_dist = dist

        flat = label.ravel()
        counts = np.bincount(flat, minlength=n_centers)
        occupied = counts > 0
        new_centers = centers.copy()
        xg, yg = np.meshgrid(xs, ys, indexing="ij")
        sum_x = np.bincount(flat, weights=xg.ravel(), minlength=n_centers)
        sum_y = np.bincount(flat, weights=yg.ravel(), minlength=n_centers)
        new_centers[occupied, 0] = sum_x[occupied] / counts[occupied]
        new_centers[occupied, 1] = sum_y[occupied] / counts[occupied]
        flat_data = data.reshape(-1, cube.channels)
        for c in range(cube.channels):
            col = np.bincount(flat, weights=flat_data[:, c], minlength=n_centers)
            center_spectra[occupied, c] = col[occupied] / counts[occupied]

        movement = float(np.linalg.norm(new_centers - centers, axis=1).sum())
        centers = new_centers
        if movement < CONVERGENCE_PX:
            break

    assert assignment is not None and best_dist is not None
    # Drop empty clusters so ids are contiguous before connectivity cleanup.
    used = np.unique(assignment)
    remap = np.full(n_centers, -1, dtype=np.int32)
    remap[used] = np.arange(used.size, dtype=np.int32)
    assignment = remap[assignment]

    tilemap = TileMap(
        width=w,
        height=h,
        assignment=assignment,
        tiles=_tiles_from_assignment(assignment, cube),
        objective_trace=trace,
        grid_step=step,
    )
    return enforce_connectivity(tilemap, cube, min_size=target_pixels_per_tile // 4)


def enforce_connectivity(tilemap: TileMap, cube: HsiCube, min_size: int | None = None) -> TileMap:
    """Make every tile 4-connected.

    Each tile's largest connected component keeps the tile's identity.
    Detached fragments smaller than ``min_size`` are absorbed by their
    largest adjacent tile; larger fragments become tiles of their own.
    Tile statistics are recomputed. Already-connected maps come back with
    an identical assignment.
    """
    if min_size is None:
        mean_size = tilemap.width * tilemap.height / max(1, tilemap.n_tiles)
        min_size = max(1, int(round(mean_size / 4)))

    assignment = tilemap.assignment
    w, h = assignment.shape
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

    # Component map over the whole image: same tile id + 4-connected.
    comp_map = np.full((w, h), -1, dtype=np.int32)
    comp_tile: list[int] = []
    comp_primary: list[bool] = []
    n_comps = 0
    for tid in range(tilemap.n_tiles):
        mask = assignment == tid
        labeled, n = ndimage.label(mask, structure=structure)
        if n == 0:
            continue
        sizes = ndimage.sum_labels(mask, labeled, index=np.arange(1, n + 1))
        primary = int(np.argmax(sizes))  # first-largest wins ties
        for j in range(n):
            comp_map[labeled == j + 1] = n_comps
            comp_tile.append(tid)
            comp_primary.append(j == primary)
            n_comps += 1

    comp_sizes = np.bincount(comp_map.ravel(), minlength=n_comps).astype(np.int64)

    # Component adjacency from horizontal and vertical neighbor pairs.
    adjacency: list[set[int]] = [set() for _ in range(n_comps)]
    for a, b in (
        (comp_map[:-1, :].ravel(), comp_map[1:, :].ravel()),
        (comp_map[:, :-1].ravel(), comp_map[:, 1:].ravel()),
    ):
        differ = a != b
        for u, v in zip(a[differ], b[differ]):
            adjacency[u].add(v)
            adjacency[v].add(u)

    parent = np.arange(n_comps)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    fragments = [i for i in range(n_comps) if not comp_primary[i] and comp_sizes[i] < min_size]
    fragments.sort(key=lambda i: (comp_sizes[i], i))
    for frag in fragments:
        roots = {find(n) for n in adjacency[frag]} - {find(frag)}
        if not roots:
            continue
        target = max(roots, key=lambda r: (comp_sizes[r], -r))
        parent[find(frag)] = target
        comp_sizes[target] += comp_sizes[frag]
        adjacency[target] |= adjacency[frag]

    roots = [i for i in range(n_comps) if find(i) == i]
    # Primaries first in tile-id order keeps untouched maps byte-identical.
    roots.sort(key=lambda i: (not comp_primary[i], comp_tile[i], i))
    final_id = np.full(n_comps, -1, dtype=np.int32)
    for new_id, root in enumerate(roots):
        final_id[root] = new_id
    for i in range(n_comps):
        if final_id[i] < 0:
            final_id[i] = final_id[find(i)]

    new_assignment = final_id[comp_map]
    return TileMap(
        width=w,
        height=h,
        assignment=new_assignment,
        tiles=_tiles_from_assignment(new_assignment, cube),
        objective_trace=list(tilemap.objective_trace),
        grid_step=tilemap.grid_step,
    )


def label_tiles(tilemap: TileMap, label_map: np.ndarray) -> TileMap:
    """Attach majority-vote ground-truth labels to every tile in place.

    ``label_fraction`` records the majority share; a tile counts as
    label-uniform when at least 99% of its pixels agree.
    """
    if label_map.shape != (tilemap.width, tilemap.height):
        raise ShapeError(
            f"label map shape {label_map.shape} does not match tile map "
            f"({tilemap.width}, {tilemap.height})"
        )
    labels = np.asarray(label_map)
    for tile in tilemap.tiles:
        xy = tile.pixel_indices
        tile_labels = labels[xy[:, 0], xy[:, 1]]
        counts = np.bincount(tile_labels)
        tile.label = int(np.argmax(counts))
        tile.label_fraction = float(counts[tile.label] / tile.pixel_count)
    return tilemap


def extract_tile_patch(
    cube: HsiCube, tile: Tile, patch_size: int = 48
) -> tuple[np.ndarray, bool]:
    """Copy a tile's pixels into a zero-padded ``(patch, patch, channels)`` array.

    The tile's bounding box is centered in the patch; everything outside the
    tile stays exactly zero. Tiles whose bounding box exceeds the patch are
    center-cropped on the centroid and flagged via the second return value.
    """
    xy = tile.pixel_indices
    x_min, y_min = xy.min(axis=0)
    x_max, y_max = xy.max(axis=0)
    bw, bh = x_max - x_min + 1, y_max - y_min + 1

    patch = np.zeros((patch_size, patch_size, cube.channels), dtype=np.float32)
    cropped = bw > patch_size or bh > patch_size
    if not cropped:
        ox = (patch_size - bw) // 2 - x_min
        oy = (patch_size - bh) // 2 - y_min
        keep = np.ones(len(xy), dtype=bool)
    else:
        cx, cy = tile.centroid
        wx0 = int(np.clip(round(cx) - patch_size // 2, 0, max(0, cube.width - patch_size)))
        wy0 = int(np.clip(round(cy) - patch_size // 2, 0, max(0, cube.height - patch_size)))
        ox, oy = -wx0, -wy0
        keep = (
            (xy[:, 0] >= wx0)
            & (xy[:, 0] < wx0 + patch_size)
            & (xy[:, 1] >= wy0)
            & (xy[:, 1] < wy0 + patch_size)
        )
    sel = xy[keep]
    patch[sel[:, 0] + ox, sel[:, 1] + oy] = cube.data[sel[:, 0], sel[:, 1]]
    return patch, cropped


def save_tilemap(tilemap: TileMap, path) -> None:
    """Write the assignment raster (TIL1) plus a JSON sidecar of tile stats."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(TIL1_MAGIC)
        f.write(struct.pack("<II", tilemap.width, tilemap.height))
        f.write(np.ascontiguousarray(tilemap.assignment, dtype="<u4").tobytes())
    sidecar = {
        "grid_step": tilemap.grid_step,
        "objective_trace": tilemap.objective_trace,
        "tiles": [
            {
                "id": t.id,
                "pixel_count": t.pixel_count,
                "centroid": list(t.centroid),
                "label": t.label,
                "label_fraction": t.label_fraction,
                "mean_spectrum": [float(v) for v in t.mean_spectrum],
            }
            for t in tilemap.tiles
        ],
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f)


def load_tilemap(path) -> TileMap:
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TIL1_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {TIL1_MAGIC!r}", offset=0)
    w, h = struct.unpack_from("<II", raw, 4)
    n = w * h
    if len(raw) < 12 + 4 * n:
        raise FormatError(f"truncated payload: expected {n} u32 ids", offset=len(raw))
    assignment = (
        np.frombuffer(raw, dtype="<u4", count=n, offset=12).reshape(w, h).astype(np.int32)
    )
    with open(path + ".json") as f:
        sidecar = json.load(f)

    xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    flat = assignment.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=len(sidecar["tiles"]))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    pix_xy = np.stack([xs.ravel()[order], ys.ravel()[order]], axis=1)

    tiles = []
    for rec in sidecar["tiles"]:
        tid = rec["id"]
        tiles.append(
            Tile(
                id=tid,
                pixel_indices=pix_xy[offsets[tid] : offsets[tid + 1]],
                centroid=tuple(rec["centroid"]),
                mean_spectrum=np.array(rec["mean_spectrum"], dtype=np.float32),
                pixel_count=rec["pixel_count"],
                label=rec["label"],
                label_fraction=rec["label_fraction"],
            )
        )
    return TileMap(
        width=w,
        height=h,
        assignment=assignment,
        tiles=tiles,
        objective_trace=list(sidecar.get("objective_trace", [])),
        grid_step=float(sidecar.get("grid_step", 0.0)),
    )
