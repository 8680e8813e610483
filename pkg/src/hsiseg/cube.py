"""Hyperspectral cube container, spectral distances, and binary cube I/O.

A cube stores reflectance in a dense ``(width, height, channels)`` float32
array indexed as ``data[x, y, wavelength]``. The on-disk HSC1 layout is the
same array flattened in C order (wavelength fastest), preceded by a fixed
header, so round-trips are bit-exact.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, ShapeError

HSC1_MAGIC = b"HSC1"
LBL1_MAGIC = b"LBL1"

# Reference acquisition defaults: 109 channels spanning ~468-790 nm.
DEFAULT_CHANNELS = 109
DEFAULT_WAVELENGTH_RANGE = (468.0, 790.0)

_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class HsiCube:
    """Immutable hyperspectral data volume with its wavelength axis.

    ``n_clamped`` counts values that were clipped into [0, 1] at load time;
    sensor exports commonly overshoot slightly, so clipping only warns.
    """

    width: int
    height: int
    channels: int
    wavelengths: np.ndarray
    data: np.ndarray
    n_clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.data.shape != (self.width, self.height, self.channels):
            raise ShapeError(
                f"cube data shape {self.data.shape} does not match header "
                f"({self.width}, {self.height}, {self.channels})"
            )
        if self.wavelengths.shape != (self.channels,):
            raise ShapeError(
                f"wavelength axis has {self.wavelengths.shape[0]} entries, "
                f"expected {self.channels}"
            )
        if not np.all(np.diff(self.wavelengths) > 0):
            raise DomainError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("cube contains non-finite reflectance values")
        self.data.setflags(write=False)
        self.wavelengths.setflags(write=False)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def spectrum(self, x: int, y: int) -> np.ndarray:
        return self.data[x, y]


def make_cube(data, wavelengths=None, clamp: bool = False) -> HsiCube:
    """Wrap an array as an HsiCube, optionally clipping values into [0, 1]."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 3:
        raise ShapeError(f"cube data must be 3-d (x, y, wavelength), got {data.ndim}-d")
    w, h, c = data.shape
    if wavelengths is None:
        lo, hi = DEFAULT_WAVELENGTH_RANGE
        wavelengths = np.linspace(lo, hi, c)
    wavelengths = np.ascontiguousarray(wavelengths, dtype=np.float32)
    n_clamped = 0
    if clamp:
        out_of_range = (data < 0.0) | (data > 1.0)
        n_clamped = int(np.count_nonzero(out_of_range))
        if n_clamped:
            data = np.clip(data, 0.0, 1.0)
    return HsiCube(w, h, c, wavelengths, data, n_clamped=n_clamped)


def sam_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Spectral angle between two spectra, in radians.

    arccos of the normalized dot product, with the cosine clamped to
    [-1, 1] to absorb rounding. Zero-norm spectra have no angle.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"spectra lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _ZERO_NORM:
        raise DomainError("first spectrum has zero norm; spectral angle undefined")
    if nb < _ZERO_NORM:
        raise DomainError("second spectrum has zero norm; spectral angle undefined")
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.arccos(cos))


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two spectra."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"spectra lengths differ: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))


def sam_to_reference(pixels: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Vectorized spectral angles of many spectra against one reference.

    Near-zero norms are floored instead of rejected: an all-dark pixel maps
    to pi/2 against any reference, which keeps bulk callers (SLIC, quality)
    well defined on degenerate pixels.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64).ravel()
    norms = np.maximum(np.linalg.norm(pixels, axis=-1), _ZERO_NORM)
    ref_norm = max(np.linalg.norm(reference), _ZERO_NORM)
    cos = np.clip(pixels @ reference / (norms * ref_norm), -1.0, 1.0)
    return np.arccos(cos)


def l2_to_reference(pixels: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Vectorized Euclidean distances of many spectra against one reference."""
    pixels = np.asarray(pixels, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64).ravel()
    return np.linalg.norm(pixels - reference, axis=-1)


def save_cube(cube: HsiCube, path) -> None:
    """Write a cube in the HSC1 binary format.

    Layout: 4-byte magic ``HSC1``; little-endian u32 width, height,
    channels; ``channels`` little-endian f32 wavelengths; then
    ``width*height*channels`` little-endian f32 reflectance values with
    wavelength varying fastest, then y, then x.
    """
    with open(path, "wb") as f:
        f.write(HSC1_MAGIC)
        f.write(struct.pack("<III", cube.width, cube.height, cube.channels))
        f.write(np.asarray(cube.wavelengths, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())


def load_cube(path) -> HsiCube:
    """Read an HSC1 cube. Values outside [0, 1] are clamped and counted."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != HSC1_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {HSC1_MAGIC!r}", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated header", offset=len(raw))
    w, h, c = struct.unpack_from("<III", raw, 4)
    n_values = w * h * c
    if w < 1 or h < 1 or c < 1 or n_values > 2**32:
        raise FormatError(f"implausible dimensions {w}x{h}x{c}", offset=4)
    wl_end = 16 + 4 * c
    payload_end = wl_end + 4 * n_values
    if len(raw) < wl_end:
        raise FormatError("truncated wavelength table", offset=len(raw))
    if len(raw) < payload_end:
        raise FormatError(
            f"truncated payload: expected {n_values} f32 values", offset=len(raw)
        )
    wavelengths = np.frombuffer(raw, dtype="<f4", count=c, offset=16).copy()
    data = np.frombuffer(raw, dtype="<f4", count=n_values, offset=wl_end)
    data = data.reshape(w, h, c).copy()
    if not np.all(np.isfinite(data)):
        raise FormatError("payload contains non-finite values", offset=wl_end)
    return make_cube(data, wavelengths, clamp=True)


def save_label_map(labels: np.ndarray, path) -> None:
    """Write a per-pixel u8 raster (class labels or masks) as LBL1.

    Layout mirrors HSC1: magic, u32 width/height, then width*height u8
    values with y varying fastest (same x-major order as cube payloads).
    """
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-d (x, y), got {labels.ndim}-d")
    with open(path, "wb") as f:
        f.write(LBL1_MAGIC)
        f.write(struct.pack("<II", labels.shape[0], labels.shape[1]))
        f.write(labels.tobytes())


def load_label_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LBL1_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {LBL1_MAGIC!r}", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated header", offset=len(raw))
    w, h = struct.unpack_from("<II", raw, 4)
    if len(raw) < 12 + w * h:
        raise FormatError(f"truncated payload: expected {w * h} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=12).reshape(w, h).copy()
