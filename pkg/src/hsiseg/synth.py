"""Synthetic hyperspectral phantoms: labeled cubes with planted degradations.

Each phantom is a smooth blob layout of tumor/healthy tissue over a
background margin. Class spectra are sums of 2-3 Gaussian bumps over the
wavelength axis, drawn until every pair is at least `min_class_separation`
apart in spectral angle, so a nearest-endmember classifier is well-posed.
Degradations (saturated blobs, dark blobs, noisy vessel stripes) plant
exactly the low-quality regions the tile filter is meant to catch.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cube import HsiCube, make_cube, sam_distance, save_cube, save_label_map
from .errors import ConfigError, DomainError

BACKGROUND, HEALTHY, TUMOR = 0, 1, 2
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple = (256, 256)
    channels: int = 32
    noise_sigma: float = 0.02
    healthy_blobs: int = 2
    tumor_blobs: int = 2
    saturated_blobs: int = 1
    dark_blobs: int = 1
    vessel_stripes: int = 2
    margin_fraction: float = 0.06
    min_class_separation: float = 0.15  # radians between class endmembers
    max_endmember_draws: int = 100
    max_image_shift: float = 0.025  # radians vs the shared base endmember

    def __post_init__(self):
        if len(self.size) != 2 or min(self.size) < 32:
            raise ConfigError(f"phantom size must be two dims >= 32, got {self.size}")
        if not 2 <= self.channels <= 109:
            raise ConfigError(f"channels must be in [2, 109], got {self.channels}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")


@dataclass
class PhantomImage:
    image_id: str
    cube: HsiCube
    labels: np.ndarray  # (w, h) uint8 class ids
    degradation: np.ndarray  # (w, h) bool, planted low-quality pixels
    seed: int
    endmember_shift: dict  # class id -> SAM vs the shared base spectrum


def _smooth_curve(rng: np.random.Generator, channels: int) -> np.ndarray:
    """Sum of 2-3 Gaussian bumps, rescaled into reflectance range [0.1, 0.9]."""
    grid = np.linspace(0.0, 1.0, channels)
    curve = np.full(channels, rng.uniform(0.1, 0.3))
    for _ in range(int(rng.integers(2, 4))):
        center = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.08, 0.35)
        amp = rng.uniform(0.2, 0.8)
        curve = curve + amp * np.exp(-0.5 * ((grid - center) / width) ** 2)
    lo, hi = curve.min(), curve.max()
    return 0.1 + 0.8 * (curve - lo) / max(hi - lo, 1e-9)


def draw_endmembers(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """(3, channels) class spectra with pairwise SAM >= min separation."""
    for _ in range(spec.max_endmember_draws):
        spectra = np.stack([_smooth_curve(rng, spec.channels) for _ in range(3)])
        gaps = [
            sam_distance(spectra[i], spectra[j])
            for i in range(3)
            for j in range(i + 1, 3)
        ]
        if min(gaps) >= spec.min_class_separation:
            return spectra
    raise DomainError(
        f"could not draw class spectra {spec.min_class_separation} rad apart "
        f"in {spec.max_endmember_draws} attempts"
    )


def shift_endmember(base: np.ndarray, rng: np.random.Generator, max_sam: float) -> np.ndarray:
    """A slightly rotated copy of ``base``: SAM(base, result) <= max_sam."""
    target = _smooth_curve(rng, base.size)
    t = 0.2
    candidate = base
    for _ in range(30):
        candidate = np.clip((1 - t) * base + t * target, 0.01, 1.0)
        if sam_distance(base, candidate) <= max_sam:
            break
        t *= 0.5
    return candidate


def _blob_field(shape, rng: np.random.Generator, n_blobs: int, radius_range) -> np.ndarray:
    """Sum of anisotropic Gaussian bumps; thresholding gives smooth blobs."""
    w, h = shape
    xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_blobs):
        cx = rng.uniform(0.25 * w, 0.75 * w)
        cy = rng.uniform(0.25 * h, 0.75 * h)
        rx = rng.uniform(*radius_range) * w
        ry = rng.uniform(*radius_range) * h
        angle = rng.uniform(0, np.pi)
        u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
        v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
        out += np.exp(-0.5 * ((u / rx) ** 2 + (v / ry) ** 2))
    return out


def _layout(shape, rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.uint8)
    healthy = _blob_field(shape, rng, spec.healthy_blobs, (0.14, 0.24)) > 0.6
    tumor = _blob_field(shape, rng, spec.tumor_blobs, (0.06, 0.12)) > 0.6
    labels[healthy] = HEALTHY
    labels[tumor] = TUMOR
    margin = int(spec.margin_fraction * min(shape))
    if margin:
        labels[:margin], labels[-margin:] = BACKGROUND, BACKGROUND
        labels[:, :margin], labels[:, -margin:] = BACKGROUND, BACKGROUND
    return labels


def _stripe_mask(shape, rng: np.random.Generator) -> np.ndarray:
    """A thin noisy 'vessel' streak across the interior."""
    w, h = shape
    mask = np.zeros(shape, dtype=bool)
    cx, cy = rng.uniform(0.25, 0.75) * w, rng.uniform(0.25, 0.75) * h
    angle = rng.uniform(0, np.pi)
    half = 0.3 * min(w, h)
    ts = np.arange(-half, half, 0.5)
    xs = np.clip(np.round(cx + ts * np.cos(angle)).astype(int), 0, w - 1)
    ys = np.clip(np.round(cy + ts * np.sin(angle)).astype(int), 0, h - 1)
    mask[xs, ys] = True
    return ndimage.binary_dilation(mask, iterations=1)


def generate_phantom(spec: PhantomSpec, seed: int, endmembers: np.ndarray = None):
    """One phantom: (HsiCube, label map (w,h) uint8, degradation mask (w,h) bool).

    Deterministic under (spec, seed, endmembers). With zero noise and no
    degradations every pixel equals its class endmember exactly.
    """
    rng = np.random.default_rng(seed)
    if endmembers is None:
        endmembers = draw_endmembers(rng, spec)
    endmembers = np.asarray(endmembers, dtype=np.float64)

    shape = tuple(spec.size)
    labels = _layout(shape, rng, spec)
    for _ in range(20):
        if len(np.unique(labels)) == 3:
            break
        labels = _layout(shape, rng, spec)
    else:
        raise DomainError("failed to lay out all three classes; widen blob ranges")

    data = endmembers[labels].astype(np.float32)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape).astype(np.float32)

    degradation = np.zeros(shape, dtype=bool)
    for _ in range(spec.saturated_blobs):
        blob = _blob_field(shape, rng, 1, (0.04, 0.07)) > 0.6
        data[blob] = 1.0
        degradation |= blob
    for _ in range(spec.dark_blobs):
        blob = _blob_field(shape, rng, 1, (0.04, 0.07)) > 0.6
        data[blob] = 0.01
        degradation |= blob
    for _ in range(spec.vessel_stripes):
        stripe = _stripe_mask(shape, rng)
        data[stripe] += rng.normal(0.0, 0.25, size=(int(stripe.sum()), spec.channels)).astype(
            np.float32
        )
        degradation |= stripe

    cube = make_cube(np.clip(data, 0.0, 1.0))
    return cube, labels, degradation


def generate_dataset(n_images: int, spec: PhantomSpec, seed: int, out_dir=None):
    """n phantoms sharing base endmembers, plus a manifest dict.

    Each image gets a per-image spectral shift (<= spec.max_image_shift vs
    the base, so same-class endmembers of any two images stay within twice
    that in SAM). With ``out_dir`` set, writes cubes, label maps,
    degradation masks and manifest.json there.
    """
    if n_images < 3:
        raise ConfigError(f"need at least 3 images, got {n_images}")
    root = np.random.SeedSequence(seed)
    base_rng = np.random.default_rng(root.spawn(1)[0])
    base = draw_endmembers(base_rng, spec)

    images = []
    entries = []
    for i in range(n_images):
        image_seed = int(np.random.SeedSequence([seed, i + 1]).generate_state(1)[0])
        shift_rng = np.random.default_rng(image_seed ^ 0x5EED)
        shifted = np.stack(
            [shift_endmember(base[c], shift_rng, spec.max_image_shift) for c in range(3)]
        )
        shifts = {c: float(sam_distance(base[c], shifted[c])) for c in range(3)}
        cube, labels, degradation = generate_phantom(spec, image_seed, endmembers=shifted)
        image_id = f"phantom_{i:03d}"
        images.append(PhantomImage(image_id, cube, labels, degradation, image_seed, shifts))
        entries.append(
            {
                "id": image_id,
                "seed": image_seed,
                "cube": f"{image_id}.hsc",
                "labels": f"{image_id}_labels.lbl",
                "degradation": f"{image_id}_degradation.lbl",
                "endmember_shift_sam": shifts,
            }
        )

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "n_images": n_images,
        "spec": asdict(spec),
        "images": entries,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for image, entry in zip(images, entries):
            save_cube(image.cube, out / entry["cube"])
            save_label_map(image.labels, out / entry["labels"])
            save_label_map(image.degradation.astype(np.uint8), out / entry["degradation"])
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return images, manifest
