"""Tile classifier/encoder: channel compression, conv blocks, 48-d embedding.

The network takes 48x48 spectral patches, compresses the channel axis with
a 1x1 convolution, applies four strided conv blocks (each conv -> LeakyReLU
-> BatchNorm), average-pools to a 48-dim embedding and classifies with a
linear head. Patch augmentation used during training lives here too.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, ShapeError

PATCH_SIZE = 48


@dataclass(frozen=True)
class CnnConfig:
    """Architecture hyperparameters; defaults reproduce the reference model."""

    input_channels: int = 109
    compressed_channels: int = 12
    base_features: int = 12
    num_classes: int = 3
    kernels: tuple = (3, 4, 4, 4)
    strides: tuple = (1, 2, 2, 2)
    paddings: tuple = (1, 1, 1, 1)
    leaky_slope: float = 0.01
    head_dropout: float = 0.5
    batch_norm: bool = True
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        if not (len(self.kernels) == len(self.strides) == len(self.paddings) == 4):
            raise ConfigError("kernels, strides and paddings must each list 4 blocks")
        if self.base_features % 2 != 0:
            raise ConfigError("base_features must be even (first block has N_f/2 features)")

    @property
    def block_features(self) -> tuple:
        nf = self.base_features
        return (nf // 2, nf, 2 * nf, 4 * nf)

    @property
    def embedding_dim(self) -> int:
        return 4 * self.base_features


def kaiming_std(fan_in: int, slope: float = 0.01) -> float:
    """Fan-in scaled init std for LeakyReLU layers."""
    return float(np.sqrt(2.0 / ((1.0 + slope**2) * fan_in)))


class CnnModel:
    """Parameter container plus forward pass. Not safe for concurrent mutation."""

    def __init__(self, cfg: CnnConfig = CnnConfig(), seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.last_trace: list[int] = []
        rng = np.random.default_rng(seed)

        def conv_layer(name, cin, cout, k):
            std = kaiming_std(cin * k * k, cfg.leaky_slope)
            self.params[f"{name}.weight"] = Tensor(
                rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32),
                requires_grad=True,
            )
            self.params[f"{name}.bias"] = Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=True
            )
            if cfg.batch_norm:
                self.params[f"{name}.bn_gamma"] = Tensor(
                    np.ones(cout, dtype=np.float32), requires_grad=True
                )
                self.params[f"{name}.bn_beta"] = Tensor(
                    np.zeros(cout, dtype=np.float32), requires_grad=True
                )
                self.bn_states[name] = BatchNormState.create(cout)

        conv_layer("cnn.compress", cfg.input_channels, cfg.compressed_channels, 1)
        cin = cfg.compressed_channels
        for i, (cout, k) in enumerate(zip(cfg.block_features, cfg.kernels), start=1):
            conv_layer(f"cnn.block{i}", cin, cout, k)
            cin = cout

        std = kaiming_std(cfg.embedding_dim, cfg.leaky_slope)
        self.params["cnn.head.weight"] = Tensor(
            rng.normal(0.0, std, size=(cfg.embedding_dim, cfg.num_classes)).astype(np.float32),
            requires_grad=True,
        )
        self.params["cnn.head.bias"] = Tensor(
            np.zeros(cfg.num_classes, dtype=np.float32), requires_grad=True
        )

    def _conv_block(self, x: Tensor, name: str, stride: int, padding: int, train: bool) -> Tensor:
        x = ad.conv2d(
            x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
            stride=stride, padding=padding,
        )
        x = ad.leaky_relu(x, self.cfg.leaky_slope)
        if self.cfg.batch_norm:
            x = ad.batch_norm(
                x, self.params[f"{name}.bn_gamma"], self.params[f"{name}.bn_beta"],
                self.bn_states[name], train=train,
            )
        return x

    def forward(self, patches, train: bool = False, dropout_seed: int = 0):
        """Run patches (B, 48, 48, N_λ) through the network.

        Returns ``(embeddings, logits)`` tensors of shapes (B, 48) and
        (B, num_classes). In eval mode (dropout and batch norm frozen) the
        result is a deterministic function of the input. After every call
        ``self.last_trace`` holds the spatial size seen after each conv stage,
        e.g. ``[48, 48, 24, 12, 6]`` for the default geometry.
        """
        cfg = self.cfg
        x = np.asarray(patches, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != cfg.patch_size or x.shape[2] != cfg.patch_size:
            raise ShapeError(
                f"expected patches (B, {cfg.patch_size}, {cfg.patch_size}, C), got {x.shape}"
            )
        if x.shape[3] != cfg.input_channels:
            raise ShapeError(
                f"patch has {x.shape[3]} channels, model expects {cfg.input_channels}"
            )
        h = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        h = self._conv_block(h, "cnn.compress", stride=1, padding=0, train=train)
        trace = [h.shape[2]]
        for i, (stride, padding) in enumerate(zip(cfg.strides, cfg.paddings), start=1):
            h = self._conv_block(h, f"cnn.block{i}", stride=stride, padding=padding, train=train)
            trace.append(h.shape[2])
        self.last_trace = trace
        z = ad.avg_pool_full(h)
        z = ad.dropout(z, cfg.head_dropout, train=train, seed=dropout_seed)
        logits = ad.linear(z, self.params["cnn.head.weight"], self.params["cnn.head.bias"])
        return z, logits

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict:
        """All checkpointable arrays: parameters plus batch-norm buffers."""
        out = {name: p.values for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}.bn_running_mean"] = st.running_mean
            out[f"{name}.bn_running_var"] = st.running_var
        return out

    def load_state(self, tensors: dict):
        for name, p in self.params.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.values.shape:
                raise ConfigError(
                    f"checkpoint shape {tensors[name].shape} does not match "
                    f"{name!r} {p.values.shape}"
                )
            p.values = tensors[name].astype(np.float32)
        for name, st in self.bn_states.items():
            st.running_mean = tensors[f"{name}.bn_running_mean"].astype(np.float32)
            st.running_var = tensors[f"{name}.bn_running_var"].astype(np.float32)


# ---------------------------------------------------------------------------
# patch augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Magnitudes for the five patch transforms; each fires with `probability`."""

    probability: float = 0.5
    max_shift_px: int = 4
    brightness_range: tuple = (0.9, 1.1)
    scale_range: tuple = (0.9, 1.1)
    max_blur_sigma: float = 1.0
    enabled: bool = True


def _shift2d(patch: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer spatial shift with zero fill, channels untouched."""
    out = np.zeros_like(patch)
    h, w = patch.shape[:2]
    src_x = slice(max(0, -dx), min(h, h - dx))
    dst_x = slice(max(0, dx), min(h, h + dx))
    src_y = slice(max(0, -dy), min(w, w - dy))
    dst_y = slice(max(0, dy), min(w, w + dy))
    out[dst_x, dst_y] = patch[src_x, src_y]
    return out


def _bilinear_rescale(patch: np.ndarray, factor: float) -> np.ndarray:
    """Rescale the spatial dims of an (H, W, C) patch by `factor`."""
    h, w = patch.shape[:2]
    out_h = max(1, int(round(h * factor)))
    out_w = max(1, int(round(w * factor)))

    def _axis_samples(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(np.intp)
        frac = (pos - lo).astype(np.float32)
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac

    lo_x, hi_x, fx = _axis_samples(out_h, h)
    lo_y, hi_y, fy = _axis_samples(out_w, w)
    rows = patch[lo_x] * (1.0 - fx)[:, None, None] + patch[hi_x] * fx[:, None, None]
    return rows[:, lo_y] * (1.0 - fy)[None, :, None] + rows[:, hi_y] * fy[None, :, None]


def _center_resize(patch: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad the spatial dims back to `size`."""
    h, w = patch.shape[:2]
    if h > size:
        off = (h - size) // 2
        patch = patch[off : off + size]
    if w > size:
        off = (w - size) // 2
        patch = patch[:, off : off + size]
    h, w = patch.shape[:2]
    if h < size or w < size:
        out = np.zeros((size, size) + patch.shape[2:], dtype=patch.dtype)
        ox, oy = (size - h) // 2, (size - w) // 2
        out[ox : ox + h, oy : oy + w] = patch
        patch = out
    return patch


def augment_patch(patch: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Randomly shift / brighten / rotate / rescale / blur one (H, W, C) patch.

    Each transform is applied independently with ``cfg.probability``; the
    same seed always yields the same output.
    """
    rng = np.random.default_rng(seed)
    out = np.asarray(patch, dtype=np.float32)
    size = out.shape[0]
    if not cfg.enabled:
        return out

    if rng.random() < cfg.probability:
        dx, dy = rng.integers(-cfg.max_shift_px, cfg.max_shift_px + 1, size=2)
        out = _shift2d(out, int(dx), int(dy))
    if rng.random() < cfg.probability:
        factor = rng.uniform(*cfg.brightness_range)
        out = np.clip(out * factor, 0.0, 1.0)
    if rng.random() < cfg.probability:
        out = np.rot90(out, k=int(rng.integers(1, 4)), axes=(0, 1))
    if rng.random() < cfg.probability:
        factor = rng.uniform(*cfg.scale_range)
        out = _center_resize(_bilinear_rescale(out, factor), size)
    if rng.random() < cfg.probability:
        sigma = rng.uniform(0.0, cfg.max_blur_sigma)
        if sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0))
    return np.ascontiguousarray(out, dtype=np.float32)
