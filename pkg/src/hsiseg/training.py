"""Training loops for the tile classifiers.

Covers the three tile regimes (good-tiles-only, all tiles, all tiles with
quality-weighted loss), the image-level dataset split, SGD with momentum
and cosine decay, and the combined CNN+GNN objective where embeddings cross
a stop-gradient boundary into the graph head.
"""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import AugmentConfig, CnnConfig, CnnModel, augment_patch
from .errors import ConfigError, NumericsError
from .evaluate import macro_accuracy
from .graph import (
    GatConfig,
    GatModel,
    GraphAugmentConfig,
    TileGraph,
    augment_graph,
    build_knn_graph,
)
from .quality import WeightConfig, compute_qualities, filter_high_quality, loss_weights
from .tiling import extract_tile_patch, label_tiles

REGIMES = ("good_only", "all", "all_weighted")
REGIME_SUFFIX = {"good_only": "_g", "all": "_a", "all_weighted": "_aW"}
MODELS = ("cnn", "cnn_gnn")

# rng stream salts: init, shuffle, patch augment, dropout, graph augment
_S_INIT, _S_SHUF, _S_AUG, _S_DROP, _S_GRAPH = 1, 2, 3, 4, 5


def derive_seed(*parts) -> int:
    """Deterministic child seed from (global seed, epoch, sample, ...) parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    model: str = "cnn"
    tile_regime: str = "good_only"
    epochs: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    cosine_decay: bool = True
    batch_size: int = 64
    seed: int = 0
    patience: int = 15
    lambda_cnn: float = 1.0  # coefficient on the CNN term of the combined loss
    knn_k: int = 2
    augment: bool = True
    run_dir: str | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.tile_regime not in REGIMES:
            raise ConfigError(
                f"tile_regime must be one of {REGIMES}, got {self.tile_regime!r}"
            )
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")


@dataclass
class DatasetSplit:
    """Image-level partition; tiles inherit their image's membership."""

    train: list
    val: list
    test: list

    def part(self, name: str) -> list:
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def make_split(images, fractions=(0.65, 0.165, 0.185), seed: int = 0) -> DatasetSplit:
    """Randomly assign whole images to train/val/test, targeting tile fractions.

    ``images`` maps image id -> tile count (a dict or (id, count) pairs).
    Images are shuffled, then taken greedily: each split keeps consuming
    while that brings its cumulative tile count strictly closer to the
    target; leftovers become the test split.
    """
    items = list(images.items()) if isinstance(images, dict) else [tuple(x) for x in images]
    if len(items) < 3:
        raise ConfigError(f"need at least 3 images to split, got {len(items)}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"fractions must be 3 nonnegative values summing to 1: {fractions}")

    rng = np.random.default_rng(seed)
    order = [items[i] for i in rng.permutation(len(items))]
    total = sum(count for _, count in order)

    parts = {"train": [], "val": [], "test": []}
    position = 0
    for name, frac in (("train", fractions[0]), ("val", fractions[1])):
        target = frac * total
        cum = 0
        while position < len(order):
            image_id, count = order[position]
            if abs(cum + count - target) < abs(cum - target):
                parts[name].append(image_id)
                cum += count
                position += 1
            else:
                break
    parts["test"] = [image_id for image_id, _ in order[position:]]
    return DatasetSplit(**parts)


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class TrainingImage:
    """One image with per-tile labels, quality weights and the keep mask."""

    image_id: str
    cube: object
    tilemap: object
    labels: np.ndarray
    weights: np.ndarray
    kept: np.ndarray

    @property
    def n_tiles(self) -> int:
        return len(self.tilemap.tiles)

    @property
    def centroids(self) -> np.ndarray:
        return self.tilemap.centroids()

    @property
    def grid_step(self) -> float:
        return self.tilemap.grid_step

    def patch(self, tile_idx: int) -> np.ndarray:
        patch, _ = extract_tile_patch(self.cube, self.tilemap.tiles[tile_idx])
        return patch


@dataclass
class TrainingDataset:
    images: list
    split: DatasetSplit

    def part_images(self, part: str) -> list:
        wanted = set(self.split.part(part))
        return [img for img in self.images if img.image_id in wanted]

    @property
    def channels(self) -> int:
        return self.images[0].cube.channels


def prepare_dataset(
    raw_images,
    fractions=(0.65, 0.165, 0.185),
    seed: int = 0,
    weight_cfg: WeightConfig = WeightConfig(),
) -> TrainingDataset:
    """Label tiles, score quality dataset-wide, weight, filter and split.

    ``raw_images`` is a list of (image_id, cube, tilemap, label_map). The
    quality filter percentiles are computed over the pooled tiles of all
    images so 'good' means good relative to the whole dataset.
    """
    images = []
    all_qualities, all_uniform, spans = [], [], []
    for image_id, cube, tilemap, label_map in raw_images:
        label_tiles(tilemap, label_map)
        qualities = compute_qualities(cube, tilemap.tiles)
        start = len(all_qualities)
        all_qualities.extend(qualities)
        all_uniform.extend(tile.label_uniform for tile in tilemap.tiles)
        spans.append((image_id, cube, tilemap, qualities, start, len(all_qualities)))

    result = filter_high_quality(all_qualities, label_uniform=all_uniform)
    for image_id, cube, tilemap, qualities, start, stop in spans:
        images.append(
            TrainingImage(
                image_id=image_id,
                cube=cube,
                tilemap=tilemap,
                labels=np.asarray([t.label if t.label is not None else -1
                                   for t in tilemap.tiles], dtype=np.int64),
                weights=loss_weights(qualities, weight_cfg),
                kept=result.kept[start:stop].copy(),
            )
        )
    split = make_split({img.image_id: img.n_tiles for img in images}, fractions, seed)
    return TrainingDataset(images=images, split=split)


def regime_tile_indices(image: TrainingImage, regime: str):
    """(tile indices, loss weights) an image contributes under a regime.

    Unlabeled tiles never train; good_only additionally drops filtered
    tiles; all_weighted swaps unit weights for the quality weights.
    """
    labeled = image.labels >= 0
    if regime == "good_only":
        idx = np.flatnonzero(labeled & image.kept)
    else:
        idx = np.flatnonzero(labeled)
    if regime == "all_weighted":
        weights = image.weights[idx]
    else:
        weights = np.ones(idx.size)
    return idx, weights


# ---------------------------------------------------------------------------
# optimizer


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """sum_i w_i * CE_i / sum_i w_i (unit weights give the plain mean)."""
    return ad.cross_entropy(logits, labels, weights)


def cosine_lr(base: float, epoch: int, total: int) -> float:
    if total <= 1:
        return base
    return float(base * 0.5 * (1.0 + np.cos(np.pi * epoch / (total - 1))))


class SgdMomentum:
    """Heavy-ball SGD over a dict of parameter tensors."""

    def __init__(self, params: dict, lr: float = 1e-3, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.values -= (self.lr * v).astype(p.values.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    config: TrainConfig
    history: list
    best_epoch: int
    best_val_acc: float
    cnn: CnnModel = None
    gat: GatModel = None

    def state_tensors(self) -> dict:
        out = dict(self.cnn.state_tensors()) if self.cnn else {}
        if self.gat:
            out.update(self.gat.state_tensors())
        return out


class _RunWriter:
    """Persists config/history/split/checkpoints under a run directory."""

    def __init__(self, cfg: TrainConfig, dataset: TrainingDataset, arch: dict):
        self.arch = arch
        self.root = Path(cfg.run_dir) if cfg.run_dir else None
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        resolved = dict(asdict(cfg), arch=arch)
        (self.root / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        (self.root / "split.json").write_text(
            json.dumps(dataset.split.to_json(), indent=2, sort_keys=True)
        )
        (self.root / "history.jsonl").write_text("")

    def epoch(self, entry: dict):
        if self.root is not None:
            with open(self.root / "history.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def checkpoint(self, name: str, tensors: dict, metadata: dict):
        if self.root is not None:
            save_checkpoint(self.root / "checkpoints" / name,
                            tensors, dict(metadata, arch=self.arch))


def _gather_items(dataset: TrainingDataset, part: str, regime: str):
    """Flat [(image, tile index, weight)] list for one split part."""
    items = []
    for image in dataset.part_images(part):
        idx, weights = regime_tile_indices(image, regime)
        items.extend((image, int(t), float(w)) for t, w in zip(idx, weights))
    return items


def _batch_patches(items, order, cfg: TrainConfig, epoch: int, train: bool):
    """Stack patches (with per-sample augmentation seeds) plus labels/weights."""
    patches, labels, weights = [], [], []
    for pos in order:
        image, tile_idx, weight = items[pos]
        patch = image.patch(tile_idx)
        if train and cfg.augment:
            patch = augment_patch(patch, derive_seed(cfg.seed, _S_AUG, epoch, pos))
        patches.append(patch)
        labels.append(image.labels[tile_idx])
        weights.append(weight)
    return np.stack(patches), np.asarray(labels), np.asarray(weights)


def _eval_cnn(model: CnnModel, items, batch_size: int):
    """(loss, macro accuracy) over items in eval mode; (nan, nan) when empty."""
    if not items:
        return float("nan"), float("nan")
    all_logits, labels, weights = [], [], []
    with ad.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = range(start, min(start + batch_size, len(items)))
            patches, lab, wgt = _batch_patches(items, chunk, None, 0, train=False)
            _, logits = model.forward(patches, train=False)
            all_logits.append(logits.values)
            labels.append(lab)
            weights.append(wgt)
    logits = np.concatenate(all_logits)
    labels = np.concatenate(labels)
    weights = np.concatenate(weights)
    loss = ad.cross_entropy(Tensor(logits), labels, weights).item()
    acc = macro_accuracy(labels, logits.argmax(axis=1), model.cfg.num_classes)
    return loss, acc


def train_cnn(cfg: TrainConfig, dataset: TrainingDataset, cnn_cfg: CnnConfig = None) -> TrainResult:
    """Train the standalone CNN under cfg.tile_regime with early stopping."""
    if cnn_cfg is None:
        cnn_cfg = CnnConfig(input_channels=dataset.channels)
    train_items = _gather_items(dataset, "train", cfg.tile_regime)
    val_items = _gather_items(dataset, "val", cfg.tile_regime)
    if not train_items:
        raise ConfigError("training set is empty after filtering")

    model = CnnModel(cnn_cfg, seed=derive_seed(cfg.seed, _S_INIT))
    opt = SgdMomentum(model.params, lr=cfg.lr, momentum=cfg.momentum)
    writer = _RunWriter(cfg, dataset, {"cnn": asdict(cnn_cfg)})

    history = []
    best_acc, best_epoch, best_state, stale = -np.inf, -1, None, 0
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.cosine_decay else cfg.lr
        rng = np.random.default_rng(derive_seed(cfg.seed, _S_SHUF, epoch))
        order = rng.permutation(len(train_items))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            patches, labels, weights = _batch_patches(train_items, batch, cfg, epoch, train=True)
            opt.zero_grad()
            _, logits = model.forward(
                patches, train=True, dropout_seed=derive_seed(cfg.seed, _S_DROP, epoch, b)
            )
            loss = weighted_cross_entropy(logits, labels, weights)
            if not np.isfinite(loss.item()):
                raise NumericsError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            batch_losses.append(loss.item())

        val_loss, val_acc = _eval_cnn(model, val_items, cfg.batch_size)
        entry = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": float(np.mean(batch_losses)),
            "val_loss": val_loss,
            "val_macro_acc": val_acc,
        }
        history.append(entry)
        writer.epoch(entry)

        if not np.isnan(val_acc) and val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_state = copy.deepcopy(model.state_tensors())
        else:
            stale += 1
            if not np.isnan(val_acc) and stale > cfg.patience:
                break

    if best_state is None:  # no validation signal: keep the final weights
        best_epoch, best_acc = len(history) - 1, float("nan")
        best_state = copy.deepcopy(model.state_tensors())
    writer.checkpoint("last", model.state_tensors(),
                      {"epoch": len(history) - 1, "config": asdict(cfg)})
    model.load_state(best_state)
    writer.checkpoint("best", best_state,
                      {"epoch": best_epoch, "val_macro_acc": best_acc, "config": asdict(cfg)})
    return TrainResult(cfg, history, best_epoch, float(best_acc), cnn=model)


def _image_graph(image: TrainingImage, idx: np.ndarray, features: np.ndarray,
                 weights: np.ndarray, k: int) -> TileGraph:
    coords = image.centroids[idx]
    return TileGraph(
        features=features,
        edges=build_knn_graph(coords, k=k),
        coords=coords,
        labels=image.labels[idx],
        weights=weights,
        mask=np.zeros(idx.size, dtype=np.int8),
    )


def _cnn_embed(model: CnnModel, image: TrainingImage, idx, cfg: TrainConfig,
               epoch: int, train: bool, salt: int):
    """Chunked CNN forward over one image's tiles; returns (z, logits) tensors."""
    zs, logit_parts = [], []
    for c, start in enumerate(range(0, len(idx), cfg.batch_size)):
        chunk = idx[start : start + cfg.batch_size]
        patches = []
        for t in chunk:
            patch = image.patch(int(t))
            if train and cfg.augment:
                patch = augment_patch(patch, derive_seed(cfg.seed, _S_AUG, epoch, salt, t))
            patches.append(patch)
        z, logits = model.forward(
            np.stack(patches), train=train,
            dropout_seed=derive_seed(cfg.seed, _S_DROP, epoch, salt, c),
        )
        zs.append(z)
        logit_parts.append(logits)
    if len(zs) == 1:
        return zs[0], logit_parts[0]
    return ad.concat(zs, axis=0), ad.concat(logit_parts, axis=0)


def train_cnn_gnn(cfg: TrainConfig, dataset: TrainingDataset,
                  cnn_cfg: CnnConfig = None, gat_cfg: GatConfig = None) -> TrainResult:
    """Jointly train CNN backbone + GAT head on the combined loss.

    One optimizer step per image-graph. Embeddings reach the GAT through a
    stop-gradient boundary, so the graph loss never updates the CNN; the
    CNN learns from its own logits, scaled by cfg.lambda_cnn.
    """
    if cnn_cfg is None:
        cnn_cfg = CnnConfig(input_channels=dataset.channels,
                            head_dropout=0.3, batch_norm=False)
    if gat_cfg is None:
        gat_cfg = GatConfig(input_dim=cnn_cfg.embedding_dim,
                            num_classes=cnn_cfg.num_classes)

    train_images = dataset.part_images("train")
    val_images = dataset.part_images("val")
    usable = []
    for image in train_images:
        idx, weights = regime_tile_indices(image, cfg.tile_regime)
        if idx.size > cfg.knn_k:
            usable.append((image, idx, weights))
    if not usable:
        raise ConfigError("training set is empty after filtering")

    cnn = CnnModel(cnn_cfg, seed=derive_seed(cfg.seed, _S_INIT))
    gat = GatModel(gat_cfg, seed=derive_seed(cfg.seed, _S_INIT, 1))
    opt = SgdMomentum({**cnn.params, **gat.params}, lr=cfg.lr, momentum=cfg.momentum)
    writer = _RunWriter(cfg, dataset, {"cnn": asdict(cnn_cfg), "gat": asdict(gat_cfg)})
    aug_cfg = GraphAugmentConfig(k=cfg.knn_k, enabled=cfg.augment)

    history = []
    best_acc, best_epoch, best_state, stale = -np.inf, -1, None, 0
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.cosine_decay else cfg.lr
        rng = np.random.default_rng(derive_seed(cfg.seed, _S_SHUF, epoch))
        cnn_losses, gnn_losses = [], []
        for img_pos in rng.permutation(len(usable)):
            image, idx, weights = usable[img_pos]
            z, cnn_logits = _cnn_embed(cnn, image, idx, cfg, epoch, True, salt=int(img_pos))
            loss_cnn = weighted_cross_entropy(cnn_logits, image.labels[idx], weights)

            graph = _image_graph(image, idx, z.values, weights, cfg.knn_k)
            graph = augment_graph(
                graph, derive_seed(cfg.seed, _S_GRAPH, epoch, img_pos),
                image.grid_step, aug_cfg,
            )
            gat_logits = gat.forward(
                graph.features, graph.edges, train=True,
                dropout_seed=derive_seed(cfg.seed, _S_DROP, epoch, img_pos, 7),
            )
            loss_gnn = weighted_cross_entropy(gat_logits, graph.labels, graph.weights)

            if not (np.isfinite(loss_cnn.item()) and np.isfinite(loss_gnn.item())):
                raise NumericsError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            ad.backward(ad.add(ad.mul(loss_cnn, cfg.lambda_cnn), loss_gnn))
            opt.step()
            cnn_losses.append(loss_cnn.item())
            gnn_losses.append(loss_gnn.item())

        val_loss, val_acc = _eval_gnn(cnn, gat, val_images, cfg)
        entry = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss_cnn": float(np.mean(cnn_losses)),
            "train_loss_gnn": float(np.mean(gnn_losses)),
            "train_loss": float(np.mean(cnn_losses) * cfg.lambda_cnn + np.mean(gnn_losses)),
            "val_loss": val_loss,
            "val_macro_acc": val_acc,
        }
        history.append(entry)
        writer.epoch(entry)

        if not np.isnan(val_acc) and val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_state = copy.deepcopy({**cnn.state_tensors(), **gat.state_tensors()})
        else:
            stale += 1
            if not np.isnan(val_acc) and stale > cfg.patience:
                break

    if best_state is None:
        best_epoch, best_acc = len(history) - 1, float("nan")
        best_state = copy.deepcopy({**cnn.state_tensors(), **gat.state_tensors()})
    writer.checkpoint("last", {**cnn.state_tensors(), **gat.state_tensors()},
                      {"epoch": len(history) - 1, "config": asdict(cfg)})
    cnn.load_state(best_state)
    gat.load_state(best_state)
    writer.checkpoint("best", best_state,
                      {"epoch": best_epoch, "val_macro_acc": best_acc, "config": asdict(cfg)})
    return TrainResult(cfg, history, best_epoch, float(best_acc), cnn=cnn, gat=gat)


def _eval_gnn(cnn: CnnModel, gat: GatModel, images, cfg: TrainConfig):
    """Pooled (loss, macro accuracy) over per-image graphs in eval mode."""
    logits_all, labels_all, weights_all = [], [], []
    for image in images:
        idx, weights = regime_tile_indices(image, cfg.tile_regime)
        if idx.size <= cfg.knn_k:
            continue
        with ad.no_grad():
            z, _ = _cnn_embed(cnn, image, idx, cfg, 0, train=False, salt=0)
            graph = _image_graph(image, idx, z.values, weights, cfg.knn_k)
            logits = gat.forward(graph.features, graph.edges, train=False)
        logits_all.append(logits.values)
        labels_all.append(graph.labels)
        weights_all.append(graph.weights)
    if not logits_all:
        return float("nan"), float("nan")
    logits = np.concatenate(logits_all)
    labels = np.concatenate(labels_all)
    weights = np.concatenate(weights_all)
    loss = ad.cross_entropy(Tensor(logits), labels, weights).item()
    acc = macro_accuracy(labels, logits.argmax(axis=1), gat.cfg.num_classes)
    return loss, acc


# ---------------------------------------------------------------------------
# inference helpers (always over all tiles of an image)


def predict_image_cnn(model: CnnModel, image: TrainingImage, batch_size: int = 64):
    """Per-tile class probabilities (n_tiles, C) from the standalone CNN."""
    probs = []
    with ad.no_grad():
        for start in range(0, image.n_tiles, batch_size):
            patches = np.stack(
                [image.patch(t) for t in range(start, min(start + batch_size, image.n_tiles))]
            )
            _, logits = model.forward(patches, train=False)
            probs.append(ad.softmax(logits, axis=1).values)
    return np.concatenate(probs)


def load_models(path):
    """Rebuild (cnn, gat, metadata) from a checkpoint written by training.

    ``gat`` is None for standalone-CNN checkpoints. Architecture configs
    come from the checkpoint's metadata.
    """
    tensors, metadata = load_checkpoint(path)
    arch = metadata.get("arch", {})
    if "cnn" not in arch:
        raise ConfigError("checkpoint metadata lacks the CNN architecture")
    cnn_kwargs = dict(arch["cnn"])
    for key in ("kernels", "strides", "paddings"):
        cnn_kwargs[key] = tuple(cnn_kwargs[key])
    cnn = CnnModel(CnnConfig(**cnn_kwargs))
    cnn.load_state(tensors)
    gat = None
    if "gat" in arch:
        gat = GatModel(GatConfig(**arch["gat"]))
        gat.load_state(tensors)
    return cnn, gat, metadata


def predict_image_gnn(cnn: CnnModel, gat: GatModel, image: TrainingImage,
                      k: int = 2, batch_size: int = 64):
    """Per-tile class probabilities from the CNN+GAT stack on the full graph."""
    cfg = TrainConfig(model="cnn_gnn", batch_size=batch_size, knn_k=k, augment=False)
    idx = np.arange(image.n_tiles)
    with ad.no_grad():
        z, _ = _cnn_embed(cnn, image, idx, cfg, 0, train=False, salt=0)
        edges = build_knn_graph(image.centroids, k=k)
        logits = gat.forward(z.values, edges, train=False)
        return ad.softmax(logits, axis=1).values
