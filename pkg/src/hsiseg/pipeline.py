"""End-to-end experiment orchestration.

``run_pipeline`` drives phantom generation -> tiling -> quality/split ->
training the {CNN, GNN} x {good-only, all, all-weighted} grid -> test-set
evaluation, leaving a report directory with per-model metrics JSON, a
comparison CSV and rendered figures. Completed stages are reused on rerun:
existing data/tiles/checkpoints are loaded instead of recomputed, which is
what makes interrupted runs resumable.
"""

import copy
import json
from pathlib import Path

import numpy as np

from .cube import load_cube, load_label_map
from .errors import ConfigError
from .evaluate import evaluate_predictions, render_overlay, roc_curve, tumor_probability
from .graph import GatConfig
from .quality import WeightConfig
from .report import (
    plot_histories,
    plot_roc_curves,
    plot_weight_histogram,
    write_comparison_csv,
    write_metrics_json,
)
from .synth import PhantomImage, PhantomSpec, generate_dataset
from .tiling import load_tilemap, save_tilemap, slic_segment
from .training import (
    REGIME_SUFFIX,
    TrainConfig,
    load_models,
    predict_image_cnn,
    predict_image_gnn,
    prepare_dataset,
    train_cnn,
    train_cnn_gnn,
)

MODEL_LABELS = {"cnn": "CNN", "cnn_gnn": "GNN"}

DEFAULTS = {
    "seed": 0,
    "synth": {
        "n_images": 12,
        "width": 256,
        "height": 256,
        "channels": 32,
        "noise_sigma": 0.02,
        "healthy_blobs": 2,
        "tumor_blobs": 2,
        "saturated_blobs": 1,
        "dark_blobs": 1,
        "vessel_stripes": 2,
    },
    "tiling": {
        "target_pixels": 200,
        "distance": "sam",
        "compactness": None,  # None = per-distance default
        "max_iters": 10,
    },
    "split": {"train": 0.65, "val": 0.165, "test": 0.185},
    "train": {
        "epochs": 200,
        "lr": 1e-3,
        "momentum": 0.9,
        "cosine_decay": True,
        "batch_size": 64,
        "patience": 15,
        "lambda_cnn": 1.0,
        "knn_k": 2,
        "augment": True,
    },
    "cnn": {},  # CnnConfig overrides (input_channels comes from the data)
    "gat": {},  # GatConfig overrides
    "models": ["cnn", "cnn_gnn"],
    "regimes": ["good_only", "all", "all_weighted"],
}


def _coerce(default, raw):
    """Parse a string override to the type of the default it replaces."""
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, type(None))):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def resolve_config(file_config: dict = None, overrides: dict = None) -> dict:
    """DEFAULTS deep-merged with a config file, then dotted-key overrides.

    Unknown keys are rejected so typos fail loudly; the ``cnn``/``gat``
    sections pass through unvalidated (they mirror the dataclass fields).
    """
    config = copy.deepcopy(DEFAULTS)

    def merge(dst: dict, src: dict, prefix: str, validate: bool):
        for key, value in src.items():
            if validate and key not in dst:
                raise ConfigError(f"unknown config key {prefix + key!r}")
            if isinstance(dst.get(key), dict) and isinstance(value, dict):
                merge(dst[key], value, f"{prefix}{key}.", validate and key not in ("cnn", "gat"))
            else:
                dst[key] = value

    if file_config:
        merge(config, file_config, "", True)
    for dotted, raw in (overrides or {}).items():
        parts = dotted.split(".")
        node = config
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node and parts[0] not in ("cnn", "gat"):
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = _coerce(node.get(leaf), raw)
    return config


def phantom_spec(config: dict) -> PhantomSpec:
    synth = config["synth"]
    keys = {k: v for k, v in synth.items() if k not in ("n_images", "width", "height")}
    return PhantomSpec(size=(synth["width"], synth["height"]), **keys)


def split_fractions(config: dict) -> tuple:
    split = config["split"]
    return (split["train"], split["val"], split["test"])


def model_run_name(model: str, regime: str) -> str:
    return MODEL_LABELS[model] + REGIME_SUFFIX[regime]


def load_dataset_dir(data_dir) -> list:
    """Rehydrate PhantomImages from a directory written by generate_dataset."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    images = []
    for entry in manifest["images"]:
        cube = load_cube(data_dir / entry["cube"])
        labels = load_label_map(data_dir / entry["labels"])
        degradation = load_label_map(data_dir / entry["degradation"]).astype(bool)
        images.append(
            PhantomImage(
                image_id=entry["id"],
                cube=cube,
                labels=labels,
                degradation=degradation,
                seed=entry["seed"],
                endmember_shift={int(k): v for k, v in entry["endmember_shift_sam"].items()},
            )
        )
    return images


def tile_image(cube, tiling_cfg: dict):
    return slic_segment(
        cube,
        target_pixels_per_tile=tiling_cfg["target_pixels"],
        compactness=tiling_cfg["compactness"],
        max_iters=tiling_cfg["max_iters"],
        distance=tiling_cfg["distance"],
    )


def build_training_dataset(images, config: dict, tiles_dir=None, log=None):
    """Tile every image (reusing saved tilemaps) and prepare the labeled split."""
    log = log or (lambda event, **kw: None)
    raw = []
    for image in images:
        tilemap = None
        if tiles_dir is not None:
            path = Path(tiles_dir) / f"{image.image_id}.til"
            if path.exists():
                tilemap = load_tilemap(path)
        if tilemap is None:
            tilemap = tile_image(image.cube, config["tiling"])
            if tiles_dir is not None:
                save_tilemap(tilemap, Path(tiles_dir) / f"{image.image_id}.til")
            log("tile", image=image.image_id, tiles=len(tilemap.tiles))
        raw.append((image.image_id, image.cube, tilemap, image.labels))
    return prepare_dataset(raw, split_fractions(config), config["seed"])


def _train_one(config: dict, dataset, model: str, regime: str, run_dir: Path, log):
    name = model_run_name(model, regime)
    best = run_dir / "checkpoints" / "best"
    if best.with_suffix(".json").exists():
        log("train.resume", run=name)
        cnn, gat, _ = load_models(best)
        history_file = run_dir / "history.jsonl"
        history = [
            json.loads(line)
            for line in history_file.read_text().splitlines()
        ] if history_file.exists() else []
        return cnn, gat, history

    tcfg = TrainConfig(
        model=model, tile_regime=regime, seed=config["seed"],
        run_dir=str(run_dir), **config["train"],
    )
    log("train.start", run=name, regime=regime, model=model)
    if model == "cnn":
        result = train_cnn(tcfg, dataset)
    else:
        gat_cfg = GatConfig(**config["gat"]) if config["gat"] else None
        result = train_cnn_gnn(tcfg, dataset, gat_cfg=gat_cfg)
    log("train.done", run=name, best_epoch=result.best_epoch,
        best_val_acc=result.best_val_acc, epochs_run=len(result.history))
    return result.cnn, result.gat, result.history


def _evaluate_run(cnn, gat, dataset, config: dict, figures_dir: Path, name: str):
    """Pooled test metrics over all labeled tiles, plus per-image overlays."""
    labels_all, probs_all = [], []
    for image in dataset.part_images("test"):
        if gat is None:
            probs = predict_image_cnn(cnn, image, config["train"]["batch_size"])
        else:
            probs = predict_image_gnn(cnn, gat, image, k=config["train"]["knn_k"],
                                      batch_size=config["train"]["batch_size"])
        render_overlay(
            figures_dir / f"overlay_{name}_{image.image_id}.png",
            image.cube, image.tilemap, probs.argmax(axis=1),
        )
        labeled = image.labels >= 0
        labels_all.append(image.labels[labeled])
        probs_all.append(probs[labeled])
    labels = np.concatenate(labels_all)
    probs = np.concatenate(probs_all)
    metrics = evaluate_predictions(labels, probs.argmax(axis=1), probs)

    curve = None
    mask = labels > 0
    binary = labels[mask] == 2
    if binary.size and 0 < binary.sum() < binary.size:
        scores = tumor_probability(probs[mask])
        curve = roc_curve(scores, binary)
    return metrics, curve


def run_pipeline(config: dict, out_dir, log=None) -> dict:
    """Run (or resume) the full experiment grid under ``out_dir``."""
    log = log or (lambda event, **kw: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))

    data_dir = out / "data"
    if (data_dir / "manifest.json").exists():
        log("synth.reuse", dir=str(data_dir))
        images = load_dataset_dir(data_dir)
    else:
        log("synth.start", n_images=config["synth"]["n_images"])
        images, _ = generate_dataset(
            config["synth"]["n_images"], phantom_spec(config), config["seed"],
            out_dir=data_dir,
        )

    tiles_dir = out / "tiles"
    tiles_dir.mkdir(exist_ok=True)
    dataset = build_training_dataset(images, config, tiles_dir=tiles_dir, log=log)
    (out / "split.json").write_text(
        json.dumps(dataset.split.to_json(), indent=2, sort_keys=True)
    )
    log("split", **dataset.split.to_json())

    report_dir = out / "report"
    figures_dir = report_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)

    rows, histories, curves = [], {}, {}
    for model in config["models"]:
        for regime in config["regimes"]:
            name = model_run_name(model, regime)
            cnn, gat, history = _train_one(
                config, dataset, model, regime, out / "runs" / name, log
            )
            metrics, curve = _evaluate_run(cnn, gat, dataset, config, figures_dir, name)
            write_metrics_json(report_dir / f"metrics_{name}.json", metrics)
            log("eval", run=name, macro_acc=metrics["accuracy"]["avg"], auc=metrics["auc"])
            rows.append((name, metrics))
            histories[name] = history
            if curve is not None and metrics["auc"] is not None:
                curves[name] = (curve[0], curve[1], metrics["auc"])

    write_comparison_csv(report_dir / "comparison.csv", rows)
    if curves:
        plot_roc_curves(figures_dir / "roc.png", curves)
    if any(histories.values()):
        plot_histories(figures_dir / "history.png", {k: v for k, v in histories.items() if v})
    weights = np.concatenate([img.weights for img in dataset.images])
    kept = np.concatenate([img.kept for img in dataset.images])
    plot_weight_histogram(figures_dir / "weights.png", weights, kept)
    log("report", dir=str(report_dir))
    return {"metrics": dict(rows), "report_dir": str(report_dir), "split": dataset.split.to_json()}
