"""Command-line front end.

Subcommands cover each pipeline stage plus the full experiment grid. Flags
mirror config keys one-to-one via dotted overrides (``--train.lr 0.01``),
applied on top of an optional JSON config file. Logs are JSON lines on
stderr; artifacts go only to the requested output paths.

Exit codes: 0 ok, 1 usage/config error, 2 data or format error,
3 numerical failure.

This module defers numpy-dependent imports until after ``--threads`` is
handled, because BLAS thread pools are sized when numpy first loads.
"""

import argparse
import json
import os
import sys
from pathlib import Path

RUN_ROOT_ENV = "HSISEG_RUN_ROOT"
_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1, not argparse's default 2
        raise UsageError(message)


def _log(event: str, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True, default=str),
          file=sys.stderr, flush=True)


def _resolve_out(path: str) -> Path:
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not os.path.isabs(path):
        return Path(root) / path
    return Path(path)


def _read_config_file(path):
    if path is None:
        return None
    from .errors import ConfigError

    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")


def _parse_overrides(extra):
    """Leftover ``--section.key value`` (or ``=value``) flags -> dict."""
    overrides = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 2
        if "." not in key:
            raise UsageError(f"unknown flag --{key}")
        overrides[key] = value
    return overrides


def _config(args, overrides) -> dict:
    from .pipeline import resolve_config

    config = resolve_config(_read_config_file(args.config), overrides)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    return config


def _wrap_image(cube, tilemap, image_id="image"):
    import numpy as np

    from .training import TrainingImage

    n = len(tilemap.tiles)
    labels = np.asarray(
        [t.label if t.label is not None else -1 for t in tilemap.tiles], dtype=np.int64
    )
    return TrainingImage(image_id, cube, tilemap, labels,
                         np.ones(n), np.ones(n, dtype=bool))


def _predict(cnn, gat, image, config):
    from .training import predict_image_cnn, predict_image_gnn

    if gat is None:
        return predict_image_cnn(cnn, image, config["train"]["batch_size"])
    return predict_image_gnn(cnn, gat, image, k=config["train"]["knn_k"],
                             batch_size=config["train"]["batch_size"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, overrides) -> int:
    from .pipeline import phantom_spec
    from .synth import generate_dataset

    config = _config(args, overrides)
    out = _resolve_out(args.out)
    images, _ = generate_dataset(
        config["synth"]["n_images"], phantom_spec(config), config["seed"], out_dir=out
    )
    _log("synth.done", out=str(out), n_images=len(images))
    return 0


def cmd_tile(args, overrides) -> int:
    from .cube import load_cube, load_label_map
    from .pipeline import tile_image
    from .tiling import label_tiles, save_tilemap

    config = _config(args, overrides)
    cube = load_cube(args.cube)
    tilemap = tile_image(cube, config["tiling"])
    if args.labels:
        label_tiles(tilemap, load_label_map(args.labels))
    save_tilemap(tilemap, args.out)
    _log("tile.done", out=args.out, tiles=len(tilemap.tiles),
         iterations=len(tilemap.objective_trace))
    return 0


def cmd_quality(args, overrides) -> int:
    from .cube import load_cube, load_label_map
    from .quality import (
        compute_qualities,
        filter_high_quality,
        loss_weights,
        write_quality_report,
    )
    from .tiling import label_tiles, load_tilemap

    _config(args, overrides)  # validates overrides even though none apply yet
    cube = load_cube(args.cube)
    tilemap = load_tilemap(args.tiles)
    uniform = None
    if args.labels:
        label_tiles(tilemap, load_label_map(args.labels))
        uniform = [t.label_uniform for t in tilemap.tiles]
    qualities = compute_qualities(cube, tilemap.tiles)
    result = filter_high_quality(qualities, label_uniform=uniform)
    weights = loss_weights(qualities)
    write_quality_report(args.out, qualities, weights, result)
    _log("quality.done", out=args.out, kept=int(result.kept.sum()), total=len(qualities))
    return 0


def cmd_train(args, overrides) -> int:
    from .pipeline import build_training_dataset, load_dataset_dir
    from .training import TrainConfig, train_cnn, train_cnn_gnn

    config = _config(args, overrides)
    images = load_dataset_dir(args.data)
    dataset = build_training_dataset(images, config, tiles_dir=args.tiles, log=_log)
    run_dir = _resolve_out(args.out)
    tcfg = TrainConfig(model=args.model, tile_regime=args.regime,
                       seed=config["seed"], run_dir=str(run_dir), **config["train"])
    train = train_cnn if args.model == "cnn" else train_cnn_gnn
    result = train(tcfg, dataset)
    _log("train.done", run=str(run_dir), best_epoch=result.best_epoch,
         best_val_acc=result.best_val_acc, epochs_run=len(result.history))
    return 0


def cmd_infer(args, overrides) -> int:
    from .cube import load_cube
    from .pipeline import tile_image
    from .tiling import load_tilemap
    from .training import load_models

    config = _config(args, overrides)
    cnn, gat, _ = load_models(args.checkpoint)
    cube = load_cube(args.cube)
    tilemap = load_tilemap(args.tiles) if args.tiles else tile_image(cube, config["tiling"])
    probs = _predict(cnn, gat, _wrap_image(cube, tilemap), config)
    doc = {
        "cube": args.cube,
        "checkpoint": args.checkpoint,
        "n_tiles": len(tilemap.tiles),
        "predictions": [
            {"tile": i, "class": int(p.argmax()), "probs": [float(v) for v in p]}
            for i, p in enumerate(probs)
        ],
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    _log("infer.done", out=args.out, n_tiles=len(tilemap.tiles))
    return 0


def cmd_eval(args, overrides) -> int:
    import numpy as np

    from .evaluate import evaluate_predictions
    from .pipeline import load_dataset_dir, tile_image
    from .report import write_metrics_json
    from .tiling import label_tiles, load_tilemap
    from .training import load_models

    config = _config(args, overrides)
    cnn, gat, _ = load_models(args.checkpoint)
    images = load_dataset_dir(args.data)
    if args.split:
        wanted = set(json.loads(Path(args.split).read_text())[args.part])
        images = [img for img in images if img.image_id in wanted]

    labels_all, probs_all = [], []
    for img in images:
        if args.tiles and (Path(args.tiles) / f"{img.image_id}.til").exists():
            tilemap = load_tilemap(Path(args.tiles) / f"{img.image_id}.til")
        else:
            tilemap = tile_image(img.cube, config["tiling"])
        label_tiles(tilemap, img.labels)
        image = _wrap_image(img.cube, tilemap, img.image_id)
        probs = _predict(cnn, gat, image, config)
        labeled = image.labels >= 0
        labels_all.append(image.labels[labeled])
        probs_all.append(probs[labeled])
    labels = np.concatenate(labels_all)
    probs = np.concatenate(probs_all)
    metrics = evaluate_predictions(labels, probs.argmax(axis=1), probs)
    write_metrics_json(args.out, metrics)
    _log("eval.done", out=args.out, n_tiles=int(labels.size),
         macro_acc=metrics["accuracy"]["avg"], auc=metrics["auc"])
    return 0


def cmd_render(args, overrides) -> int:
    import numpy as np

    from .cube import load_cube
    from .errors import FormatError
    from .evaluate import render_overlay
    from .tiling import load_tilemap

    _config(args, overrides)
    cube = load_cube(args.cube)
    tilemap = load_tilemap(args.tiles)
    doc = json.loads(Path(args.predictions).read_text())
    classes = np.full(len(tilemap.tiles), -1, dtype=np.int64)
    for rec in doc.get("predictions", []):
        if 0 <= rec["tile"] < classes.size:
            classes[rec["tile"]] = rec["class"]
    missing = np.flatnonzero(classes < 0)
    if missing.size:
        raise FormatError(f"missing prediction for tiles {missing[:5].tolist()}")
    render_overlay(args.out, cube, tilemap, classes, alpha=args.alpha)
    _log("render.done", out=args.out)
    return 0


def cmd_pipeline(args, overrides) -> int:
    from .pipeline import run_pipeline

    config = _config(args, overrides)
    result = run_pipeline(config, _resolve_out(args.out), log=_log)
    _log("pipeline.done", report_dir=result["report_dir"])
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--threads", type=int,
                        help="BLAS/OpenMP thread cap (default: all cores)")

    parser = _Parser(prog="hsiseg", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", parents=[common], help="superpixel-tile one cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", help="optional label map to attach to tiles")
    p.add_argument("--out", required=True, help="output tile map path")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("quality", parents=[common], help="score tile quality")
    p.add_argument("--cube", required=True)
    p.add_argument("--tiles", required=True, help="tile map path")
    p.add_argument("--labels", help="optional label map for uniformity checks")
    p.add_argument("--out", required=True, help="output JSON-lines report")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("train", parents=[common], help="train one model/regime")
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--tiles", help="optional directory of saved tile maps")
    p.add_argument("--model", choices=("cnn", "cnn_gnn"), default="cnn")
    p.add_argument("--regime", choices=("good_only", "all", "all_weighted"),
                   default="good_only")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict tiles of one cube")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (no extension)")
    p.add_argument("--cube", required=True)
    p.add_argument("--tiles", help="reuse a saved tile map instead of re-tiling")
    p.add_argument("--out", required=True, help="output predictions JSON")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--tiles", help="optional directory of saved tile maps")
    p.add_argument("--split", help="split.json restricting evaluated images")
    p.add_argument("--part", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="output metrics JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="render a prediction overlay")
    p.add_argument("--cube", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--predictions", required=True, help="JSON from `infer`")
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pipeline", parents=[common],
                       help="synth + tile + train all regimes + evaluate")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            for var in _THREAD_ENV_VARS:
                os.environ.setdefault(var, str(args.threads))
        overrides = _parse_overrides(extra)
        from . import errors

        try:
            return args.func(args, overrides)
        except errors.ConfigError as exc:
            _log("error", kind="config", message=str(exc))
            return 1
        except (errors.FormatError, errors.ShapeError, errors.DomainError,
                FileNotFoundError) as exc:
            _log("error", kind="data", message=str(exc))
            return 2
        except (errors.NumericsError, FloatingPointError) as exc:
            _log("error", kind="numerics", message=str(exc))
            return 3
    except UsageError as exc:
        _log("error", kind="usage", message=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
