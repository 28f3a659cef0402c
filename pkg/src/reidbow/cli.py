"""Command-line front end: extract, train, eval, synth and plot.

Typical run::

    reidbow synth --out data/synth --n-ids 100 --seed 0
    reidbow extract --config run.ini
    reidbow train --config run.ini --seed 0
    reidbow eval --config run.ini

Extracted features are cached under ``$REIDBOW_CACHE`` (default
``<output dir>/cache``) keyed by a hash of the feature settings and the
dataset files, so reruns are skipped unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import config as cfg
from . import report as rep
from .codebook import load_codebook, save_codebook
from .descriptor import describe_store
from .errors import ConfigError, DataError, NumericError, ReidError
from .evaluation import aggregate
from .features import (FeatureStore, read_feature_dump, read_feature_index, store_from_dumps,
                       write_feature_dump)
from .imgio import (IMAGE_SUFFIXES, CameraShift, load_color_name_table, load_dataset,
                    load_market1501, make_splits, synthesize_dataset, write_color_name_table,
                    synthetic_color_name_table, write_dataset)
from .pipeline import (PipelineConfig, check_leakage, evaluate_descriptors, fit_part_two,
                       prepare_features, train_codebooks)
from .subspace import load_projection, save_projection

logger = logging.getLogger("reidbow")

CACHE_ENV = "REIDBOW_CACHE"
_MANIFEST_SUFFIXES = IMAGE_SUFFIXES | {".jsonl", ".txt"}


# -- helpers -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_manifest(config: PipelineConfig) -> list:
    """(relative path, size, sha256) of every dataset file plus the color-name table."""
    if config.dataset_root is None:
        raise ConfigError("dataset.root is not set")
    root = Path(config.dataset_root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    rows = [[p.relative_to(root).as_posix(), p.stat().st_size, _sha256(p)]
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix.lower() in _MANIFEST_SUFFIXES]
    if config.color_names:
        p = Path(config.color_names)
        if not p.is_file():
            raise DataError(f"color-name table {p} not found")
        rows.append(["<color_names>", p.stat().st_size, _sha256(p)])
    return rows


def feature_dir(config: PipelineConfig, fhash: str) -> Path:
    base = os.environ.get(CACHE_ENV) or str(Path(config.output_dir) / "cache")
    return Path(base) / f"features-{fhash}"


def _load_images(config: PipelineConfig):
    if config.layout == "market1501":
        return load_market1501(config.dataset_root, config.target_size)
    return load_dataset(config.dataset_root, config.layout, config.target_size)


def _load_table(config: PipelineConfig):
    if config.color_names:
        return load_color_name_table(config.color_names)
    if "CN" in config.channels:
        logger.warning("no color-name table configured; using the built-in synthetic table")
        return synthetic_color_name_table()
    return None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path, what: str):
    if not path.is_file():
        raise DataError(f"{what} not found at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _stamp(obj, chash: str):
    return dataclasses.replace(obj, meta={**obj.meta, "config_hash": chash})


# -- extract -----------------------------------------------------------------


def cmd_extract(config: PipelineConfig, force: bool = False) -> Path:
    """Segment and describe every dataset image; returns the feature directory."""
    fhash = cfg.feature_hash(config, input_manifest(config))
    out = feature_dir(config, fhash)
    meta_path = out / "meta.json"
    if meta_path.is_file() and not force:
        logger.info("features up to date in %s (hash %s); skipping", out, fhash)
        return out
    images = _load_images(config)
    table = _load_table(config)
    store = prepare_features(images, config, table) if images else FeatureStore.empty(config.channels)
    tmp = out.with_name(out.name + ".tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    names = [im.name for im in images]
    for ch in store.channels:
        write_feature_dump(store, ch, tmp / f"{ch.value}.bin", names)
    _write_json(tmp / "images.json", [{"name": im.name, "id": im.id, "camera": im.camera,
                                       "role": im.role} for im in images])
    _write_json(tmp / "meta.json", {"feature_hash": fhash, "n_images": len(images),
                                    "n_rows": len(store), "channels": list(config.channels)})
    shutil.rmtree(out, ignore_errors=True)
    tmp.rename(out)
    logger.info("extracted %d superpixels from %d images into %s", len(store), len(images), out)
    return out


def load_features(config: PipelineConfig):
    fhash = cfg.feature_hash(config, input_manifest(config))
    fdir = feature_dir(config, fhash)
    meta = _read_json(fdir / "meta.json", "extracted features (run `extract` first)")
    if meta["feature_hash"] != fhash:
        raise DataError(f"feature cache {fdir} is stale")
    images = [SimpleNamespace(**r) for r in _read_json(fdir / "images.json", "image list")]
    dumps = {}
    index = None
    for c in config.channels:
        ch, v = read_feature_dump(fdir / f"{c}.bin")
        dumps[ch] = v
        if index is None:
            index = read_feature_index(fdir / f"{c}.jsonl")
    store = store_from_dumps(dumps, index or [], len(images))
    return images, store


# -- train / eval ------------------------------------------------------------


def _trial_dir(config: PipelineConfig, t: int) -> Path:
    return Path(config.output_dir) / "models" / f"trial_{t:02d}"


def cmd_train(config: PipelineConfig, seed: int) -> Path:
    """Fit per-channel metrics and codebooks plus the descriptor learner for every trial."""
    config = config.replace(seed=seed)
    chash = cfg.config_hash(config)
    images, store = load_features(config)
    if not images:
        raise DataError("no images in the extracted features")
    splits = make_splits(images, config.protocol, config.n_trials, config.seed,
                         config.train_file, config.test_file)
    models = Path(config.output_dir) / "models"
    models.mkdir(parents=True, exist_ok=True)
    ids = np.array([im.id for im in images], dtype=object)
    cams = np.array([im.camera for im in images])
    for t, plan in enumerate(splits):
        tseed = config.seed + 1000 * t
        train_idx = [i for i, im in enumerate(images) if im.id in plan.train_ids]
        train_store = store.for_images(train_idx)
        check_leakage(plan, train_store.ids)
        codebooks = train_codebooks(train_store, config, tseed)
        D = describe_store(store, codebooks, config.descriptor)
        model = fit_part_two(D[train_idx], ids[train_idx], cams[train_idx], config, tseed)
        tdir = _trial_dir(config, t)
        tdir.mkdir(parents=True, exist_ok=True)
        for ch, cb in codebooks.items():
            save_codebook(dataclasses.replace(cb, metric=_stamp(cb.metric, chash)),
                          tdir / f"codebook_{ch.value}.bin")
        save_projection(_stamp(model, chash), tdir / "projection.bin")
        _write_json(tdir / "split.json", {"config_hash": chash, "trial": t,
                                          "train_ids": sorted(plan.train_ids),
                                          "test_ids": sorted(plan.test_ids)})
        logger.info("trial %d trained (%d training images)", t, len(train_idx))
    (models / "config.ini").write_text(cfg.dump_config(config), encoding="utf-8")
    _write_json(models / "manifest.json", {"config_hash": chash, "n_trials": len(splits),
                                           "channels": list(config.channels),
                                           "seed": config.seed})
    return models


def _check_hash(found, expected, what):
    if found != expected:
        raise ConfigError(f"{what} was built with config hash {found}, current config is {expected}")


def cmd_eval(config: PipelineConfig, seed: int | None = None) -> Path:
    """Score the trained models on their test identities and write the report."""
    models = Path(config.output_dir) / "models"
    manifest = _read_json(models / "manifest.json", "trained models (run `train` first)")
    if seed is None:
        seed = manifest["seed"]
    config = config.replace(seed=seed)
    chash = cfg.config_hash(config)
    _check_hash(manifest["config_hash"], chash, "model set")
    images, store = load_features(config)
    trials = []
    for t in range(manifest["n_trials"]):
        tdir = _trial_dir(config, t)
        split = _read_json(tdir / "split.json", f"trial {t} split")
        _check_hash(split.get("config_hash"), chash, f"trial {t} split")
        codebooks = {}
        for c in config.channels:
            path = tdir / f"codebook_{c}.bin"
            if not path.is_file():
                raise DataError(f"missing model file {path}")
            cb = load_codebook(path)
            _check_hash(cb.metric.meta.get("config_hash"), chash, str(path))
            codebooks[cb.channel] = cb
        ppath = tdir / "projection.bin"
        if not ppath.is_file():
            raise DataError(f"missing model file {ppath}")
        model = load_projection(ppath)
        _check_hash(model.meta.get("config_hash"), chash, str(ppath))
        D = describe_store(store, codebooks, config.descriptor)
        trials.append(evaluate_descriptors(D, images, frozenset(split["test_ids"]), model, config))
    report = aggregate(trials, {"n_trials": len(trials), "learner": config.learner,
                                "codebook_metric": config.codebook_metric, "seed": config.seed})
    out = rep.write_report(report, Path(config.output_dir) / "report", chash,
                           label=f"{config.codebook_metric}/{config.learner}")
    logger.info("rank-1 %.4f  mAP %.4f  -> %s", report.cmc[0], report.map, out)
    return out


# -- synth / plot ------------------------------------------------------------


def cmd_synth(out, n_ids=100, per_camera=1, seed=0, hue=0.05, gamma=1.3, noise=8.0,
              translate=2, view_jitter=0, height=128, width=48) -> Path:
    images = synthesize_dataset(n_ids, per_camera, CameraShift(hue, gamma, noise, translate),
                                seed, (height, width), view_jitter)
    root = write_dataset(images, out)
    write_color_name_table(synthetic_color_name_table(), root / "color_names.txt")
    return root


def cmd_plot(csv_paths, out, labels=None) -> Path:
    labels = labels or [Path(p).parent.parent.name or Path(p).stem for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise ConfigError("one label per CSV file")
    curves = {}
    for label, p in zip(labels, csv_paths):
        if not Path(p).is_file():
            raise DataError(f"CSV file {p} not found")
        curves[label] = rep.read_cmc_csv(p)
    Path(out).write_text(rep.cmc_svg(curves), encoding="utf-8")
    return Path(out)


# -- argument parsing --------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    if getattr(args, "output", None):
        out["output.dir"] = args.output
    if getattr(args, "dataset", None):
        out["dataset.root"] = args.dataset
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reidbow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def pipeline_args(sp):
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--output", help="output directory (overrides output.dir)")
        sp.add_argument("--dataset", help="dataset root (overrides dataset.root)")

    sp = sub.add_parser("extract", help="segment images and dump local features")
    pipeline_args(sp)
    sp.add_argument("--force", action="store_true", help="ignore the feature cache")

    sp = sub.add_parser("train", help="fit metrics, codebooks and the descriptor learner")
    pipeline_args(sp)
    sp.add_argument("--seed", type=int, required=True)

    sp = sub.add_parser("eval", help="evaluate trained models and write reports")
    pipeline_args(sp)
    sp.add_argument("--seed", type=int, help="defaults to the training seed")

    sp = sub.add_parser("synth", help="write a synthetic two-camera dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-ids", type=int, default=100)
    sp.add_argument("--per-camera", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hue", type=float, default=0.05)
    sp.add_argument("--gamma", type=float, default=1.3)
    sp.add_argument("--noise", type=float, default=8.0)
    sp.add_argument("--translate", type=int, default=2)
    sp.add_argument("--view-jitter", type=int, default=0)
    sp.add_argument("--size", default="128x48", help="HEIGHTxWIDTH")

    sp = sub.add_parser("plot", help="draw CMC CSV files as one SVG chart")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--labels", nargs="+")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            try:
                h, w = (int(v) for v in args.size.lower().split("x"))
            except ValueError as exc:
                raise ConfigError(f"bad --size {args.size!r}") from exc
            root = cmd_synth(args.out, args.n_ids, args.per_camera, args.seed, args.hue,
                             args.gamma, args.noise, args.translate, args.view_jitter, h, w)
            print(root)
        elif args.command == "plot":
            print(cmd_plot(args.csv, args.out, args.labels))
        else:
            config = cfg.load_config(args.config, _overrides(args))
            if args.command == "extract":
                print(cmd_extract(config, args.force))
            elif args.command == "train":
                print(cmd_train(config, args.seed))
            else:
                print(cmd_eval(config, args.seed))
    except ReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
