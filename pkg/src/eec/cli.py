"""Command-line harness: experiment runs, memory inspection, dataset
fetching/generation, and report emission (CSV/JSON, reconstruction grids).

Exit codes: 0 success, 1 config error, 2 runtime error, 3 integrity error.
"""

from __future__ import annotations

import argparse
import csv
import gzip
import hashlib
import json
import os
import sys
import time
import urllib.request

import numpy as np
import torch
from PIL import Image

from .config import ExperimentConfig, parse_config
from .data import make_synthetic, save_idx
from .errors import ConfigError, EecError, IntegrityError
from .memory import MemoryStore, load_store, memory_units
from .trainer import ExperimentResult, run_experiment

MNIST_MANIFEST = {
    # sha256 of the uncompressed IDX files
    "train-images-idx3-ubyte":
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte":
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte":
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte":
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

MNIST_MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_results_csv(path: str, result: ExperimentResult,
                      all_classes: list[int]) -> None:
    """One row per increment. Timings live in the run log, not here, so a
    rerun with the same config/seed reproduces this file byte-for-byte."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["increment", "overall_acc", "memory_units"]
                        + [f"acc_{c}" for c in all_classes])
        for r in result.reports:
            row = [r.increment, f"{r.overall_acc:.6f}", r.memory_units]
            for c in all_classes:
                acc = r.per_class_acc.get(c)
                row.append("" if acc is None else f"{acc:.6f}")
            writer.writerow(row)


def write_reconstruction_grid(path: str, result: ExperimentResult,
                              per_class: int = 8) -> bool:
    """Tile decoded episodes (rows = classes) into one PNG."""
    store = result.store
    if not store.classes:
        return False
    rows = []
    for label in sorted(store.classes):
        eps = store.episodes(label)[:per_class]
        if not eps:
            continue
        decoder = result.registry.for_task(eps[0].task)
        z = torch.from_numpy(np.stack([e.embedding for e in eps])).float()
        with torch.no_grad():
            imgs = decoder.decode(z).numpy()
        tiles = [imgs[i, 0] for i in range(imgs.shape[0])]
        size = tiles[0].shape[0]
        while len(tiles) < per_class:
            tiles.append(np.zeros((size, size), dtype=np.float32))
        rows.append(np.concatenate(tiles, axis=1))
    if not rows:
        return False
    grid = np.concatenate(rows, axis=0)
    Image.fromarray((grid * 255).astype(np.uint8), mode="L").save(path)
    return True


def cmd_run(config: ExperimentConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "run.log")
    run_summaries = []
    with open(log_path, "a") as log:
        for rep in range(config.repeats):
            seed = config.seed + rep
            log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} start "
                      f"variant={config.variant} seed={seed}\n")
            log.flush()
            result = run_experiment(config, seed=seed)
            all_classes = sorted(
                c for g in result.schedule.groups for c in g)
            csv_path = os.path.join(out_dir, f"results_seed{seed}.csv")
            write_results_csv(csv_path, result, all_classes)
            grid_path = os.path.join(out_dir, f"reconstructions_seed{seed}.png")
            write_reconstruction_grid(grid_path, result)
            a_n = result.average_accuracy()
            run_summaries.append({
                "seed": seed,
                "a_n": a_n,
                "accuracies": result.accuracies,
                "final_memory_units": result.reports[-1].memory_units,
            })
            for r in result.reports:
                log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} seed={seed} "
                          f"increment={r.increment} acc={r.overall_acc:.4f} "
                          f"units={r.memory_units} wall_s={r.wall_s:.2f}\n")
            log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} done seed={seed} "
                      f"a_n={a_n:.4f}\n")
            log.flush()
    a_ns = [s["a_n"] for s in run_summaries]
    summary = {
        "variant": config.variant,
        "dataset": config.dataset,
        "runs": run_summaries,
        "a_n_mean": float(np.mean(a_ns)),
        "a_n_std": float(np.std(a_ns)),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"A_N mean {summary['a_n_mean']:.4f} std {summary['a_n_std']:.4f} "
          f"over {config.repeats} run(s) -> {out_dir}")
    return 0


def store_report(store: MemoryStore, path: str) -> dict:
    per_class = {}
    for label in sorted(store.classes):
        eps = len(store.episodes(label))
        pairs = len(store.pairs(label))
        per_class[str(label)] = {
            "episodes": eps, "pairs": pairs, "units": eps + 2 * pairs}
    return {
        "path": path,
        "latent_dim": store.latent_dim,
        "classes": per_class,
        "total_units": memory_units(store),
        "file_bytes": os.path.getsize(path),
        "autoencoder_blobs": len(store.ae_blobs),
    }


def cmd_inspect_memory(store_path: str) -> int:
    store = load_store(store_path)
    report = store_report(store, store_path)
    for label, info in report["classes"].items():
        print(f"class {label}: {info['episodes']} episodes, "
              f"{info['pairs']} pairs, {info['units']} units", file=sys.stderr)
    print(f"total: {report['total_units']} units, "
          f"{report['file_bytes']} bytes on disk", file=sys.stderr)
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _verify(path: str, expected: str) -> bool:
    return os.path.exists(path) and _sha256(path) == expected


def cmd_fetch(dataset: str, out_dir: str) -> int:
    if dataset != "mnist":
        raise ConfigError(f"no fetch manifest for dataset {dataset!r}")
    os.makedirs(out_dir, exist_ok=True)
    for name, digest in MNIST_MANIFEST.items():
        path = os.path.join(out_dir, name)
        if _verify(path, digest):
            print(f"{name}: present and verified")
            continue
        data = None
        for mirror in MNIST_MIRRORS:
            try:
                with urllib.request.urlopen(mirror + name + ".gz",
                                            timeout=60) as resp:
                    data = gzip.decompress(resp.read())
                break
            except OSError as exc:
                print(f"{mirror}{name}.gz failed: {exc}", file=sys.stderr)
        if data is None:
            raise EecError(f"could not download {name} from any mirror")
        if hashlib.sha256(data).hexdigest() != digest:
            raise IntegrityError(f"checksum mismatch for {name}; discarded")
        with open(path, "wb") as fh:
            fh.write(data)
        print(f"{name}: downloaded and verified")
    return 0


def cmd_gen_synthetic(config: ExperimentConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    train, test = make_synthetic(config.num_classes, config.per_class,
                                 config.image_size, config.noise_level,
                                 seed=config.seed)
    save_idx(train, os.path.join(out_dir, "train-images-idx3-ubyte"),
             os.path.join(out_dir, "train-labels-idx1-ubyte"))
    save_idx(test, os.path.join(out_dir, "t10k-images-idx3-ubyte"),
             os.path.join(out_dir, "t10k-labels-idx1-ubyte"))
    print(f"wrote {len(train)} train / {len(test)} test images to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eec",
        description="Class-incremental learning with encoded-episode replay")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config seed")

    inspect = sub.add_parser("inspect-memory", help="summarize a store file")
    inspect.add_argument("store", help="EECM store file")

    fetch = sub.add_parser("fetch", help="download and verify a dataset")
    fetch.add_argument("dataset", choices=["mnist"])
    fetch.add_argument("--out", default="data/mnist")

    gen = sub.add_parser("gen-synthetic", help="write the synthetic dataset "
                                               "as IDX files")
    gen.add_argument("--config", default=None, help="JSON config file")
    gen.add_argument("--out", default="data/synthetic")
    gen.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config)
            if args.seed is not None:
                config.seed = args.seed
            return cmd_run(config, args.out or config.out_dir)
        if args.command == "inspect-memory":
            return cmd_inspect_memory(args.store)
        if args.command == "fetch":
            return cmd_fetch(args.dataset, args.out)
        if args.command == "gen-synthetic":
            config = (parse_config(args.config) if args.config
                      else ExperimentConfig().validate())
            if args.seed is not None:
                config.seed = args.seed
            return cmd_gen_synthetic(config, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except EecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
