"""Command-line entry point: ``ccl-ad <command> [flags]``.

Commands: make-synthetic, cluster, train, eval, score, report.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .utils import DATA_ROOT_ENV, dataset_fingerprint, default_data_root, sub_seed

logger = logging.getLogger("ccl_ad")

SUB_SEEDS = ("sampler", "augment", "clustering", "init", "encoder", "split", "candidates")


class UsageError(Exception):
    pass


def write_manifest(out_dir: Path, command: str, config: dict, seed, data_root, artifacts, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "sub_seeds": {name: sub_seed(seed, name) for name in SUB_SEEDS} if seed is not None else {},
        "dataset_fingerprint": dataset_fingerprint(data_root) if data_root else None,
        "artifacts": sorted(str(a) for a in artifacts),
        "duration_s": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _data_root(args) -> str:
    root = args.data or default_data_root()
    if not root:
        raise UsageError(f"--data is required (or set {DATA_ROOT_ENV})")
    return root


def _read_labels(path) -> dict:
    labels = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            source, label = line.rsplit("\t", 1)
            labels[source] = int(label)
    return labels


def _write_labels(path: Path, index) -> None:
    lines = [f"{s.source_path}\t{s.pseudo_class_id}" for s in index.train_samples]
    path.write_text("\n".join(lines) + "\n")


def cmd_make_synthetic(args) -> list:
    from .synthetic import generate_synthetic_dataset

    out = Path(args.out)
    generate_synthetic_dataset(out, args.classes, args.train_per_class, args.test_per_class,
                               args.defect_fraction, args.seed, args.image_size)
    return [out]


def _cluster(index, kc: int, seed: int, resolution: int):
    from .backbone import Encoder, ModelConfig
    from .pseudo_labels import pseudo_label_index

    if kc < 1:
        raise UsageError("--kc must be >= 1")
    if kc > index.train_count:
        raise ValueError(f"--kc {kc} exceeds the number of train samples ({index.train_count}); need kc <= train count")
    cfg = ModelConfig(resolution=resolution, encoder_seed=sub_seed(seed, "encoder"))
    encoder = Encoder(cfg.channels, cfg.base_stride, cfg.encoder_seed).eval()
    return pseudo_label_index(index, kc, seed=sub_seed(seed, "clustering"), extractor=encoder)


def cmd_cluster(args) -> list:
    from .data import scan_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = scan_dataset(_data_root(args), args.resolution)
    labelled, model = _cluster(index, args.kc, args.seed, args.resolution)
    labels_path = out / "labels.tsv"
    _write_labels(labels_path, labelled)
    sidecar = out / "labels.json"
    sidecar.write_text(json.dumps({"K_C": model.n_clusters, "seed": args.seed,
                                   "clustering_seed": model.seed, "inertia": model.inertia}, indent=2))
    return [labels_path, sidecar]


def _train_config(args):
    from .trainer import TrainConfig

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "lambda1": args.lambda1, "lambda2": args.lambda2, "tau": args.tau, "k": args.k,
        "batch_size": args.batch_size, "seed": args.seed, "resolution": args.resolution,
        "max_epochs": args.max_epochs, "patience": args.patience,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.labels and args.labels != "raw":
        base["label_source"] = "pseudo"
    elif args.labels == "raw":
        base["label_source"] = "raw"
    return TrainConfig.from_dict(base)


def cmd_train(args) -> list:
    from .data import scan_dataset
    from .trainer import train

    try:
        config = _train_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    index = scan_dataset(_data_root(args), config.resolution)
    if args.labels == "pseudo":
        index, _ = _cluster(index, args.kc or index.class_count, config.seed, config.resolution)
        out.mkdir(parents=True, exist_ok=True)
        _write_labels(out / "labels.tsv", index)
    elif args.labels not in (None, "raw"):
        mapping = _read_labels(args.labels)
        missing = [s.source_path for s in index.train_samples if s.source_path not in mapping]
        if missing:
            raise ValueError(f"label file lacks {len(missing)} train samples, e.g. {missing[0]}")
        index = index.replace_samples(
            s.replace(pseudo_class_id=mapping[s.source_path]) if s.split == "train" else s for s in index.samples)
    result = train(config, index, out_dir=out)
    args._resolved_config = config.to_dict()
    return [result.checkpoint, out / "config.json", out / "train_log.csv"]


def cmd_eval(args) -> list:
    from .data import scan_dataset
    from .metrics import evaluate
    from .trainer import load_checkpoint

    model, manifest = load_checkpoint(args.checkpoint)
    index = scan_dataset(_data_root(args), manifest["model_config"]["resolution"])
    report = evaluate(model, index, seed=manifest["seed"], use_masks_as_maps=args.use_masks_as_maps,
                      config_hash=manifest["config_hash"])
    paths = report.write(args.out)
    return list(paths)


def cmd_report(args) -> list:
    from .metrics import METRIC_NAMES, MetricsReport

    report = MetricsReport.read(args.metrics)
    out = Path(args.out) if args.out else Path(args.metrics).parent
    paths = report.write(out)
    print("class\t" + "\t".join(METRIC_NAMES))
    for name, row in list(report.per_class.items()) + [("mean", report.mean)]:
        print(name + "\t" + "\t".join("-" if row.get(m) is None else f"{row[m]:.4f}" for m in METRIC_NAMES))
    if report.v_measure is not None:
        print(f"v_measure\t{report.v_measure:.4f}")
    return list(paths)


def cmd_score(args) -> list:
    from .data import scan_dataset
    from .scoring import score_samples
    from .trainer import load_checkpoint

    model, manifest = load_checkpoint(args.checkpoint)
    index = scan_dataset(_data_root(args), manifest["model_config"]["resolution"])
    samples = index.test_samples if args.split == "test" else index.train_samples
    maps, _ = score_samples(model, samples)
    out = Path(args.out)
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    lo = min((float(m.map.min()) for m in maps), default=0.0)
    hi = max((float(m.map.max()) for m in maps), default=1.0)
    span = hi - lo if hi > lo else 1.0
    artifacts = []
    for m in maps:
        img = np.round((m.map - lo) / span * 255).clip(0, 255).astype(np.uint8)
        path = heat_dir / (m.source_path.replace("/", "__").rsplit(".", 1)[0] + ".png")
        Image.fromarray(img, mode="L").save(path)
        artifacts.append(path)
    scores = out / "scores.tsv"
    scores.write_text("".join(f"{m.source_path}\t{m.image_score!r}\n" for m in maps))
    norm = out / "heatmaps.json"
    norm.write_text(json.dumps({"min": lo, "max": hi, "split": args.split}, indent=2))
    return [scores, norm, heat_dir]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccl-ad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="write a procedural multi-class dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--train-per-class", type=int, default=20)
    s.add_argument("--test-per-class", type=int, default=10)
    s.add_argument("--defect-fraction", type=float, default=0.5)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("cluster", help="k-means pseudo-class labels for the train split")
    s.add_argument("--data")
    s.add_argument("--kc", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("train", help="train a Joint or CCL model")
    s.add_argument("--data")
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--labels", default=None, help="raw | pseudo | path to labels.tsv")
    s.add_argument("--kc", type=int, default=None, help="cluster count for --labels pseudo")
    s.add_argument("--out", required=True)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--lambda2", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--k", type=lambda v: v if v.lower() == "full" else int(v))
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint on the test split"),):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--use-masks-as-maps", action="store_true", help=argparse.SUPPRESS)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="re-render metrics.json as CSV and a table")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("score", help="write heatmaps and image scores")
    s.add_argument("--data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    started = time.time()
    try:
        artifacts = args.func(args)
        if args.command != "report" or (args.out and Path(args.out).resolve() != Path(args.metrics).parent.resolve()):
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            data_root = {"make-synthetic": args.out, "report": None}.get(args.command, None)
            if args.command not in ("make-synthetic", "report"):
                data_root = _data_root(args)
            config = getattr(args, "_resolved_config", None) or {
                k: v for k, v in vars(args).items() if k not in ("func", "verbose") and not k.startswith("_")}
            seed = config.get("seed", getattr(args, "seed", None))
            write_manifest(out, args.command, config, seed, data_root, artifacts, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ccl-ad: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line reason, nonzero exit
        print(f"ccl-ad: {type(exc).__name__}: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
