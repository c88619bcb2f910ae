"""Command-line entry point: ``taskweight {synth,features,train,eval,compare}``.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .autodiff import NumericalError
from .dataset import (AnnotationParseError, CorpusSpec, ValidationError, corpus_fingerprint, corpus_labels,
                      split_corpus, synthesize_corpus, write_corpus)
from .features import FeatureConfig, cached_features
from .losses import CONVENTIONAL, MFL2, ConstantWeights, MflParams
from .metrics import evaluate
from .model import ArchConfig, build_mtl_model, load_checkpoint, save_checkpoint
from .train import STRATEGIES, FeatureStats, TrainConfig, export_trajectory, fit

logger = logging.getLogger("taskweight")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DEFAULT_LR = 3e-3

CHECKPOINT = "checkpoint.twck"
TRAJECTORY = "trajectory.csv"
MANIFEST = "manifest.json"
METRICS = "metrics.csv"


class ConfigError(ValueError):
    pass


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON ({exc})") from None

# ---------------------------------------------------------------------------
# synth / features


def cmd_synth(args):
    spec = CorpusSpec.from_dict(_load_json(args.spec, "spec file"))
    clips = synthesize_corpus(spec)
    scenes, events = corpus_labels(spec)
    write_corpus(clips, args.out, scenes, events)
    print(f"wrote {len(clips)} clips to {args.out} (fingerprint {corpus_fingerprint(args.out)[:16]})")
    return EXIT_OK


def cmd_features(args):
    fs = cached_features(args.data, FeatureConfig())
    print(f"{len(fs)} clips, features {fs.features.shape[1]}x{fs.features.shape[2]}, "
          f"{fs.n_scenes} scenes, {fs.n_events} event classes")
    return EXIT_OK

# ---------------------------------------------------------------------------
# training


TRAIN_KEYS = ("strategy", "epochs", "seed", "batch_size", "learning_rate", "standardize", "clip_grad_norm",
              "lambda_scene", "lambda_event", "eta", "gamma", "zeta", "temperature", "arch",
              "dev_fraction", "split_seed", "train_subset")


def resolve_train_settings(args):
    """Merge config file values with command-line flags (flags win)."""
    settings = {"batch_size": 8, "learning_rate": DEFAULT_LR, "standardize": True, "clip_grad_norm": None,
                "temperature": 1.0, "arch": "tiny", "dev_fraction": 0.8, "split_seed": 0, "train_subset": "dev",
                "seed": 0}
    if getattr(args, "config", None):
        cfg = _load_json(args.config, "config file")
        unknown = set(cfg) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"config file: unknown key {sorted(unknown)[0]!r}")
        settings.update(cfg)
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings.get("strategy") not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}")
    if not 0 < float(settings["dev_fraction"]) < 1:
        raise ConfigError("dev_fraction must lie in (0, 1)")
    if settings["train_subset"] not in ("dev", "all"):
        raise ConfigError("train_subset must be 'dev' or 'all'")
    defaults = {"constant": (CONVENTIONAL.lambda_scene, CONVENTIONAL.lambda_event),
                "mfl": (MFL2.weights.lambda_scene, MFL2.weights.lambda_event), "dwa": (1.0, 1.0)}
    ls, le = defaults[settings["strategy"]]
    settings.setdefault("lambda_scene", ls)
    settings.setdefault("lambda_event", le)
    settings.setdefault("eta", MFL2.eta)
    settings.setdefault("gamma", MFL2.gamma)
    settings.setdefault("zeta", MFL2.zeta)
    return settings


def train_config_from(settings):
    try:
        weights = ConstantWeights(float(settings["lambda_scene"]), float(settings["lambda_event"]))
        mfl = MflParams(float(settings["eta"]), float(settings["gamma"]), float(settings["zeta"]), weights)
        cfg = TrainConfig(strategy=settings["strategy"], epochs=int(settings["epochs"]),
                          batch_size=int(settings["batch_size"]), learning_rate=float(settings["learning_rate"]),
                          seed=int(settings["seed"]), standardize=bool(settings["standardize"]),
                          clip_grad_norm=settings["clip_grad_norm"], weights=weights, mfl=mfl,
                          temperature=float(settings["temperature"]))
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def arch_from(spec, n_mels, n_scenes, n_events):
    if isinstance(spec, dict):
        d = dict(spec)
    elif spec == "tiny":
        return ArchConfig.tiny(n_mels=n_mels, n_scenes=n_scenes, n_events=n_events).validate()
    elif spec == "full":
        d = {}
    else:
        d = _load_json(spec, "arch file")
    d.update(n_mels=n_mels, n_scenes=n_scenes, n_events=n_events)
    try:
        return ArchConfig(**d).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from None


def _split_indices(fs, dev_fraction, split_seed):
    from .dataset import Clip

    stubs = [Clip(np.zeros(0), 1, int(s), name=str(i)) for i, s in enumerate(fs.scenes)]
    dev, ev = split_corpus(stubs, dev_fraction, split_seed)
    return [int(c.name) for c in dev], [int(c.name) for c in ev]


def select_subset(fs, subset, dev_fraction, split_seed):
    if subset == "all":
        return fs
    dev, ev = _split_indices(fs, dev_fraction, split_seed)
    return fs.subset(dev if subset == "dev" else ev)


def run_training(data_dir, settings, out_dir):
    """Train one configuration; writes checkpoint, trajectory and manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = train_config_from(settings)
    feat_cfg = FeatureConfig()
    fs = cached_features(data_dir, feat_cfg)
    train_set = select_subset(fs, settings["train_subset"], float(settings["dev_fraction"]),
                              int(settings["split_seed"]))
    arch = arch_from(settings["arch"], fs.features.shape[1], fs.n_scenes, fs.n_events)
    manifest = {
        "version": __version__, "backend": kernels.BACKEND, "settings": settings,
        "train_config": config.to_dict(), "arch": arch.to_dict(), "features": feat_cfg.to_dict(),
        "seed": config.seed, "corpus": {"path": str(data_dir), "fingerprint": corpus_fingerprint(data_dir),
                                        "train_clips": len(train_set)},
        "outputs": {"checkpoint": str(out / CHECKPOINT), "trajectory": str(out / TRAJECTORY)},
        "started": _now(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    model = build_mtl_model(arch, seed=config.seed)
    model, log, stats = fit(model, train_set, config)
    meta = {"scene_labels": fs.scene_labels, "event_labels": fs.event_labels, "features": feat_cfg.to_dict(),
            "split": {"dev_fraction": float(settings["dev_fraction"]), "split_seed": int(settings["split_seed"]),
                      "train_subset": settings["train_subset"]},
            "train_config": config.to_dict()}
    if stats is not None:
        meta["stats"] = {"mean": stats.mean.tolist(), "std": stats.std.tolist()}
    save_checkpoint(model, out / CHECKPOINT, meta)
    export_trajectory(log, out / TRAJECTORY)
    manifest["finished"] = _now()
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return model, log, stats


def cmd_train(args):
    settings = resolve_train_settings(args)
    run_training(args.data, settings, args.out)
    print(f"trained {settings['strategy']} for {settings['epochs']} epochs -> {args.out}")
    return EXIT_OK

# ---------------------------------------------------------------------------
# evaluation


def evaluate_checkpoint(checkpoint, data_dir, threshold=0.5, subset="eval"):
    model, meta = load_checkpoint(checkpoint)
    fs = cached_features(data_dir, FeatureConfig(**meta["features"]))
    if fs.scene_labels != meta["scene_labels"] or fs.event_labels != meta["event_labels"]:
        raise ConfigError("corpus label vocabulary does not match the checkpoint")
    split = meta["split"]
    target = select_subset(fs, subset, split["dev_fraction"], split["split_seed"])
    stats = None
    if "stats" in meta:
        stats = FeatureStats(np.asarray(meta["stats"]["mean"]), np.asarray(meta["stats"]["std"]))
    return evaluate(model, target, threshold, stats)


def cmd_eval(args):
    if not 0 < args.threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    report = evaluate_checkpoint(args.checkpoint, args.data, args.threshold, args.subset)
    print(report.to_table())
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint).with_name(METRICS)
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK

# ---------------------------------------------------------------------------
# comparison grid


SUMMARY_METRICS = ("scene.micro_f", "scene.macro_f", "event.micro_f", "event.macro_f")


def _parse_list(text, cast=str):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("empty list")
    return [cast(t) for t in items]


def _run_cell(job):
    data, settings, run_dir, threshold = job
    try:
        run_training(data, settings, run_dir)
        report = evaluate_checkpoint(Path(run_dir) / CHECKPOINT, data, threshold, "eval")
        (Path(run_dir) / METRICS).write_text(report.to_csv(), encoding="utf-8")
        return {m: v for m, c, v in report.rows() if c == "all"}, None
    except NumericalError as exc:
        return None, ("numerical", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported per run, grid continues
        return None, (type(exc).__name__, str(exc))


def cmd_compare(args):
    strategies = _parse_list(args.strategies)
    seeds = _parse_list(args.seeds, int)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, ids = [], []
    for strategy in strategies:
        for seed in seeds:
            ns = argparse.Namespace(**{**vars(args), "strategy": strategy, "seed": seed})
            settings = resolve_train_settings(ns)
            run_id = f"{strategy}_seed{seed}"
            ids.append((strategy, seed, run_id))
            jobs.append((args.data, settings, str(out / run_id), args.threshold))
    cached_features(args.data, FeatureConfig())
    workers = max(1, min(int(os.environ.get("TASKWEIGHT_THREADS", "1") or 1), len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    failures = []
    per_strategy = {s: [] for s in strategies}
    for (strategy, seed, run_id), (metrics, err) in zip(ids, results):
        if err is not None:
            failures.append((run_id, err))
            print(f"run {run_id} failed: {err[0]}: {err[1]}", file=sys.stderr)
        else:
            per_strategy[strategy].append(metrics)
    lines = ["strategy,metric,mean,n_runs"]
    for strategy in strategies:
        runs = per_strategy[strategy]
        for m in SUMMARY_METRICS:
            if runs:
                lines.append(f"{strategy},{m},{np.mean([r[m] for r in runs]):.12g},{len(runs)}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    if failures:
        return EXIT_NUMERIC if all(e[0] == "numerical" for _, e in failures) else EXIT_IO
    return EXIT_OK

# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p, with_strategy=True):
    if with_strategy:
        p.add_argument("--strategy", choices=STRATEGIES, required=True)
        p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--config", help="JSON file of training settings (flags override it)")
    p.add_argument("--lambda-scene", dest="lambda_scene", type=float)
    p.add_argument("--lambda-event", dest="lambda_event", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--clip-grad-norm", dest="clip_grad_norm", type=float)
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False)
    p.add_argument("--arch", help="'tiny' (default), 'full', or a JSON file of ArchConfig fields")
    p.add_argument("--dev-fraction", dest="dev_fraction", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--train-subset", dest="train_subset", choices=("dev", "all"))


def build_parser():
    parser = argparse.ArgumentParser(prog="taskweight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract and cache features of a corpus")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--subset", choices=("eval", "dev", "all"), default="eval")
    p.add_argument("--csv", help="metrics CSV path (default: metrics.csv next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and score a strategy x seed grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", required=True, help="comma-separated, e.g. constant,dwa,mfl")
    p.add_argument("--seeds", required=True, help="comma-separated integers")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_train_flags(p, with_strategy=False)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"taskweight: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"taskweight: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, AnnotationParseError) as exc:
        print(f"taskweight: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
