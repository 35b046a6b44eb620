"""Command-line entry point: train | compare | gradcheck | params | trace.

Configuration is a flat key=value text file with dotted namespaces
(arch.mode, train.lr, ...); every key can be overridden on the command
line with --override key=value.  Data files (CSV) carry no timestamps and
are byte-reproducible for a given config and seed list; wall-clock
durations go to a timing.csv sidecar instead of the metrics files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import CheckpointError, apply_parameters, load_checkpoint, save_checkpoint
from .data import (
    AugmentPolicy,
    DataError,
    Dataset,
    Normalizer,
    load_cifar10,
    load_raw,
    synth_shapes,
)
from .gradcheck import TOLERANCE, run_all
from .models import (
    REFERENCE_WIDTH_PAIRS,
    ArchitectureConfig,
    build,
    count_parameters,
    match_width,
)
from .optim import AdamConfig, AdamState, RunMetrics, TrainConfig, evaluate, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DEFAULTS: dict[str, object] = {
    "data.source": "synth",
    "data.dir": "",
    "data.train_path": "",
    "data.val_path": "",
    "data.train_samples": 6000,
    "data.val_samples": 1200,
    "data.image_size": 32,
    "data.seed": 0,
    "data.noise": 0.08,
    "data.augment": False,
    "data.horizontal_flip": 0.5,
    "data.vertical_flip": 0.0,
    "data.rotation_deg": 0.0,
    "data.pad_crop": 0,
    "arch.mode": "baseline",
    "arch.width": 21,
    "arch.widths": "",
    "arch.unroll_depth": 3,
    "arch.first_stage_recursive": False,
    "arch.dropout": 0.5,
    "arch.iteration_dropout": 0.0,
    "arch.epsilon": 0.1,
    "arch.max_iterations": 8,
    "arch.per_batch": False,
    "arch.normalized_distance": False,
    "train.lr": 1e-4,
    "train.weight_decay": 5e-4,
    "train.batch_size": 128,
    "train.epochs": 10,
    "train.decoupled_decay": False,
    "compare.pairs": "21:15",
}

METRICS_HEADER = "seed,epoch,train_loss,train_acc,val_acc,mean_depth_stage2,mean_depth_stage3,mean_depth_stage4"


def _coerce(key: str, text: str):
    want = type(DEFAULTS[key])
    text = text.strip()
    try:
        if want is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        return want(text)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {want.__name__}, got {text!r}")


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--override expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def config_hash(cfg: dict) -> str:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}")
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    return seeds


def build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    source = cfg["data.source"]
    if source == "synth":
        train_set = synth_shapes(cfg["data.train_samples"], cfg["data.image_size"],
                                 seed=cfg["data.seed"], noise=cfg["data.noise"])
        val_set = synth_shapes(cfg["data.val_samples"], cfg["data.image_size"],
                               seed=cfg["data.seed"] + 1, noise=cfg["data.noise"])
        return train_set, val_set
    if source == "cifar10":
        if not cfg["data.dir"]:
            raise UsageError("data.source=cifar10 requires data.dir (or --data-dir)")
        train_full, test_full = load_cifar10(cfg["data.dir"])
        n, m = cfg["data.train_samples"], cfg["data.val_samples"]
        train_set = train_full.subset(np.arange(n)) if 0 < n < len(train_full) else train_full
        val_set = test_full.subset(np.arange(m)) if 0 < m < len(test_full) else test_full
        return train_set, val_set
    if source == "raw":
        if not cfg["data.train_path"] or not cfg["data.val_path"]:
            raise UsageError("data.source=raw requires data.train_path and data.val_path")
        return load_raw(cfg["data.train_path"]), load_raw(cfg["data.val_path"])
    raise UsageError(f"unknown data.source {source!r}")


def build_arch(cfg: dict, dataset: Dataset, mode: str | None = None,
               width: int | None = None) -> ArchitectureConfig:
    if width is not None:
        widths = (width,) * 4
    elif cfg["arch.widths"]:
        try:
            widths = tuple(int(w) for w in cfg["arch.widths"].split(","))
        except ValueError:
            raise UsageError(f"arch.widths expects integers, got {cfg['arch.widths']!r}")
    else:
        widths = (cfg["arch.width"],) * 4
    try:
        return ArchitectureConfig(
            mode=mode or cfg["arch.mode"],
            widths=widths,
            num_classes=dataset.num_classes,
            in_channels=dataset.images.shape[1],
            image_hw=dataset.images.shape[2:4],
            unroll_depth=cfg["arch.unroll_depth"],
            first_stage_recursive=cfg["arch.first_stage_recursive"],
            dropout_rate=cfg["arch.dropout"],
            iteration_dropout=cfg["arch.iteration_dropout"],
            epsilon=cfg["arch.epsilon"],
            max_iterations=cfg["arch.max_iterations"],
            per_batch=cfg["arch.per_batch"],
            normalized_distance=cfg["arch.normalized_distance"],
        )
    except ValueError as e:
        raise UsageError(str(e))


def make_train_config(cfg: dict) -> TrainConfig:
    policy = None
    if cfg["data.augment"]:
        policy = AugmentPolicy(cfg["data.horizontal_flip"], cfg["data.vertical_flip"],
                               cfg["data.rotation_deg"], cfg["data.pad_crop"])
    return TrainConfig(lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
                       batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                       decoupled_decay=cfg["train.decoupled_decay"], augment=policy)


def write_metrics_csv(path: Path, seed: int, metrics: RunMetrics) -> None:
    lines = [METRICS_HEADER]
    for r in metrics.history:
        depths = [r.mean_depth.get(k, 1.0) for k in (2, 3, 4)]
        lines.append(
            f"{seed},{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_acc:.6f},"
            + ",".join(f"{d:.4f}" for d in depths)
        )
    path.write_text("\n".join(lines) + "\n")


def write_timing_csv(path: Path, seed: int, metrics: RunMetrics) -> None:
    lines = ["seed,epoch,wall_s"]
    lines += [f"{seed},{r.epoch},{r.wall_s:.3f}" for r in metrics.history]
    path.write_text("\n".join(lines) + "\n")


def write_manifest(out_dir: Path, cfg: dict, seeds: list[int], command: str) -> None:
    manifest = {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def train_one(cfg: dict, arch: ArchitectureConfig, train_set: Dataset, val_set: Dataset,
              seed: int, out_dir: Path) -> RunMetrics:
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build(arch, seed)
    state = AdamState(model.parameters())
    metrics = train(model, train_set, val_set, make_train_config(cfg), seed,
                    adam_state=state)
    write_metrics_csv(out_dir / "metrics.csv", seed, metrics)
    write_timing_csv(out_dir / "timing.csv", seed, metrics)
    save_checkpoint(out_dir / "model.ckpt", model.parameters(), state)
    return metrics


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    seeds = parse_seeds(args.seeds)
    train_set, val_set = build_datasets(cfg)
    arch = build_arch(cfg, train_set)
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        metrics = train_one(cfg, arch, train_set, val_set, seed, out / f"seed{seed}")
        last = metrics.history[-1]
        print(f"seed {seed}: epoch {last.epoch} train_acc {last.train_acc:.4f} "
              f"val_acc {last.val_acc:.4f}")
    write_manifest(out, cfg, seeds, "train")
    return 0


def parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise UsageError(f"compare.pairs entries look like n:m, got {chunk!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise UsageError(f"compare.pairs entries look like n:m, got {chunk!r}")
    if not pairs:
        raise UsageError("compare.pairs is empty")
    return pairs


def run_compare(cfg: dict, out: Path, seeds: list[int]) -> dict:
    """Trains baseline and recursive models per width pair with shared seeds.

    Returns {(n, m): {mode: {"val": [...], "train": [...], "width": w}}}.
    """
    train_set, val_set = build_datasets(cfg)
    pairs = parse_pairs(cfg["compare.pairs"])
    out.mkdir(parents=True, exist_ok=True)
    summary = ["pair,model,width,params,mean_val_acc,std_val_acc,min_val_acc,max_val_acc"]
    curves = ["pair,model,width,seed,epoch,val_acc"]
    results: dict = {}
    for n, m in pairs:
        pair_name = f"{n}:{m}"
        results[(n, m)] = {}
        for mode, width in (("baseline", n), ("cfrpn", m)):
            arch = build_arch(cfg, train_set, mode=mode, width=width)
            finals, trains = [], []
            for seed in seeds:
                run_dir = out / f"pair_{n}x{m}" / f"{mode}_w{width}" / f"seed{seed}"
                metrics = train_one(cfg, arch, train_set, val_set, seed, run_dir)
                finals.append(metrics.final_val_acc)
                trains.append(metrics.best_train_acc)
                curves += [f"{pair_name},{mode},{width},{seed},{r.epoch},{r.val_acc:.6f}"
                           for r in metrics.history]
            acc = np.array(finals)
            summary.append(
                f"{pair_name},{mode},{width},{count_parameters(arch)},"
                f"{acc.mean():.6f},{acc.std():.6f},{acc.min():.6f},{acc.max():.6f}"
            )
            results[(n, m)][mode] = {"val": finals, "train": trains, "width": width}
        gap = (np.mean(results[(n, m)]["cfrpn"]["val"])
               - np.mean(results[(n, m)]["baseline"]["val"]))
        print(f"pair {pair_name}: baseline {np.mean(results[(n, m)]['baseline']['val']):.4f} "
              f"cfrpn {np.mean(results[(n, m)]['cfrpn']['val']):.4f} gap {gap:+.4f}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    (out / "curves.csv").write_text("\n".join(curves) + "\n")
    write_manifest(out, cfg, seeds, "compare")
    return results


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    run_compare(cfg, Path(args.out), parse_seeds(args.seeds))
    return 0


def cmd_gradcheck(args) -> int:
    seed = parse_seeds(args.seeds)[0] if args.seeds else 0
    failed = False
    for name, err in run_all(seed):
        ok = err <= TOLERANCE
        failed |= not ok
        print(f"{name:28s} max_rel_err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    if failed:
        print(f"gradcheck FAILED (tolerance {TOLERANCE:g})", file=sys.stderr)
        return 3
    print("all gradient checks passed")
    return 0


def cmd_params(args) -> int:
    print("baseline_n,params_baseline,matched_m,params_cfrpn,reference_m,rel_diff")
    for n, reference_m in REFERENCE_WIDTH_PAIRS:
        base = count_parameters(ArchitectureConfig.uniform("baseline", n))
        m = match_width(n)
        matched = count_parameters(ArchitectureConfig.uniform("cfrpn", m))
        rel = abs(matched - base) / base
        print(f"{n},{base},{m},{matched},{reference_m},{rel:.4%}")
    return 0


def cmd_trace(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    seed = parse_seeds(args.seeds)[0] if args.seeds else 0
    train_set, val_set = build_datasets(cfg)
    arch = build_arch(cfg, train_set)
    model = build(arch, seed)
    params, _ = load_checkpoint(args.checkpoint)
    apply_parameters(model.parameters(), params)
    result = evaluate(model, val_set, normalizer=Normalizer.fit(train_set),
                      collect_traces=True)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["seed,stage,sample,t_star,stop_reason,final_distance"]
    for stage_idx in sorted(result.traces):
        tr = result.traces[stage_idx]
        fd = tr.final_distance
        for i in range(len(tr)):
            lines.append(f"{seed},{stage_idx},{i},{tr.t_star[i]},{tr.stop_reason[i]},"
                         f"{fd[i]:.6g}")
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    print(f"accuracy {result.accuracy:.4f} on {len(val_set)} samples")
    for stage_idx in sorted(result.traces):
        tr = result.traces[stage_idx]
        counts = np.bincount(tr.t_star)
        hist = " ".join(f"t*={t}:{c}" for t, c in enumerate(counts) if c)
        print(f"stage {stage_idx}: {hist}")
    return 0


def _config_from_args(args) -> dict:
    cfg = load_config(args.config, args.override)
    if getattr(args, "data_dir", None):
        cfg["data.dir"] = args.data_dir
    return cfg


def _add_common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", default="runs", required=out_required, help="output directory")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--data-dir", default=None, help="dataset directory (data.dir)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def main(argv=None) -> int:
    parser = _Parser(prog="cfrpn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("compare", cmd_compare),
                     ("gradcheck", cmd_gradcheck), ("params", cmd_params),
                     ("trace", cmd_trace)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "trace":
            p.add_argument("--checkpoint", required=True, help="checkpoint to inspect")
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except T.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
