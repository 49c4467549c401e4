"""Command-line front end.

    c2r gen-data|train|eval|ablate|sweep --config FILE [--set key=value ...] --out DIR

Every command writes the fully resolved config next to its outputs.  Errors
go to stderr as a single JSON object and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .graphdata import (Dataset, DatasetFormatError, GraphValidationError, ParameterError,
                        collate, dataset_lines, file_sha256, gen_spurious_motif, read_dataset,
                        write_dataset)
from .metrics import aggregate
from .models import CheckpointError, load_checkpoint
from .trainer import TrainingDivergedError, dump_record, evaluate, train

log = logging.getLogger("c2r")

SPLITS = ("train", "val", "test")
VARIANTS = (("c2r", {}), ("w/o cycle", {"ablation.no_cycle": True}),
            ("w/o cou", {"ablation.no_cou": True}), ("w/o dis", {"ablation.no_dis": True}))


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ data

def generate_splits(cfg: RunConfig) -> dict[str, Dataset]:
    d = cfg.data
    sizes = (d.base_size_min, d.base_size_max)
    biases = {"train": d.bias, "val": d.bias if d.val_bias is None else d.val_bias,
              "test": d.test_bias}
    counts = {"train": d.n_train, "val": d.n_val, "test": d.n_test}
    return {s: gen_spurious_motif(counts[s], biases[s], d.d_in, sizes, seed=d.seed + i, split=s)
            for i, s in enumerate(SPLITS)}


def load_splits(cfg: RunConfig) -> tuple[dict[str, Dataset], dict[str, str]]:
    """Datasets named by ``data.path`` or generated from the config, plus their checksums."""
    if cfg.data.path is None:
        splits = generate_splits(cfg)
        sums = {}
        for s, ds in splits.items():
            h = hashlib.sha256()
            for line in dataset_lines(ds):
                h.update((line + "\n").encode())
            sums[s] = h.hexdigest()
        return splits, sums
    root = Path(cfg.data.path)
    splits, sums = {}, {}
    for s in SPLITS:
        path = root / f"{s}.jsonl"
        if not path.exists():
            raise CommandError(f"dataset split not found: {path}")
        splits[s] = read_dataset(path, split=s)
        sums[s] = file_sha256(path)
    return splits, sums


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def prepare_out(out: Path, cfg: RunConfig, checksums: dict[str, str] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    if checksums is not None:
        write_json(out / "data_checksums.json", checksums)


# -------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    targets = [out / f"{s}.jsonl" for s in SPLITS] + [out / "manifest.json"]
    if not force and any(p.exists() for p in targets):
        raise CommandError(f"{out} already holds a dataset; pass --force to overwrite")
    splits = generate_splits(cfg)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for s, ds in splits.items():
        sha = write_dataset(ds, out / f"{s}.jsonl")
        files[s] = {"file": f"{s}.jsonl", "sha256": sha, "n_graphs": len(ds), **ds.spec}
    manifest = {"config": {k: v for k, v in cfg.to_flat().items() if k.startswith("data.")},
                "files": files}
    write_json(out / "manifest.json", manifest)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    return manifest


def run_seeds(cfg: RunConfig, splits: dict[str, Dataset], out: Path,
              checksums: dict[str, str]) -> list[dict]:
    """Train every seed under ``out/seed_<s>``; ``out`` gets this run's own config."""
    prepare_out(out, cfg, checksums)
    rows = []
    for seed in cfg.seeds:
        log.info("training %s seed %d", cfg.model.kind, seed)
        res = train(cfg, seed, splits["train"], splits["val"], splits["test"],
                    out / f"seed_{seed}")
        rows.append({"seed": seed, "best_epoch": res.best_epoch, **res.test.metrics()})
    return rows


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    splits, sums = load_splits(cfg)
    rows = run_seeds(cfg, splits, out, sums)
    summary = {"runs": rows, "aggregate": aggregate([_metrics_only(r) for r in rows])}
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str, split: str = "test") -> dict:
    model = load_checkpoint(checkpoint, config_hash=cfg.digest())
    splits, sums = load_splits(cfg)
    report = evaluate(model, collate(splits[split].graphs))
    result = {"checkpoint": str(checkpoint), "split": split, "data_sha256": sums[split],
              **report.to_json()}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "eval.json", result)
    return result


def _metrics_only(row: dict) -> dict:
    return {k: v for k, v in row.items()
            if k not in ("seed", "best_epoch", "variant", "value") and isinstance(v, float)}


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    splits, sums = load_splits(cfg)
    prepare_out(out, cfg, sums)
    rows, summary = [], {}
    for name, over in VARIANTS:
        vcfg = copy.deepcopy(cfg)
        for k, v in over.items():
            vcfg.set(k, v)
        vrows = run_seeds(vcfg, splits, out / name.replace("w/o ", "no_"), sums)
        rows += [{"variant": name, **r} for r in vrows]
        summary[name] = aggregate([_metrics_only(r) for r in vrows])
    result = {"rows": rows, "summary": summary}
    write_json(out / "ablation.json", result)
    table = [[r["variant"], r["seed"], r["acc"], r.get("precision_at_k", float("nan"))]
             for r in rows]
    table += [[n, "mean", s["acc"]["mean"], s.get("precision_at_k", {}).get("mean", float("nan"))]
              for n, s in summary.items()]
    (out / "ablation.txt").write_text(format_table(["variant", "seed", "acc", "p@5"], table),
                                      encoding="utf-8")
    return result


def cmd_sweep(cfg: RunConfig, out: Path, param: str, values: list) -> dict:
    splits, sums = load_splits(cfg)
    prepare_out(out, cfg, sums)
    curve, rows = [], []
    for value in values:
        vcfg = copy.deepcopy(cfg)
        vcfg.set(param, value)
        vcfg.validate()
        vrows = run_seeds(vcfg, splits, out / f"{param}={json.dumps(value)}", sums)
        rows += [{"value": value, **r} for r in vrows]
        agg = aggregate([_metrics_only(r) for r in vrows])
        point = {"value": value, "mean": agg["acc"]["mean"], "std": agg["acc"]["std"],
                 "n": agg["acc"]["n"]}
        if "mask_mean" in agg:
            point["mask_mean"] = agg["mask_mean"]["mean"]
        curve.append(point)
    result = {"param": param, "curve": curve, "rows": rows}
    write_json(out / "sweep.json", result)
    return result


# ------------------------------------------------------------------ main

def _parse_values(raw: str) -> list:
    out = []
    for tok in raw.split(","):
        try:
            out.append(json.loads(tok))
        except json.JSONDecodeError:
            out.append(tok)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2r", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config (nested or flat dotted keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common("gen-data", "write train/val/test JSONL and a manifest").add_argument(
        "--force", action="store_true", help="overwrite an existing dataset")
    common("train", "train every configured seed")
    ev = common("eval", "evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint path (with or without suffix)")
    ev.add_argument("--split", default="test", choices=SPLITS)
    common("ablate", "full model plus the three single-term ablations")
    sw = common("sweep", "train once per value of one config key")
    sw.add_argument("--param", required=True, help="dotted config key, e.g. env.k")
    sw.add_argument("--values", required=True, help="comma separated JSON values")
    return p


def dispatch(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, out, args.force)
    if args.command == "train":
        return cmd_train(cfg, out)
    if args.command == "eval":
        return cmd_eval(cfg, out, Path(args.checkpoint).with_suffix(""), args.split)
    if args.command == "ablate":
        return cmd_ablate(cfg, out)
    return cmd_sweep(cfg, out, args.param, _parse_values(args.values))


HANDLED = (CommandError, ConfigError, ParameterError, GraphValidationError, DatasetFormatError,
           CheckpointError, TrainingDivergedError, FileNotFoundError, ValueError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = dispatch(args)
    except HANDLED as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, TrainingDivergedError):
            err.update(epoch=exc.epoch, batch=exc.batch, terms=exc.terms)
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 2
    sys.stdout.write(dump_record({"command": args.command, "out": args.out, "ok": True}) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
