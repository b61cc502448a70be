"""Command-line entry point: ``segrobust <command> [flags]``.

Commands: gen, pretrain, train, attack, sea, ablate, transfer, report.  Every
flag can also come from a JSON file given with ``--config`` (keys are the flag
names with dashes replaced by underscores; unknown keys are rejected).
Explicit flags override the file.  Failures print a JSON error record to
stderr (and to ``<out>/error.json`` when ``--out`` is known) and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attack import AttackConfig, attack_dataset, clean_accumulator, transfer_eval
from .core import ConfigError, NumericInputError, predict
from .data import (colorize, generate_dataset, load_split, patch_dataset, save_image,
                   save_split)
from .losses import LOSS_KINDS, ClassWeights
from .metrics import EmptyMetricError, balanced_accuracy, miou, per_class_iou, pixel_accuracy
from .models import forward, load_params, pixel_linear, save_params, small_conv
from .sea import SEA_LOSSES, sea_attack
from .train import BackboneCheckpoint, TrainConfig, pretrain_robust_backbone, train

REPORT_FORMAT = "segrobust-report"
MAX_EPS = 0.5


# -- argument helpers -------------------------------------------------------------

def parse_eps(text) -> list[float]:
    """Comma-separated radii; each may be a float or a fraction like ``8/255``."""
    if isinstance(text, (int, float)):
        items = [text]
    elif isinstance(text, list):
        items = text
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    out = []
    for item in items:
        try:
            v = float(Fraction(str(item).strip())) if isinstance(item, str) else float(item)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad epsilon {item!r}") from exc
        if not 0 <= v <= MAX_EPS:
            raise ConfigError(f"epsilon {v} outside [0, {MAX_EPS}]")
        out.append(v)
    if not out:
        raise ConfigError("empty epsilon list")
    return out


def parse_list(text, kind=str) -> list:
    if isinstance(text, list):
        return [kind(t) for t in text]
    return [kind(t.strip()) for t in str(text).split(",") if t.strip()]


# option name -> (default, type, help)
COMMON = {
    "seed": (0, int, "root seed"),
    "workers": (None, int, "parallel worker processes (default: all cores)"),
    "out": (None, str, "output directory (or file for pretrain)"),
}

COMMANDS = {
    "gen": {
        "n_train": (200, int, "training images"),
        "n_val": (50, int, "validation images"),
        "n_pretrain": (200, int, "images for backbone pretraining"),
        "size": (32, int, "image height and width"),
        "classes": (6, int, "number of classes K (background included)"),
        "contrast": (0.3, float, "distance between class colors"),
        "texture": (0.01, float, "background texture amplitude"),
    },
    "pretrain": {
        "data": (None, str, "dataset root (uses its pretrain split)"),
        "arch": ("small-conv", str, "architecture"),
        "widths": ("8,16,16", str, "hidden widths"),
        "backbone_layers": (3, int, "layers in the backbone prefix"),
        "eps": ("12/255", str, "pretraining radius (0 gives a clean backbone)"),
        "steps": (5, int, "PGD steps k"),
        "step_size": (0.006, float, "PGD step size"),
        "epochs": (10, int, "epochs"),
        "lr": (0.05, float, "peak learning rate"),
        "batch_size": (32, int, "batch size"),
        "patch": (4, int, "patch side"),
        "stride": (4, int, "patch stride"),
    },
    "train": {
        "data": (None, str, "dataset root"),
        "arch": ("small-conv", str, "architecture"),
        "widths": ("8,16,16", str, "hidden widths"),
        "backbone_layers": (3, int, "layers in the backbone prefix"),
        "init": ("clean", str, "clean | robust"),
        "backbone": (None, str, "backbone checkpoint"),
        "eps": ("12/255", str, "training radius"),
        "steps": (2, int, "PGD steps k"),
        "step_size": (3 / 255, float, "PGD step size"),
        "epochs": (5, int, "epochs"),
        "lr": (0.05, float, "peak learning rate"),
        "batch_size": (8, int, "batch size"),
    },
    "attack": {
        "data": (None, str, "dataset root or split directory"),
        "model": (None, str, "model checkpoint"),
        "eps": ("8/255", str, "radii"),
        "iters": (300, int, "iterations"),
        "loss": ("mce", str, "/".join(LOSS_KINDS)),
        "schedule": ("red-eps", str, "red-eps | const-eps"),
        "restarts": (1, int, "restarts (const-eps only)"),
        "max_images": (None, int, "attack only the first N images"),
    },
    "sea": {
        "data": (None, str, "dataset root or split directory"),
        "model": (None, str, "model checkpoint"),
        "eps": ("0,4/255,8/255,12/255", str, "radii"),
        "iters": (300, int, "iterations per attack"),
        "losses": (",".join(SEA_LOSSES), str, "ensemble members"),
        "baselines": ("", str, "extra single attacks to report, e.g. segpgd,cospgd"),
        "max_images": (None, int, "attack only the first N images"),
    },
    "ablate": {
        "data": (None, str, "dataset root or split directory"),
        "model": (None, str, "model checkpoint"),
        "mode": ("schedule", str, "schedule | iters"),
        "eps": ("12/255", str, "radii"),
        "iters": (300, int, "total budget (schedule mode)"),
        "iters_list": ("25,50,100,200,300", str, "budgets (iters mode)"),
        "loss": ("mce", str, "losses to ablate (comma list)"),
        "runs": (3, int, "seeds per setting"),
        "max_images": (None, int, "attack only the first N images"),
    },
    "transfer": {
        "data": (None, str, "dataset root or split directory"),
        "model": (None, str, "source model checkpoint"),
        "targets": (None, str, "comma list of target checkpoints"),
        "eps": ("8/255", str, "radii"),
        "iters": (300, int, "iterations"),
        "loss": ("mce", str, "attack loss"),
        "max_images": (None, int, "attack only the first N images"),
    },
    "report": {
        "input": (None, str, "report.json produced by another command"),
        "data": (None, str, "dataset (for mask figures)"),
        "model": (None, str, "model (for mask figures)"),
        "masks": (0, int, "number of qualitative mask figures"),
        "eps": ("8/255", str, "radius for mask figures"),
        "loss": ("mce", str, "attack loss for mask figures"),
        "iters": (300, int, "iterations for mask figures"),
    },
}

REQUIRED = {"gen": ["out"], "pretrain": ["data", "out"], "train": ["data", "out"],
            "attack": ["data", "model", "out"], "sea": ["data", "model", "out"],
            "ablate": ["data", "model", "out"], "transfer": ["data", "model", "targets", "out"],
            "report": ["input"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segrobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        for key, (default, typ, text) in {**opts, **COMMON}.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=typ, default=None,
                           help=f"{text} (default: {default})")
    return parser


def resolve(args) -> dict:
    """Defaults < config file < explicit flags."""
    opts = {**COMMANDS[args.command], **COMMON}
    cfg = {k: v[0] for k, v in opts.items()}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(opts))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        for k, v in doc.items():
            typ = opts[k][1]
            if v is not None and typ in (int, float) and not isinstance(v, (int, float)):
                raise ConfigError(f"config key {k!r} must be a number")
            cfg[k] = v
    for k in opts:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required options: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


# -- IO helpers ---------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _write_report(out: Path, name: str, report: dict, rows: list[dict] | None, timing: dict):
    out.mkdir(parents=True, exist_ok=True)
    report = {**report, "format": REPORT_FORMAT, "timing": timing}
    (out / f"{name}.json").write_text(_dump(report))
    if rows:
        (out / f"{name}.csv").write_text(_csv(rows))
    return out / f"{name}.json"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _eval_split(path, max_images=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist")
    if not (path / "manifest.json").exists() and (path / "val").is_dir():
        path = path / "val"
    ds = load_split(path)
    if max_images is not None:
        ds = ds.subset(range(min(max_images, len(ds))))
    return ds, path


def _class_weights(split_path: Path) -> ClassWeights:
    train_manifest = split_path.parent / "train" / "manifest.json"
    if not train_manifest.exists():
        raise ConfigError(f"class weights need the train split next to {split_path}")
    counts = json.loads(train_manifest.read_text())["class_pixel_counts"]
    return ClassWeights.from_counts(counts)


def _model(path):
    if not Path(path).exists():
        raise ConfigError(f"model {path} does not exist")
    return load_params(path)


def _spec(cfg, num_classes):
    if cfg["arch"] == "pixel-linear":
        return pixel_linear(num_classes)
    if cfg["arch"] != "small-conv":
        raise ConfigError(f"unknown architecture {cfg['arch']!r}")
    return small_conv(num_classes, tuple(parse_list(cfg["widths"], int)),
                      n_backbone=cfg["backbone_layers"])


def _metrics(acc, aacc=None) -> dict:
    """aAcc, mIoU, balanced accuracy and per-class IoU (None where a class never occurs)."""
    row = {"aacc": pixel_accuracy(acc) if aacc is None else aacc, "miou": miou(acc),
           "balanced_acc": balanced_accuracy(acc)}
    for s, v in enumerate(per_class_iou(acc)):
        row[f"iou_{s}"] = None if np.isnan(v) else float(v)
    return row


def _model_info(params, path) -> dict:
    return {"path": str(path), "arch": params.spec.to_dict(), "seed": params.seed,
            "meta": params.meta}


def _data_info(ds, path) -> dict:
    return {"path": str(path), "split": ds.split, "seed": ds.seed, "n_images": len(ds),
            "ids": list(ds.ids)}


def _check_loss(loss):
    if loss not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss!r}; choose from {', '.join(LOSS_KINDS)}")


# -- commands -------------------------------------------------------------------------

def cmd_gen(cfg) -> dict:
    out = Path(cfg["out"])
    splits = {}
    for split, n in (("train", cfg["n_train"]), ("val", cfg["n_val"]),
                     ("pretrain", cfg["n_pretrain"])):
        if n <= 0:
            continue
        ds = generate_dataset(cfg["seed"], n, cfg["size"], cfg["size"], cfg["classes"], split,
                              contrast=cfg["contrast"], texture=cfg["texture"])
        splits[split] = str(save_split(ds, out))
    val_path = out / "val" / "manifest.json"
    if val_path.exists() and (out / "train").exists():
        train_counts = np.array(json.loads((out / "train" / "manifest.json").read_text())
                                ["class_pixel_counts"])
        val_counts = np.array(json.loads(val_path.read_text())["class_pixel_counts"])
        if np.any((val_counts > 0) & (train_counts == 0)):
            raise ConfigError("a validation class never occurs in the train split")
    return {"splits": splits}


def cmd_pretrain(cfg) -> dict:
    root = Path(cfg["data"])
    split = root / "pretrain" if (root / "pretrain").is_dir() else root / "train"
    ds = load_split(split)
    spec = _spec(cfg, ds.num_classes)
    eps = parse_eps(cfg["eps"])[0]
    tcfg = TrainConfig(epochs=cfg["epochs"], steps=cfg["steps"], epsilon=eps,
                       step_size=cfg["step_size"] if eps else 0.0, lr=cfg["lr"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"])
    x, y = patch_dataset(ds, cfg["patch"], cfg["stride"], balance=True)
    ckpt, _, log = pretrain_robust_backbone(spec, x, y, tcfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    out.with_suffix(".log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in log))
    return {"checkpoint": str(out), "provenance": ckpt.provenance}


def cmd_train(cfg) -> dict:
    root = Path(cfg["data"])
    ds = load_split(root / "train")
    val = load_split(root / "val") if (root / "val").is_dir() else None
    spec = _spec(cfg, ds.num_classes)
    backbone = BackboneCheckpoint.load(cfg["backbone"]) if cfg["backbone"] else None
    tcfg = TrainConfig(epochs=cfg["epochs"], steps=cfg["steps"],
                       epsilon=parse_eps(cfg["eps"])[0], step_size=cfg["step_size"],
                       lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                       init=cfg["init"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    params, _ = train(spec, tcfg, ds, backbone=backbone, val=val,
                      log_path=out / "train_log.jsonl")
    save_params(params, out / "model.json")
    return {"model": str(out / "model.json")}


def cmd_attack(cfg) -> dict:
    _check_loss(cfg["loss"])
    ds, path = _eval_split(cfg["data"], cfg["max_images"])
    params = _model(cfg["model"])
    weights = _class_weights(path) if cfg["loss"] == "mce-bal" else None
    t0 = time.perf_counter()
    rows, per_image = [], []
    for eps in parse_eps(cfg["eps"]):
        acfg = AttackConfig(eps, cfg["iters"], cfg["loss"], cfg["schedule"], cfg["restarts"],
                            cfg["seed"])
        results, acc = attack_dataset(params, acfg, ds, weights, cfg["workers"])
        rows.append({"epsilon": eps, "loss": cfg["loss"], "schedule": cfg["schedule"],
                     **_metrics(acc)})
        per_image.extend(r.record() for r in results)
    report = {"command": "attack", "config": cfg, "model": _model_info(params, cfg["model"]),
              "data": _data_info(ds, path), "clean": _metrics(clean_accumulator(params, ds)),
              "rows": rows, "per_image": per_image}
    return {"report": str(_write_report(Path(cfg["out"]), "attack", report, rows,
                                        {"seconds": time.perf_counter() - t0}))}


def cmd_sea(cfg) -> dict:
    losses = parse_list(cfg["losses"])
    baselines = parse_list(cfg["baselines"])
    for loss in losses + baselines:
        _check_loss(loss)
    ds, path = _eval_split(cfg["data"], cfg["max_images"])
    params = _model(cfg["model"])
    weights = _class_weights(path)
    t0 = time.perf_counter()
    table, rows = [], []
    for eps in parse_eps(cfg["eps"]):
        ens = sea_attack(params, ds, eps, weights, cfg["iters"], cfg["seed"], losses,
                         cfg["workers"])
        cells = {loss: _metrics(ens.accumulator(j)) for j, loss in enumerate(ens.losses)}
        for loss in baselines:
            # baselines run as single constant-radius PGD, as they were proposed
            acfg = AttackConfig(eps, cfg["iters"], loss, "const-eps", seed=cfg["seed"])
            _, acc = attack_dataset(params, acfg, ds, weights, cfg["workers"])
            cells[loss] = _metrics(acc)
        # aAcc from the per-image worst case, the rest from the greedy mIoU selection
        cells["SEA"] = _metrics(ens.accumulator("miou"), aacc=ens.aacc)
        table.append({"epsilon": eps, "epsilon_255": eps * 255, "cells": cells,
                      "selection": {"aacc": ens.choice_histogram("acc"),
                                    "miou": ens.choice_histogram("miou")},
                      "greedy": {"rounds": ens.greedy.rounds, "swaps": ens.greedy.swaps}})
        rows.extend({"epsilon": eps, "attack": name, **vals} for name, vals in cells.items())
    report = {"command": "sea", "config": cfg, "model": _model_info(params, cfg["model"]),
              "data": _data_info(ds, path), "clean": _metrics(clean_accumulator(params, ds)),
              "table": table}
    return {"report": str(_write_report(Path(cfg["out"]), "sea", report, rows,
                                        {"seconds": time.perf_counter() - t0}))}


def schedule_variants(iters: int) -> list[tuple[str, str, int]]:
    """The equal-budget comparison: one long run, three restarts, radius reduction."""
    return [("const-eps x1", "const-eps", 1), (f"const-eps 3x{iters // 3}", "const-eps", 3),
            ("red-eps", "red-eps", 1)]


def cmd_ablate(cfg) -> dict:
    losses = parse_list(cfg["loss"])
    for loss in losses:
        _check_loss(loss)
    if cfg["mode"] not in ("schedule", "iters"):
        raise ConfigError("mode must be schedule or iters")
    ds, path = _eval_split(cfg["data"], cfg["max_images"])
    params = _model(cfg["model"])
    weights = _class_weights(path) if "mce-bal" in losses else None
    t0 = time.perf_counter()
    rows = []
    for eps in parse_eps(cfg["eps"]):
        for loss in losses:
            if cfg["mode"] == "schedule":
                settings = [(name, sched, restarts, cfg["iters"])
                            for name, sched, restarts in schedule_variants(cfg["iters"])]
            else:
                settings = [(f"red-eps {n}", "red-eps", 1, n)
                            for n in parse_list(cfg["iters_list"], int)]
            for name, sched, restarts, n in settings:
                for run in range(cfg["runs"]):
                    acfg = AttackConfig(eps, n, loss, sched, restarts, cfg["seed"] + run)
                    _, acc = attack_dataset(params, acfg, ds, weights, cfg["workers"])
                    rows.append({"epsilon": eps, "loss": loss, "setting": name, "iters": n,
                                 "run": run, **_metrics(acc)})
    summary = {}
    for r in rows:
        key = f"{r['epsilon']!r}|{r['loss']}|{r['setting']}"
        summary.setdefault(key, []).append(r["aacc"])
    summary = {k: float(np.mean(v)) for k, v in summary.items()}
    report = {"command": "ablate", "config": cfg, "model": _model_info(params, cfg["model"]),
              "data": _data_info(ds, path), "rows": rows, "mean_aacc": summary}
    return {"report": str(_write_report(Path(cfg["out"]), "ablate", report, rows,
                                        {"seconds": time.perf_counter() - t0}))}


def cmd_transfer(cfg) -> dict:
    _check_loss(cfg["loss"])
    ds, path = _eval_split(cfg["data"], cfg["max_images"])
    source = _model(cfg["model"])
    targets = {t: _model(t) for t in parse_list(cfg["targets"])}
    weights = _class_weights(path) if cfg["loss"] == "mce-bal" else None
    t0 = time.perf_counter()
    rows = []
    for eps in parse_eps(cfg["eps"]):
        acfg = AttackConfig(eps, cfg["iters"], cfg["loss"], "red-eps", seed=cfg["seed"])
        results, acc = attack_dataset(source, acfg, ds, weights, cfg["workers"])
        rows.append({"epsilon": eps, "model": cfg["model"], "kind": "white-box", **_metrics(acc)})
        for name, target in targets.items():
            rows.append({"epsilon": eps, "model": name, "kind": "transfer",
                         **_metrics(transfer_eval(results, target, ds))})
    report = {"command": "transfer", "config": cfg, "model": _model_info(source, cfg["model"]),
              "data": _data_info(ds, path), "rows": rows}
    return {"report": str(_write_report(Path(cfg["out"]), "transfer", report, rows,
                                        {"seconds": time.perf_counter() - t0}))}


def _markdown(rows: list[dict]) -> str:
    keys = list(rows[0])
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else ("-" if v is None else str(v))  # noqa: E731
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    lines += ["| " + " | ".join(fmt(r[k]) for k in keys) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _report_rows(report: dict) -> list[dict]:
    if report.get("command") == "sea":
        return [{"epsilon_255": row["epsilon_255"], "attack": name, **v}
                for row in report["table"] for name, v in row["cells"].items()]
    return report.get("rows", [])


def cmd_report(cfg) -> dict:
    src = Path(cfg["input"])
    try:
        report = json.loads(src.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {src}: {exc}") from exc
    if report.get("format") != REPORT_FORMAT:
        raise ConfigError(f"{src} is not a report")
    out = Path(cfg["out"]) if cfg["out"] else src.parent
    out.mkdir(parents=True, exist_ok=True)
    rows = _report_rows(report)
    written = []
    if rows:
        (out / f"{src.stem}.md").write_text(_markdown(rows))
        (out / f"{src.stem}_table.csv").write_text(_csv(rows))
        written += [str(out / f"{src.stem}.md"), str(out / f"{src.stem}_table.csv")]
    if cfg["masks"] > 0:
        if not (cfg["data"] and cfg["model"]):
            raise ConfigError("mask figures need --data and --model")
        _check_loss(cfg["loss"])
        ds, path = _eval_split(cfg["data"], cfg["masks"])
        params = _model(cfg["model"])
        weights = _class_weights(path) if cfg["loss"] == "mce-bal" else None
        acfg = AttackConfig(parse_eps(cfg["eps"])[0], cfg["iters"], cfg["loss"], seed=cfg["seed"])
        results, _ = attack_dataset(params, acfg, ds, weights, cfg["workers"])
        for r, img in zip(results, ds.images):
            k = params.num_classes
            panels = [img, colorize(r.labels, k) / 255,
                      colorize(predict(forward(params, img)), k) / 255,
                      r.adversarial, colorize(r.prediction, k) / 255]
            fig = out / f"masks_{r.image_id}.png"
            save_image(np.concatenate(panels, axis=1), fig)
            written.append(str(fig))
    return {"written": written}


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "attack": cmd_attack,
            "sea": cmd_sea, "ablate": cmd_ablate, "transfer": cmd_transfer, "report": cmd_report}
EXPECTED_ERRORS = (ConfigError, NumericInputError, EmptyMetricError, OSError, RuntimeError,
                   KeyError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        cfg = resolve(args)
        result = HANDLERS[args.command](cfg)
    except EXPECTED_ERRORS as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        if cfg and cfg.get("out") and args.command not in ("pretrain",):
            try:
                Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
                (Path(cfg["out"]) / "error.json").write_text(json.dumps(record) + "\n")
            except OSError:
                pass
        return 2 if isinstance(exc, ConfigError) else 1
    print(json.dumps({"command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
