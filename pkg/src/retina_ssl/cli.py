"""Command-line entry point.

Every subcommand takes an optional ``--config`` file of ``key=value`` lines;
keys are the long option names without the leading dashes. ``--preset``
names a hyperparameter set from ``presets.PRESETS``; the file overrides the
preset and command-line flags override both. Outputs go to ``<out-root>/<command>-<hash>-<time>``
(or ``--out`` when given) together with the resolved ``config.txt``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import math
import sys
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import presets
from .augment import FinetuneAugmentConfig, PretrainAugmentConfig
from .data.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.dataset import (
    ManifestError, apply_resolution, few_shot_subset, load_dataset, parse_manifest, split,
)
from .data.imageio import ImageFormatError, resize_bilinear
from .data.synth import SynthConfig, synth_generate, write_synth_dataset
from .evaluation import (
    evaluate_predictions, paired_tci, predict_sample, select_threshold,
)
from .moco import PretrainConfig, pretrain
from .probe import export_activation_maps, feature_target_correlation
from .tensor import RngStream, ShapeError
from .train import (
    ScheduleConfig, TrainRunConfig, epochs_to_best, finetune, load_into, monitor_dice,
    select_checkpoint, write_history,
)
from .unet import UNetConfig, build_unet


class UsageError(Exception):
    pass


@dataclass
class Opt:
    name: str
    type: Callable
    default: Any
    help: str = ""


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v in (None, "", "-", "none") else str(v)


def _ints(v) -> list[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).split(",") if x.strip()]


def _strs(v) -> list[str]:
    if isinstance(v, (list, tuple)):
        return list(v)
    return [x.strip() for x in str(v).split(",") if x.strip()]


COMMON = [
    Opt("seed", int, 0, "random seed"),
    Opt("out", _opt_str, None, "output directory (default: a fresh run directory)"),
    Opt("out-root", str, "runs", "parent of generated run directories"),
]

P = presets.PRETRAIN
F = presets.FINETUNE["drive"]

OPTIONS: dict[str, list[Opt]] = {
    "pretrain": [
        Opt("data", _opt_str, None, "manifest of unlabeled images"),
        Opt("epochs", int, P["epochs"]),
        Opt("batch-size", int, P["batch-size"]),
        Opt("queue-length", int, P["queue-length"]),
        Opt("tau", float, P["tau"]),
        Opt("alpha", float, P["alpha"]),
        Opt("weight-decay", float, P["weight-decay"]),
        Opt("lr-max", float, P["lr-max"]),
        Opt("lr-min", float, P["lr-min"]),
        Opt("lr-period", int, P["lr-period"]),
        Opt("resize-crop-size", int, P["resize-crop-size"]),
        Opt("view-crop-size", int, P["view-crop-size"]),
        Opt("include-head", _bool, False, "also store the projection head"),
    ],
    "finetune": [
        Opt("data", _opt_str, None, "labeled training manifest"),
        Opt("target", str, F["target"]),
        Opt("init-encoder", _opt_str, None, "encoder checkpoint; omit for random init"),
        Opt("train-images", int, 0, "use only N training images (0: all)"),
        Opt("val", _opt_str, None, "explicit validation manifest; skips the seeded split"),
        Opt("val-fraction", float, F["val-fraction"]),
        Opt("epochs", int, F["epochs"]),
        Opt("batch-size", int, F["batch-size"]),
        Opt("weight-decay", float, F["weight-decay"]),
        Opt("checkpoint-every", int, F["checkpoint-every"]),
        Opt("schedule", str, F["schedule"]),
        Opt("lr-max", float, F["lr-max"]),
        Opt("lr-min", float, F["lr-min"]),
        Opt("lr-period", int, F["lr-period"]),
        Opt("resize-width", int, F["resize-width"], "0 keeps the native width"),
        Opt("conv-skip", _bool, F["conv-skip"]),
        Opt("decoder-widths", _opt_str, None, "comma-separated, e.g. 16,8,4"),
    ],
    "evaluate": [
        Opt("checkpoint", _opt_str, None),
        Opt("test", _opt_str, None, "test manifest"),
        Opt("train", _opt_str, None, "training manifest used for threshold selection"),
        Opt("target", str, "vessels"),
        Opt("metric", str, "auto", "dice, auprc, both, or auto (auprc for lesion targets)"),
        Opt("no-tta", _bool, False),
        Opt("resize-width", int, 0),
        Opt("conv-skip", _bool, False),
        Opt("decoder-widths", _opt_str, None),
    ],
    "transfer": [
        Opt("run", _opt_str, None, "finetune run directory with per-epoch checkpoints"),
        Opt("source-train", _opt_str, None, "source training manifest"),
        Opt("source-val", _opt_str, None, "source validation manifest (default: val split of source-train)"),
        Opt("target-train", _opt_str, None, "target manifest used for target-side selection"),
        Opt("test", _opt_str, None, "target test manifest"),
        Opt("target", str, "vessels"),
        Opt("checkpoint-select", str, "all", "source, target or all"),
        Opt("threshold-select", str, "all", "source, target or all"),
        Opt("source-width", int, 0),
        Opt("target-width", int, 0),
        Opt("no-tta", _bool, False),
        Opt("conv-skip", _bool, False),
        Opt("decoder-widths", _opt_str, None),
    ],
    "probe": [
        Opt("data", _opt_str, None, "labeled manifest"),
        Opt("checkpoint", _opt_str, None, "encoder checkpoint; omit for a random encoder"),
        Opt("targets", _strs, ["vessels"]),
        Opt("units", _ints, [], "units whose activation maps are exported"),
        Opt("compare-random", _bool, False, "also probe a random encoder"),
        Opt("pooling", str, "pooled"),
        Opt("resize-width", int, 0),
    ],
    "stats": [
        Opt("a", _opt_str, None, "CSV for arm A (e.g. pre-trained)"),
        Opt("b", _opt_str, None, "CSV for arm B (e.g. baseline)"),
        Opt("key", str, "split"),
        Opt("column", str, "dice"),
        Opt("sided", str, "one"),
        Opt("level", float, 0.95),
        Opt("scale", float, 1.0, "multiply differences, e.g. 100 for percentage points"),
    ],
    "synth-gen": [
        Opt("n", int, 16),
        Opt("size", int, 512),
        Opt("synth-config", _opt_str, None, "key=value generator settings"),
        Opt("no-targets", _bool, False),
    ],
    "gradcheck": [
        Opt("seeds", int, 20),
        Opt("tolerance", float, 1e-3),
        Opt("unet", _bool, True, "also check a full U-Net on a 16x16 input"),
    ],
}


def parse_config_text(text: str, allowed: set[str]) -> "OrderedDict[str, str]":
    out = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("_", "-")
        if k not in allowed:
            raise UsageError(f"config line {lineno}: unknown key {k!r}")
        out[k] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def resolve(command: str, ns: argparse.Namespace) -> "OrderedDict[str, Any]":
    opts = COMMON + OPTIONS[command]
    allowed = {o.name for o in opts}
    file_vals = {}
    if ns.preset:
        if ns.preset not in presets.PRESETS:
            raise UsageError(f"unknown preset {ns.preset!r}; choose from {', '.join(sorted(presets.PRESETS))}")
        # a preset may also carry keys for other commands; only this command's apply
        file_vals = {k: str(v) for k, v in presets.PRESETS[ns.preset].items() if k in allowed}
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        file_vals.update(parse_config_text(path.read_text(encoding="utf-8"), allowed))
    cfg = OrderedDict()
    for o in opts:
        flag = getattr(ns, o.name.replace("-", "_"))
        raw = flag if flag is not None else file_vals.get(o.name, o.default)
        try:
            cfg[o.name] = o.type(raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {o.name}: {raw!r} ({exc})") from exc
    return cfg


def config_text(cfg) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items() if k not in ("out", "out-root"))


def run_dir(command: str, cfg) -> Path:
    if cfg["out"]:
        d = Path(cfg["out"])
    else:
        digest = hashlib.sha256(config_text(cfg).encode()).hexdigest()[:10]
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(cfg["out-root"]) / f"{command}-{digest}-{stamp}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(config_text(cfg), encoding="utf-8")
    return d


def _require(cfg, *names):
    for n in names:
        if not cfg.get(n):
            raise UsageError(f"--{n} is required")


def _manifest(path):
    return parse_manifest(path)


def _unet_config(cfg) -> UNetConfig:
    dw = cfg.get("decoder-widths")
    return UNetConfig(conv_skip_connections=bool(cfg.get("conv-skip")),
                      decoder_widths=tuple(_ints(dw)) if dw else None)


def _samples(manifest, target: Optional[str] = None, width: int = 0, divisor: int = 8):
    samples = load_dataset(manifest, None if target is None else [target])
    width = width or manifest.resize_width
    return [apply_resolution(s, width or None, divisor) for s in samples]


def _write_csv(path, header, rows) -> Path:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _center_crop_square(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    scale = size / min(h, w)
    nw, nh = max(size, int(round(w * scale))), max(size, int(round(h * scale)))
    img = resize_bilinear(image, nw, nh) if (nh, nw) != (h, w) else image
    y0, x0 = (nh - size) // 2, (nw - size) // 2
    return np.rint(np.clip(img[y0:y0 + size, x0:x0 + size], 0, 1) * 255).astype(np.uint8)


# -- subcommands ------------------------------------------------------------

def cmd_pretrain(cfg) -> int:
    _require(cfg, "data")
    manifest = _manifest(cfg["data"])
    size = cfg["resize-crop-size"]
    images = [_center_crop_square(s.image, size) for s in load_dataset(manifest, [])]
    pcfg = PretrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch-size"], queue_length=cfg["queue-length"],
        tau=cfg["tau"], alpha=cfg["alpha"], weight_decay=cfg["weight-decay"],
        schedule=ScheduleConfig("cosine-restarts", cfg["lr-max"], cfg["lr-min"], cfg["lr-period"]),
        augment=PretrainAugmentConfig(resize_crop_size=size, view_crop_size=cfg["view-crop-size"]),
        include_head=cfg["include-head"], seed=cfg["seed"],
    )
    out = run_dir("pretrain", cfg)
    pretrain(images, pcfg, out_dir=out,
             progress=lambda e, s, l: print(f"epoch {e + 1}/{pcfg.epochs} step {s} loss {l:.4f}", file=sys.stderr))
    print(out / "encoder.ntc")
    return 0


def cmd_finetune(cfg) -> int:
    _require(cfg, "data")
    manifest = _manifest(cfg["data"])
    ucfg = _unet_config(cfg)
    samples = _samples(manifest, cfg["target"], cfg["resize-width"], ucfg.divisor)
    missing = [s.id for s in samples if cfg["target"] not in s.targets]
    if missing:
        raise UsageError(f"target {cfg['target']!r} missing for {len(missing)} samples, e.g. {missing[0]}")
    encoder = load_checkpoint(cfg["init-encoder"], prefix="encoder.") if cfg["init-encoder"] else None
    if cfg["val"]:
        train = samples
        val = _samples(_manifest(cfg["val"]), cfg["target"], cfg["resize-width"], ucfg.divisor)
    else:
        train, val = split(samples, cfg["val-fraction"], cfg["seed"])
    if cfg["train-images"]:
        train = few_shot_subset(train, cfg["train-images"], cfg["seed"])
    model = build_unet(ucfg, RngStream(cfg["seed"], (0xF7,)))
    if encoder is not None:
        load_into(model, encoder, prefix="encoder.")
    tcfg = TrainRunConfig(
        target=cfg["target"], epochs=cfg["epochs"], batch_size=cfg["batch-size"],
        weight_decay=cfg["weight-decay"], checkpoint_every=cfg["checkpoint-every"],
        schedule=ScheduleConfig(cfg["schedule"], cfg["lr-max"], cfg["lr-min"], cfg["lr-period"]),
        augment=FinetuneAugmentConfig(), seed=cfg["seed"],
    )
    out = run_dir("finetune", cfg)
    _write_csv(out / "split.csv", ["id", "role"],
               [(s.id, "train") for s in train] + [(s.id, "val") for s in val])
    result = finetune(model, train, val, tcfg, out_dir=out / "checkpoints", keep_states=False)
    write_history(out / "history.csv", result.history)
    best, epoch = select_checkpoint(result.checkpoints)
    state = load_checkpoint(best.path)
    save_checkpoint(out / "best.ntc", OrderedDict((k, v) for k, v in state.items() if not k.startswith("adam.")),
                    {"epoch": epoch, "val_dice": best.val_dice, "target": cfg["target"],
                     "init": "pretrained" if encoder is not None else "random"})
    _write_csv(out / "summary.csv", ["split", "init", "train-images", "best-epoch", "epochs-to-best", "val-dice"],
               [[cfg["seed"], "pretrained" if encoder is not None else "random", len(train), epoch,
                 epochs_to_best(result.history), repr(best.val_dice)]])
    print(out / "best.ntc")
    return 0


def _load_model(path, ucfg: UNetConfig):
    model = build_unet(ucfg, RngStream(0))
    load_into(model, load_checkpoint(path))
    return model


def _metric_flags(metric: str, target: str) -> tuple[bool, bool]:
    if metric == "auto":
        metric = "dice" if target.lower() in ("vessels", "vessel", "av") else "auprc"
    if metric not in ("dice", "auprc", "both"):
        raise UsageError(f"unknown metric {metric!r}")
    return metric in ("dice", "both"), metric in ("auprc", "both")


def cmd_evaluate(cfg) -> int:
    _require(cfg, "checkpoint", "test", "train")
    test_m, train_m = _manifest(cfg["test"]), _manifest(cfg["train"])
    model = _load_model(cfg["checkpoint"], _unet_config(cfg))
    target = cfg["target"]
    test = load_dataset(test_m, [target])
    train = load_dataset(train_m, [target])
    width = cfg["resize-width"] or test_m.resize_width
    train_width = cfg["resize-width"] or train_m.resize_width
    tta = not cfg["no-tta"]
    want_dice, want_ap = _metric_flags(cfg["metric"], target)
    train_probs = [predict_sample(model, s, train_width, tta) for s in train]
    thr = select_threshold(train_probs, [s.targets[target] for s in train], [s.fov for s in train])
    test_probs = [predict_sample(model, s, width, tta) for s in test]
    report = evaluate_predictions(test_probs, test, thr, target, with_auprc=want_ap)
    out = run_dir("evaluate", cfg)
    report.write_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_transfer(cfg) -> int:
    """Score every (checkpoint source, threshold source) combination on the target test set."""
    _require(cfg, "run", "source-train", "target-train", "test")
    run = Path(cfg["run"])
    ckpts = sorted((run / "checkpoints").glob("epoch*.ntc"))
    if not ckpts:
        raise UsageError(f"no epoch checkpoints under {run / 'checkpoints'}")
    ucfg = _unet_config(cfg)
    target = cfg["target"]
    src_m = _manifest(cfg["source-train"])
    tgt_train_m, test_m = _manifest(cfg["target-train"]), _manifest(cfg["test"])
    src_samples = load_dataset(src_m, [target])
    if cfg["source-val"]:
        src_train, src_val = src_samples, load_dataset(_manifest(cfg["source-val"]), [target])
    else:
        src_train, src_val = split(src_samples, 0.2, cfg["seed"])
    tgt_train = load_dataset(tgt_train_m, [target])
    test = load_dataset(test_m, [target])
    sw = cfg["source-width"] or src_m.resize_width
    tw = cfg["target-width"] or test_m.resize_width
    tta = not cfg["no-tta"]

    def at_width(samples, width):
        return [apply_resolution(s, width or None, ucfg.divisor) for s in samples]

    model = build_unet(ucfg, RngStream(0))
    choices = {"source": ["source"], "target": ["target"], "all": ["source", "target"]}
    try:
        ck_sel, th_sel = choices[cfg["checkpoint-select"]], choices[cfg["threshold-select"]]
    except KeyError as exc:
        raise UsageError(f"selection must be source, target or all, got {exc.args[0]!r}") from exc
    picked = {}
    for side, samples, width in (("source", src_val or src_train, sw), ("target", tgt_train, tw)):
        if side not in ck_sel:
            continue
        scored = at_width(samples, width)
        best = (-math.inf, None)
        for p in ckpts:
            load_into(model, load_checkpoint(p))
            d = monitor_dice(model, scored, target)
            if d > best[0]:
                best = (d, p)
        picked[side] = best[1]
    rows = []
    for ck in ck_sel:
        load_into(model, load_checkpoint(picked[ck]))
        for th in th_sel:
            thr_samples, thr_width = (src_train, sw) if th == "source" else (tgt_train, tw)
            probs = [predict_sample(model, s, thr_width, tta) for s in thr_samples]
            thr = select_threshold(probs, [s.targets[target] for s in thr_samples], [s.fov for s in thr_samples])
            test_probs = [predict_sample(model, s, tw, tta) for s in test]
            rep = evaluate_predictions(test_probs, test, thr, target)
            rows.append([ck, th, picked[ck].name, repr(thr), rep.counts.tp, rep.counts.fp, rep.counts.fn,
                         repr(rep.dice)])
    out = run_dir("transfer", cfg)
    _write_csv(out / "transfer.csv",
               ["checkpoint-select", "threshold-select", "checkpoint", "threshold", "tp", "fp", "fn", "dice"], rows)
    for r in rows:
        print(f"checkpoint={r[0]} threshold={r[1]} dice={float(r[-1]):.4f}")
    return 0


def cmd_probe(cfg) -> int:
    _require(cfg, "data")
    manifest = _manifest(cfg["data"])
    targets = cfg["targets"]
    samples = _samples(manifest, None, cfg["resize-width"], 8)
    arms = []
    if cfg["checkpoint"]:
        model = build_unet(UNetConfig(), RngStream(cfg["seed"], (0xB0,)))
        load_into(model, load_checkpoint(cfg["checkpoint"], prefix="encoder."), prefix="encoder.")
        arms.append(("pretrained", model))
    if not cfg["checkpoint"] or cfg["compare-random"]:
        arms.append(("random", build_unet(UNetConfig(), RngStream(cfg["seed"], (0xB0,)))))
    for u in cfg["units"]:
        if not 0 <= u < UNetConfig().feature_channels:
            raise UsageError(f"unit {u} out of range")
    out = run_dir("probe", cfg)
    matrices = {}
    for name, model in arms:
        m = feature_target_correlation(model, samples, targets, cfg["pooling"])
        matrices[name] = m
        m.write_csv(out / f"correlation_{name}.csv")
        if cfg["units"]:
            export_activation_maps(model, samples[0].image, cfg["units"], out / f"maps_{name}")
        for t in m.absent_targets:
            print(f"warning: target {t!r} is empty in every image; its column is zero", file=sys.stderr)
    if len(matrices) == 2:
        a, b = matrices["pretrained"], matrices["random"]
        rows = [[u, t, repr(float(a.values[u, j])), repr(float(b.values[u, j]))]
                for u in range(a.units) for j, t in enumerate(targets)]
        _write_csv(out / "correlation_compare.csv", ["unit", "target", "r-pretrained", "r-random"], rows)
    for name, m in matrices.items():
        for t in targets:
            print(f"{name} {t} max|r|={m.max_abs(t):.4f}")
    return 0


def _read_keyed(path, key: str, column: str) -> dict:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or key not in reader.fieldnames or column not in reader.fieldnames:
            raise UsageError(f"{path}: needs columns {key!r} and {column!r}")
        out = {}
        for row in reader:
            if row[key] in out:
                raise UsageError(f"{path}: duplicate {key} {row[key]!r}")
            out[row[key]] = float(row[column])
        return out


def cmd_stats(cfg) -> int:
    _require(cfg, "a", "b")
    a = _read_keyed(cfg["a"], cfg["key"], cfg["column"])
    b = _read_keyed(cfg["b"], cfg["key"], cfg["column"])
    unmatched = sorted(set(a) ^ set(b))
    if unmatched:
        raise UsageError(f"unpaired {cfg['key']} values: {', '.join(unmatched)}")
    keys = sorted(a)
    diffs = [(a[k] - b[k]) * cfg["scale"] for k in keys]
    ci = paired_tci(diffs, cfg["sided"], cfg["level"])
    out = run_dir("stats", cfg)
    _write_csv(out / "differences.csv", [cfg["key"], "difference"], [[k, repr(d)] for k, d in zip(keys, diffs)])
    _write_csv(out / "interval.csv", ["n", "mean", "sd", "lower", "upper", "sided", "level", "significant"],
               [[ci.n, repr(ci.mean), repr(ci.sd), repr(ci.lower), repr(ci.upper), ci.sided, ci.level,
                 int(ci.significant)]])
    verdict = "significant" if ci.significant else "not significant"
    print(f"n={ci.n} mean={ci.mean:.4f} CI=[{ci.lower:.4f}, {ci.upper:.4f}] {verdict}")
    return 0


def cmd_synth_gen(cfg) -> int:
    scfg = SynthConfig(size=cfg["size"])
    if cfg["synth-config"]:
        scfg = SynthConfig.from_text(Path(cfg["synth-config"]).read_text(encoding="utf-8"))
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    out = run_dir("synth-gen", cfg)
    samples = synth_generate(cfg["n"], scfg, RngStream(cfg["seed"], (0x5E,)))
    (out / "synth.txt").write_text(scfg.to_text(), encoding="utf-8")
    print(write_synth_dataset(out, samples, with_targets=not cfg["no-targets"]))
    return 0


def cmd_gradcheck(cfg) -> int:
    from .tensor import Tensor, grad_check
    from .tensor.checks import run_suite

    out = run_dir("gradcheck", cfg)
    rows = run_suite(range(cfg["seeds"]))
    worst: dict = OrderedDict()
    for name, _, err in rows:
        worst[name] = max(worst.get(name, 0.0), err)
    failed = [n for n, e in worst.items() if not e < cfg["tolerance"]]
    if cfg["unet"]:
        rng = RngStream(cfg["seed"], (0x6C,))
        model = build_unet(UNetConfig(), rng.child(1))
        x = Tensor(rng.normal((2, 3, 16, 16)), requires_grad=True)
        target = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(np.float32)
        from .train import segmentation_loss

        e = grad_check(lambda x: segmentation_loss(model.forward(x, train=True), target), [x],
                       max_entries=64, rng=np.random.default_rng(cfg["seed"]))
        rows.append(("unet16", cfg["seed"], e))
        worst["unet16"] = e
        if not e < 1e-2:
            failed.append("unet16")
    _write_csv(out / "gradcheck.csv", ["case", "seed", "rel-error"], [[n, s, repr(e)] for n, s, e in rows])
    for n, e in worst.items():
        print(f"{n:22s} {e:.3e}")
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "probe": cmd_probe,
    "stats": cmd_stats,
    "synth-gen": cmd_synth_gen,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retina-ssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", help="named hyperparameter set, e.g. finetune-idrid")
        for o in COMMON + OPTIONS[name]:
            kw = {"dest": o.name.replace("-", "_"), "default": None, "help": o.help or None}
            if o.type is _bool:
                p.add_argument(f"--{o.name}", nargs="?", const="true", **kw)
            else:
                p.add_argument(f"--{o.name}", **kw)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except (UsageError, ManifestError, CheckpointError, ImageFormatError, ShapeError, KeyError,
            ValueError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
