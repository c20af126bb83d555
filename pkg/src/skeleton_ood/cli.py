"""Command-line interface: generate, train, eval, detect, replay.

Settings resolve as flags > ``--config`` file (key = value lines) > built-in
defaults, with ``SKOD_SEED`` replacing the built-in default seed.  Every
command writes a ``manifest.json`` describing the fully resolved run next to
its outputs; ``replay`` re-executes such a manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (
    SPLIT_NAMES, choose_unseen, generate_synthetic, load_dataset, mask_dataset, save_dataset, split,
)
from .energy import detect_batch
from .errors import ConfigError, ParseError, ShapeError, SkeletonOODError, StateError, UsageError
from .graph import load_hierarchy
from .metrics import histograms
from .training import TrainConfig, evaluate, predict_logits, train

log = logging.getLogger("skeleton_ood")

MANIFEST = "manifest.json"


def _int_list(text):
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _on_off(text):
    value = str(text).strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


DEFAULTS = {
    "generate": {
        "classes": 8, "unseen": 2, "per_class": 100, "frames": 16, "sigma": 0.05,
        "channels": 3, "subjects": 1, "hierarchy": "toy11", "seed": 0, "out": None,
    },
    "train": {
        **{k: v for k, v in TrainConfig().to_dict().items()},
        "data": None, "val": None, "out": None,
    },
    "eval": {
        "checkpoint": None, "data": None, "mode": "mix", "score": "energy", "react": False,
        "mask_pct": 0.0, "seed": 0, "threads": 1, "bins": 50, "export_hist": None, "out": None,
    },
    "detect": {"checkpoint": None, "data": None, "threads": 1, "out": None},
}
SEEDED = ("generate", "train", "eval")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


# parser ----------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="key = value file providing defaults for this command")
    p.add_argument("-o", "--out", help="output location")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="skeleton-ood", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and its splits", argument_default=S)
    _add_common(g)
    g.add_argument("--classes", type=int)
    g.add_argument("--unseen", type=int, help="classes held out as OOD")
    g.add_argument("--per-class", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--sigma", type=float, help="Gaussian jitter")
    g.add_argument("--channels", type=int, choices=(2, 3))
    g.add_argument("--subjects", type=int)
    g.add_argument("--hierarchy", help="built-in name (toy11, ntu25) or hierarchy file")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model and calibrate its threshold", argument_default=S)
    _add_common(t)
    t.add_argument("--data", help="training split (SKDS)")
    t.add_argument("--val", help="optional validation split for per-epoch Top-1")
    t.add_argument("--ash", choices=("p", "b", "s", "off"))
    t.add_argument("--prune-pct", type=float)
    t.add_argument("--fusion", type=_on_off, metavar="{on,off}")
    t.add_argument("--loss", choices=("energy", "ce"))
    t.add_argument("--extra-dims", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epsilon", type=float, help="energy temperature")
    t.add_argument("--quantile", type=float, help="threshold quantile of training scores")
    t.add_argument("--m-in", type=float, help="energy margin")
    t.add_argument("--alpha", type=float, help="energy loss weight")
    t.add_argument("--preset", choices=("desk", "ntu", "kinetics"))
    t.add_argument("--channels", type=_int_list, help="block widths, e.g. 16,32,32,64")
    t.add_argument("--strides", type=_int_list)
    t.add_argument("--temporal-kernel", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="score a split and report metrics", argument_default=S)
    _add_common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--mode", choices=("mix", "id_only"))
    e.add_argument("--score", choices=("energy", "msp"))
    e.add_argument("--react", type=_on_off, metavar="{on,off}", help="clip activations at the stored level")
    e.add_argument("--mask-pct", type=float, help="zero this percentage of joints per sample")
    e.add_argument("--seed", type=int, help="masking seed")
    e.add_argument("--threads", type=int)
    e.add_argument("--bins", type=int)
    e.add_argument("--export-hist", help="CSV path for binned ID/OOD score histograms")

    d = sub.add_parser("detect", help="per-sample verdicts as JSON lines", argument_default=S)
    _add_common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--data")
    d.add_argument("--threads", type=int)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("-o", "--out", help="write outputs here instead of the recorded location")
    return parser


def _coerce(parser, command, key, value):
    """Convert a config-file string with the same converter the flag uses."""
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.dest == key:
            converted = action.type(value) if action.type else value
            if action.choices is not None and converted not in action.choices:
                raise ConfigError(f"{key}: {value!r} is not one of {list(action.choices)}")
            return converted
    raise ConfigError(f"unknown option {key!r} for {command}")


def resolve(parser, args) -> dict:
    command = args.command
    settings = dict(DEFAULTS[command])
    if command in SEEDED and os.environ.get("SKOD_SEED"):
        try:
            settings["seed"] = int(os.environ["SKOD_SEED"])
        except ValueError:
            raise ConfigError(f"SKOD_SEED must be an integer, got {os.environ['SKOD_SEED']!r}") from None
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in settings:
                raise ConfigError(f"unknown option {key!r} in {config_path}")
            try:
                settings[key] = _coerce(parser, command, key, value)
            except argparse.ArgumentTypeError as exc:
                raise ConfigError(f"{config_path}: {key}: {exc}") from None
            except ValueError:
                raise ConfigError(f"{config_path}: {key}: invalid value {value!r}") from None
    settings.update(flags)
    return settings


# commands --------------------------------------------------------------------


def _require(settings, *keys):
    missing = [k for k in keys if not settings.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_manifest(directory: Path, command: str, settings: dict, outputs: list) -> Path:
    manifest = {
        "command": command,
        "config": settings,
        "outputs": sorted(outputs),
        "seed": settings.get("seed"),
        "version": __version__,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(settings) -> Path:
    _require(settings, "out")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(settings: dict) -> int:
    if settings["unseen"] >= settings["classes"]:
        raise UsageError("--unseen must leave at least one seen class")
    out = _out_dir(settings)
    hierarchy = load_hierarchy(settings["hierarchy"])
    ds = generate_synthetic(
        settings["classes"], settings["per_class"], hierarchy, frames=settings["frames"],
        seed=settings["seed"], sigma=settings["sigma"], channels=settings["channels"],
        subjects=settings["subjects"],
    )
    parts = split(ds, choose_unseen(settings["classes"], settings["unseen"], settings["seed"]))
    outputs = []
    for name in SPLIT_NAMES:
        save_dataset(parts[name], out / f"{name}.skds")
        outputs.append(f"{name}.skds")
    _write_manifest(out, "generate", settings, outputs)
    log.info("wrote %d splits to %s", len(outputs), out)
    return 0


def cmd_train(settings: dict) -> int:
    _require(settings, "data")
    out = _out_dir(settings)
    train_set = load_dataset(settings["data"])
    val_set = load_dataset(settings["val"]) if settings.get("val") else None
    config = TrainConfig.from_dict({k: settings[k] for k in TrainConfig().to_dict()})
    result = train(train_set, config, val_set, log_path=out / "train_log.jsonl")
    for record in result.log:
        log.info("epoch %(epoch)d loss %(mean_loss).4f ce %(mean_ce).4f energy %(mean_train_energy).2f", record)
    save_checkpoint(result.checkpoint, out / "model.skod")
    _write_manifest(out, "train", settings, ["model.skod", "train_log.jsonl"])
    print(json.dumps({"tau": result.checkpoint.detector.tau, "epochs": config.epochs}, sort_keys=True))
    return 0


def _load_pair(settings):
    _require(settings, "checkpoint", "data")
    return load_checkpoint(settings["checkpoint"]), load_dataset(settings["data"])


def _check_threads(settings):
    if settings["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    if settings["threads"] > 1:
        log.warning("bitwise reproducibility is only guaranteed with --threads 1")


def export_histogram(path, id_scores, ood_scores, bins: int) -> None:
    edges, id_counts, ood_counts = histograms(id_scores, ood_scores, bins)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "id_count", "ood_count"])
        for lo, hi, a, b in zip(edges[:-1], edges[1:], id_counts, ood_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])


def export_scores(path, result) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "is_id", "label"])
        for sid, s, flag, label in zip(result.ids, result.scores, result.is_id, result.labels):
            w.writerow([sid, repr(float(s)), int(flag), int(label)])


def cmd_eval(settings: dict) -> int:
    _check_threads(settings)
    ckpt, ds = _load_pair(settings)
    if settings["mask_pct"]:
        ds = mask_dataset(ds, settings["mask_pct"], settings["seed"])
    clip = ckpt.extra.get("react_clip") if settings["react"] else None
    if settings["react"] and clip is None:
        raise ConfigError("checkpoint stores no activation clipping level")
    result = evaluate(ckpt, ds, settings["mode"], settings["score"], react_clip=clip,
                      threads=settings["threads"], bins=settings["bins"])
    report = result.report.to_json()
    outputs = []
    if settings.get("out"):
        path = Path(settings["out"])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report + "\n", encoding="utf-8")
        outputs.append(path.name)
    if settings.get("export_hist"):
        hist = Path(settings["export_hist"])
        hist.parent.mkdir(parents=True, exist_ok=True)
        if not (result.id_scores.size or result.ood_scores.size):
            raise ConfigError("no samples to bin")
        export_histogram(hist, result.id_scores, result.ood_scores, settings["bins"])
        export_scores(hist.with_suffix(".scores.csv"), result)
        outputs += [hist.name, hist.with_suffix(".scores.csv").name]
    if outputs:
        where = Path(settings["out"]).parent if settings.get("out") else Path(settings["export_hist"]).parent
        _write_manifest(where, "eval", settings, outputs)
    print(report)
    return 0


def cmd_detect(settings: dict) -> int:
    _check_threads(settings)
    ckpt, ds = _load_pair(settings)
    if ckpt.detector is None:
        raise StateError("checkpoint has no calibrated detector")
    ckpt.detector.require_calibrated()
    expected = ckpt.model.topology.num_joints
    if ds.num_joints != expected:
        raise ShapeError(f"input has {ds.num_joints} joints; the model expects V={expected}")
    logits = predict_logits(ckpt.model, ds.data, settings["threads"], None)
    labels, scores, is_ood = detect_batch(logits, ckpt.detector)
    lines = [
        json.dumps({
            "id": sid, "score": float(s), "tau": ckpt.detector.tau,
            "verdict": "unseen" if flag else "seen", "label": int(label),
        }, sort_keys=True)
        for sid, s, flag, label in zip(ds.ids, scores, is_ood, labels)
    ]
    text = "".join(line + "\n" for line in lines)
    if settings.get("out"):
        path = Path(settings["out"])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        _write_manifest(path.parent, "detect", settings, [path.name])
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect}


def replay(manifest_path, out=None) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        command, settings = manifest["command"], dict(manifest["config"])
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"unreadable manifest {manifest_path}: {exc}") from None
    if command not in COMMANDS:
        raise ParseError(f"manifest names unknown command {command!r}")
    unknown = set(settings) - set(DEFAULTS[command])
    if unknown:
        raise ParseError(f"manifest has unknown options {sorted(unknown)}")
    settings = {**DEFAULTS[command], **settings}
    if out is not None:
        if command in ("eval", "detect"):
            if settings.get("out"):
                settings["out"] = str(Path(out) / Path(settings["out"]).name)
            if settings.get("export_hist"):
                settings["export_hist"] = str(Path(out) / Path(settings["export_hist"]).name)
        else:
            settings["out"] = str(out)
    return COMMANDS[command](settings)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out)
        return COMMANDS[args.command](resolve(parser, args))
    except SkeletonOODError as exc:
        print(f"skeleton-ood {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
