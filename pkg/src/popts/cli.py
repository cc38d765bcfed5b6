"""Command-line pipeline: prepare, train, generate, evaluate, plot.

Options come from (lowest to highest precedence) built-in defaults, the
``[<subcommand>]`` section of an INI file given with ``--config``, and
command-line flags. Every run writes the fully resolved options to
``<out>/resolved_config.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import torch

from . import data as data_mod
from .backbone import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import EvaluationError, evaluate
from .plots import export_plots
from .schedule import generate
from .stats import DEFAULT_BANDWIDTHS
from .train import TrainConfig, TrainingDiverged, checkpoint_manifest, schedule_for, train

log = logging.getLogger("popts")

EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_EVAL = 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# option name -> (parser, default); names use underscores, flags use dashes
_TRAIN_DEFAULTS = TrainConfig()
OPTIONS: dict[str, dict[str, tuple]] = {
    "prepare": {
        "source": (str, "sines"),
        "n": (int, 10000),
        "features": (int, 5),
        "length": (int, 24),
        "stride": (int, 1),
        "delimiter": (str, ","),
        "seed": (int, 0),
        "out": (str, None),
    },
    "train": {
        "data": (str, None),
        "out": (str, None),
        "epochs": (int, _TRAIN_DEFAULTS.epochs),
        "batch": (int, _TRAIN_DEFAULTS.batch),
        "lr": (float, _TRAIN_DEFAULTS.lr),
        "weight_decay": (float, _TRAIN_DEFAULTS.weight_decay),
        "grad_clip": (float, _TRAIN_DEFAULTS.grad_clip),
        "alpha": (float, _TRAIN_DEFAULTS.alpha),
        "steps": (int, _TRAIN_DEFAULTS.steps),
        "schedule": (str, _TRAIN_DEFAULTS.schedule),
        "strategy": (str, _TRAIN_DEFAULTS.strategy),
        "hidden": (int, _TRAIN_DEFAULTS.hidden),
        "heads": (int, _TRAIN_DEFAULTS.heads),
        "encoder_blocks": (int, _TRAIN_DEFAULTS.encoder_blocks),
        "dit_blocks": (int, _TRAIN_DEFAULTS.dit_blocks),
        "bandwidths": (_floats, _TRAIN_DEFAULTS.bandwidths),
        "seed": (int, _TRAIN_DEFAULTS.seed),
        "dtype": (str, _TRAIN_DEFAULTS.dtype),
        "log_every": (int, _TRAIN_DEFAULTS.log_every),
        "checkpoint_every": (int, _TRAIN_DEFAULTS.checkpoint_every),
    },
    "generate": {
        "checkpoint": (str, None),
        "n": (int, 2000),
        "seed": (int, 0),
        "chunk": (int, 500),
        "out": (str, None),
    },
    "evaluate": {
        "real": (str, None),
        "syn": (str, None),
        "out": (str, None),
        "seed": (int, 0),
        "bins": (int, 50),
        "repeats": (int, 5),
        "iterations": (int, 2000),
        "embedding": (str, "tsne"),
        "plots": (_bool, True),
    },
    "plot": {
        "real": (str, None),
        "syn": (str, None),
        "out": (str, None),
        "seed": (int, 0),
        "bins": (int, 50),
        "embedding": (str, "tsne"),
    },
}


def resolve(command: str, config_path: str | None, flags: dict) -> dict:
    """Merge defaults, INI section and explicit flags; unknown keys are rejected."""
    spec = OPTIONS[command]
    resolved = {k: default for k, (_, default) in spec.items()}
    if config_path:
        if not os.path.exists(config_path):
            raise FileNotFoundError(config_path)
        parser = configparser.ConfigParser()
        parser.read(config_path)
        unknown_sections = set(parser.sections()) - set(OPTIONS)
        if unknown_sections:
            raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
        if parser.has_section(command):
            for key, raw in parser.items(command):
                key = key.replace("-", "_")
                if key not in spec:
                    raise ConfigError(f"unknown key {key!r} in [{command}]")
                resolved[key] = _parse(spec[key][0], key, raw)
    for key, val in flags.items():
        if val is not None:
            resolved[key] = _parse(spec[key][0], key, val)
    return resolved


def _parse(fn, key, raw):
    try:
        return fn(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def dump_config(command: str, resolved: dict, path: str) -> None:
    parser = configparser.ConfigParser()
    parser[command] = {
        k: " ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        for k, v in resolved.items() if v is not None
    }
    with open(path, "w") as fh:
        parser.write(fh)


def _require(opts: dict, *names):
    missing = [n for n in names if not opts.get(n)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def cmd_prepare(opts: dict) -> int:
    _require(opts, "out")
    if opts["source"] == "sines":
        ds = data_mod.make_sines(opts["n"], opts["length"], opts["features"], opts["seed"])
    else:
        table = data_mod.load_table(opts["source"], opts["delimiter"])
        ds = data_mod.window(table, opts["length"], opts["stride"])
        ds.meta["source"] = os.path.abspath(opts["source"])
    ds.meta["seed"] = opts["seed"]
    data_mod.save_dataset(ds, opts["out"])
    dump_config("prepare", opts, os.path.join(opts["out"], "resolved_config.ini"))
    log.info("wrote %s samples of shape %s to %s", len(ds), ds.samples.shape[1:], opts["out"])
    return 0


def train_config_from(opts: dict) -> TrainConfig:
    keys = set(TrainConfig.field_names())
    try:
        return TrainConfig(**{k: v for k, v in opts.items() if k in keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(opts: dict) -> int:
    _require(opts, "data", "out")
    cfg = train_config_from(opts)
    ds = data_mod.load_dataset(opts["data"])
    os.makedirs(opts["out"], exist_ok=True)
    dump_config("train", opts, os.path.join(opts["out"], "resolved_config.ini"))
    extra = {"scaler": ds.scaler.to_dict(), "data": os.path.abspath(opts["data"])}
    model, trainlog = train(ds, cfg, opts["out"], extra)
    trainlog.write(os.path.join(opts["out"], "train_log.csv"))
    save_checkpoint(model, os.path.join(opts["out"], "checkpoint"), checkpoint_manifest(cfg, extra))
    return 0


def cmd_generate(opts: dict) -> int:
    _require(opts, "checkpoint", "out")
    model, manifest = load_checkpoint(opts["checkpoint"])
    if "scaler" not in manifest or "schedule" not in manifest:
        raise CheckpointError(f"checkpoint at {opts['checkpoint']} lacks scaler or schedule metadata")
    sched = schedule_for(manifest)
    gen = torch.Generator().manual_seed(opts["seed"])
    samples = generate(model, opts["n"], sched, gen, chunk=opts["chunk"]).to(torch.float64).numpy()
    scaler = data_mod.Scaler.from_dict(manifest["scaler"])
    meta = {"source": "generated", "checkpoint": os.path.abspath(opts["checkpoint"]), "seed": opts["seed"]}
    data_mod.save_dataset(data_mod.Dataset(samples, scaler, meta), opts["out"], denormalized=True)
    dump_config("generate", opts, os.path.join(opts["out"], "resolved_config.ini"))
    return 0


def _load_pair(opts):
    try:
        real = data_mod.load_dataset(opts["real"])
        syn = data_mod.load_dataset(opts["syn"])
    except data_mod.DataError as exc:
        raise EvaluationError(str(exc)) from exc
    return real, syn


def cmd_evaluate(opts: dict) -> int:
    _require(opts, "real", "syn", "out")
    real, syn = _load_pair(opts)
    report = evaluate(real, syn, seed=opts["seed"], bins=opts["bins"], repeats=opts["repeats"],
                      iterations=opts["iterations"], bandwidths=DEFAULT_BANDWIDTHS)
    report.write(opts["out"])
    if opts["plots"]:
        export_plots(real, syn, os.path.join(opts["out"], "plots"), seed=opts["seed"], bins=opts["bins"],
                     embedding=opts["embedding"])
    dump_config("evaluate", opts, os.path.join(opts["out"], "resolved_config.ini"))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "config"}, sort_keys=True))
    return 0


def cmd_plot(opts: dict) -> int:
    _require(opts, "real", "syn", "out")
    real, syn = _load_pair(opts)
    export_plots(real, syn, opts["out"], seed=opts["seed"], bins=opts["bins"], embedding=opts["embedding"])
    dump_config("plot", opts, os.path.join(opts["out"], "resolved_config.ini"))
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI file; options read from its [%s] section" % name)
        for key, (_, default) in spec.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"default: {default}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    flags = {k: getattr(args, k) for k in OPTIONS[args.command]}
    try:
        opts = resolve(args.command, args.config, flags)
        return COMMANDS[args.command](opts)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, data_mod.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
