"""Command-line pipeline: synth -> pretrain -> partition -> train -> eval, plus ablate.

Every command writes into ``--out``: its artifacts, ``config.txt`` with the
effective key=value settings, and ``manifest.json`` (written before the work
starts, completed with timing afterwards). Failures print a single line
``error <code>: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, segnet
from .data import SynthSpec, generate, read_container, write_container
from .evaluation import VARIANTS, AblationSetup, ablation_harness, evaluate
from .partition import build_partition, load_partition, pretrain_backbone, save_partition
from .trainer import TrainConfig, coerce, fit, parse_text, to_text, write_loss_csv

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "malformed-input": 4,
    "config": 5,
    "missing-stage": 6,
    "runtime": 1,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _settings(args) -> dict[str, str]:
    """Merge ``--config`` file values with ``--set`` overrides (later wins)."""
    values: dict[str, str] = {}
    if args.config:
        path = _existing(args.config, "config file")
        try:
            values.update(parse_text(path.read_text(encoding="utf-8")))
        except ValueError as exc:
            raise CliError("config", f"{path}: {exc}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise CliError("usage", f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _split(values: dict[str, str], prefixes: tuple[str, ...]) -> dict[str, dict[str, str]]:
    """Route ``prefix.key=value`` settings to their group; bare keys go to the first prefix."""
    out: dict[str, dict[str, str]] = {p: {} for p in prefixes}
    for key, value in values.items():
        group, dot, name = key.partition(".")
        if dot and group in out:
            out[group][name] = value
        elif dot:
            raise CliError("config", f"unknown config group {group!r} in {key!r}")
        else:
            out[prefixes[0]][key] = value
    return out


def _build(cls, values: dict[str, str], **fixed):
    try:
        merged = {**values, **{k: str(v) for k, v in fixed.items() if v is not None}}
        return coerce(cls, merged)
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from exc


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", f"{what} not found: {path}")
    return path


def _read(path, what: str):
    path = _existing(path, what)
    try:
        return read_container(path)
    except ValueError as exc:
        raise CliError("malformed-input", str(exc)) from exc


def _checkpoint(path):
    path = _existing(path, "checkpoint")
    if not segnet.sidecar_path(path).exists():
        raise CliError("missing-file", f"checkpoint config sidecar not found: {segnet.sidecar_path(path)}")
    try:
        return segnet.load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError("malformed-input", f"{path}: {exc}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_text(groups: dict[str, object]) -> str:
    lines = []
    for prefix, cfg in groups.items():
        values = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)
        lines.append(to_text({f"{prefix}.{k}": v for k, v in values.items()}))
    return "".join(lines)


class Run:
    """Owns ``--out``: writes config.txt and the manifest around the work."""

    def __init__(self, args, command: str, configs: dict[str, object], inputs: dict[str, Path]):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.start = time.time()
        (self.out / "config.txt").write_text(_config_text(configs), encoding="utf-8")
        self.manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": getattr(args, "seed", None),
            "config": {
                k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v for k, v in configs.items()
            },
            "inputs": {k: {"path": str(p), "sha256": _sha256(p) if p.is_file() else None} for k, p in inputs.items()},
            "outputs": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.start)),
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        text = json.dumps(self.manifest, indent=2, sort_keys=True, default=str) + "\n"
        (self.out / "manifest.json").write_text(text, encoding="utf-8")

    def finish(self, outputs: dict[str, Path]) -> None:
        self.manifest["outputs"] = {k: str(p) for k, p in outputs.items()}
        self.manifest["elapsed_seconds"] = round(time.time() - self.start, 3)
        self.manifest["status"] = "complete"
        self._write()


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    values = _split(_settings(args), ("synth", "split"))
    spec = _build(SynthSpec, values["synth"], seed=args.seed)
    split = {"labeled": 4, "unlabeled": 40, "test": 20}
    for key, value in values["split"].items():
        if key not in split:
            raise CliError("config", f"unknown split key {key!r}")
        split[key] = int(value)
    for name, flag in (("labeled", args.n_labeled), ("unlabeled", args.n_unlabeled), ("test", args.n_test)):
        if flag is not None:
            split[name] = flag
    run = Run(args, "synth", {"synth": spec, "split": split}, {})
    ds = generate(dataclasses.replace(spec, samples=sum(split.values())))
    outputs, start = {}, 0
    for name in ("labeled", "unlabeled", "test"):
        part = ds.subset(range(start, start + split[name]))
        start += split[name]
        outputs[name] = run.out / f"{name}.segd"
        write_container(outputs[name], part)
    run.finish(outputs)


def cmd_pretrain(args) -> None:
    labeled = _read(args.labeled, "labeled container")
    values = _split(_settings(args), ("train", "net"))
    net = _build(
        segnet.NetConfig, values["net"], num_classes=labeled.num_classes, num_subclasses=labeled.num_classes,
        height=labeled.images.shape[1], width=labeled.images.shape[2],
    )
    overrides = dict(semi_supervised="false", use_scs="false", mu=0, lambda1_max=0, lambda2=0, lambda3=0)
    config = _build(TrainConfig, {"iterations": "200", **values["train"], **{k: str(v) for k, v in overrides.items()}}, seed=args.seed)
    run = Run(args, "pretrain", {"net": net, "train": config}, {"labeled": Path(args.labeled)})
    state, log = pretrain_backbone(labeled, net, config.iterations, seed=config.seed, **{
        k: v for k, v in dataclasses.asdict(config).items() if k not in ("iterations", "seed")
    })
    write_loss_csv(run.out / "losses.csv", log)
    segnet.save_checkpoint(state, run.out / "backbone.basc", dataclasses.asdict(config))
    run.finish({"checkpoint": run.out / "backbone.basc", "losses": run.out / "losses.csv"})


def cmd_partition(args) -> None:
    if not args.checkpoint:
        raise CliError("missing-stage", "partition needs --checkpoint from the 'pretrain' stage")
    labeled = _read(args.labeled, "labeled container")
    backbone = _checkpoint(args.checkpoint)
    values = _split(_settings(args), ("partition",))["partition"]
    opts = {"cap_per_class": 20000, "method": "balanced"}
    for key, value in values.items():
        if key not in opts:
            raise CliError("config", f"unknown partition key {key!r}")
        opts[key] = int(value) if key == "cap_per_class" else value
    if opts["method"] not in ("balanced", "kmeans"):
        raise CliError("config", f"unknown clustering method {opts['method']!r}")
    if backbone.config.num_classes != labeled.num_classes:
        raise CliError("config", "backbone class count does not match the labeled container")
    run = Run(args, "partition", {"partition": {**opts, "seed": args.seed}},
              {"labeled": Path(args.labeled), "checkpoint": Path(args.checkpoint)})
    part = build_partition(backbone, labeled, cap_per_class=opts["cap_per_class"], seed=args.seed, method=opts["method"])
    save_partition(run.out, part, labeled)
    run.finish({"table": run.out / "table.txt", "labeled": run.out / "labeled.segd"})


def cmd_train(args) -> None:
    values = _split(_settings(args), ("train", "net"))
    config = _build(TrainConfig, values["train"], seed=args.seed)
    table = None
    if config.use_scs:
        if not args.partition:
            raise CliError("missing-stage", "train needs --partition (output of the 'partition' stage)")
        part_dir = _existing(args.partition, "partition directory")
        try:
            part, labeled = load_partition(part_dir)
        except FileNotFoundError as exc:
            raise CliError("missing-file", f"incomplete partition directory: {exc.filename}") from exc
        except ValueError as exc:
            raise CliError("malformed-input", str(exc)) from exc
        table = part.table
        inputs = {"partition_table": part_dir / "table.txt", "labeled": part_dir / "labeled.segd"}
    else:
        if not args.labeled:
            raise CliError("usage", "train without subclasses needs --labeled")
        labeled = _read(args.labeled, "labeled container")
        inputs = {"labeled": Path(args.labeled)}
    unlabeled = None
    if config.semi_supervised:
        if not args.unlabeled:
            raise CliError("usage", "semi-supervised training needs --unlabeled")
        unlabeled = _read(args.unlabeled, "unlabeled container")
        inputs["unlabeled"] = Path(args.unlabeled)
    validation = _read(args.validation, "validation container") if args.validation else None
    net = _build(
        segnet.NetConfig, values["net"], num_classes=labeled.num_classes,
        num_subclasses=table.num_subclasses if table else labeled.num_classes,
        height=labeled.images.shape[1], width=labeled.images.shape[2],
    )
    state = None
    if args.checkpoint:
        state = _checkpoint(args.checkpoint)
        if state.config != net:
            raise CliError("config", "resume checkpoint was trained with a different network config")
        inputs["resume"] = Path(args.checkpoint)
    run = Run(args, "train", {"net": net, "train": config}, inputs)
    result = fit(labeled, unlabeled, table, config, net_config=net, state=state, out_dir=run.out, validation=validation)
    segnet.save_checkpoint(result.state, run.out / "final.basc", dataclasses.asdict(config))
    outputs = {"checkpoint": run.out / "final.basc", "losses": run.out / "losses.csv"}
    if result.validation:
        outputs["validation"] = run.out / "validation.csv"
    run.finish(outputs)


def cmd_eval(args) -> None:
    if not args.checkpoint:
        raise CliError("missing-stage", "eval needs --checkpoint from the 'train' stage")
    if not args.test:
        raise CliError("usage", "eval needs --test")
    test = _read(args.test, "test container")
    state = _checkpoint(args.checkpoint)
    if state.config.num_classes != test.num_classes:
        raise CliError("config", "checkpoint class count does not match the test container")
    run = Run(args, "eval", {}, {"checkpoint": Path(args.checkpoint), "test": Path(args.test)})
    evaluate(state, test).write(run.out)
    run.finish({"dice": run.out / "dice.csv", "summary": run.out / "summary.json"})


def cmd_ablate(args) -> None:
    values = _split(_settings(args), ("ablate", "synth", "train"))
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise CliError("config", f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    synth = _build(SynthSpec, values["synth"])
    setup = _build(AblationSetup, values["ablate"])
    train = values["train"]
    parsed = dataclasses.asdict(_build(TrainConfig, train))
    setup = dataclasses.replace(
        setup,
        synth=dataclasses.replace(synth, samples=0),
        train_overrides={k: parsed[k] for k in train},
    )
    run = Run(args, "ablate", {"ablate": {**dataclasses.asdict(setup), "seeds": seeds, "variants": variants}}, {})
    table = ablation_harness(seeds, variants, setup, progress=lambda v, s, r: logging.info(
        "variant %s seed %d: avg %.4f minority %.4f", v, s, r.average, r.minority))
    table.write_csv(run.out / "ablation.csv")
    run.finish({"table": run.out / "ablation.csv"})


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="basic-seg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_default=0):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--config", help="key=value settings file ('#' comments)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate labeled/unlabeled/test containers")
    common(p)
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("pretrain", help="supervised backbone for feature extraction")
    common(p)
    p.add_argument("--labeled", required=True)

    p = sub.add_parser("partition", help="balanced subclass partition of the labeled set")
    common(p)
    p.add_argument("--labeled", required=True)
    p.add_argument("--checkpoint", help="backbone checkpoint from 'pretrain'")

    p = sub.add_parser("train", help="dual-task mean-teacher training")
    common(p)
    p.add_argument("--partition", help="directory written by 'partition'")
    p.add_argument("--labeled", help="labeled container (only without subclasses)")
    p.add_argument("--unlabeled")
    p.add_argument("--validation")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="per-class Dice of a checkpoint's teacher")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--test")

    p = sub.add_parser("ablate", help="run the component ablation ladder")
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=",".join(VARIANTS))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report anything else on one line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error runtime: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_CODES["runtime"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
