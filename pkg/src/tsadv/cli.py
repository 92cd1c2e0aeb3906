"""Command-line front end.

Every subcommand writes into its ``--out`` directory a ``config.json`` echo
of the fully resolved arguments; ``tsadv <cmd> --config DIR/config.json``
replays the run (flags given on the command line still win).

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, adversarial_dataset, attack_dataset, write_results_csv
from .data import Dataset, SynthSpec, generate_synthetic, load_ucr_file, subsample, write_ucr_file
from .defense import DefenseConfig, adversarial_train, precompute_adversarials
from .evaluation import (
    DEFAULT_EPS_GRID,
    RENDERERS,
    accuracy,
    attacked_accuracy,
    defense_curve,
    emit_report,
    epsilon_sweep,
    generalization_curve,
    table1_row,
    targeted_success_rate,
)
from .model import (
    ClassifierConfig,
    TrainSchedule,
    fit,
    init_classifier,
    load_checkpoint,
    save_checkpoint,
)
from .universal import UniversalConfig, compute_universal, error_ratio, save_perturbation

log = logging.getLogger("tsadv")


# --- argument types -----------------------------------------------------------


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _pos_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _formats(text: str) -> list[str]:
    fmts = [t.strip() for t in text.split(",") if t.strip()]
    bad = [f for f in fmts if f not in RENDERERS]
    if bad or not fmts:
        raise argparse.ArgumentTypeError(f"formats must be among {sorted(RENDERERS)}")
    return fmts


# --- shared option groups -----------------------------------------------------


def _req(p: argparse.ArgumentParser, flag: str, **kw) -> None:
    # checked after --config defaults are merged; argparse's required=True ignores defaults
    action = p.add_argument(flag, default=None, **kw)
    p.required_dests = getattr(p, "required_dests", []) + [action.dest]


def _add_common(p: argparse.ArgumentParser) -> None:
    _req(p, "--out", help="output directory for this run")
    p.add_argument("--config", help="JSON file of argument values (flags override it)")
    p.add_argument("--threads", type=_pos_int, default=1, help="worker cap for per-sample attacks")
    p.add_argument("--log-level", default="INFO")


def _add_data(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        _req(p, f"--{name}", help=f"{name} split in UCR text format")
    p.add_argument("--no-normalize", action="store_true", help="skip z-normalization at load time")
    p.add_argument("--delimiter", choices=("auto", "comma", "tab"), default="auto")


def _add_schedule(p: argparse.ArgumentParser, defaults: TrainSchedule) -> None:
    p.add_argument("--epochs", type=_nonneg_int, default=defaults.max_epochs)
    p.add_argument("--batch-size", type=_pos_int, default=defaults.batch_size)
    p.add_argument("--lr", type=_pos_float, default=defaults.initial_lr)
    p.add_argument("--min-lr", type=_pos_float, default=defaults.min_lr)
    p.add_argument("--patience", type=_pos_int, default=defaults.plateau_patience)
    p.add_argument("--lr-factor", type=_pos_float, default=defaults.lr_factor)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=defaults.optimizer)
    p.add_argument("--seed", type=int, default=defaults.seed)


def _add_attack(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--eps", type=_nonneg_float, default=0.1)
    p.add_argument("--steps", type=_pos_int, default=10, help="BIM iterations")
    p.add_argument("--alpha", type=_pos_float, default=None, help="BIM step size (default eps/2)")
    p.add_argument("--method", choices=("fgsm", "bim"), default="fgsm")
    if with_mode:
        p.add_argument("--mode", choices=("untargeted", "targeted"), default="untargeted")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=_int_list, default=[16, 32, 32])
    p.add_argument("--kernels", type=_int_list, default=[8, 5, 3])
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--init-seed", type=int, default=0)


def _add_universal(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=_pos_float, default=0.1)
    p.add_argument("--r-fooling", type=_unit_float, default=0.9)
    p.add_argument("--epoch-fool", type=_pos_int, default=10)
    p.add_argument("--seed", type=int, default=0)


# --- helpers ------------------------------------------------------------------


def _schedule(args) -> TrainSchedule:
    return TrainSchedule(
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        initial_lr=args.lr,
        min_lr=args.min_lr,
        plateau_patience=args.patience,
        lr_factor=args.lr_factor,
        optimizer=args.optimizer,
        seed=args.seed,
    )


def _attack_config(args, mode: str | None = None) -> AttackConfig:
    return AttackConfig(args.eps, args.steps, args.alpha, mode or args.mode, args.method)


def _load(args, path: str, split: str, classes=None) -> Dataset:
    return load_ucr_file(
        path, delimiter=args.delimiter, normalize=not args.no_normalize, classes=classes, split=split
    )


def _write_history(history, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(history.loss, history.lr)):
            w.writerow([i, repr(loss), repr(lr)])


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# --- subcommands --------------------------------------------------------------


def cmd_synth(args) -> None:
    spec = SynthSpec(args.length, args.per_class, args.noise, args.seed)
    train, test = generate_synthetic(spec)
    out = Path(args.out)
    write_ucr_file(train, out / f"{args.name}_TRAIN.tsv", delimiter="\t")
    write_ucr_file(test, out / f"{args.name}_TEST.tsv", delimiter="\t")
    log.info("wrote %d train and %d test series of length %d", len(train), len(test), args.length)


def cmd_train(args) -> None:
    train = _load(args, args.train, "train")
    cfg = ClassifierConfig(
        num_classes=train.num_classes,
        series_length=train.series_length,
        channels_per_block=tuple(args.channels),
        kernel_sizes=tuple(args.kernels),
        residual=not args.no_residual,
        init_seed=args.init_seed,
    )
    model, history = fit(init_classifier(cfg), train, _schedule(args))
    out = Path(args.out)
    save_checkpoint(model, out / "model.json")
    _write_history(history, out / "history.csv")
    _write_json({"train_accuracy": accuracy(model, train), "epochs": len(history.loss)}, out / "summary.json")


def cmd_attack(args) -> None:
    model = load_checkpoint(args.model)
    data = _load(args, args.data, "test")
    cfg = _attack_config(args)
    results = attack_dataset(model, data, cfg, threads=args.threads)
    out = Path(args.out)
    write_results_csv(results, out / "results.csv")
    write_ucr_file(adversarial_dataset(results, data), out / "adversarial.tsv", delimiter="\t")
    summary = {"clean_accuracy": accuracy(model, data), "num_results": len(results)}
    if cfg.mode == "untargeted":
        summary["attacked_accuracy"] = attacked_accuracy(results)
    else:
        summary["targeted_success_rate"] = targeted_success_rate(results, data.num_classes, len(data))
    _write_json(summary, out / "summary.json")


def cmd_universal(args) -> None:
    model = load_checkpoint(args.model)
    train = _load(args, args.train, "train")
    test = _load(args, args.test, "test", classes=train.classes)
    part = subsample(train, args.fraction, args.seed) if args.fraction < 1 else train
    pert = compute_universal(model, part, args.eps, args.r_fooling, args.epoch_fool, args.seed)
    out = Path(args.out)
    save_perturbation(pert, out / "perturbation.json")
    _write_json(
        {
            "linf_norm": float(np.max(np.abs(pert.u))),
            "train_samples": len(part),
            "train_success_rate": 100.0 * pert.train_fooling_ratio,
            "test_success_rate": 100.0 * error_ratio(model, test, pert.u),
            "epochs_used": pert.epochs_used,
        },
        out / "summary.json",
    )


def cmd_advtrain(args) -> None:
    model = load_checkpoint(args.model)
    train = _load(args, args.train, "train")
    cfg = DefenseConfig(
        attack=_attack_config(args, mode="untargeted"),
        adv_per_clean=args.adv_per_clean,
        schedule=_schedule(args),
        precompute=not args.regenerate,
    )
    adv = precompute_adversarials(model, train, cfg)
    defended, history = adversarial_train(model, train, adv, cfg)
    out = Path(args.out)
    save_checkpoint(defended, out / "model.json")
    _write_history(history, out / "history.csv")
    write_ucr_file(adv, out / "adversarial.tsv", delimiter="\t")


def _emit(rows, args, stem: str) -> None:
    for fmt in args.format:
        ext = {"csv": "csv", "json": "json", "markdown": "md"}[fmt]
        emit_report(rows, fmt, Path(args.out) / f"{stem}.{ext}")


def cmd_report(args) -> None:
    if args.protocol == "table1":
        train = _load(args, args.train, "train")
        test = _load(args, args.test, "test", classes=train.classes)
        model = load_checkpoint(args.model) if args.model else None
        model_cfg = None
        if model is None:
            model_cfg = ClassifierConfig(
                train.num_classes, train.series_length, tuple(args.channels), tuple(args.kernels),
                not args.no_residual, args.init_seed,
            )
        attack = AttackConfig(args.eps, args.steps, args.alpha)
        defense = DefenseConfig(
            attack=attack,
            adv_per_clean=args.adv_per_clean,
            schedule=TrainSchedule(
                max_epochs=args.adv_epochs, batch_size=args.batch_size, initial_lr=args.adv_lr,
                min_lr=args.adv_min_lr, plateau_patience=args.adv_patience, lr_factor=0.5, seed=args.seed,
            ),
        )
        row = table1_row(
            train, test, model_cfg, attack, defense,
            UniversalConfig(args.eps, args.r_fooling, args.epoch_fool, args.seed),
            TrainSchedule(max_epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
            classifier=model, threads=args.threads,
        )
        row.dataset = args.name or row.dataset
        _emit([row], args, "table1")
    elif args.protocol == "sweep":
        model = load_checkpoint(args.model)
        data = _load(args, args.data, "test")
        points = epsilon_sweep(model, data, args.grid, args.metric, args.steps, threads=args.threads)
        _emit(points, args, "sweep")
    elif args.protocol == "generalization":
        model = load_checkpoint(args.model)
        train = _load(args, args.train, "train")
        test = _load(args, args.test, "test", classes=train.classes)
        ucfg = UniversalConfig(args.eps, args.r_fooling, args.epoch_fool, args.seed)
        points = generalization_curve(model, train, test, args.fractions, ucfg, args.seed)
        _emit(points, args, "generalization")
    elif args.protocol == "defense":
        original = load_checkpoint(args.original)
        defended = load_checkpoint(args.defended)
        data = _load(args, args.data, "test")
        rows = defense_curve(original, defended, data, args.grid, args.steps, threads=args.threads)
        _emit(rows, args, "defense")


# --- parser -------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="tsadv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic sine/square/sawtooth dataset")
    _add_common(p)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-class", type=_pos_int, default=100)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--noise", type=_nonneg_float, default=0.1)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = subs["train"] = sub.add_parser("train", help="train a base classifier")
    _add_common(p)
    _add_data(p, "train")
    _add_model(p)
    _add_schedule(p, TrainSchedule())
    p.set_defaults(func=cmd_train)

    p = subs["attack"] = sub.add_parser("attack", help="FGSM/BIM attack every sample of a dataset")
    _add_common(p)
    _req(p, "--model", help="checkpoint file")
    _add_data(p, "data")
    _add_attack(p)
    p.set_defaults(func=cmd_attack)

    p = subs["universal"] = sub.add_parser("universal", help="compute a universal perturbation")
    _add_common(p)
    _req(p, "--model")
    _add_data(p, "train", "test")
    _add_universal(p)
    p.add_argument("--fraction", type=_unit_float, default=1.0, help="share of train used to build U")
    p.set_defaults(func=cmd_universal)

    p = subs["advtrain"] = sub.add_parser("advtrain", help="adversarially fine-tune a checkpoint")
    _add_common(p)
    _req(p, "--model")
    _add_data(p, "train")
    _add_attack(p, with_mode=False)
    p.add_argument("--adv-per-clean", type=_pos_int, default=1)
    p.add_argument("--regenerate", action="store_true", help="recompute adversarials every epoch")
    _add_schedule(p, DefenseConfig().schedule)
    p.set_defaults(func=cmd_advtrain)

    p = subs["report"] = sub.add_parser("report", help="run an experiment protocol and write report files")
    rsub = p.add_subparsers(dest="protocol", required=True)

    r = subs["report table1"] = rsub.add_parser("table1", help="full attack/defense summary row")
    _add_common(r)
    _add_data(r, "train", "test")
    r.add_argument("--model", help="checkpoint; trains a fresh model when omitted")
    r.add_argument("--name", help="dataset name for the row")
    _add_model(r)
    r.add_argument("--epochs", type=_nonneg_int, default=200, help="base training epochs")
    r.add_argument("--batch-size", type=_pos_int, default=16)
    r.add_argument("--eps", type=_pos_float, default=0.1)
    r.add_argument("--steps", type=_pos_int, default=10)
    r.add_argument("--alpha", type=_pos_float, default=None)
    r.add_argument("--r-fooling", type=_unit_float, default=0.9)
    r.add_argument("--epoch-fool", type=_pos_int, default=10)
    r.add_argument("--adv-per-clean", type=_pos_int, default=1)
    r.add_argument("--adv-epochs", type=_nonneg_int, default=1500)
    r.add_argument("--adv-lr", type=_pos_float, default=5e-4)
    r.add_argument("--adv-min-lr", type=_pos_float, default=1e-4)
    r.add_argument("--adv-patience", type=_pos_int, default=50)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--format", type=_formats, default=["csv"])

    r = subs["report sweep"] = rsub.add_parser("sweep", help="accuracy or targeted success vs eps")
    _add_common(r)
    _req(r, "--model")
    _add_data(r, "data")
    r.add_argument("--metric", choices=("accuracy", "targeted_success"), default="accuracy")
    r.add_argument("--grid", type=_float_list, default=list(DEFAULT_EPS_GRID))
    r.add_argument("--steps", type=_pos_int, default=10)
    r.add_argument("--format", type=_formats, default=["csv"])

    r = subs["report generalization"] = rsub.add_parser(
        "generalization", help="universal success vs share of training data"
    )
    _add_common(r)
    _req(r, "--model")
    _add_data(r, "train", "test")
    _add_universal(r)
    r.add_argument("--fractions", type=_float_list, default=[0.05, 0.1, 0.25, 0.5, 1.0])
    r.add_argument("--format", type=_formats, default=["csv"])

    r = subs["report defense"] = rsub.add_parser("defense", help="original vs defended accuracy vs eps")
    _add_common(r)
    _req(r, "--original")
    _req(r, "--defended")
    _add_data(r, "data")
    r.add_argument("--grid", type=_float_list, default=list(DEFAULT_EPS_GRID))
    r.add_argument("--steps", type=_pos_int, default=10)
    r.add_argument("--format", type=_formats, default=["csv"])

    for name in ("report table1", "report sweep", "report generalization", "report defense"):
        subs[name].set_defaults(func=cmd_report)
    return parser, subs


def _validate(parser: argparse.ArgumentParser, target: argparse.ArgumentParser, args) -> None:
    missing = [d for d in getattr(target, "required_dests", []) if getattr(args, d, None) is None]
    if missing:
        target.error("missing required arguments: " + ", ".join("--" + d.replace("_", "-") for d in missing))
    if getattr(args, "length", 8) < 8:
        parser.error("--length must be >= 8")
    for name in ("grid", "fractions"):
        values = getattr(args, name, None)
        if values is not None:
            if not values or any(b <= a for a, b in zip(values, values[1:])):
                parser.error(f"--{name} must be a non-empty ascending list")
    if getattr(args, "fractions", None) and not all(0 < f <= 1 for f in args.fractions):
        parser.error("--fractions must lie in (0, 1]")
    if getattr(args, "grid", None) and any(e < 0 for e in args.grid):
        parser.error("--grid values must be >= 0")
    if hasattr(args, "min_lr") and hasattr(args, "lr") and args.min_lr > args.lr:
        parser.error("--min-lr must not exceed --lr")
    if hasattr(args, "lr_factor") and not 0 < args.lr_factor < 1:
        parser.error("--lr-factor must be in (0, 1)")


def _subparser_for(subs, argv: list[str]):
    if argv and argv[0] == "report" and len(argv) > 1:
        return subs.get(f"report {argv[1]}")
    return subs.get(argv[0]) if argv else None


def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


def _setup_logging(level: str, logfile: Path) -> None:
    root = logging.getLogger("tsadv")
    root.handlers.clear()
    root.setLevel(level.upper())
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    for handler in (logging.StreamHandler(sys.stderr), logging.FileHandler(logfile, mode="w", encoding="utf-8")):
        handler.setFormatter(fmt)
        root.addHandler(handler)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    target = _subparser_for(subs, argv)

    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"tsadv: cannot read config {args.config}: {exc}", file=sys.stderr)
            return 1
        known = {a.dest for a in target._actions}
        unknown = set(overrides) - known - {"command", "protocol"}
        if unknown:
            parser.error(f"config file has unknown keys: {sorted(unknown)}")
        target.set_defaults(**{k: v for k, v in overrides.items() if k in known and k != "config"})
        args = parser.parse_args(argv)
    _validate(parser, target, args)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _setup_logging(args.log_level, out / "run.log")
        _write_json(_resolved(args), out / "config.json")
        args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        if log.handlers:
            log.error("%s", exc)
        else:
            print(f"tsadv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
