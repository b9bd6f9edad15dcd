"""Command-line entry point: ``lipforge <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or parse error,
4 numeric failure, 5 contract violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import KINDS, PAPER_EPSILONS, AttackConfig, AttackError, run_attack
from .data import Dataset, load_dataset, load_idx, save_dataset, synth_blobs
from .lipschitz import UndefinedRatioError
from .network import (ACTIVATIONS, EmptyInsertionError, Forge, Model, cnn, insert_forge, load_model, mlp,
                      save_model)
from .plotting import render_figures
from .protocol import C_RATIO_GRID, DEFAULT_RADII, MaskingConfig, ablation, bounds_section, curve_rows, \
    sweep_rows, verify_masking
from .report import FAILED, PASS, WARN, Report, load_report
from .smoothing import SmoothingConfig
from .tensor import ContractError, DimensionError, counters
from .textio import ParseError
from .train import TrainConfig, TrainingError, calibrate_forge, train

logger = logging.getLogger("lipforge")

SEED_ENV = "LIPFORGE_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CONTRACT = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class PathError(OSError):
    pass


# -- argument helpers --------------------------------------------------------


def _floats(text: str) -> list[float]:
    """Comma-separated numbers; ``a/b`` fractions are accepted (``8/255``)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "/" in part:
                num, den = part.split("/", 1)
                out.append(float(num) / float(den))
            else:
                out.append(float(part))
        except (ValueError, ZeroDivisionError):
            raise argparse.ArgumentTypeError(f"not a number: {part!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty number list")
    return out


def _ints(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") from None


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


BLOBS_KEYS = {"classes": int, "dim": int, "count": int, "separation": float, "seed": int, "test": int}


def parse_data_spec(spec: str) -> tuple[str, dict]:
    """``blobs[:k=v,...]``, ``idx:IMAGES:LABELS`` or a dataset-dump path."""
    if spec == "blobs" or spec.startswith("blobs:"):
        opts = {"classes": 3, "dim": 20, "count": 1200, "separation": 2.0, "seed": 0}
        body = spec[len("blobs:"):] if ":" in spec else ""
        for item in filter(None, body.split(",")):
            if "=" not in item:
                raise ConfigError(f"blobs option {item!r} is not key=value")
            k, v = item.split("=", 1)
            if k not in BLOBS_KEYS:
                raise ConfigError(f"unknown blobs option {k!r}; expected one of {sorted(BLOBS_KEYS)}")
            try:
                opts[k] = BLOBS_KEYS[k](v)
            except ValueError:
                raise ConfigError(f"bad value for blobs option {k}: {v!r}") from None
        opts.setdefault("test", opts["count"] // 4)
        return "blobs", opts
    if spec.startswith("idx:"):
        parts = spec[4:].split(":")
        if len(parts) != 2:
            raise ConfigError("idx data spec must be idx:IMAGES:LABELS")
        return "idx", {"images": parts[0], "labels": parts[1]}
    return "dump", {"path": spec}


def data_paths(spec: str) -> list[str]:
    kind, opts = parse_data_spec(spec)
    if kind == "idx":
        return [opts["images"], opts["labels"]]
    if kind == "dump":
        return [opts["path"]]
    return []


def load_data(spec: str, split: str, limit: int | None = None, classes: int = 10) -> Dataset:
    kind, opts = parse_data_spec(spec)
    if kind == "blobs":
        full = synth_blobs(opts["classes"], opts["dim"], opts["count"], opts["separation"], opts["seed"])
        if not 0 <= opts["test"] <= len(full):
            raise ConfigError(f"blobs test count {opts['test']} outside [0, {len(full)}]")
        tr, te = full.split_off(opts["test"])
        ds = {"train": tr, "test": te, "all": full}[split]
        ds.provenance = f"{full.provenance};split={split};test={opts['test']}"
    elif kind == "idx":
        ds = load_idx(opts["images"], opts["labels"], classes=classes, split=split)
    else:
        ds = load_dataset(opts["path"])
    if limit is not None:
        ds = ds.head(limit)
    return ds


def _check_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise PathError(f"input file not found: {p}")


def _check_outputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise PathError(f"output directory does not exist: {Path(p).parent}")


def _config_echo(args: argparse.Namespace) -> dict:
    skip = {"func", "log_level", "report", "csv_dir", "figures"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _finish(report: Report, args, started: float) -> None:
    report.timing["wall_seconds"] = round(time.perf_counter() - started, 3)
    if args.report:
        report.write(args.report)
    else:
        sys.stdout.write(report.dumps())
    if args.csv_dir:
        for p in report.write_csv(args.csv_dir):
            logger.info("wrote %s", p)
    if args.figures:
        for p in render_figures(report, args.figures):
            logger.info("wrote %s", p)


def _attack_base(args, kind: str = "pgd", epsilon: float | None = None) -> AttackConfig:
    return AttackConfig(kind=kind, epsilon=args.epsilon[0] if epsilon is None else epsilon,
                        steps=args.steps, step_size=args.step_size, restarts=args.restarts, seed=args.seed)


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> Report:
    _check_inputs(*data_paths(args.data))
    _check_outputs(args.out, args.report)
    data = load_data(args.data, "train", args.limit, args.classes)
    test = load_data(args.data, "test", None, args.classes) if parse_data_spec(args.data)[0] == "blobs" else None
    if args.arch == "mlp":
        model = mlp(data.input_shape, args.hidden, data.classes, args.seed, args.activation,
                    name=args.name or "mlp")
    else:
        model = cnn(data.input_shape, data.classes, args.channels, args.seed, args.activation,
                    name=args.name or "cnn")
    attack = _attack_base(args, "pgd")
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.optimizer, args.momentum,
                      args.adversarial, attack, args.seed)
    started = time.perf_counter()
    result = train(model, data, cfg, test)
    report = Report("train", _config_echo(args))
    report.timing["train_seconds"] = round(time.perf_counter() - started, 3)
    sec = report.section("train")
    sec.set(model=result.model.summary(), epochs=cfg.epochs, adversarial=cfg.adversarial,
            final_train_accuracy=result.train_accuracy[-1])
    t = sec.table("history", ["epoch", "loss", "train_accuracy", "test_accuracy", "provenance"])
    prov = f"model={model.name};data={data.provenance};seed={cfg.seed};lr={cfg.lr!r};adv={int(cfg.adversarial)}"
    if cfg.adversarial:
        prov += ";" + attack.describe()
    for e, (l, a, ta) in enumerate(zip(result.loss, result.train_accuracy, result.test_accuracy)):
        t.add(e + 1, l, a, None if np.isnan(ta) else ta, prov)
    if args.out:
        save_model(result.model, args.out)
        sec.set(model_file=args.out)
    return report


def _suffixed(path: str, c_ratio: float) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}.cr{c_ratio!r}{p.suffix}"))


def cmd_calibrate(args) -> Report:
    _check_inputs(args.model, *data_paths(args.data))
    grid = args.c_ratio if args.c_ratio is not None else list(C_RATIO_GRID)
    outs = [args.out] if (args.out and len(grid) == 1) else [_suffixed(args.out, c) for c in grid] if args.out else []
    _check_outputs(*outs, args.report)
    model = load_model(args.model)
    calib = load_data(args.data, args.split or "train", args.limit, model.classes)
    policy = args.policy if args.policy in ("all", "hidden") else _ints(args.policy)
    if any(isinstance(layer, Forge) for layer in model.layers):
        base = model
    else:
        base = insert_forge(model, policy)
    report = Report("calibrate", _config_echo(args))
    sec = report.section("calibrate")
    t = sec.table("forge", ["c_ratio", "layer", "b", "c_th", "provenance"])
    counters.reset()
    for k, c in enumerate(grid):
        t0 = time.perf_counter()
        forged = calibrate_forge(base, calib, c_ratio=c, subset=args.subset, seed=args.seed)
        report.timing[f"calibration_seconds[{c!r}]"] = round(time.perf_counter() - t0, 6)
        forged.name = f"{model.name}+forge"
        for i, layer in enumerate(forged.layers):
            if isinstance(layer, Forge):
                t.add(c, i, layer.state.b, layer.state.threshold,
                      f"model={args.model};data={calib.provenance};subset={args.subset};c_ratio={c!r}")
        if outs:
            save_model(forged, outs[k])
    sec.set(backward_passes=counters.backward_passes, forward_samples=counters.forward_samples,
            model_files=",".join(outs))
    if counters.backward_passes != 0:
        raise ContractError("calibration performed a backward pass")
    if args.evaluate:
        test = load_data(args.data, "test", args.eval_limit, model.classes)
        plain = _strip_forge(model)
        ablation(plain, calib, test, grid, _attack_base(args), policy, report=report)
        zero = calibrate_forge(base, calib, c_ratio=0.0)
        same = np.array_equal(plain.forward(test.inputs).data, zero.forward(test.inputs).data)
        sec.set(identity_at_zero=bool(same))
    return report


def _strip_forge(model: Model) -> Model:
    layers = [layer for layer in model.copy().layers if not isinstance(layer, Forge)]
    return Model(layers, model.input_shape, model.classes, name=model.name, seed=model.seed)


def cmd_bounds(args) -> Report:
    _check_inputs(*args.model, *data_paths(args.data))
    _check_outputs(args.report)
    models = [load_model(p) for p in args.model]
    data = load_data(args.data, args.split or "test", args.limit, models[0].classes)
    report = Report("bounds", _config_echo(args))
    sec = report.section("bounds")
    ok = True
    for path, m in zip(args.model, models):
        ok &= bounds_section(sec, m, data, seed=args.seed, per_sample=args.per_sample, label=Path(path).stem)
    sec.verdict = PASS if ok else WARN
    return report


def cmd_attack(args) -> Report:
    _check_inputs(args.model, *data_paths(args.data))
    _check_outputs(args.report, args.dump_adv)
    model = load_model(args.model)
    data = load_data(args.data, args.split or "test", args.limit, model.classes)
    report = Report("attack", _config_echo(args))
    sec = report.section("attack")
    sec.set(suite="fgsm, pgd, pgd_margin (CW-style margin loss), random_search; not AutoAttack")
    eps = sorted(set(args.epsilon))
    sweep_rows(sec, model, data, args.kind, eps, _attack_base(args), label=Path(args.model).stem)
    if args.dump_adv:
        cfg = _attack_base(args, args.kind[0], eps[-1])
        res = run_attack(model, data.inputs, data.labels, cfg, keep=True)
        adv = Dataset(res.x_adv, data.labels, data.classes, data.split, f"{data.provenance};{cfg.describe()}")
        save_dataset(adv, args.dump_adv)
    return report


def cmd_smooth(args) -> Report:
    _check_inputs(*args.model, *data_paths(args.data))
    _check_outputs(args.report)
    models = [load_model(p) for p in args.model]
    data = load_data(args.data, args.split or "test", args.limit, models[0].classes)
    cfg = SmoothingConfig(args.sigma, args.n0, args.n, args.alpha, args.seed)
    report = Report("smooth", _config_echo(args))
    sec = report.section("smoothing")
    sec.set(note="forge thresholds are not recalibrated under noise")
    ok = True
    for path, m in zip(args.model, models):
        c = curve_rows(sec, m, data, sorted(args.radii), cfg, label=Path(path).stem,
                       certificates=args.certificates)
        ok &= bool(np.all(np.diff(c.accuracy) <= 0))
    sec.verdict = PASS if ok else WARN
    return report


def cmd_verify_masking(args) -> Report:
    _check_inputs(args.original, args.forged, args.baseline, *data_paths(args.data))
    _check_outputs(args.report)
    original = load_model(args.original)
    forged = load_model(args.forged)
    baseline = load_model(args.baseline) if args.baseline else None
    data = load_data(args.data, args.split or "test", args.limit, original.classes)
    cfg = MaskingConfig(
        epsilon=args.epsilon[0], steps=args.steps, budget=args.budget, seeds=args.seeds,
        epsilons=tuple(sorted(set(args.epsilons))), terminal_accuracy=args.terminal_accuracy,
        radii=tuple(sorted(args.radii)), seed=args.seed,
        smoothing=SmoothingConfig(args.sigma, args.n0, args.n, args.alpha, args.seed),
    )
    report = Report("verify-masking", _config_echo(args))
    verify_masking(original, forged, data, cfg, baseline, report)
    return report


def cmd_report(args) -> Report | None:
    _check_inputs(args.input)
    rep = load_report(args.input)
    if args.csv_dir:
        rep.write_csv(args.csv_dir)
    if args.figures:
        render_figures(rep, args.figures)
    for s in rep.sections:
        print(f"{s.name}: {s.verdict or '-'}")
    return None


# -- parser ------------------------------------------------------------------


def _output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report", help="write the report here (default: stdout)")
    p.add_argument("--csv-dir", help="also export every table as CSV into this directory")
    p.add_argument("--figures", help="render PNG figures into this directory")


def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required,
                   help="blobs[:classes=3,dim=20,count=1200,separation=2.0,seed=0,test=N], "
                        "idx:IMAGES:LABELS, or a dataset dump file")
    p.add_argument("--split", choices=("train", "test", "all"), help="blobs split to use")
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.add_argument("--classes", type=int, default=10, help="class count for IDX data")


def _attack_args(p: argparse.ArgumentParser, steps: int = 10) -> None:
    p.add_argument("--epsilon", type=_floats, default=[8 / 255], help="L-inf radius (or list), e.g. 8/255")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--step-size", type=float)
    p.add_argument("--restarts", type=int, default=1)


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lipforge {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=seed_default, help=f"run seed (default ${SEED_ENV} or 0)")
        return p

    p = add("train", cmd_train, "train a preset model")
    _data_args(p)
    _attack_args(p, steps=7)
    p.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    p.add_argument("--hidden", type=_ints, default=[64, 32])
    p.add_argument("--channels", type=_ints, default=[8, 16])
    p.add_argument("--activation", choices=sorted(ACTIVATIONS), default="relu")
    p.add_argument("--name")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--optimizer", choices=("sgd", "sgd-momentum"), default="sgd-momentum")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--adversarial", action="store_true", help="PGD adversarial training at --epsilon")
    p.add_argument("--out", help="model file to write")
    _output_args(p)

    p = add("calibrate", cmd_calibrate, "insert and calibrate forge layers")
    p.add_argument("--model", required=True)
    _data_args(p)
    _attack_args(p)
    p.add_argument("--c-ratio", type=_floats, help="threshold ratio(s); default 2^-8,2^-7,2^-6")
    p.add_argument("--policy", default="all", help="all, hidden, or comma-separated linear-layer ordinals")
    p.add_argument("--subset", type=int, help="calibrate on a seeded random subset of this size")
    p.add_argument("--out", help="forged model file (suffix-named per c_ratio when several)")
    p.add_argument("--evaluate", action="store_true", help="add the accuracy / robustness ablation table")
    p.add_argument("--eval-limit", type=int, help="test samples used by --evaluate")
    _output_args(p)

    p = add("bounds", cmd_bounds, "per-layer Lipschitz bound report")
    p.add_argument("--model", required=True, action="append", help="model file (repeatable)")
    _data_args(p)
    p.add_argument("--per-sample", action="store_true", help="include per-sample masked bounds")
    _output_args(p)

    p = add("attack", cmd_attack, "evaluate attacks over an epsilon grid")
    p.add_argument("--model", required=True)
    _data_args(p)
    _attack_args(p)
    p.add_argument("--kind", type=lambda s: s.split(","), default=["fgsm", "pgd"],
                   help=f"comma-separated subset of {','.join(KINDS)}")
    p.add_argument("--dump-adv", help="write adversarial examples (first kind, largest epsilon) as a dataset")
    _output_args(p)

    p = add("smooth", cmd_smooth, "randomized-smoothing certified accuracy")
    p.add_argument("--model", required=True, action="append")
    _data_args(p)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--n0", type=int, default=100)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--radii", type=_floats, default=list(DEFAULT_RADII))
    p.add_argument("--certificates", action="store_true", help="include per-sample certificates")
    _output_args(p)

    p = add("verify-masking", cmd_verify_masking, "five-item gradient-masking checklist")
    p.add_argument("--original", required=True)
    p.add_argument("--forged", required=True)
    p.add_argument("--baseline", help="undefended model added to the epsilon sweep")
    _data_args(p)
    _attack_args(p)
    p.add_argument("--budget", type=int, default=100, help="PGD steps and random-search queries")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epsilons", type=_floats, default=list(PAPER_EPSILONS))
    p.add_argument("--terminal-accuracy", type=float, default=0.01)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--n0", type=int, default=100)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--radii", type=_floats, default=list(DEFAULT_RADII))
    _output_args(p)

    p = sub.add_parser("report", help="re-export CSV tables and figures from a report file")
    p.set_defaults(func=cmd_report)
    p.add_argument("input")
    p.add_argument("--csv-dir")
    p.add_argument("--figures")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ParseError, OSError)):
        return EXIT_IO
    if isinstance(exc, (TrainingError, AttackError, UndefinedRatioError, ArithmeticError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ContractError, DimensionError, EmptyInsertionError, AssertionError)):
        return EXIT_CONTRACT
    return EXIT_CONTRACT if isinstance(exc, ValueError) else 1


def main(argv=None) -> int:
    try:
        seed = _default_seed()
    except ConfigError as e:
        print(f"lipforge: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    args = build_parser(seed).parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        report = args.func(args)
        if report is not None:
            _finish(report, args, started)
    except Exception as e:
        print(f"lipforge: error: {e}", file=sys.stderr)
        return exit_code(e)
    if report is not None:
        failed = [s.name for s in report.sections if s.verdict == FAILED]
        for s in report.sections:
            if s.verdict is not None:
                print(f"{s.name}: {s.verdict}", file=sys.stderr)
        if failed:
            return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
