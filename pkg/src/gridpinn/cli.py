"""``gridpinn`` command line.

Exit codes: 0 success, 2 configuration/contract error, 3 dataset generation
failure, 4 training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import config_from_dict, load_config, run_scenario
from .errors import ConfigError, GenerationError, GridPinnError, TrainingError
from .grid import build_ybus, load_case
from .hpo import ParamRanges, TrialBudget, TrialParams, optimize, run_trial, trial_seed, write_trial_log
from .io import atomic_write_text, parse_kv, write_csv
from .loss import LossWeights
from .metrics import evaluate
from .nn import load_model, save_model
from .norm import NormMeta
from .plots import render_plots
from .powerflow import injections, solve_nr
from .scenarios import AttackSpec, apply_attack, build_scenario, load_dataset, preprocess, resolve_scenario, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION, EXIT_TRAINING = 0, 2, 3, 4

log = logging.getLogger("gridpinn")


def _scenario(args):
    spec = resolve_scenario(args.scenario)
    changes = {k: getattr(args, k) for k in ("train_count", "val_count", "test_count", "noise_level")
               if getattr(args, k, None) is not None}
    spec = dataclasses.replace(spec, **changes) if changes else spec
    return spec.with_seed(args.seed)


def cmd_case_validate(args) -> int:
    case = load_case(args.case, cdf=args.cdf)
    sol = solve_nr(case, tol=args.tol)
    p, q = injections(sol.state, build_ybus(case))
    print(f"case {case.name}: {case.n_bus} buses, {len(case.branches)} branches, base {case.base_mva} MVA")
    print(f"power flow: converged={sol.converged} iterations={sol.iterations} max_mismatch={sol.max_mismatch:.3e}")
    print(f"slack output: P={p[case.slack_index] * case.base_mva:.3f} MW Q={q[case.slack_index] * case.base_mva:.3f} MVAr")
    if not sol.converged:
        print("power flow did not converge", file=sys.stderr)
        return EXIT_GENERATION
    return EXIT_OK


def cmd_data_gen(args) -> int:
    spec = _scenario(args)
    data = build_scenario(spec, cache_dir=args.cache_dir, workers=args.threads)
    out = Path(args.out) / spec.index
    for name, ds in data.raw.items():
        save_dataset(ds, out / f"{name}.csv", data.meta, spec)
    print(f"wrote {', '.join(f'{k} ({len(v)})' for k, v in data.raw.items())} to {out}")
    return EXIT_OK


def _ranges(args) -> ParamRanges:
    return ParamRanges.from_bounds(tuple(args.layers_range), tuple(args.neurons_range),
                                   tuple(args.lr_range), tuple(args.batch_range))


def cmd_train(args) -> int:
    spec = _scenario(args)
    data = build_scenario(spec, cache_dir=args.cache_dir, workers=args.threads)
    weights = LossWeights(*args.weights)
    params = TrialParams(args.layers, args.neurons, args.lr, args.batch)
    budget = TrialBudget(args.max_epochs, args.patience, "test", not args.unconjugated)
    model, report, mae, val_mae = run_trial(data, params, weights, trial_seed(args.seed, 0, 0), budget)
    out = Path(args.out)
    save_model(model, out / "model.bin")
    atomic_write_text(out / "norm.meta", data.meta.to_text())
    write_csv(out / "epoch_curves.csv", ["epoch", "total", "d", "p", "c", "val_mae_normalized"],
              ([k, *terms, v] for k, (terms, v) in
               enumerate(zip(report.epoch_losses, report.epoch_val_mae), start=1)))
    print(f"best epoch {report.best_epoch}/{len(report.epoch_val_mae)}; test MAE {mae:.6e}; "
          f"val MAE {val_mae:.6e}; {report.wall_time:.2f} s")
    return EXIT_OK


def cmd_hpo(args) -> int:
    spec = _scenario(args)
    data = build_scenario(spec, cache_dir=args.cache_dir)
    budget = TrialBudget(args.max_epochs, args.patience, args.rank_by, not args.unconjugated)
    result = optimize(data, _ranges(args), args.step, args.trials, args.seed, budget,
                      workers=args.threads, progress=lambda t: log.info(
                          "combo %d trial %d mae %.4e", t.combo_id, t.trial_id, t.mae))
    out = Path(args.out)
    write_trial_log(out / "trials.csv", result.trial_log)
    write_csv(out / "heatmap.csv", ["lambda_d", "lambda_p", "lambda_c", "mae"],
              ([*w, t.mae] for w, t in result.per_combination_best.items()))
    if result.best.model is not None:
        save_model(result.best.model, out / "best.model")
        atomic_write_text(out / "norm.meta", data.meta.to_text())
    b = result.best
    print(f"{len(result.trial_log)} trials; best weights {b.weights.as_tuple()} params {b.params} mae {b.mae:.6e}")
    return EXIT_OK


def _meta(path) -> NormMeta:
    try:
        return NormMeta.from_mapping(parse_kv(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise ConfigError(f"cannot read metadata {path}: {exc}") from exc


def cmd_eval(args) -> int:
    model = load_model(args.model)
    meta = _meta(args.meta)
    ds, _ = load_dataset(args.data)
    prepared, _ = preprocess(ds, "test", meta)
    rep = evaluate(model, prepared, meta, args.attacked_bus)
    print(f"mean MAE {rep.mean_mae:.6e} (normalized {rep.normalized_mae:.6e}) over {len(ds)} points")
    if rep.attacked_bus is not None:
        print(f"bus {rep.attacked_bus} MAE {rep.attacked_bus_mae:.6e}")
    if args.out_given:
        header = ["point", "timestamp_index", "mae"] + (["bus_mae"] if rep.attacked_bus else [])
        cols = [range(1, len(ds) + 1), ds.t, rep.per_test_point_mae]
        if rep.attacked_bus:
            cols.append(rep.attacked_bus_series)
        write_csv(Path(args.out) / "points.csv", header, zip(*cols))
    return EXIT_OK


def _schedule(text: str):
    try:
        return tuple((int(n), float(b)) for n, b in (part.split(":") for part in text.split(",")))
    except ValueError as exc:
        raise ConfigError(f"schedule must look like '33:0.1,33:0.2,34:0.3', got {text!r}") from exc


def cmd_attack(args) -> int:
    ds, meta = load_dataset(args.data)
    spec = AttackSpec(args.bus, tuple(args.channels), _schedule(args.schedule))
    attacked = apply_attack(ds, spec)
    target = Path(args.out) / (Path(args.data).stem + f"_attack_bus{args.bus}.csv")
    save_dataset(attacked, target, meta)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_report(args) -> int:
    overrides = {"dry_run": True} if args.dry_run else {}
    if args.config:
        cfg = load_config(args.config, overrides)
    elif args.scenario:
        cfg = config_from_dict({"scenario": args.scenario, "seeds": args.seeds or [args.seed],
                                "output_dir": str(Path(args.out).resolve()), **overrides})
    else:
        raise ConfigError("report needs --config or a scenario")
    if args.seeds:
        cfg.seeds = list(args.seeds)
    if args.out_given:
        cfg.output_dir = Path(args.out)
    cfg.workers = max(cfg.workers, args.threads)
    run = run_scenario(cfg)
    if cfg.dry_run:
        print(f"config valid: scenario {cfg.scenario.index}, seeds {cfg.seeds}; nothing generated")
    else:
        print(f"bundle written to {run.bundle_dir}")
    return EXIT_OK


def cmd_plot(args) -> int:
    written = render_plots(args.bundle, args.out if args.out_given else None)
    for p in written:
        print(p)
    return EXIT_OK


def _add_scenario_args(p):
    p.add_argument("scenario", help="builtin scenario id (e.g. S1.1) or scenario YAML path")
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--cache-dir", help="reuse generated datasets keyed by scenario digest")


def _add_budget_args(p):
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--unconjugated", action="store_true", help="use Y instead of conj(Y) in the physics term")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Sub-commands repeat the global flags with suppressed defaults so that a flag
    # given before the verb is not reset by the sub-parser.
    def default(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default(0))
    p.add_argument("--config", default=default(None), help="experiment YAML")
    p.add_argument("--out", default=default(None), help="output directory (default: runs)")
    p.add_argument("--threads", type=int, default=default(1), help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="gridpinn", parents=[_global_flags(suppress=False)],
                                     description="Physics-informed grid state estimation workbench.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    case = sub.add_parser("case", help="network case utilities")
    case_sub = case.add_subparsers(dest="action", required=True)
    cv = case_sub.add_parser("validate", parents=[common], help="parse, validate and solve a case")
    cv.add_argument("case", help="builtin name (ieee14, ieee118) or file path")
    cv.add_argument("--cdf", action="store_true", help="file is in IEEE common data format")
    cv.add_argument("--tol", type=float, default=1e-8)
    cv.set_defaults(func=cmd_case_validate)

    data = sub.add_parser("data", help="dataset utilities")
    data_sub = data.add_subparsers(dest="action", required=True)
    dg = data_sub.add_parser("gen", parents=[common], help="generate a scenario's datasets")
    _add_scenario_args(dg)
    dg.set_defaults(func=cmd_data_gen)

    tr = sub.add_parser("train", parents=[common], help="train one model with fixed weights and params")
    _add_scenario_args(tr)
    _add_budget_args(tr)
    tr.add_argument("--weights", type=float, nargs=3, default=(1.0, 0.0, 0.0), metavar=("D", "P", "C"))
    tr.add_argument("--layers", type=int, default=2)
    tr.add_argument("--neurons", type=int, default=64)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--batch", type=int, default=32)
    tr.set_defaults(func=cmd_train)

    hp = sub.add_parser("hpo", parents=[common], help="weight enumeration with TPE search")
    _add_scenario_args(hp)
    _add_budget_args(hp)
    hp.add_argument("--step", type=float, default=0.1)
    hp.add_argument("--trials", type=int, default=10)
    hp.add_argument("--rank-by", choices=("test", "val"), default="test")
    hp.add_argument("--layers-range", type=int, nargs=2, default=(2, 10))
    hp.add_argument("--neurons-range", type=int, nargs=2, default=(64, 4096))
    hp.add_argument("--lr-range", type=float, nargs=2, default=(1e-5, 1e-1))
    hp.add_argument("--batch-range", type=int, nargs=2, default=(4, 128))
    hp.set_defaults(func=cmd_hpo)

    ev = sub.add_parser("eval", parents=[common], help="score a saved model on a dataset CSV")
    ev.add_argument("--model", required=True)
    ev.add_argument("--meta", required=True, help="normalization metadata written at training time")
    ev.add_argument("--data", required=True)
    ev.add_argument("--attacked-bus", type=int)
    ev.set_defaults(func=cmd_eval)

    at = sub.add_parser("attack", parents=[common], help="bias a dataset's P/Q feeds at one bus")
    at.add_argument("--data", required=True)
    at.add_argument("--bus", type=int, required=True)
    at.add_argument("--channels", nargs="+", choices=("P", "Q"), default=["P", "Q"])
    at.add_argument("--schedule", default="33:0.1,33:0.2,34:0.3", help="count:bias pairs, comma separated")
    at.set_defaults(func=cmd_attack)

    rp = sub.add_parser("report", parents=[common], help="full PINN vs NN scenario bundle")
    rp.add_argument("scenario", nargs="?")
    rp.add_argument("--seeds", type=int, nargs="+")
    rp.add_argument("--dry-run", action="store_true", help="validate the config only")
    rp.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", parents=[common], help="render SVGs from a scenario bundle")
    pl.add_argument("bundle")
    pl.set_defaults(func=cmd_plot)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, GenerationError):
        return EXIT_GENERATION
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_CONFIG


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out_given = args.out is not None
    if args.out is None:
        args.out = "runs"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GridPinnError as exc:
        print(f"gridpinn {args.verb}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"gridpinn {args.verb}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
