"""Experiment harness: PINN vs NN runs per scenario and seed, written as a CSV bundle.

Bundle layout under ``<output_dir>/<scenario>/``::

    summary.csv            one row per (seed, model, evaluation set)
    aggregate.csv          median/min/max of the summary metrics across seeds
    timings.csv            training seconds and per-sample inference milliseconds
    run.meta               config echo (key=value)
    seed_<s>/trials.csv    HPO trial log
    seed_<s>/heatmap.csv   best MAE per loss-weight triple
    seed_<s>/epoch_curves.csv
    seed_<s>/points_<set>.csv, per_bus_<set>.csv
    seed_<s>/pinn.model, nn.model, norm.meta

Every file except ``timings.csv`` and the ``wall_time_s`` column of the trial
log is a deterministic function of the config and seeds.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import ConfigError, ContractError, GenerationError, GridPinnError, TrainingError
from .hpo import (HpoResult, ParamRanges, TpeSettings, Trial, TrialBudget, TrialParams, enumerate_weights,
                  optimize, run_trial, trial_seed, write_trial_log)
from .io import atomic_write_text, kv_text, read_csv, write_csv
from .loss import DATA_ONLY, LossWeights
from .metrics import MaeReport, evaluate
from .nn import MlpModel, forward, save_model
from .scenarios import (ScenarioData, ScenarioSpec, build_scenario, load_scenario, resolve_scenario,
                        scenario_from_dict)

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["seed", "model", "set", "mean_mae", "attacked_bus_mae", "normalized_mae",
                  "lambda_d", "lambda_p", "lambda_c", "layers", "neurons", "lr", "batch", "best_epoch"]
TIMINGS_HEADER = ["case", "seed", "model", "training_s", "inference_ms_mean", "inference_ms_std", "repeats"]
AGGREGATE_HEADER = ["model", "set", "metric", "median", "min", "max", "n_seeds"]
EPOCH_HEADER = ["lambda_d", "lambda_p", "lambda_c", "epoch", "total", "d", "p", "c", "val_mae_normalized"]
HEATMAP_HEADER = ["lambda_d", "lambda_p", "lambda_c", "mae"]
COST_HEADER = ["case", "model", "training_s", "inference_ms_mean", "inference_ms_std", "repeats", "n_seeds"]
OVERRIDABLE = {"train_count", "val_count", "test_count", "noise_level"}


@dataclass
class ExperimentConfig:
    """What to run. Either ``hpo`` settings or a ``fixed`` (weights, params) pair drives training."""

    scenario: ScenarioSpec
    seeds: list[int]
    output_dir: Path
    step: float = 0.25
    trials: int = 4
    ranges: ParamRanges = ParamRanges()
    rank_by: str = "test"
    max_epochs: int = 100
    patience: int = 20
    conjugate: bool = True
    fixed_weights: LossWeights | None = None
    fixed_params: TrialParams | None = None
    inference_repeats: int = 1000
    cache_dir: Path | None = None
    workers: int = 1
    dry_run: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if (self.fixed_weights is None) != (self.fixed_params is None):
            raise ConfigError("fixed mode needs both weights and params")
        if self.inference_repeats < 1000:
            raise ConfigError("inference timing needs at least 1000 repeats")
        if self.rank_by not in ("test", "val"):
            raise ConfigError("rank_by must be 'test' or 'val'")
        if self.fixed_weights is None:
            try:
                enumerate_weights(self.step)
            except ContractError as exc:
                raise ConfigError(str(exc)) from exc
            if self.trials < 1:
                raise ConfigError("trials must be at least 1")

    @property
    def fixed(self) -> bool:
        return self.fixed_weights is not None

    @property
    def budget(self) -> TrialBudget:
        return TrialBudget(self.max_epochs, self.patience, self.rank_by, self.conjugate)

    def describe(self) -> dict:
        d = {"scenario": self.scenario.index, "scenario_digest": self.scenario.digest(),
             "seeds": " ".join(map(str, self.seeds)), "max_epochs": self.max_epochs,
             "patience": self.patience, "conjugate": self.conjugate, "rank_by": self.rank_by}
        if self.fixed:
            d["weights"] = " ".join(map(repr, self.fixed_weights.as_tuple()))
            p = self.fixed_params
            d["params"] = f"{p.layers} {p.neurons} {p.learning_rate!r} {p.batch_size}"
        else:
            d["step"] = self.step
            d["trials"] = self.trials
            for name, r in self.ranges.items():
                d[f"range_{name}"] = f"{r.low!r} {r.high!r}"
        return d


def _pair(value, name):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"range '{name}' must be a [low, high] pair")
    return tuple(value)


def config_from_dict(raw: dict, base_dir: Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from parsed YAML. Relative paths resolve against ``base_dir``.

    Recognized keys: ``scenario`` (builtin id, YAML path or inline mapping),
    ``seeds``, ``output_dir``, ``hpo: {step, trials, rank_by, ranges: {layers,
    neurons, learning_rate, batch_size}}``, ``fixed: {weights: [d, p, c], params:
    {layers, neurons, learning_rate, batch_size}}``, ``max_epochs``, ``patience``,
    ``conjugate``, ``inference_repeats``, ``cache_dir``, ``workers``, ``dry_run``,
    and ``overrides`` (train_count, val_count, test_count, noise_level).
    """
    raw = dict(raw or {})
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base_dir = base_dir or Path.cwd()
    known = {"scenario", "seeds", "output_dir", "hpo", "fixed", "max_epochs", "patience", "conjugate",
             "inference_repeats", "cache_dir", "workers", "dry_run", "overrides"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "scenario" not in raw:
        raise ConfigError("config needs a 'scenario'")
    try:
        scen = raw["scenario"]
        if isinstance(scen, dict):
            spec = scenario_from_dict(scen)
        elif str(scen).endswith((".yaml", ".yml")):
            spec = load_scenario(base_dir / str(scen))
        else:
            spec = resolve_scenario(str(scen))
        if raw.get("overrides"):
            unknown = set(raw["overrides"]) - OVERRIDABLE
            if unknown:
                raise ConfigError(f"unknown scenario overrides: {sorted(unknown)}")
            spec = dataclasses.replace(spec, **raw["overrides"])
    except ConfigError:
        raise
    except (GridPinnError, OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    kw = dict(scenario=spec, seeds=[int(s) for s in seeds],
              output_dir=base_dir / str(raw.get("output_dir", "runs")))
    for key in ("max_epochs", "patience", "inference_repeats", "workers"):
        if key in raw:
            kw[key] = int(raw[key])
    for key in ("conjugate", "dry_run"):
        if key in raw:
            kw[key] = bool(raw[key])
    if raw.get("cache_dir"):
        kw["cache_dir"] = base_dir / str(raw["cache_dir"])
    try:
        if raw.get("fixed"):
            fx = raw["fixed"]
            kw["fixed_weights"] = LossWeights(*map(float, fx["weights"]))
            p = fx["params"]
            kw["fixed_params"] = TrialParams(int(p["layers"]), int(p["neurons"]),
                                             float(p["learning_rate"]), int(p["batch_size"]))
        hp = raw.get("hpo") or {}
        if "step" in hp:
            kw["step"] = float(hp["step"])
        if "trials" in hp:
            kw["trials"] = int(hp["trials"])
        if "rank_by" in hp:
            kw["rank_by"] = str(hp["rank_by"])
        if hp.get("ranges"):
            rg = hp["ranges"]
            unknown = set(rg) - set(ParamRanges.NAMES)
            if unknown:
                raise ConfigError(f"unknown hpo ranges: {sorted(unknown)}")
            kw["ranges"] = ParamRanges.from_bounds(**{k: _pair(v, k) for k, v in rg.items()})
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (GridPinnError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(raw, path.parent, overrides)


@dataclass
class Timing:
    training_s: float
    inference_ms_mean: float
    inference_ms_std: float
    repeats: int


def measure_costs(model: MlpModel, x: np.ndarray, training_s: float, repeats: int = 1000) -> Timing:
    """Per-sample inference cost: ``repeats`` single-row forward passes, mean and std in ms."""
    if repeats < 1:
        raise ContractError("repeats must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    samples = np.empty(repeats)
    for k in range(repeats):
        row = x[k % len(x):k % len(x) + 1]
        t0 = time.perf_counter_ns()
        forward(model, row)
        samples[k] = (time.perf_counter_ns() - t0) / 1e6
    samples = np.maximum(samples, 1e-6)  # clock granularity floor keeps timings strictly positive
    return Timing(training_s, float(samples.mean()), float(samples.std()), repeats)


@dataclass
class SeedRun:
    seed: int
    data: ScenarioData
    pinn: Trial
    nn: Trial
    hpo: HpoResult | None
    reports: dict[tuple[str, str], MaeReport] = field(default_factory=dict)
    timings: dict[str, Timing] = field(default_factory=dict)


@dataclass
class ScenarioRun:
    config: ExperimentConfig
    seeds: list[SeedRun]
    bundle_dir: Path | None


def _best_pinn(result: HpoResult, rank_by: str) -> Trial:
    """Best trial whose weights are not the data-only vertex."""
    best = None
    for w, tr in result.per_combination_best.items():
        if w == DATA_ONLY.as_tuple():
            continue
        score = tr.mae if rank_by == "test" else tr.val_mae
        if best is None or score < (best.mae if rank_by == "test" else best.val_mae):
            best = tr
    if best is None:
        raise ConfigError("the weight grid has no physics-informed combination")
    return best


def _fixed_trials(data: ScenarioData, cfg: ExperimentConfig, seed: int) -> tuple[Trial, Trial]:
    tseed = trial_seed(seed, 0, 0)
    out = []
    for w in (cfg.fixed_weights, DATA_ONLY):
        t0 = time.perf_counter()
        model, report, mae, val_mae = run_trial(data, cfg.fixed_params, w, tseed, cfg.budget)
        out.append(Trial(0, 0, w, cfg.fixed_params, mae, tseed, val_mae,
                         time.perf_counter() - t0, False, report, model))
    return out[0], out[1]


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedRun:
    spec = cfg.scenario.with_seed(seed)
    try:
        data = build_scenario(spec, cache_dir=cfg.cache_dir)
    except GridPinnError as exc:
        raise GenerationError(f"[generate seed={seed}] {exc}") from exc
    try:
        if cfg.fixed:
            pinn, nn = _fixed_trials(data, cfg, seed)
            result = None
        else:
            result = optimize(data, cfg.ranges, cfg.step, cfg.trials, seed, cfg.budget,
                              TpeSettings(), cfg.workers)
            pinn = _best_pinn(result, cfg.rank_by)
            nn = result.per_combination_best[DATA_ONLY.as_tuple()]
    except TrainingError as exc:
        raise TrainingError(f"[train seed={seed}] {exc}") from exc
    for name, tr in (("PINN", pinn), ("NN", nn)):
        if tr.failed or tr.model is None:
            raise TrainingError(f"[train seed={seed}] every {name} trial failed")
    run = SeedRun(seed, data, pinn, nn, result)
    bus = spec.attack.target_bus if spec.attack else None
    for name, tr in (("PINN", pinn), ("NN", nn)):
        for set_name in data.evaluation_sets:
            run.reports[(name, set_name)] = evaluate(tr.model, data.prepared[set_name], data.meta, bus)
        run.timings[name] = measure_costs(tr.model, data.prepared["test"].x, tr.report.wall_time,
                                          cfg.inference_repeats)
        for rep in (run.reports[(name, s)] for s in data.evaluation_sets):
            rep.training_time_s = run.timings[name].training_s
            rep.inference_time_ms = run.timings[name].inference_ms_mean
            rep.inference_time_ms_std = run.timings[name].inference_ms_std
    return run


def _curve_rows(trial: Trial):
    w = trial.weights.as_tuple()
    for k, (terms, vm) in enumerate(zip(trial.report.epoch_losses, trial.report.epoch_val_mae), start=1):
        yield [*w, k, terms.total, terms.d, terms.p, terms.c, vm]


def write_seed_bundle(run: SeedRun, seed_dir: Path) -> None:
    seed_dir.mkdir(parents=True, exist_ok=True)
    if run.hpo is not None:
        write_trial_log(seed_dir / "trials.csv", run.hpo.trial_log)
        combos = list(run.hpo.per_combination_best.values())
    else:
        combos = [run.pinn, run.nn]
    write_csv(seed_dir / "heatmap.csv", HEATMAP_HEADER, ([*t.weights.as_tuple(), t.mae] for t in combos))
    rows = []
    for t in combos:
        if t.report is not None:
            rows.extend(_curve_rows(t))
    write_csv(seed_dir / "epoch_curves.csv", EPOCH_HEADER, rows)
    for set_name in run.data.evaluation_sets:
        pr, nr = run.reports[("PINN", set_name)], run.reports[("NN", set_name)]
        ts = run.data.prepared[set_name].t
        header = ["point", "timestamp_index", "pinn_mae", "nn_mae"]
        cols = [np.arange(1, len(ts) + 1), ts, pr.per_test_point_mae, nr.per_test_point_mae]
        if pr.attacked_bus is not None:
            header += ["pinn_bus_mae", "nn_bus_mae"]
            cols += [pr.attacked_bus_series, nr.attacked_bus_series]
        write_csv(seed_dir / f"points_{set_name}.csv", header, zip(*cols))
        write_csv(seed_dir / f"per_bus_{set_name}.csv", ["bus", "pinn_mae", "nn_mae"],
                  zip(range(1, run.data.n_bus + 1), pr.per_bus_mae, nr.per_bus_mae))
    save_model(run.pinn.model, seed_dir / "pinn.model")
    save_model(run.nn.model, seed_dir / "nn.model")
    atomic_write_text(seed_dir / "norm.meta", run.data.meta.to_text())


def summary_rows(runs: Sequence[SeedRun]):
    for run in runs:
        for name, tr in (("PINN", run.pinn), ("NN", run.nn)):
            for set_name in run.data.evaluation_sets:
                rep = run.reports[(name, set_name)]
                p = tr.params
                attacked = "" if rep.attacked_bus_mae is None else rep.attacked_bus_mae
                yield [run.seed, name, set_name, rep.mean_mae, attacked, rep.normalized_mae,
                       *tr.weights.as_tuple(), p.layers, p.neurons, p.learning_rate, p.batch_size,
                       tr.report.best_epoch]


def aggregate_rows(runs: Sequence[SeedRun]):
    sets = runs[0].data.evaluation_sets
    for name in ("PINN", "NN"):
        for set_name in sets:
            metrics = {"mean_mae": [r.reports[(name, set_name)].mean_mae for r in runs]}
            if runs[0].reports[(name, set_name)].attacked_bus_mae is not None:
                metrics["attacked_bus_mae"] = [r.reports[(name, set_name)].attacked_bus_mae for r in runs]
            for metric, vals in metrics.items():
                yield [name, set_name, metric, statistics.median(vals), min(vals), max(vals), len(vals)]


def run_scenario(cfg: ExperimentConfig, write: bool = True) -> ScenarioRun:
    """Train and evaluate PINN and NN for every seed, then write the bundle.

    Seed directories are written as soon as each seed finishes, so a failure in a
    later seed leaves earlier results on disk.
    """
    bundle = cfg.output_dir / cfg.scenario.index if write else None
    if cfg.dry_run:
        log.info("dry run: config for %s is valid, nothing generated", cfg.scenario.index)
        return ScenarioRun(cfg, [], bundle)
    runs = []
    for seed in cfg.seeds:
        log.info("%s seed %d", cfg.scenario.index, seed)
        run = run_seed(cfg, seed)
        runs.append(run)
        if bundle is not None:
            write_seed_bundle(run, bundle / f"seed_{seed}")
    if bundle is not None:
        atomic_write_text(bundle / "run.meta", kv_text(cfg.describe()))
        write_csv(bundle / "summary.csv", SUMMARY_HEADER, summary_rows(runs))
        write_csv(bundle / "aggregate.csv", AGGREGATE_HEADER, aggregate_rows(runs))
        write_csv(bundle / "timings.csv", TIMINGS_HEADER,
                  ([cfg.scenario.case, r.seed, m, t.training_s, t.inference_ms_mean, t.inference_ms_std, t.repeats]
                   for r in runs for m, t in r.timings.items()))
    return ScenarioRun(cfg, runs, bundle)


def cost_table(bundle_dirs: Sequence[str | Path]) -> list[list]:
    """Merge bundle timings into one row per (case, model), taking medians over seeds."""
    groups: dict[tuple[str, str], list[list[str]]] = {}
    for b in bundle_dirs:
        header, rows = read_csv(Path(b) / "timings.csv")
        if header != TIMINGS_HEADER:
            raise ContractError(f"{b}: unexpected timings header {header}")
        for r in rows:
            groups.setdefault((r[0], r[2]), []).append(r)
    out = []
    for (case, model), rows in sorted(groups.items()):
        medians = [statistics.median(float(r[k]) for r in rows) for k in (3, 4, 5)]
        out.append([case, model, *medians, min(int(r[6]) for r in rows), len(rows)])
    return out


def write_cost_table(path: str | Path, bundle_dirs: Sequence[str | Path]) -> list[list]:
    rows = cost_table(bundle_dirs)
    write_csv(path, COST_HEADER, rows)
    return rows


def degradation(run: SeedRun, model: str) -> float:
    """System-wide mean MAE on the attacked set minus the clean held-out set."""
    return run.reports[(model, "scenario_test")].mean_mae - run.reports[(model, "test")].mean_mae


def median(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return statistics.median(vals) if vals else math.nan
