"""Loss-weight enumeration with per-combination TPE hyperparameter search.

For every weight triple on the simplex grid, ``t`` TPE-guided trials train and
score a model; the best trial per triple and the global best are kept. RNG
streams are keyed by ``(seed, combination, trial)``, so a logged trial can be
replayed in isolation.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .errors import ContractError, GridPinnError
from .io import csv_text, atomic_write_text, read_csv
from .loss import CompositeLoss, LossWeights, PhysicsContext
from .metrics import evaluate
from .nn import MlpModel, TrainConfig, TrainReport, glorot_init, train
from .scenarios import ScenarioData

STREAM_TPE = 11
STREAM_TRAIN = 12

TRIAL_LOG_HEADER = ["combo_id", "trial_id", "lambda_d", "lambda_p", "lambda_c",
                    "layers", "neurons", "lr", "batch", "mae", "wall_time_s"]


@dataclass(frozen=True)
class Range:
    low: float
    high: float
    log: bool = False
    integer: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ContractError(f"range lower bound {self.low} must be below upper {self.high}")
        if self.log and self.low <= 0:
            raise ContractError("log-scaled range needs a positive lower bound")

    def from_unit(self, u: float):
        u = min(max(u, 0.0), 1.0)
        if self.log:
            v = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
            if self.integer:
                return int(min(max(round(v), self.low), self.high))
            return min(max(v, self.low), self.high)
        if self.integer:
            v = round(self.low - 0.5 + u * (self.high - self.low + 1))
            return int(min(max(v, self.low), self.high))
        return self.low + u * (self.high - self.low)

    def to_unit(self, v: float) -> float:
        if self.log:
            return (math.log(v) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        if self.integer:
            return (v - self.low + 0.5) / (self.high - self.low + 1)
        return (v - self.low) / (self.high - self.low)

    def contains(self, v) -> bool:
        return self.low <= v <= self.high and (not self.integer or float(v).is_integer())


@dataclass(frozen=True)
class ParamRanges:
    layers: Range = Range(2, 10, integer=True)
    neurons: Range = Range(64, 4096, log=True, integer=True)
    learning_rate: Range = Range(1e-5, 1e-1, log=True)
    batch_size: Range = Range(4, 128, log=True, integer=True)

    NAMES = ("layers", "neurons", "learning_rate", "batch_size")

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES]

    @classmethod
    def from_bounds(cls, layers=(2, 10), neurons=(64, 4096), learning_rate=(1e-5, 1e-1), batch_size=(4, 128)):
        return cls(Range(*layers, integer=True), Range(*neurons, log=True, integer=True),
                   Range(*learning_rate, log=True), Range(*batch_size, log=True, integer=True))


@dataclass(frozen=True)
class TrialParams:
    layers: int
    neurons: int
    learning_rate: float
    batch_size: int

    def layer_dims(self, n_bus: int) -> tuple[int, ...]:
        return (2 * n_bus,) + (self.neurons,) * self.layers + (2 * n_bus,)


@dataclass(frozen=True)
class TpeSettings:
    gamma: float = 0.25
    n_startup: int = 5
    n_candidates: int = 24
    min_bandwidth: float = 0.02


@dataclass
class Trial:
    combo_id: int
    trial_id: int
    weights: LossWeights
    params: TrialParams
    mae: float
    seed: int
    val_mae: float = math.inf
    wall_time_s: float = 0.0
    failed: bool = False
    report: TrainReport | None = field(default=None, repr=False)
    model: MlpModel | None = field(default=None, repr=False)


@dataclass
class HpoResult:
    best: Trial
    per_combination_best: dict[tuple[float, float, float], Trial]
    trial_log: list[Trial]


def enumerate_weights(step: float) -> list[LossWeights]:
    """All ``(lambda_d, lambda_p, lambda_c)`` on the ``step`` grid of the simplex, data-only first."""
    if not 0 < step <= 1:
        raise ContractError("step must lie in (0, 1]")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ContractError(f"1/step must be an integer, got {1.0 / step!r}")
    out = []
    for i in range(n, -1, -1):
        for j in range(0, n - i + 1):
            out.append(LossWeights(i / n, j / n, (n - i - j) / n))
    return out


def _stream_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def trial_seed(seed: int, combo_id: int, trial_id: int) -> int:
    return _stream_seed(seed, STREAM_TRAIN, combo_id, trial_id)


def _history_pairs(history):
    out = []
    for h in history:
        if isinstance(h, Trial):
            out.append((h.params, h.mae))
        else:
            out.append((h[0], float(h[1])))
    return out


def _parzen(points: np.ndarray, min_bw: float):
    """Gaussian kernels (Scott bandwidth) plus a uniform prior, truncated to [0, 1]."""
    m = points.size
    sigma = float(np.std(points)) * m ** (-0.2) if m > 1 else 0.0
    sigma = min(max(sigma, min_bw), 1.0)
    return points, sigma


def _parzen_logpdf(x: np.ndarray, points: np.ndarray, sigma: float) -> np.ndarray:
    m = points.size
    z = (x[:, None] - points[None, :]) / sigma
    mass = ndtr((1.0 - points) / sigma) - ndtr(-points / sigma)
    dens = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi) * mass[None, :])
    total = (dens.sum(axis=1) + 1.0) / (m + 1)  # prior: uniform density 1 on [0, 1]
    return np.log(total)


def _parzen_sample(rng: np.random.Generator, points: np.ndarray, sigma: float, size: int) -> np.ndarray:
    m = points.size
    comp = rng.integers(0, m + 1, size=size)
    u = rng.random(size)
    out = np.empty(size)
    prior = comp == m
    out[prior] = u[prior]
    k = ~prior
    mu = points[comp[k]]
    lo, hi = ndtr(-mu / sigma), ndtr((1.0 - mu) / sigma)
    out[k] = np.clip(mu + sigma * ndtri(lo + u[k] * (hi - lo)), 0.0, 1.0)
    return out


def tpe_suggest(history, ranges: ParamRanges, seed: int, settings: TpeSettings = TpeSettings()) -> TrialParams:
    """Next hyperparameters given ``history`` of ``(params, score)`` pairs or trials (lower is better).

    The first ``n_startup`` suggestions are scrambled-Halton points; afterwards the
    history is split at quantile ``gamma`` and the candidate drawn from the good
    density maximizing ``l(x)/g(x)`` is returned.
    """
    pairs = _history_pairs(history)
    dims = ranges.items()
    n = len(pairs)
    if n < settings.n_startup:
        halton = qmc.Halton(d=len(dims), scramble=True, seed=np.random.default_rng(seed))
        u = halton.random(n + 1)[-1]
    else:
        rng = np.random.default_rng([int(seed), n])
        scores = np.array([s if math.isfinite(s) else math.inf for _, s in pairs])
        order = np.argsort(scores, kind="stable")
        n_good = max(1, math.ceil(settings.gamma * n))
        good, bad = order[:n_good], order[n_good:]
        log_ratio = np.zeros(settings.n_candidates)
        cand = np.empty((settings.n_candidates, len(dims)))
        for d, (name, rng_d) in enumerate(dims):
            coords = np.array([rng_d.to_unit(getattr(p, name)) for p, _ in pairs])
            lpts, lsig = _parzen(coords[good], settings.min_bandwidth)
            gpts, gsig = _parzen(coords[bad], settings.min_bandwidth)
            cand[:, d] = _parzen_sample(rng, lpts, lsig, settings.n_candidates)
            log_ratio += _parzen_logpdf(cand[:, d], lpts, lsig) - _parzen_logpdf(cand[:, d], gpts, gsig)
        u = cand[int(np.argmax(log_ratio))]
    values = {name: r.from_unit(float(x)) for (name, r), x in zip(dims, u)}
    return TrialParams(int(values["layers"]), int(values["neurons"]),
                       float(values["learning_rate"]), int(values["batch_size"]))


@dataclass(frozen=True)
class TrialBudget:
    max_epochs: int = 100
    patience: int = 20
    rank_by: str = "test"  # "test" as in the optimization loop, or "val"
    conjugate: bool = True


def run_trial(data: ScenarioData, params: TrialParams, weights: LossWeights, seed: int,
              budget: TrialBudget = TrialBudget()) -> tuple[MlpModel, TrainReport, float, float]:
    """Train one model; return ``(model, report, test_mae, val_mae)`` in reporting space."""
    dims = params.layer_dims(data.n_bus)
    model = glorot_init(dims, seed)
    cfg = TrainConfig(params.learning_rate, params.batch_size, budget.max_epochs, budget.patience, seed, weights)
    ctx = PhysicsContext.from_ybus(data.ybus, data.meta, conjugate=budget.conjugate)
    loss = CompositeLoss(weights, ctx, data.constants)
    tr, va = data.prepared["train"], data.prepared["val"]
    model, report = train(model, (tr.x, tr.y), (va.x, va.y), cfg, loss)
    test_mae = evaluate(model, data.prepared["test"], data.meta).mean_mae
    val_mae = evaluate(model, va, data.meta).mean_mae
    return model, report, test_mae, val_mae


def _run_combo(args) -> list[Trial]:
    data, combo_id, weights, ranges, t, seed, budget, settings, keep_models = args
    trials: list[Trial] = []
    history = []
    for trial_id in range(t):
        params = tpe_suggest(history, ranges, _stream_seed(seed, STREAM_TPE, combo_id), settings)
        tseed = trial_seed(seed, combo_id, trial_id)
        t0 = time.perf_counter()
        try:
            model, report, mae, val_mae = run_trial(data, params, weights, tseed, budget)
            failed = not math.isfinite(mae)
        except (GridPinnError, FloatingPointError, np.linalg.LinAlgError):
            model, report, mae, val_mae, failed = None, None, math.inf, math.inf, True
        if failed:
            mae = val_mae = math.inf
        trial = Trial(combo_id, trial_id, weights, params, mae, tseed, val_mae,
                      time.perf_counter() - t0, failed, report, model if keep_models else None)
        trials.append(trial)
        history.append((params, mae if budget.rank_by == "test" else val_mae))
    return trials


def _score(trial: Trial, rank_by: str) -> float:
    return trial.mae if rank_by == "test" else trial.val_mae


def optimize(data: ScenarioData, ranges: ParamRanges = ParamRanges(), step: float = 0.1,
             trials_per_combo: int = 10, seed: int = 0, budget: TrialBudget = TrialBudget(),
             settings: TpeSettings = TpeSettings(), workers: int = 1, keep_models: bool = True,
             progress: Callable[[Trial], None] | None = None) -> HpoResult:
    if trials_per_combo < 1:
        raise ContractError("at least one trial per weight combination is required")
    if budget.rank_by not in ("test", "val"):
        raise ContractError("rank_by must be 'test' or 'val'")
    combos = enumerate_weights(step)
    jobs = [(data, i, w, ranges, trials_per_combo, seed, budget, settings, keep_models)
            for i, w in enumerate(combos)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            per_combo = list(ex.map(_run_combo, jobs))
    else:
        per_combo = []
        for job in jobs:
            trials = _run_combo(job)
            if progress:
                for tr in trials:
                    progress(tr)
            per_combo.append(trials)
    log: list[Trial] = [tr for trials in per_combo for tr in trials]
    best_per: dict[tuple[float, float, float], Trial] = {}
    best = None
    for trials in per_combo:
        combo_best = None
        for tr in trials:
            if combo_best is None or _score(tr, budget.rank_by) < _score(combo_best, budget.rank_by):
                combo_best = tr
        best_per[combo_best.weights.as_tuple()] = combo_best
        if best is None or _score(combo_best, budget.rank_by) < _score(best, budget.rank_by):
            best = combo_best
    return HpoResult(best, best_per, log)


def trial_log_text(trials: Sequence[Trial]) -> str:
    rows = ([t.combo_id, t.trial_id, *t.weights.as_tuple(), t.params.layers, t.params.neurons,
             t.params.learning_rate, t.params.batch_size, t.mae, t.wall_time_s] for t in trials)
    return csv_text(TRIAL_LOG_HEADER, rows)


def write_trial_log(path: str | Path, trials: Sequence[Trial]) -> None:
    atomic_write_text(path, trial_log_text(trials))


def read_trial_log(path: str | Path) -> list[dict]:
    header, rows = read_csv(path)
    if header != TRIAL_LOG_HEADER:
        raise ContractError(f"{path}: unexpected trial-log header {header}")
    out = []
    for r in rows:
        rec = dict(zip(header, r))
        out.append({
            "combo_id": int(rec["combo_id"]), "trial_id": int(rec["trial_id"]),
            "weights": LossWeights(float(rec["lambda_d"]), float(rec["lambda_p"]), float(rec["lambda_c"])),
            "params": TrialParams(int(rec["layers"]), int(rec["neurons"]), float(rec["lr"]), int(rec["batch"])),
            "mae": float(rec["mae"]), "wall_time_s": float(rec["wall_time_s"]),
        })
    return out


def replay_trial(data: ScenarioData, record: dict, seed: int, budget: TrialBudget = TrialBudget()) -> float:
    """Retrain a logged trial from ``(params, weights, seed)`` and return its test MAE."""
    tseed = trial_seed(seed, record["combo_id"], record["trial_id"])
    try:
        _, _, mae, _ = run_trial(data, record["params"], record["weights"], tseed, budget)
    except GridPinnError:
        return math.inf
    return mae if math.isfinite(mae) else math.inf
