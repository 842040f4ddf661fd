"""Dataset synthesis: operating-point trajectories, noise, preprocessing and attacks.

Every generator solves one AC power flow per time step and records the net
injections seen by the network (inputs) together with the solved voltages
(targets). Random draws come from per-sample streams keyed by
``(seed, stream, timestamp)``, so results do not depend on evaluation order or
on the number of worker processes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .errors import ConfigError, ContractError, GenerationError
from .grid import AdmittanceMatrix, BusKind, GridCase, build_ybus, load_case
from .io import atomic_write_text, csv_text, kv_text, parse_kv
from .loss import ConstantsSpec
from .norm import NormMeta
from .powerflow import (Override, StateVector, apply_operating_point, equal_load_change,
                        injections, solve_nr, spread_load_change)

# Hourly load multipliers (hour 0..23): morning and evening peaks.
DEFAULT_DAILY_CURVE = (
    0.72, 0.70, 0.69, 0.68, 0.69, 0.72, 0.78, 0.86, 0.92, 0.95, 0.94, 0.92,
    0.90, 0.89, 0.88, 0.89, 0.92, 0.97, 1.00, 0.99, 0.95, 0.88, 0.80, 0.75,
)

STREAM_JITTER = 1
STREAM_NOISE = 2
STREAM_SPLIT = 3

PF_TOL = 1e-10
PF_MAX_ITER = 30
ZERO_SNAP = 1e-10

DEFAULT_ATTACK_SCHEDULE = ((33, 0.10), (33, 0.20), (34, 0.30))


# -- recipes ----------------------------------------------------------------

@dataclass(frozen=True)
class DailyProfile:
    """Loads follow a periodic 24-hour curve with multiplicative per-bus jitter.

    Non-slack generation follows the same multiplier so the slack bus does not
    absorb the whole daily swing.
    """

    jitter: float = 0.02
    curve: tuple[float, ...] = DEFAULT_DAILY_CURVE
    scale_generation: bool = True
    type: str = field(default="daily", init=False)

    def multipliers(self, n: int) -> np.ndarray:
        hours = 24.0 * np.arange(n) / n
        knots = np.arange(len(self.curve) + 1) * (24.0 / len(self.curve))
        values = np.r_[self.curve, self.curve[0]]
        return np.interp(hours, knots, values)


@dataclass(frozen=True)
class Disturbance:
    """Linear ramp from the base case to a shifted operating point.

    ``kind="generation"`` changes the output of the generator at ``bus`` by
    ``delta_mw`` (a shutdown is ``-gen_p``). ``kind="load"`` changes system load by
    ``delta_mw``: proportionally over all load buses, or split equally over
    ``buses`` when given.
    """

    kind: str
    delta_mw: float
    bus: int | None = None
    buses: tuple[int, ...] = ()
    start_fraction: float = 0.3
    ramp_fraction: float = 0.1
    jitter: float = 0.02
    type: str = field(default="disturbance", init=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        if self.kind not in ("generation", "load"):
            raise ContractError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "generation" and self.bus is None:
            raise ContractError("generation disturbance needs a bus")

    def full_overrides(self, case: GridCase) -> list[Override]:
        if self.kind == "generation":
            return [Override(self.bus, gen_p=self.delta_mw)]
        if self.buses:
            return equal_load_change(case, self.delta_mw, self.buses)
        return spread_load_change(case, self.delta_mw)

    def fractions(self, n: int) -> np.ndarray:
        start = int(round(self.start_fraction * n))
        ramp = max(1, int(round(self.ramp_fraction * n)))
        k = np.arange(n)
        return np.clip((k - start + 1) / ramp, 0.0, 1.0)


@dataclass(frozen=True)
class Fault:
    """Quasi-static self-clearing three-phase fault through ``resistance`` (p.u.).

    Each ``period_steps`` block carries one fault window of ``window_steps``
    centred in the block; during the window a shunt conductance ``1/resistance``
    is stamped at ``bus``.
    """

    bus: int
    resistance: float
    window_steps: int = 10
    period_steps: int = 100
    jitter: float = 0.02
    type: str = field(default="fault", init=False)

    def __post_init__(self):
        if not self.resistance > 0:
            raise ContractError("fault resistance must be > 0")
        if not 0 < self.window_steps <= self.period_steps:
            raise ContractError("fault window must fit inside its period")

    def active(self, n: int) -> np.ndarray:
        pos = np.arange(n) % self.period_steps
        first = (self.period_steps - self.window_steps) // 2
        return (pos >= first) & (pos < first + self.window_steps)


@dataclass(frozen=True)
class HeldOut:
    """Test set is an unseen random subset of the training trajectory."""

    type: str = field(default="heldout", init=False)


Recipe = DailyProfile | Disturbance | Fault | HeldOut


@dataclass(frozen=True)
class AttackSpec:
    """Multiplicative bias on the P/Q feeds of one bus: ``(count, fraction)`` segments in test order."""

    target_bus: int
    channels: tuple[str, ...] = ("P", "Q")
    schedule: tuple[tuple[int, float], ...] = DEFAULT_ATTACK_SCHEDULE

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(c.upper() for c in self.channels))
        object.__setattr__(self, "schedule", tuple((int(c), float(f)) for c, f in self.schedule))
        if not self.channels or any(c not in ("P", "Q") for c in self.channels):
            raise ContractError(f"attack channels must be P and/or Q, got {self.channels}")
        if any(c <= 0 or f < 0 for c, f in self.schedule):
            raise ContractError("attack segments need positive counts and non-negative fractions")

    @property
    def span(self) -> int:
        return sum(c for c, _ in self.schedule)

    def bias(self) -> np.ndarray:
        """Per-point bias fraction over the scheduled span."""
        return np.concatenate([np.full(c, f) for c, f in self.schedule]) if self.schedule else np.zeros(0)


@dataclass(frozen=True)
class ScenarioSpec:
    index: str
    case: str
    train_recipe: Recipe
    test_recipe: Recipe = HeldOut()
    train_count: int = 800
    val_count: int = 200
    test_count: int = 100
    noise_level: float = 0.01
    seed: int = 0
    attack: AttackSpec | None = None

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) <= 0:
            raise ContractError("sample counts must be positive")
        if isinstance(self.train_recipe, HeldOut):
            raise ContractError("training recipe cannot be 'heldout'")
        if self.noise_level < 0:
            raise ContractError("noise level must be >= 0")
        if self.attack is not None and self.attack.span > self.test_count:
            raise ContractError("attack schedule spans more points than the test set")

    @property
    def steady_state(self) -> bool:
        return isinstance(self.train_recipe, DailyProfile)

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        out = {"index": self.index, "case": self.case,
               "samples": {"train": self.train_count, "val": self.val_count, "test": self.test_count},
               "noise_level": self.noise_level, "seed": self.seed,
               "train": _recipe_dict(self.train_recipe), "test": _recipe_dict(self.test_recipe)}
        if self.attack is not None:
            out["attack"] = {"bus": self.attack.target_bus, "channels": list(self.attack.channels),
                             "schedule": [list(s) for s in self.attack.schedule]}
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def validate_against(self, case: GridCase) -> None:
        buses = []
        for r in (self.train_recipe, self.test_recipe):
            if isinstance(r, Disturbance):
                buses += ([r.bus] if r.bus is not None else []) + list(r.buses)
            elif isinstance(r, Fault):
                buses.append(r.bus)
        if self.attack is not None:
            buses.append(self.attack.target_bus)
        for b in buses:
            if not 1 <= b <= case.n_bus:
                raise ContractError(f"scenario {self.index} references unknown bus {b}")


def _recipe_dict(recipe) -> dict:
    d = dataclasses.asdict(recipe)
    d["type"] = recipe.type
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


_RECIPES = {"daily": DailyProfile, "disturbance": Disturbance, "fault": Fault, "heldout": HeldOut}


def recipe_from_dict(d: dict) -> Recipe:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _RECIPES:
        raise ConfigError(f"unknown recipe type {kind!r}")
    for key in ("curve", "buses"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return _RECIPES[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} recipe: {exc}") from None


def scenario_from_dict(d: dict) -> ScenarioSpec:
    """Build a spec from the YAML schema::

        index: S5.1
        case: ieee14            # builtin name or case-file path
        samples: {train: 800, val: 200, test: 100}
        noise_level: 0.01
        seed: 0
        train: {type: daily, jitter: 0.02}
        test: {type: heldout}
        attack: {bus: 4, channels: [P, Q], schedule: [[33, 0.1], [33, 0.2], [34, 0.3]]}
    """
    try:
        samples = d.get("samples", {})
        attack = None
        if d.get("attack"):
            a = d["attack"]
            attack = AttackSpec(int(a["bus"]), tuple(a.get("channels", ("P", "Q"))),
                                tuple(tuple(s) for s in a.get("schedule", DEFAULT_ATTACK_SCHEDULE)))
        return ScenarioSpec(
            index=str(d["index"]), case=str(d["case"]),
            train_recipe=recipe_from_dict(d["train"]),
            test_recipe=recipe_from_dict(d.get("test", {"type": "heldout"})),
            train_count=int(samples.get("train", 800)), val_count=int(samples.get("val", 200)),
            test_count=int(samples.get("test", 100)),
            noise_level=float(d.get("noise_level", 0.01)), seed=int(d.get("seed", 0)), attack=attack)
    except KeyError as exc:
        raise ConfigError(f"scenario config missing key {exc.args[0]!r}") from None
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def load_scenario(path: str | Path) -> ScenarioSpec:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"scenario file {path} is not a mapping")
    return scenario_from_dict(data)



BUILTIN_SCENARIOS: dict[str, ScenarioSpec] = {
    "S1.1": ScenarioSpec("S1.1", "ieee14", DailyProfile()),
    "S2.1": ScenarioSpec("S2.1", "ieee14", Disturbance("generation", -40.0, bus=2), Disturbance("load", 40.0)),
    "S2.2": ScenarioSpec("S2.2", "ieee14", Disturbance("generation", -40.0, bus=2), Disturbance("load", 80.0)),
    "S3.1": ScenarioSpec("S3.1", "ieee14", Disturbance("generation", 40.0, bus=2), Disturbance("load", -40.0)),
    "S3.2": ScenarioSpec("S3.2", "ieee14", Disturbance("generation", 40.0, bus=2), Disturbance("load", -80.0)),
    "S4.1": ScenarioSpec("S4.1", "ieee14", Fault(2, 0.5), Fault(5, 0.5)),
    "S4.2": ScenarioSpec("S4.2", "ieee14", Fault(2, 0.5), Fault(7, 0.5)),
    "S4.3": ScenarioSpec("S4.3", "ieee14", Fault(2, 0.5), Fault(12, 0.5)),
    "S5.1": ScenarioSpec("S5.1", "ieee14", DailyProfile(), attack=AttackSpec(4)),
    "S5.2": ScenarioSpec("S5.2", "ieee14", DailyProfile(), attack=AttackSpec(14)),
    "S6.1": ScenarioSpec("S6.1", "ieee118", DailyProfile()),
    "S7.1": ScenarioSpec("S7.1", "ieee118", Disturbance("generation", -314.0, bus=26),
                         Disturbance("load", 314.0, buses=(20, 21, 22, 23, 27))),
    "S8.1": ScenarioSpec("S8.1", "ieee118", Fault(19, 0.25), Fault(33, 0.25)),
    "S9.1": ScenarioSpec("S9.1", "ieee118", DailyProfile(), attack=AttackSpec(54)),
}


def resolve_scenario(ref: str | Path | ScenarioSpec) -> ScenarioSpec:
    if isinstance(ref, ScenarioSpec):
        return ref
    if str(ref) in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[str(ref)]
    return load_scenario(ref)


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    inputs: np.ndarray  # [P_1..P_N, Q_1..Q_N] p.u.
    targets: StateVector
    timestamp_index: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Aligned samples stored column-wise; ``p``, ``q``, ``vm``, ``va`` are (samples, buses)."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    case_name: str = ""
    norm_meta: NormMeta | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        arrays = [np.atleast_2d(np.asarray(getattr(self, k), dtype=float)) for k in ("p", "q", "vm", "va")]
        shape = arrays[0].shape
        if any(a.shape != shape for a in arrays) or t.shape != (shape[0],):
            raise ContractError("dataset arrays are not aligned")
        object.__setattr__(self, "t", t)
        for k, a in zip(("p", "q", "vm", "va"), arrays):
            object.__setattr__(self, k, a)

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("t", "p", "q", "vm", "va"))

    __hash__ = None

    @property
    def n_bus(self) -> int:
        return self.p.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.p, self.q])

    @property
    def samples(self) -> list[Sample]:
        return [self[k] for k in range(len(self))]

    def __getitem__(self, k: int) -> Sample:
        return Sample(np.r_[self.p[k], self.q[k]], StateVector(self.vm[k], self.va[k]), int(self.t[k]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return dataclasses.replace(self, t=self.t[idx], p=self.p[idx], q=self.q[idx],
                                   vm=self.vm[idx], va=self.va[idx])

    def with_inputs(self, p, q) -> "Dataset":
        return dataclasses.replace(self, p=p, q=q)


def _stream(seed: int, stream: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, int(k)])


def _jitter_factors(seed: int, k: int, n_bus: int, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones(n_bus)
    return 1.0 + sigma * _stream(seed, STREAM_JITTER, k).standard_normal(n_bus)


def _scaled_case(case: GridCase, load_factor, gen_factor: float = 1.0) -> GridCase:
    buses = []
    for bus, f in zip(case.buses, np.broadcast_to(load_factor, (case.n_bus,))):
        gen = bus.gen_p * gen_factor if bus.kind is not BusKind.SLACK else bus.gen_p
        buses.append(dataclasses.replace(bus, load_p=bus.load_p * f, load_q=bus.load_q * f, gen_p=gen))
    return case.replace_buses(buses)


def _solve_point(args):
    k, point_case, y_meas = args
    sol = solve_nr(point_case, tol=PF_TOL, max_iter=PF_MAX_ITER)
    if not sol.converged:
        raise GenerationError(f"power flow did not converge at step {k} "
                              f"(mismatch {sol.max_mismatch:.3e} after {sol.iterations} iterations)")
    p, q = injections(sol.state, y_meas)
    p[np.abs(p) < ZERO_SNAP] = 0.0
    q[np.abs(q) < ZERO_SNAP] = 0.0
    return p, q, sol.state.vm, sol.state.va


def _run_points(case: GridCase, points: Sequence[GridCase], workers: int = 1) -> Dataset:
    y_meas = build_ybus(case).matrix
    jobs = [(k, pc, y_meas) for k, pc in enumerate(points)]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_solve_point, jobs, chunksize=16))
        else:
            results = [_solve_point(j) for j in jobs]
    except GenerationError:
        raise
    except Exception as exc:  # singular Jacobians and friends
        raise GenerationError(f"power flow failed: {exc}") from exc
    p, q, vm, va = (np.array(col) for col in zip(*results))
    return Dataset(np.arange(len(points)), p, q, vm, va, case.name)


def gen_daily_profile(case: GridCase, recipe: DailyProfile, count: int, seed: int, workers: int = 1) -> Dataset:
    mult = recipe.multipliers(count)
    points = [_scaled_case(case, m * _jitter_factors(seed, k, case.n_bus, recipe.jitter),
                           m if recipe.scale_generation else 1.0)
              for k, m in enumerate(mult)]
    return _run_points(case, points, workers)


def gen_disturbance(case: GridCase, recipe: Disturbance, count: int, seed: int, workers: int = 1) -> Dataset:
    full = recipe.full_overrides(case)
    points = []
    for k, a in enumerate(recipe.fractions(count)):
        ovs = [dataclasses.replace(o, load_p=a * o.load_p, load_q=a * o.load_q, gen_p=a * o.gen_p) for o in full]
        shifted = apply_operating_point(case, ovs) if a else case
        points.append(_scaled_case(shifted, _jitter_factors(seed, k, case.n_bus, recipe.jitter)))
    return _run_points(case, points, workers)


def gen_fault(case: GridCase, recipe: Fault, count: int, seed: int, workers: int = 1) -> Dataset:
    case.bus(recipe.bus)
    g_fault = 1.0 / recipe.resistance
    points = []
    for k, on in enumerate(recipe.active(count)):
        base = _scaled_case(case, _jitter_factors(seed, k, case.n_bus, recipe.jitter))
        if on and g_fault:
            base = apply_operating_point(base, [Override(recipe.bus, shunt_g=g_fault)])
        points.append(base)
    return _run_points(case, points, workers)


def generate(case: GridCase, recipe: Recipe, count: int, seed: int, workers: int = 1) -> Dataset:
    if isinstance(recipe, DailyProfile):
        return gen_daily_profile(case, recipe, count, seed, workers)
    if isinstance(recipe, Disturbance):
        return gen_disturbance(case, recipe, count, seed, workers)
    if isinstance(recipe, Fault):
        return gen_fault(case, recipe, count, seed, workers)
    raise ContractError(f"recipe {recipe!r} does not generate data on its own")


def inject_noise(ds: Dataset, level: float, seed: int) -> Dataset:
    """Zero-mean Gaussian noise with std ``level * |value|`` on every P/Q input."""
    if level < 0:
        raise ContractError("noise level must be >= 0")
    if level == 0:
        return ds
    n = ds.n_bus
    z = np.array([_stream(seed, STREAM_NOISE, t).standard_normal(2 * n) for t in ds.t]).reshape(len(ds), 2 * n)
    p = ds.p + level * np.abs(ds.p) * z[:, :n]
    q = ds.q + level * np.abs(ds.q) * z[:, n:]
    return ds.with_inputs(p, q)


def apply_attack(ds: Dataset, atk: AttackSpec) -> Dataset:
    """Scale the target bus's P and/or Q feeds by ``1 + bias`` over the scheduled test points."""
    if not 1 <= atk.target_bus <= ds.n_bus:
        raise ContractError(f"attack target bus {atk.target_bus} not in a {ds.n_bus}-bus dataset")
    if atk.span > len(ds):
        raise ContractError(f"attack schedule spans {atk.span} points but dataset has {len(ds)}")
    col = atk.target_bus - 1
    mult = 1.0 + atk.bias()
    p, q = ds.p.copy(), ds.q.copy()
    if "P" in atk.channels:
        p[:atk.span, col] = p[:atk.span, col] * mult
    if "Q" in atk.channels:
        q[:atk.span, col] = q[:atk.span, col] * mult
    return ds.with_inputs(p, q)


@dataclass(frozen=True)
class PreparedData:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    raw: Dataset = field(repr=False)

    def __len__(self):
        return len(self.t)


def preprocess(ds: Dataset, split: str = "train", meta: NormMeta | None = None) -> tuple[PreparedData, NormMeta]:
    """Normalize inputs/targets; the training split fits the metadata, other splits must reuse it."""
    if split not in ("train", "val", "test"):
        raise ContractError(f"unknown split {split!r}")
    if meta is None:
        if split != "train":
            raise ContractError(f"{split} preprocessing requires the training split's metadata")
        meta = NormMeta.fit(ds.inputs, ds.vm, ds.va)
    elif meta.n_bus != ds.n_bus:
        raise ContractError("metadata bus count does not match the dataset")
    x = meta.transform_inputs(ds.inputs)
    y = meta.transform_targets(ds.vm, ds.va)
    return PreparedData(x, y, ds.t.copy(), ds), meta


# -- dataset files ----------------------------------------------------------

def dataset_header(n_bus: int) -> list[str]:
    return (["t"] + [f"P_{i}" for i in range(1, n_bus + 1)] + [f"Q_{i}" for i in range(1, n_bus + 1)]
            + [f"vm_{i}" for i in range(1, n_bus + 1)] + [f"va_{i}" for i in range(1, n_bus + 1)])


def save_dataset(ds: Dataset, path: str | Path, meta: NormMeta | None = None,
                 spec: ScenarioSpec | None = None) -> None:
    """Write ``path`` (CSV) and ``path.meta`` (key=value sidecar)."""
    rows = ([int(t)] + list(map(float, row)) for t, row in zip(ds.t, np.hstack([ds.p, ds.q, ds.vm, ds.va])))
    atomic_write_text(path, csv_text(dataset_header(ds.n_bus), rows))
    side = {"case": ds.case_name, "samples": len(ds)}
    if spec is not None:
        side["scenario"] = json.dumps(spec.to_dict(), sort_keys=True)
    text = kv_text(side)
    if meta is not None:
        text += meta.to_text()
    atomic_write_text(str(path) + ".meta", text)


def load_dataset(path: str | Path) -> tuple[Dataset, NormMeta | None]:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = (data.shape[1] - 1) // 4
    if data.shape[1] != 4 * n + 1:
        raise ContractError(f"{path}: column count {data.shape[1]} is not 1 + 4N")
    meta = None
    case_name = ""
    side = Path(str(path) + ".meta")
    if side.exists():
        kv = parse_kv(side.read_text(encoding="utf-8"))
        case_name = kv.get("case", "")
        if "in_mean" in kv:
            meta = NormMeta.from_mapping(kv)
    ds = Dataset(data[:, 0].astype(np.int64), data[:, 1:n + 1], data[:, n + 1:2 * n + 1],
                 data[:, 2 * n + 1:3 * n + 1], data[:, 3 * n + 1:], case_name)
    return ds, meta


# -- scenario assembly ------------------------------------------------------

@dataclass
class ScenarioData:
    spec: ScenarioSpec
    case: GridCase
    ybus: AdmittanceMatrix
    constants: ConstantsSpec
    raw: dict[str, Dataset]
    prepared: dict[str, PreparedData]
    meta: NormMeta

    @property
    def n_bus(self) -> int:
        return self.case.n_bus

    @property
    def evaluation_sets(self) -> list[str]:
        return [k for k in ("test", "scenario_test") if k in self.prepared]


def _split_indices(spec: ScenarioSpec, total: int, held_out: int):
    rng = _stream(spec.seed, STREAM_SPLIT, 0)
    order = rng.permutation(total)
    test_idx = np.sort(order[:held_out])
    rest = order[held_out:]
    val_idx = np.sort(rest[:spec.val_count])
    train_idx = np.sort(rest[spec.val_count:])
    return train_idx, val_idx, test_idx


def build_scenario(spec: ScenarioSpec, cache_dir: str | Path | None = None, workers: int = 1) -> ScenarioData:
    """Generate, split, perturb and normalize all datasets of a scenario.

    The training recipe yields ``train + val + test`` samples; ``test`` is a random
    held-out subset (kept in time order). A non-heldout test recipe yields an
    additional ``scenario_test`` set. An attack, if any, is applied to the held-out
    test set after noise and stored as ``scenario_test``.
    """
    case = load_case(spec.case)
    spec.validate_against(case)
    raw = _cached_raw(spec, case, cache_dir, workers)
    train_raw, val_raw, test_raw = raw["train"], raw["val"], raw["test"]
    noisy = {
        "train": inject_noise(train_raw, spec.noise_level, spec.seed),
        "val": inject_noise(val_raw, spec.noise_level, spec.seed),
        "test": inject_noise(test_raw, spec.noise_level, spec.seed),
    }
    if "scenario_test" in raw:
        noisy["scenario_test"] = inject_noise(raw["scenario_test"], spec.noise_level, spec.seed + 1)
    elif spec.attack is not None:
        noisy["scenario_test"] = apply_attack(noisy["test"], spec.attack)
    prepared = {}
    prepared["train"], meta = preprocess(noisy["train"], "train")
    for k in noisy:
        if k != "train":
            prepared[k], _ = preprocess(noisy[k], "test" if k != "val" else "val", meta)
    ybus = build_ybus(case)
    constants = ConstantsSpec.from_case(case, steady_state=spec.steady_state)
    return ScenarioData(spec, case, ybus, constants, noisy, prepared, meta)


def _generate_raw(spec: ScenarioSpec, case: GridCase, workers: int) -> dict[str, Dataset]:
    total = spec.train_count + spec.val_count + spec.test_count
    full = generate(case, spec.train_recipe, total, spec.seed, workers)
    tr, va, te = _split_indices(spec, total, spec.test_count)
    raw = {"train": full.subset(tr), "val": full.subset(va), "test": full.subset(te)}
    if not isinstance(spec.test_recipe, HeldOut):
        raw["scenario_test"] = generate(case, spec.test_recipe, spec.test_count, spec.seed + 1, workers)
    return raw


def _cached_raw(spec, case, cache_dir, workers):
    if cache_dir is None:
        return _generate_raw(spec, case, workers)
    cache = Path(cache_dir) / f"{spec.index}-{spec.digest()}"
    names = ["train", "val", "test"] + ([] if isinstance(spec.test_recipe, HeldOut) else ["scenario_test"])
    if all((cache / f"{n}.csv").exists() for n in names):
        return {n: load_dataset(cache / f"{n}.csv")[0] for n in names}
    raw = _generate_raw(spec, case, workers)
    for n, ds in raw.items():
        save_dataset(ds, cache / f"{n}.csv", spec=spec)
    return raw
