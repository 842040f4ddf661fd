"""Network description and bus admittance matrix assembly.

Case file layout (UTF-8 text, ``#`` starts a comment)::

    CASE <name>
    BASEMVA <MVA>
    BUS
    # id  kind  load_p_mw  load_q_mvar  gen_p_mw  vset_pu  shunt_g_pu  shunt_b_pu
    1  SLACK  0.0  0.0  232.4  1.06  0.0  0.0
    ...
    END
    BRANCH
    # from  to  r_pu  x_pu  b_pu  tap
    1  2  0.01938  0.05917  0.0528  1.0
    ...
    END

``kind`` is one of ``SLACK``, ``PV``, ``PQ``. Loads and generation are in MW/MVAr;
shunts, impedances and charging are per-unit on ``BASEMVA`` (shunts as admittance
consumed at 1 p.u. voltage, the same convention as IEEE Common Data Format). The
tap column is the off-nominal turns ratio on the ``from`` side; ``1.0`` means none.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContractError, ParseError, SingularBranchError, ValidationError

BUILTIN_CASES = ("ieee14", "ieee118")


class BusKind(enum.Enum):
    SLACK = "SLACK"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    load_p: float = 0.0  # MW
    load_q: float = 0.0  # MVAr
    gen_p: float = 0.0  # MW
    voltage_setpoint: float = 0.0  # p.u., meaningful for PV/SLACK only
    shunt_g: float = 0.0  # p.u.
    shunt_b: float = 0.0  # p.u.


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class GridCase:
    """Static network description; validated on construction."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        """0-based position of the slack bus."""
        for k, bus in enumerate(self.buses):
            if bus.kind is BusKind.SLACK:
                return k
        raise ValidationError("case has no slack bus")

    def indices(self, kind: BusKind) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.kind is kind], dtype=int)

    def bus(self, bus_id: int) -> Bus:
        if not 1 <= bus_id <= self.n_bus:
            raise ContractError(f"unknown bus id {bus_id}")
        return self.buses[bus_id - 1]

    def scheduled_injections(self) -> tuple[np.ndarray, np.ndarray]:
        """Net specified (P, Q) per bus in p.u.; generator Q is unscheduled and taken as 0."""
        p = np.array([b.gen_p - b.load_p for b in self.buses]) / self.base_mva
        q = np.array([-b.load_q for b in self.buses]) / self.base_mva
        return p, q

    def total_load(self) -> float:
        return float(sum(b.load_p for b in self.buses))

    def replace_buses(self, buses) -> "GridCase":
        return dataclasses.replace(self, buses=tuple(buses))


def validate_case(case: GridCase) -> None:
    if case.base_mva <= 0:
        raise ValidationError("base MVA must be positive")
    n = len(case.buses)
    if n == 0:
        raise ValidationError("case has no buses")
    for k, bus in enumerate(case.buses, start=1):
        if bus.id != k:
            raise ValidationError(f"bus ids must be unique and contiguous from 1; found {bus.id} at position {k}")
        if bus.kind is not BusKind.PQ and not bus.voltage_setpoint > 0:
            raise ValidationError(f"bus {bus.id}: voltage setpoint must be > 0 for {bus.kind.value} buses")
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise ValidationError(f"exactly one slack bus required, found {n_slack}")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if not 1 <= end <= n:
                raise ValidationError(f"branch {br.from_bus}-{br.to_bus} references missing bus {end}")
        if br.from_bus == br.to_bus:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        if br.r < 0:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus} has negative resistance")
        if not br.tap > 0:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus} has non-positive tap")
    if n > 1:
        rows = [br.from_bus - 1 for br in case.branches]
        cols = [br.to_bus - 1 for br in case.branches]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_islands, _ = connected_components(adj, directed=False)
        if n_islands != 1:
            raise ValidationError(f"network is not connected ({n_islands} islands)")


# -- parsing ----------------------------------------------------------------

def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _floats(tokens, lineno, what):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"malformed {what} record: {exc}", lineno) from None


def parse_case(text: str) -> GridCase:
    """Parse the native tabular case format into a validated :class:`GridCase`."""
    name = "case"
    base_mva = None
    buses: list[Bus] = []
    branches: list[Branch] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].upper()
        if section is None:
            if head == "CASE":
                name = " ".join(tokens[1:]) or name
            elif head == "BASEMVA":
                if len(tokens) != 2:
                    raise ParseError("BASEMVA expects one value", lineno)
                base_mva = _floats(tokens[1:], lineno, "BASEMVA")[0]
            elif head in ("BUS", "BRANCH"):
                section = head
            else:
                raise ParseError(f"unexpected token {tokens[0]!r}", lineno)
            continue
        if head == "END":
            section = None
            continue
        if section == "BUS":
            if len(tokens) != 8:
                raise ParseError(f"BUS record needs 8 columns, got {len(tokens)}", lineno)
            try:
                bus_id = int(tokens[0])
                kind = BusKind(tokens[1].upper())
            except ValueError:
                raise ParseError(f"malformed BUS record {line!r}", lineno) from None
            vals = _floats(tokens[2:], lineno, "BUS")
            buses.append(Bus(bus_id, kind, *vals))
        else:
            if len(tokens) not in (5, 6):
                raise ParseError(f"BRANCH record needs 5 or 6 columns, got {len(tokens)}", lineno)
            try:
                f, t = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise ParseError(f"malformed BRANCH record {line!r}", lineno) from None
            vals = _floats(tokens[2:], lineno, "BRANCH")
            branches.append(Branch(f, t, *vals))
    if section is not None:
        raise ParseError(f"section {section} not terminated by END")
    if base_mva is None:
        raise ParseError("missing BASEMVA")
    return GridCase(base_mva=base_mva, buses=tuple(buses), branches=tuple(branches), name=name)


def parse_cdf(text: str) -> GridCase:
    """Import an IEEE Common Data Format case.

    Bus types 0/1 map to PQ, 2 to PV and 3 to slack. Only the bus and branch
    sections are read; the generator voltage setpoint is the "desired volts" field.
    """
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty CDF text")
    try:
        base_mva = float(lines[0][31:37])
    except ValueError:
        raise ParseError("cannot read base MVA from title card", 1) from None
    name = lines[0][45:].strip() or "cdf case"
    buses: list[Bus] = []
    branches: list[Branch] = []
    section = None
    for lineno, line in enumerate(lines[1:], start=2):
        if section is None:
            upper = line.upper()
            if upper.startswith("BUS DATA FOLLOWS"):
                section = "BUS"
            elif upper.startswith("BRANCH DATA FOLLOWS"):
                section = "BRANCH"
            elif upper.startswith("END OF DATA"):
                break
            continue
        if line.strip().startswith("-999"):
            section = None
            continue
        if section == "BUS":
            fields = line[18:].split()
            if len(fields) < 15:
                raise ParseError("short CDF bus card", lineno)
            try:
                bus_id = int(line[0:4])
                btype = int(fields[2])
            except ValueError:
                raise ParseError("malformed CDF bus card", lineno) from None
            v = _floats(fields[3:15], lineno, "CDF bus")
            vm, _va, pl, ql, pg, _qg, _kv, vdes, _qmax, _qmin, gsh, bsh = v
            kind = {3: BusKind.SLACK, 2: BusKind.PV}.get(btype, BusKind.PQ)
            vset = (vdes if vdes > 0 else vm) if kind is not BusKind.PQ else 0.0
            buses.append(Bus(bus_id, kind, pl, ql, pg, vset, gsh, bsh))
        else:
            fields = line.split()
            if len(fields) < 15:
                raise ParseError("short CDF branch card", lineno)
            try:
                f, t = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError("malformed CDF branch card", lineno) from None
            r, x, b = _floats(fields[6:9], lineno, "CDF branch")
            ratio = _floats(fields[14:15], lineno, "CDF branch")[0]
            branches.append(Branch(f, t, r, x, b, ratio if ratio != 0 else 1.0))
    if section is not None:
        raise ParseError(f"CDF {section} section not terminated by -999")
    # CDF bus numbers need not be contiguous; renumber in file order.
    order = {bus.id: k for k, bus in enumerate(buses, start=1)}
    if len(order) != len(buses):
        raise ValidationError("duplicate bus numbers in CDF")
    buses = [dataclasses.replace(b, id=order[b.id]) for b in buses]
    try:
        branches = [dataclasses.replace(br, from_bus=order[br.from_bus], to_bus=order[br.to_bus])
                    for br in branches]
    except KeyError as exc:
        raise ValidationError(f"branch references missing bus {exc.args[0]}") from None
    return GridCase(base_mva=base_mva, buses=tuple(buses), branches=tuple(branches), name=name)


def serialize_case(case: GridCase) -> str:
    out = [f"CASE {case.name}", f"BASEMVA {case.base_mva!r}", "", "BUS",
           "# id  kind  load_p_mw  load_q_mvar  gen_p_mw  vset_pu  shunt_g_pu  shunt_b_pu"]
    for b in case.buses:
        out.append(f"{b.id} {b.kind.value} {b.load_p!r} {b.load_q!r} {b.gen_p!r} "
                   f"{b.voltage_setpoint!r} {b.shunt_g!r} {b.shunt_b!r}")
    out += ["END", "", "BRANCH", "# from  to  r_pu  x_pu  b_pu  tap"]
    for br in case.branches:
        out.append(f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} {br.b_charging!r} {br.tap!r}")
    out += ["END", ""]
    return "\n".join(out)


def load_case(source: str | Path, cdf: bool = False) -> GridCase:
    """Load a builtin case by name (``ieee14``, ``ieee118``) or a case file by path."""
    if isinstance(source, str) and source in BUILTIN_CASES:
        text = resources.files("gridpinn.data").joinpath(f"{source}.case").read_text(encoding="utf-8")
        return parse_case(text)
    text = Path(source).read_text(encoding="utf-8")
    return parse_cdf(text) if cdf else parse_case(text)


# -- admittance -------------------------------------------------------------

@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense complex bus admittance ``Y = G + jB`` (read-only)."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractError("admittance matrix must be square")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def g(self) -> np.ndarray:
        return self.matrix.real

    @property
    def b(self) -> np.ndarray:
        return self.matrix.imag


def build_ybus(case: GridCase) -> AdmittanceMatrix:
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if br.r == 0 and br.x == 0:
            raise SingularBranchError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        f, t = br.from_bus - 1, br.to_bus - 1
        ys = 1.0 / complex(br.r, br.x)
        ych = 0.5j * br.b_charging
        y[f, f] += (ys + ych) / (br.tap * br.tap)
        y[t, t] += ys + ych
        y[f, t] -= ys / br.tap
        y[t, f] -= ys / br.tap
    for k, bus in enumerate(case.buses):
        y[k, k] += complex(bus.shunt_g, bus.shunt_b)
    return AdmittanceMatrix(y)
