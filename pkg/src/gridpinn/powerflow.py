"""Newton-Raphson AC power flow in polar coordinates.

Ground-truth generator for dataset synthesis. Generator reactive limits are not
enforced, so PV buses never switch to PQ.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.linalg

from .errors import ContractError, SingularJacobianError
from .grid import AdmittanceMatrix, BusKind, GridCase, build_ybus


@dataclass(frozen=True)
class StateVector:
    vm: np.ndarray  # p.u.
    va: np.ndarray  # rad

    def __post_init__(self):
        vm = np.asarray(self.vm, dtype=float)
        va = np.asarray(self.va, dtype=float)
        if vm.shape != va.shape or vm.ndim != 1:
            raise ContractError("vm and va must be 1-D arrays of equal length")
        object.__setattr__(self, "vm", vm)
        object.__setattr__(self, "va", va)

    @property
    def complex(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


@dataclass(frozen=True)
class PowerFlowSolution:
    state: StateVector
    iterations: int
    max_mismatch: float
    converged: bool


@dataclass(frozen=True)
class Override:
    """Additive change to one bus. MW/MVAr for load and generation, p.u. for shunts."""

    bus: int
    load_p: float = 0.0
    load_q: float = 0.0
    gen_p: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


def injections(state: StateVector, y: AdmittanceMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Net (P, Q) injected at every bus, in p.u.

    Evaluated as ``S = V * conj(Y V)``, which expands to the usual
    ``P_i = V_i sum_j V_j (G_ij cos + B_ij sin)`` pair.
    """
    ymat = y.matrix if isinstance(y, AdmittanceMatrix) else np.asarray(y)
    if ymat.shape != (state.vm.size, state.vm.size):
        raise ContractError(f"state has {state.vm.size} buses but Y is {ymat.shape}")
    v = state.complex
    s = v * np.conj(ymat @ v)
    return s.real, s.imag


def _dS_dV(ymat: np.ndarray, v: np.ndarray):
    i = ymat @ v
    vnorm = v / np.abs(v)
    dva = 1j * np.diag(v) @ np.conj(np.diag(i) - ymat * v[None, :])
    dvm = np.diag(v) @ np.conj(ymat * vnorm[None, :]) + np.diag(np.conj(i) * vnorm)
    return dva, dvm


class _Mismatch:
    """Mismatch function and Jacobian over the reduced unknown vector (va[pvpq], vm[pq])."""

    def __init__(self, case: GridCase, ymat: np.ndarray):
        self.ymat = ymat
        self.pv = case.indices(BusKind.PV)
        self.pq = case.indices(BusKind.PQ)
        self.pvpq = np.r_[self.pv, self.pq]
        p, q = case.scheduled_injections()
        self.s_sched = p + 1j * q

    def unpack(self, x, vm0, va0):
        va = va0.copy()
        vm = vm0.copy()
        npvpq = self.pvpq.size
        va[self.pvpq] = x[:npvpq]
        vm[self.pq] = x[npvpq:]
        return vm, va

    def pack(self, vm, va):
        return np.r_[va[self.pvpq], vm[self.pq]]

    def residual(self, vm, va):
        v = vm * np.exp(1j * va)
        mis = v * np.conj(self.ymat @ v) - self.s_sched
        return np.r_[mis.real[self.pvpq], mis.imag[self.pq]]

    def jacobian(self, vm, va):
        v = vm * np.exp(1j * va)
        dva, dvm = _dS_dV(self.ymat, v)
        pvpq, pq = self.pvpq, self.pq
        return np.block([
            [dva.real[np.ix_(pvpq, pvpq)], dvm.real[np.ix_(pvpq, pq)]],
            [dva.imag[np.ix_(pq, pvpq)], dvm.imag[np.ix_(pq, pq)]],
        ])


def flat_start(case: GridCase) -> StateVector:
    vm = np.array([1.0 if b.kind is BusKind.PQ else b.voltage_setpoint for b in case.buses])
    return StateVector(vm, np.zeros(case.n_bus))


def solve_nr(case: GridCase, tol: float = 1e-8, max_iter: int = 20,
             ybus: AdmittanceMatrix | None = None) -> PowerFlowSolution:
    """Solve the AC power flow from a flat start.

    Non-convergence is reported through ``converged=False``; a singular Jacobian
    raises :class:`SingularJacobianError`.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    ymat = (ybus or build_ybus(case)).matrix
    start = flat_start(case)
    vm, va = start.vm.copy(), start.va.copy()
    mm = _Mismatch(case, ymat)
    f = mm.residual(vm, va)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        jac = mm.jacobian(vm, va)
        lu, piv = scipy.linalg.lu_factor(jac, check_finite=False)
        udiag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(udiag)) or udiag.min() <= 1e-14 * max(udiag.max(), 1.0):
            raise SingularJacobianError(it)
        dx = scipy.linalg.lu_solve((lu, piv), -f, check_finite=False)
        vm, va = mm.unpack(mm.pack(vm, va) + dx, vm, va)
        f = mm.residual(vm, va)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm):
            break
    converged = bool(np.isfinite(norm) and norm <= tol)
    return PowerFlowSolution(StateVector(vm, va), it, norm, converged)


def mismatch_jacobian(case: GridCase, state: StateVector):
    """(residual, analytic Jacobian) of the reduced mismatch function at ``state``."""
    mm = _Mismatch(case, build_ybus(case).matrix)
    return mm.residual(state.vm, state.va), mm.jacobian(state.vm, state.va), mm


def apply_operating_point(case: GridCase, overrides: Mapping[int, Override] | list[Override] = ()) -> GridCase:
    """Return a new case with per-bus deltas applied; the input case is not modified."""
    items = list(overrides.values()) if isinstance(overrides, Mapping) else list(overrides)
    if not items:
        return case
    buses = list(case.buses)
    for ov in items:
        if not 1 <= ov.bus <= case.n_bus:
            raise ContractError(f"override references unknown bus {ov.bus}")
        b = buses[ov.bus - 1]
        buses[ov.bus - 1] = dataclasses.replace(
            b,
            load_p=b.load_p + ov.load_p,
            load_q=b.load_q + ov.load_q,
            gen_p=b.gen_p + ov.gen_p,
            shunt_g=b.shunt_g + ov.shunt_g,
            shunt_b=b.shunt_b + ov.shunt_b,
        )
    return case.replace_buses(buses)


def spread_load_change(case: GridCase, delta_mw: float) -> list[Override]:
    """Distribute ``delta_mw`` over all load buses in proportion to their load, at constant power factor."""
    total = case.total_load()
    if total == 0:
        raise ContractError("case has no load to scale")
    out = []
    for b in case.buses:
        if b.load_p != 0:
            share = b.load_p / total
            out.append(Override(b.id, load_p=delta_mw * share, load_q=delta_mw * share * b.load_q / b.load_p))
    return out


def equal_load_change(case: GridCase, delta_mw: float, buses) -> list[Override]:
    """Split ``delta_mw`` equally over ``buses`` as active load."""
    buses = list(buses)
    for bid in buses:
        case.bus(bid)
    return [Override(bid, load_p=delta_mw / len(buses)) for bid in buses]


def set_generation(case: GridCase, bus: int, mw: float) -> list[Override]:
    return [Override(bus, gen_p=mw - case.bus(bus).gen_p)]
