"""Composite physics-informed loss: data, injected-current consistency and known constants.

All three terms are evaluated on physical quantities (p.u., rad) after the
network outputs are mapped back through the training normalization. Complex
squared errors are ``|a - b|**2``, i.e. the MSE over stacked real and
imaginary parts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .grid import AdmittanceMatrix, BusKind, GridCase
from .norm import NormMeta


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float
    lambda_p: float
    lambda_c: float

    def __post_init__(self):
        vals = self.as_tuple()
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ContractError(f"loss weights must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-12:
            raise ContractError(f"loss weights must sum to 1, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_d, self.lambda_p, self.lambda_c)

    @property
    def is_data_only(self) -> bool:
        return self.as_tuple() == (1.0, 0.0, 0.0)

    def label(self) -> str:
        return "({:.2f},{:.2f},{:.2f})".format(*self.as_tuple())


DATA_ONLY = LossWeights(1.0, 0.0, 0.0)


@dataclass(frozen=True)
class ConstantEntry:
    bus: int  # 1-based
    quantity: str  # "vm" or "va"
    value: float


@dataclass(frozen=True)
class ConstantsSpec:
    entries: tuple[ConstantEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for e in self.entries:
            if e.quantity not in ("vm", "va"):
                raise ContractError(f"constant quantity must be 'vm' or 'va', got {e.quantity!r}")

    @classmethod
    def from_case(cls, case: GridCase, steady_state: bool = True) -> "ConstantsSpec":
        """Slack magnitude and angle always; PV magnitudes only for steady-state data."""
        slack = case.buses[case.slack_index]
        entries = [ConstantEntry(slack.id, "vm", slack.voltage_setpoint), ConstantEntry(slack.id, "va", 0.0)]
        if steady_state:
            entries += [ConstantEntry(b.id, "vm", b.voltage_setpoint) for b in case.buses if b.kind is BusKind.PV]
        return cls(tuple(entries))

    def validate(self, n_bus: int) -> None:
        for e in self.entries:
            if not 1 <= e.bus <= n_bus:
                raise ContractError(f"constant references unknown bus {e.bus}")


@dataclass(frozen=True)
class PhysicsContext:
    y_op: np.ndarray
    norm_meta: NormMeta | None = None

    @classmethod
    def from_ybus(cls, ybus: AdmittanceMatrix | np.ndarray, norm_meta: NormMeta | None = None,
                  conjugate: bool = True) -> "PhysicsContext":
        y = ybus.matrix if isinstance(ybus, AdmittanceMatrix) else np.asarray(ybus, dtype=complex)
        op = np.conj(y) if conjugate else np.array(y)
        op.setflags(write=False)
        return cls(op, norm_meta)

    @property
    def n_bus(self) -> int:
        return self.y_op.shape[0]


class LossTerms(NamedTuple):
    total: float
    d: float
    p: float
    c: float


def to_complex_voltage(vm, va):
    return np.asarray(vm) * (np.cos(va) + 1j * np.sin(va))


def loss_data(v_est, v_true) -> float:
    v_est, v_true = np.asarray(v_est), np.asarray(v_true)
    if v_est.shape != v_true.shape:
        raise ContractError(f"shape mismatch {v_est.shape} vs {v_true.shape}")
    diff = v_est - v_true
    return float(np.mean(diff.real ** 2 + diff.imag ** 2))


def loss_physics(v_est, v_true, ctx: PhysicsContext) -> float:
    v_est, v_true = np.asarray(v_est), np.asarray(v_true)
    if v_est.shape != v_true.shape or v_est.shape[-1] != ctx.n_bus:
        raise ContractError(f"voltages {v_est.shape}/{v_true.shape} incompatible with {ctx.n_bus}-bus operator")
    i_est = v_est @ ctx.y_op.T
    i_true = v_true @ ctx.y_op.T
    diff = i_est - i_true
    return float(np.mean(diff.real ** 2 + diff.imag ** 2))


def _constant_columns(spec: ConstantsSpec, n_bus: int):
    cols = np.array([e.bus - 1 + (n_bus if e.quantity == "va" else 0) for e in spec.entries], dtype=int)
    vals = np.array([e.value for e in spec.entries], dtype=float)
    return cols, vals


def loss_constants(vm, va, spec: ConstantsSpec) -> float:
    """Mean squared deviation of predicted vm/va from the known constants."""
    if not spec.entries:
        return 0.0
    vm, va = np.atleast_2d(vm), np.atleast_2d(va)
    n = vm.shape[-1]
    spec.validate(n)
    cols, vals = _constant_columns(spec, n)
    pred = np.hstack([vm, va])[:, cols]
    return float(np.mean((pred - vals) ** 2))


def total_loss(targets, outputs, weights: LossWeights, ctx: PhysicsContext,
               spec: ConstantsSpec) -> LossTerms:
    """Weighted loss of normalized ``outputs`` against normalized ``targets``."""
    return CompositeLoss(weights, ctx, spec).value(outputs, targets)


class CompositeLoss:
    """``lambda_d*d + lambda_p*p + lambda_c*c`` with its gradient w.r.t. normalized outputs."""

    def __init__(self, weights: LossWeights, ctx: PhysicsContext, spec: ConstantsSpec = ConstantsSpec()):
        if not isinstance(weights, LossWeights):
            weights = LossWeights(*weights)
        if ctx.norm_meta is None:
            raise ContractError("physics context needs normalization metadata")
        if ctx.norm_meta.n_bus != ctx.n_bus:
            raise ContractError("normalization metadata and admittance operator disagree on bus count")
        spec.validate(ctx.n_bus)
        self.weights = weights
        self.ctx = ctx
        self.spec = spec
        self._cols, self._vals = _constant_columns(spec, ctx.n_bus)
        if weights.lambda_c > 0 and not spec.entries:
            warnings.warn("lambda_c > 0 with an empty constants spec; constants term is 0", stacklevel=2)

    def _physical(self, y):
        vm, va = self.ctx.norm_meta.invert_targets(np.atleast_2d(y))
        return vm, va

    def value(self, outputs, targets) -> LossTerms:
        return self._evaluate(outputs, targets, need_grad=False)[0]

    def value_and_grad(self, outputs, targets) -> tuple[LossTerms, np.ndarray]:
        return self._evaluate(outputs, targets, need_grad=True)

    def _evaluate(self, outputs, targets, need_grad):
        outputs = np.atleast_2d(outputs)
        targets = np.atleast_2d(targets)
        if outputs.shape != targets.shape:
            raise ContractError(f"outputs {outputs.shape} and targets {targets.shape} differ")
        n = self.ctx.n_bus
        vm, va = self._physical(outputs)
        vm_t, va_t = self._physical(targets)
        phase = np.exp(1j * va)
        v_est = vm * phase
        err = v_est - vm_t * np.exp(1j * va_t)
        m = err.size
        d = float(np.sum(err.real ** 2 + err.imag ** 2) / m)
        resid = err @ self.ctx.y_op.T
        p = float(np.sum(resid.real ** 2 + resid.imag ** 2) / m)
        if self._cols.size:
            pred = np.hstack([vm, va])[:, self._cols]
            cdev = pred - self._vals
            c = float(np.sum(cdev ** 2) / cdev.size)
        else:
            c = 0.0
        lam_d, lam_p, lam_c = self.weights.as_tuple()
        terms = LossTerms(lam_d * d + lam_p * p + lam_c * c, d, p, c)
        if not need_grad:
            return terms, None
        # g is the conjugate (Wirtinger) gradient: dL = Re(sum(conj(g) * dV)).
        g = (2.0 / m) * (lam_d * err + lam_p * (resid @ np.conj(self.ctx.y_op)))
        gc = np.conj(g)
        grad_phys = np.hstack([(gc * phase).real, (gc * 1j * v_est).real])
        if self._cols.size and lam_c:
            np.add.at(grad_phys, (slice(None), self._cols), lam_c * 2.0 * cdev / cdev.size)
        return terms, grad_phys * self.ctx.norm_meta.half_span
