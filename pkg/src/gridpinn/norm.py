"""Feature/target normalization shared by dataset preprocessing, the loss and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

EPSILON = 1e-8

_ARRAY_KEYS = ("in_mean", "in_std", "in_min", "in_max", "in_degenerate",
               "out_lo", "out_hi", "out_degenerate")


@dataclass(frozen=True)
class NormMeta:
    """Statistics fitted on a training split.

    Inputs (``P_1..P_N, Q_1..Q_N``) are epsilon-replaced, standardized and then
    min-max scaled to [-1, 1]. Targets are ``(vm - 1, va)`` min-max scaled to
    [-1, 1]. Degenerate (constant) input columns map to 0; constant target
    columns keep a unit half-span so the mapping stays invertible.
    """

    n_bus: int
    in_mean: np.ndarray
    in_std: np.ndarray
    in_min: np.ndarray
    in_max: np.ndarray
    in_degenerate: np.ndarray
    out_lo: np.ndarray
    out_hi: np.ndarray
    out_degenerate: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def fit(cls, inputs: np.ndarray, vm: np.ndarray, va: np.ndarray) -> "NormMeta":
        x = replace_zeros(np.asarray(inputs, dtype=float))
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        degenerate = ~(std > 1e-12 * np.abs(mean)) | (std == 0)
        safe_std = np.where(degenerate, 1.0, std)
        z = (x - mean) / safe_std
        zmin, zmax = z.min(axis=0), z.max(axis=0)
        degenerate |= ~(zmax - zmin > 0)
        targets = np.hstack([np.asarray(vm) - 1.0, np.asarray(va)])
        lo, hi = targets.min(axis=0), targets.max(axis=0)
        out_deg = ~(hi - lo > 1e-12)
        return cls(vm.shape[1], mean, std, zmin, zmax, degenerate, lo, hi, out_deg)

    @property
    def half_span(self) -> np.ndarray:
        return np.where(self.out_degenerate, 1.0, 0.5 * (self.out_hi - self.out_lo))

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.out_hi + self.out_lo)

    def transform_inputs(self, inputs: np.ndarray) -> np.ndarray:
        x = replace_zeros(np.asarray(inputs, dtype=float))
        if x.shape[-1] != self.in_mean.size:
            raise ContractError(f"expected {self.in_mean.size} input features, got {x.shape[-1]}")
        std = np.where(self.in_degenerate, 1.0, self.in_std)
        z = (x - self.in_mean) / std
        span = np.where(self.in_degenerate, 1.0, self.in_max - self.in_min)
        out = 2.0 * (z - self.in_min) / span - 1.0
        return np.where(self.in_degenerate, 0.0, out)

    def transform_targets(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        t = np.hstack([np.asarray(vm) - 1.0, np.asarray(va)])
        return (t - self.mid) / self.half_span

    def invert_targets(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normalized outputs -> physical (vm [p.u.], va [rad])."""
        t = self.mid + np.asarray(y) * self.half_span
        n = self.n_bus
        return t[..., :n] + 1.0, t[..., n:]

    def to_text(self) -> str:
        lines = [f"n_bus={self.n_bus}"]
        for key in _ARRAY_KEYS:
            arr = getattr(self, key)
            if arr.dtype == bool:
                lines.append(f"{key}=" + ",".join(str(int(v)) for v in arr))
            else:
                lines.append(f"{key}=" + ",".join(repr(float(v)) for v in arr))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "NormMeta":
        try:
            n_bus = int(kv["n_bus"])
            arrays = {}
            for key in _ARRAY_KEYS:
                vals = kv[key].split(",") if kv[key] else []
                if key.endswith("degenerate"):
                    arrays[key] = np.array([bool(int(v)) for v in vals], dtype=bool)
                else:
                    arrays[key] = np.array([float(v) for v in vals])
        except KeyError as exc:
            raise ContractError(f"normalization metadata missing key {exc.args[0]}") from None
        return cls(n_bus, **arrays)

    def __eq__(self, other):
        if not isinstance(other, NormMeta):
            return NotImplemented
        return self.n_bus == other.n_bus and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in _ARRAY_KEYS)

    __hash__ = None


def replace_zeros(x: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    return np.where(x == 0.0, eps, x)
