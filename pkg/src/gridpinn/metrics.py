"""Reporting-space error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .nn import MlpModel, forward
from .norm import NormMeta
from .scenarios import PreparedData


@dataclass
class MaeReport:
    """Mean absolute errors in physical units (vm in p.u., va in rad).

    The per-point value averages ``|dvm|`` and ``|dva|`` over the stacked 2N vector;
    the per-bus value averages the bus's two components over all points.
    """

    per_test_point_mae: np.ndarray
    mean_mae: float
    per_bus_mae: np.ndarray
    normalized_mae: float
    attacked_bus: int | None = None
    attacked_bus_mae: float | None = None
    attacked_bus_series: np.ndarray | None = field(default=None, repr=False)
    training_time_s: float | None = None
    inference_time_ms: float | None = None
    inference_time_ms_std: float | None = None


def evaluate(model: MlpModel, test: PreparedData, meta: NormMeta, attacked_bus: int | None = None) -> MaeReport:
    raw = test.raw
    if meta.n_bus != raw.n_bus or model.layer_dims[0] != 2 * raw.n_bus or model.layer_dims[-1] != 2 * raw.n_bus:
        raise ContractError("model, metadata and test set disagree on the bus count")
    if test.x.shape[1] != meta.in_mean.size:
        raise ContractError("test inputs were not prepared with this metadata")
    pred = forward(model, test.x)
    vm, va = meta.invert_targets(pred)
    dvm = np.abs(vm - raw.vm)
    dva = np.abs(va - raw.va)
    per_point = np.hstack([dvm, dva]).mean(axis=1)
    per_bus = 0.5 * (dvm.mean(axis=0) + dva.mean(axis=0))
    report = MaeReport(per_point, float(per_point.mean()), per_bus, float(np.mean(np.abs(pred - test.y))))
    if attacked_bus is not None:
        if not 1 <= attacked_bus <= raw.n_bus:
            raise ContractError(f"attacked bus {attacked_bus} outside the case")
        b = attacked_bus - 1
        report.attacked_bus = attacked_bus
        report.attacked_bus_series = 0.5 * (dvm[:, b] + dva[:, b])
        report.attacked_bus_mae = float(per_bus[b])
    return report
