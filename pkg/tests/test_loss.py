import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridpinn.errors import ContractError
from gridpinn.grid import build_ybus
from gridpinn.loss import (DATA_ONLY, CompositeLoss, ConstantEntry, ConstantsSpec, LossWeights, PhysicsContext,
                           loss_constants, loss_data, loss_physics, to_complex_voltage, total_loss)

from helpers import central_difference, random_meta, relative_error

Y2 = np.array([[-10j, 10j], [10j, -10j]])


def test_complex_voltage_examples():
    assert to_complex_voltage(1.0, 0.0) == 1 + 0j
    assert to_complex_voltage(1.0, math.pi / 2) == pytest.approx(1j, abs=1e-16)
    assert to_complex_voltage(1.06, -0.1) == pytest.approx(1.06 * np.exp(-0.1j), abs=1e-16)


def test_data_term_examples():
    v = np.array([1 + 0.2j, 0.9 - 0.1j])
    assert loss_data(v, v) == 0.0
    assert loss_data([0.3 + 0.4j], [0j]) == pytest.approx(0.25, abs=1e-16)
    rot = np.exp(0.7j)
    w = np.array([1.1 + 0.1j, 0.95j])
    assert loss_data(v * rot, w * rot) == pytest.approx(loss_data(v, w), rel=1e-14)
    with pytest.raises(ContractError):
        loss_data([1, 2], [1])


def test_physics_term_examples():
    ctx = PhysicsContext.from_ybus(Y2)
    v = np.array([1.0 + 0j, 0.98 - 0.02j])
    assert loss_physics(v, v, ctx) == 0.0
    assert loss_physics(np.array([1.01 + 0j, 1.0]), np.array([1.0 + 0j, 1.0]), ctx) == pytest.approx(0.01, abs=1e-15)
    zero = PhysicsContext.from_ybus(np.zeros((2, 2)))
    assert loss_physics(v, 2 * v, zero) == 0.0
    with pytest.raises(ContractError):
        loss_physics(np.ones(3), np.ones(3), ctx)


def test_conjugated_operator_by_default():
    ctx = PhysicsContext.from_ybus(Y2)
    assert np.array_equal(ctx.y_op, np.conj(Y2))
    assert np.array_equal(PhysicsContext.from_ybus(Y2, conjugate=False).y_op, Y2)


def test_conjugation_choice_does_not_change_value_for_symmetric_y(ieee14, rng):
    y = build_ybus(ieee14).matrix
    e = rng.standard_normal((5, 14)) + 1j * rng.standard_normal((5, 14))
    a = loss_physics(e, np.zeros_like(e), PhysicsContext.from_ybus(y))
    b = loss_physics(np.conj(e), np.zeros_like(e), PhysicsContext.from_ybus(y, conjugate=False))
    assert a == pytest.approx(b, rel=1e-13)


def test_constants_examples():
    spec = ConstantsSpec((ConstantEntry(1, "vm", 1.06),))
    assert loss_constants([[1.06, 1.0]], [[0.0, 0.0]], spec) == 0.0
    assert loss_constants([[1.05, 1.0]], [[0.0, 0.0]], spec) == pytest.approx(1e-4, rel=1e-12)
    assert loss_constants([[1.05, 1.0]], [[0.0, 0.0]], ConstantsSpec()) == 0.0


def test_constants_from_case(ieee14):
    steady = ConstantsSpec.from_case(ieee14, steady_state=True)
    transient = ConstantsSpec.from_case(ieee14, steady_state=False)
    assert {(e.bus, e.quantity) for e in transient.entries} == {(1, "vm"), (1, "va")}
    assert {e.bus for e in steady.entries if e.quantity == "vm"} == {1, 2, 3, 6, 8}


def test_constants_unknown_bus_or_quantity():
    with pytest.raises(ContractError):
        ConstantsSpec((ConstantEntry(1, "p", 0.0),))
    with pytest.raises(ContractError):
        loss_constants([[1.0]], [[0.0]], ConstantsSpec((ConstantEntry(5, "vm", 1.0),)))


@pytest.mark.parametrize("w", [(1.1, -0.1, 0.0), (0.5, 0.5, 0.1), (0.3, 0.3, 0.3)])
def test_weights_off_simplex_rejected(w):
    with pytest.raises(ContractError):
        LossWeights(*w)


def test_empty_constants_with_positive_weight_warns(rng):
    meta = random_meta(2, rng)
    with pytest.warns(UserWarning, match="constants"):
        CompositeLoss(LossWeights(0.5, 0.0, 0.5), PhysicsContext.from_ybus(Y2, meta), ConstantsSpec())


def _setup(n_bus, y, rng, batch=6):
    meta = random_meta(n_bus, rng)
    ctx = PhysicsContext.from_ybus(y, meta)
    spec = ConstantsSpec((ConstantEntry(1, "vm", 1.06), ConstantEntry(1, "va", 0.0),
                          ConstantEntry(n_bus, "vm", 1.01)))
    out = 0.5 * rng.standard_normal((batch, 2 * n_bus))
    tgt = 0.5 * rng.standard_normal((batch, 2 * n_bus))
    return meta, ctx, spec, out, tgt


def test_arithmetic_example(rng):
    meta, ctx, spec, out, tgt = _setup(2, Y2, rng)
    terms = total_loss(tgt, out, LossWeights(0.2, 0.7, 0.1), ctx, spec)
    assert terms.total == pytest.approx(0.2 * terms.d + 0.7 * terms.p + 0.1 * terms.c, rel=1e-15)


def test_data_only_equals_plain_complex_mse(rng, ieee14):
    meta, ctx, spec, out, tgt = _setup(14, build_ybus(ieee14).matrix, rng)
    terms = total_loss(tgt, out, DATA_ONLY, ctx, spec)
    vm, va = meta.invert_targets(out)
    vt, at = meta.invert_targets(tgt)
    assert terms.total == loss_data(to_complex_voltage(vm, va), to_complex_voltage(vt, at))


def test_terms_vanish_at_ground_truth(rng, ieee14):
    meta, ctx, _, _, tgt = _setup(14, build_ybus(ieee14).matrix, rng)
    vm, va = meta.invert_targets(tgt)
    spec = ConstantsSpec((ConstantEntry(3, "vm", float(vm[0, 2])), ConstantEntry(5, "va", float(va[0, 4]))))
    terms = total_loss(tgt[:1], tgt[:1], LossWeights(0.2, 0.5, 0.3), ctx, spec)
    assert terms == (0.0, 0.0, 0.0, 0.0)


def power_iteration_norm(a, iters=500):
    """Largest singular value of ``a`` by power iteration on a^H a."""
    v = np.ones(a.shape[1], dtype=complex)
    for _ in range(iters):
        v = a.conj().T @ (a @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(a @ v))


@pytest.mark.parametrize("batch_seed", range(5))
def test_physics_bounded_by_operator_norm(ieee14, batch_seed):
    y = build_ybus(ieee14).matrix
    ctx = PhysicsContext.from_ybus(y)
    sigma = power_iteration_norm(ctx.y_op)
    assert sigma == pytest.approx(np.linalg.norm(ctx.y_op, 2), rel=1e-6)
    r = np.random.default_rng(batch_seed)
    e = r.standard_normal((8, 14)) + 1j * r.standard_normal((8, 14))
    p = loss_physics(e, np.zeros_like(e), ctx)
    d = loss_data(e, np.zeros_like(e))
    assert p <= sigma ** 2 * d * (1 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(0, 1))
def test_total_is_affine_in_weights(seed, a, b):
    rng = np.random.default_rng(seed)
    meta, ctx, spec, out, tgt = _setup(2, Y2, rng)
    lam_d = a
    lam_p = (1 - a) * b
    lam_c = 1 - lam_d - lam_p
    if lam_c < 0 or abs(lam_d + lam_p + lam_c - 1) > 1e-12:
        return
    w = LossWeights(lam_d, lam_p, lam_c)
    terms = total_loss(tgt, out, w, ctx, spec)
    assert terms.total == lam_d * terms.d + lam_p * terms.p + lam_c * terms.c


@pytest.mark.parametrize("weights", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.2, 0.5, 0.3)])
@pytest.mark.parametrize("which", ["two_bus", "ieee14"])
def test_gradient_matches_central_differences(weights, which, rng, ieee14):
    y = Y2 if which == "two_bus" else build_ybus(ieee14).matrix
    n = y.shape[0]
    meta, ctx, spec, out, tgt = _setup(n, y, rng, batch=3)
    loss = CompositeLoss(LossWeights(*weights), ctx, spec)
    _, grad = loss.value_and_grad(out, tgt)
    fd = central_difference(lambda o: loss.value(o, tgt).total, out)
    assert relative_error(grad, fd) < 1e-6


def test_unconjugated_gradient_also_correct(rng):
    meta, _, spec, out, tgt = _setup(2, Y2, rng, batch=3)
    y = np.array([[1 - 10j, -1 + 10j], [-1 + 10j, 1.2 - 9j]])
    loss = CompositeLoss(LossWeights(0.3, 0.7, 0.0), PhysicsContext.from_ybus(y, meta, conjugate=False), spec)
    _, grad = loss.value_and_grad(out, tgt)
    fd = central_difference(lambda o: loss.value(o, tgt).total, out)
    assert relative_error(grad, fd) < 1e-6


def test_shape_mismatch(rng):
    meta, ctx, spec, out, tgt = _setup(2, Y2, rng)
    with pytest.raises(ContractError):
        CompositeLoss(DATA_ONLY, ctx, spec).value(out, tgt[:, :3])


def test_meta_required():
    with pytest.raises(ContractError):
        CompositeLoss(DATA_ONLY, PhysicsContext.from_ybus(Y2))
