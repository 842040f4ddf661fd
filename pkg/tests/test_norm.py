import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gridpinn.errors import ContractError
from gridpinn.io import parse_kv
from gridpinn.norm import EPSILON, NormMeta, replace_zeros


def test_zero_inputs_replaced_by_epsilon():
    out = replace_zeros(np.array([0.0, 1.0, -0.0, 2.5]))
    assert out.tolist() == [EPSILON, 1.0, EPSILON, 2.5]


def test_inputs_scaled_to_unit_interval_on_training_data(rng):
    x = rng.standard_normal((40, 6)) * [1, 10, 100, 0.1, 5, 3]
    meta = NormMeta.fit(x, 1 + 0.01 * rng.standard_normal((40, 3)), rng.standard_normal((40, 3)))
    z = meta.transform_inputs(x)
    assert np.allclose(z.min(axis=0), -1) and np.allclose(z.max(axis=0), 1)


def test_constant_input_column_maps_to_zero(rng):
    x = rng.standard_normal((30, 4))
    x[:, 2] = 0.0
    meta = NormMeta.fit(x, np.ones((30, 2)) + rng.random((30, 2)) * 0.01, rng.random((30, 2)))
    assert meta.in_degenerate.tolist() == [False, False, True, False]
    assert np.all(meta.transform_inputs(x)[:, 2] == 0)


def test_constant_target_round_trips(rng):
    vm = 1 + 0.01 * rng.random((20, 3))
    vm[:, 0] = 1.06
    va = rng.random((20, 3))
    va[:, 0] = 0.0
    meta = NormMeta.fit(rng.standard_normal((20, 6)), vm, va)
    assert meta.out_degenerate[0] and meta.out_degenerate[3]
    y = meta.transform_targets(vm, va)
    assert np.all(y[:, 0] == 0) and np.all(y[:, 3] == 0)
    vm2, va2 = meta.invert_targets(y)
    np.testing.assert_allclose(vm2, vm, atol=1e-15)
    np.testing.assert_allclose(va2, va, atol=1e-15)


def test_targets_span_unit_interval(rng):
    vm = 1 + 0.05 * rng.random((25, 4))
    va = rng.random((25, 4))
    meta = NormMeta.fit(rng.standard_normal((25, 8)), vm, va)
    y = meta.transform_targets(vm, va)
    assert np.allclose(y.min(axis=0), -1) and np.allclose(y.max(axis=0), 1)


def test_text_round_trip_is_exact(rng):
    meta = NormMeta.fit(rng.standard_normal((10, 4)), 1 + rng.random((10, 2)), rng.random((10, 2)))
    back = NormMeta.from_mapping(parse_kv(meta.to_text()))
    assert back == meta


def test_missing_key_is_contract_error():
    with pytest.raises(ContractError, match="in_mean"):
        NormMeta.from_mapping({"n_bus": "2"})


def test_wrong_feature_count(rng):
    meta = NormMeta.fit(rng.standard_normal((10, 4)), 1 + rng.random((10, 2)), rng.random((10, 2)))
    with pytest.raises(ContractError):
        meta.transform_inputs(np.zeros((3, 5)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 6), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (12, 3), elements=st.floats(0.8, 1.2)),
       arrays(np.float64, (12, 3), elements=st.floats(-1, 1)))
def test_target_transform_is_invertible(x, vm, va):
    meta = NormMeta.fit(x, vm, va)
    vm2, va2 = meta.invert_targets(meta.transform_targets(vm, va))
    np.testing.assert_allclose(vm2, vm, atol=1e-12)
    np.testing.assert_allclose(va2, va, atol=1e-12)
    z = meta.transform_inputs(x)
    assert np.all(np.isfinite(z)) and np.all(np.abs(z) <= 1 + 1e-9)
