import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slacast.slaloss import (
    EmptyInput,
    LossKind,
    LossSpec,
    SlaTarget,
    loss_grad,
    loss_value,
    overprovisioning_volume,
    sla_based_loss,
    sla_violation_rate,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
weights = st.floats(min_value=1.0, max_value=200.0)
error_lists = st.lists(finite, min_size=1, max_size=60)


def ref_wmae(e: float, w: float) -> float:
    # plain-python reference, one error at a time
    return w * -e if e < 0 else e


def test_wmae_branches():
    assert loss_value(LossSpec.wmae(3), -2.0) == 6.0
    for w in (1, 2.5, 40):
        assert loss_value(LossSpec.wmae(w), 2.0) == 2.0


def test_wmae_w1_is_mae():
    e = np.random.default_rng(0).normal(size=1000)
    np.testing.assert_array_equal(loss_value(LossSpec.wmae(1), e), loss_value(LossSpec(LossKind.MAE), e))


def test_grad_examples():
    assert loss_grad(LossSpec.wmae(5), -0.1) == -5.0
    assert loss_grad(LossSpec.wmae(5), 0.1) == 1.0
    assert loss_grad(LossSpec.wmae(5), 0.0) == 0.0
    assert loss_grad(LossSpec(LossKind.MSE), 3.0) == 6.0


def test_violation_rate_examples():
    assert sla_violation_rate([-1, 1, 1, 1]) == 0.25
    assert sla_violation_rate([0.5, 2.0]) == 0.0
    assert sla_violation_rate([0, 0]) == 0.0


def test_overprovisioning_examples():
    assert overprovisioning_volume([2, 4, -1]) == 3.0
    assert overprovisioning_volume([-2, -4]) == 0.0
    assert overprovisioning_volume([5]) == 5.0


def test_sla_loss_examples():
    assert sla_based_loss([-1, 1], 3) == 2.0
    assert sla_based_loss([0, 0, 0], 7) == 0.0
    e = [-3.0, 1.0, 0.5]
    assert sla_based_loss(e, 1) == pytest.approx(np.mean(np.abs(e)), abs=0)


def test_empty_inputs_raise():
    for fn in (sla_violation_rate, overprovisioning_volume):
        with pytest.raises(EmptyInput):
            fn([])
    with pytest.raises(EmptyInput):
        sla_based_loss([], 2)


def test_spec_validation():
    with pytest.raises(ValueError):
        LossSpec.wmae(0.5)
    with pytest.raises(ValueError):
        LossSpec(LossKind.HUBER, delta=0)
    with pytest.raises(ValueError):
        SlaTarget(0.5)
    with pytest.raises(ValueError):
        SlaTarget(0.0)
    assert SlaTarget(0.05).rate == 0.05
    assert LossSpec.wmae(8).name == "wmae(w=8)"


def test_huber_and_logcosh_values():
    h = LossSpec(LossKind.HUBER, delta=1.0)
    assert loss_value(h, 0.5) == 0.125
    assert loss_value(h, 3.0) == 2.5
    lc = LossSpec(LossKind.LOGCOSH)
    assert loss_value(lc, 0.7) == pytest.approx(math.log(math.cosh(0.7)), rel=1e-12)
    # stays finite where cosh overflows
    assert np.isfinite(loss_value(lc, 1e4))


@given(error_lists, weights)
def test_wmae_matches_reference(errors, w):
    got = loss_value(LossSpec.wmae(w), np.array(errors))
    want = [ref_wmae(e, w) for e in errors]
    np.testing.assert_allclose(got, want, rtol=1e-15, atol=0)


@given(finite, weights)
def test_wmae_is_scaled_mae(e, w):
    mae = float(loss_value(LossSpec(LossKind.MAE), e))
    got = float(loss_value(LossSpec.wmae(w), e))
    if e < 0:
        assert got == pytest.approx(w * mae, rel=1e-15)
    else:
        assert got == mae


@given(error_lists, weights, weights)
def test_sla_loss_monotone_in_w(errors, w1, w2):
    errors = errors + [-1.0]
    lo, hi = sorted((w1, w2))
    assert sla_based_loss(errors, lo) <= sla_based_loss(errors, hi)


@given(error_lists)
def test_metric_ranges(errors):
    assert 0.0 <= sla_violation_rate(errors) <= 1.0
    assert overprovisioning_volume(errors) >= 0.0


@settings(max_examples=60)
@given(st.sampled_from(list(LossKind)), st.floats(min_value=-20, max_value=20), weights)
def test_grad_matches_central_difference(kind, e, w):
    spec = LossSpec(kind, weight=w if kind is LossKind.WMAE else 1.0)
    h = 1e-4
    # keep clear of the kinks (0 for the absolute losses, +-delta for huber)
    if abs(e) < 1e-3 or abs(abs(e) - spec.delta) < 1e-3:
        return
    num = (float(loss_value(spec, e + h)) - float(loss_value(spec, e - h))) / (2 * h)
    ana = float(loss_grad(spec, e))
    assert abs(num - ana) <= 1e-8 * max(1.0, abs(ana))
