import numpy as np
import pytest

from safeadapt.barriers import (
    AffineBarrier,
    AngularBandHazard,
    CircleHazard,
    SafeSetSpec,
    barrier_value,
    check_safe,
)


def test_barrier_value_angle_criterion():
    b = AffineBarrier(np.array([-1.0, 0.0]), np.pi / 4)
    assert barrier_value(b, np.array([0.0, 0.37])) == pytest.approx(np.pi / 4)


def test_value_zero_on_hyperplane():
    b = AffineBarrier(np.array([2.0, -1.0]), -1.0)
    x = np.array([1.0, 1.0])  # 2 - 1 - 1 = 0
    assert barrier_value(b, x) == pytest.approx(0.0)


def test_scaling_is_linear():
    rng = np.random.default_rng(0)
    p = rng.normal(size=3)
    q = 0.7
    x = rng.normal(size=3)
    b = AffineBarrier(p, q)
    for c in (0.5, 2.0, 17.0):
        scaled = AffineBarrier(c * p, c * q)
        assert barrier_value(scaled, x) == pytest.approx(c * barrier_value(b, x))


def test_normalized_has_unit_max_norm():
    b = AffineBarrier(np.array([-4.0, 2.0]), 1.0).normalized()
    assert np.max(np.abs(b.p)) == pytest.approx(1.0)
    assert b.q == pytest.approx(0.25)


def test_invalid_barriers_rejected():
    with pytest.raises(ValueError):
        AffineBarrier(np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        AffineBarrier(np.ones(2), 1.0, eta=0.0)
    with pytest.raises(ValueError):
        AffineBarrier(np.ones(2), 1.0, eta=1.5)


def test_band_hazard_sign_structure():
    band = AngularBandHazard(0.1, 0.5)
    assert band.value(np.array([0.0, 0.0])) > 0
    assert band.value(np.array([0.3, 0.0])) < 0
    assert band.value(np.array([0.6, 0.0])) > 0
    # boundary itself is safe (closed complement)
    assert band.value(np.array([0.5, 0.0])) == pytest.approx(0.0)


def test_circle_hazard_distance():
    circ = CircleHazard((1.0, 0.0), 0.5)
    assert circ.value(np.array([2.0, 0.0, 0.0, 0.0])) == pytest.approx(0.5)
    assert circ.value(np.array([1.0, 0.1, 0.0, 0.0])) < 0


def test_safe_set_min_over_barriers():
    spec = SafeSetSpec(
        barriers=[
            AffineBarrier(np.array([1.0, 0.0]), 1.0),
            AffineBarrier(np.array([-1.0, 0.0]), 1.0),
        ]
    )
    safe, h = check_safe(spec, np.array([0.5, 0.0]))
    assert safe and h == pytest.approx(0.5)
    batch = np.array([[0.0, 0.0], [2.0, 0.0]])
    safe_b, h_b = check_safe(spec, batch)
    assert safe_b.tolist() == [True, False]
    assert h_b[1] == pytest.approx(-1.0)
