#!/usr/bin/env python3
"""
Tests for rotation and rigid-transform arithmetic.
This script tests:
1. Axis-angle construction and extraction
2. Composition and inversion
3. Rotation / translation / transform distances and the metric axioms
4. Rotation validation and re-orthonormalization
"""

import math

import numpy as np
import pytest

from exceptions import ValidationError
from services.geometry_service import (
    AxisAngle,
    RigidTransform,
    as_rotation,
    compose,
    inverse,
    maybe_orthonormalize,
    orthonormality_residual,
    rotation_distance,
    rotation_from_axis_angle,
    rotation_to_axis_angle,
    transform_distance,
    translation_distance,
)
from services.sampling_service import make_rng, sample_rotation_haar, sample_translation

X = np.array([1.0, 0.0, 0.0])
Z = np.array([0.0, 0.0, 1.0])


def rz(deg):
    return rotation_from_axis_angle(AxisAngle(Z, math.radians(deg)))


def random_transform(rng):
    return RigidTransform(sample_rotation_haar(math.pi, rng), sample_translation(1.0, rng))


def test_quarter_turn_about_z():
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(rz(90), expected, atol=1e-15)
    print("✅ Quarter turn about z")


def test_zero_angle_is_identity():
    axis = np.array([1.0, 2.0, 2.0]) / 3.0
    assert np.array_equal(rotation_from_axis_angle(AxisAngle(axis, 0.0)), np.eye(3))
    print("✅ Zero angle gives identity")


def test_rotations_about_one_axis_add():
    r30 = rotation_from_axis_angle(AxisAngle(X, math.radians(30)))
    r60 = rotation_from_axis_angle(AxisAngle(X, math.radians(60)))
    assert np.allclose(r30 @ r30, r60, atol=1e-12)
    print("✅ 30° + 30° about x equals 60°")


def test_non_unit_axis_rejected():
    with pytest.raises(ValidationError):
        AxisAngle(np.array([1.0, 1.0, 0.0]), 0.3)
    with pytest.raises(ValidationError):
        AxisAngle(X, -0.1)
    print("✅ Non-unit axis and negative angle rejected")


def test_axis_angle_round_trip_away_from_pi():
    rng = make_rng(7)
    for _ in range(200):
        rotation = sample_rotation_haar(math.radians(170), rng)
        back = rotation_from_axis_angle(rotation_to_axis_angle(rotation))
        assert np.allclose(back, rotation, atol=1e-9)
    print("✅ Axis-angle extraction inverts Rodrigues")


def test_axis_angle_at_pi_recovers_rotation():
    axis = np.array([0.0, 0.6, 0.8])
    rotation = rotation_from_axis_angle(AxisAngle(axis, math.pi))
    aa = rotation_to_axis_angle(rotation)
    assert aa.angle == pytest.approx(math.pi, abs=1e-9)
    assert abs(abs(float(aa.axis @ axis)) - 1.0) < 1e-9
    print("✅ Axis recovered up to sign at pi")


def test_compose_with_identity_and_inverse():
    rng = make_rng(1)
    t = random_transform(rng)
    same = compose(t, RigidTransform.identity())
    assert np.allclose(same.rotation, t.rotation) and np.allclose(same.translation, t.translation)
    back = compose(t, inverse(t))
    assert transform_distance(back, RigidTransform.identity()) < 1e-9
    print("✅ compose with identity and inverse")


def test_compose_applies_second_argument_first():
    a = RigidTransform(rz(90), [1.0, 0.0, 0.0])
    b = RigidTransform(np.eye(3), [0.0, 1.0, 0.0])
    c = compose(a, b)
    assert np.allclose(c.rotation, rz(90))
    assert np.allclose(c.translation, [0.0, 0.0, 0.0], atol=1e-15)
    points = np.array([[0.3, -0.2, 0.5], [1.0, 2.0, 3.0]])
    assert np.allclose(c.apply(points), a.apply(b.apply(points)))
    print("✅ compose(a, b) applies b first")


def test_inverse_of_pure_translation():
    inv = inverse(RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
    assert np.allclose(inv.translation, [-1.0, -2.0, -3.0])
    assert np.array_equal(inverse(RigidTransform.identity()).rotation, np.eye(3))
    print("✅ Inverse of a translation")


def test_compose_is_associative():
    rng = make_rng(3)
    for _ in range(100):
        a, b, c = (random_transform(rng) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        assert transform_distance(left, right) < 1e-9
    print("✅ compose is associative")


def test_rotation_distance_examples():
    r = rz(47)
    assert rotation_distance(r, r) < 1e-12
    assert rotation_distance(rz(30), np.eye(3)) == pytest.approx(0.5235987756, abs=1e-9)
    print("✅ Rotation distance examples")


def test_rotation_distance_is_a_metric():
    rng = make_rng(1234)
    for _ in range(1000):
        a, b, c = (sample_rotation_haar(math.pi, rng) for _ in range(3))
        dab = rotation_distance(a, b)
        assert 0.0 <= dab <= math.pi
        assert abs(dab - rotation_distance(b, a)) < 1e-9
        assert rotation_distance(a, c) <= dab + rotation_distance(b, c) + 1e-9
        assert dab == pytest.approx(rotation_to_axis_angle(a @ b.T).angle, abs=1e-9)
    print("✅ Rotation distance satisfies the metric axioms")


def test_translation_distance():
    v = np.array([0.1, -0.4, 2.0])
    assert translation_distance(v, v) == 0.0
    assert translation_distance([0, 0, 0], [3, 4, 0]) == pytest.approx(5.0)
    assert translation_distance(-2.0 * v, 2.0 * v) == pytest.approx(2.0 * translation_distance(-v, v))
    print("✅ Translation distance")


def test_transform_distance_adds_terms():
    t = RigidTransform(rz(10), [0.1, 0.0, 0.0])
    assert transform_distance(t, RigidTransform.identity()) == pytest.approx(0.274533, abs=1e-6)
    rng = make_rng(5)
    a, b = random_transform(rng), random_transform(rng)
    assert abs(transform_distance(a, b) - transform_distance(b, a)) < 1e-12
    print("✅ Transform distance is D_t + D_R")


def test_rotation_validation():
    with pytest.raises(ValidationError):
        as_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValidationError):
        as_rotation(np.eye(3) * 1.01)
    with pytest.raises(ValidationError):
        RigidTransform(np.eye(3), [0.0, np.nan, 0.0])
    assert as_rotation(np.eye(3).reshape(-1)).shape == (3, 3)
    print("✅ Invalid rotations rejected")


def test_drift_is_repaired():
    drifted = rz(20) + 1e-7
    repaired = maybe_orthonormalize(drifted)
    assert orthonormality_residual(repaired) < 1e-12
    assert np.linalg.det(repaired) == pytest.approx(1.0)
    untouched = rz(20)
    assert maybe_orthonormalize(untouched) is untouched
    print("✅ Drift re-orthonormalized only when needed")


def test_transform_record_round_trip():
    rng = make_rng(11)
    t = random_transform(rng)
    back = RigidTransform.from_dict(t.to_dict())
    assert np.array_equal(back.rotation, t.rotation) and np.array_equal(back.translation, t.translation)
    print("✅ Transform record preserves values")


if __name__ == "__main__":
    print("🧪 Testing geometry")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
