#!/usr/bin/env python3
"""
Tests for the action set, decoupled application and reward oracles.
This script tests:
1. Canonical 24-action ordering
2. Decoupled rotation / translation application
3. SE(3) oracle rewards and their independence from the other component
4. Point-based oracles and per-group normalization
"""

import math

import numpy as np
import pytest

from exceptions import ValidationError
from services.action_service import (
    AccumulatedTransform,
    ActionSet,
    ActionSpec,
    PointOracleRewards,
    ResidualState,
    Se3OracleRewards,
    action_about_centroid,
    advance_residual,
    apply_action,
    default_action_set,
    normalize_rewards_per_group,
    oracle_reward_points,
    oracle_reward_se3,
    residual,
    reward_vector_se3,
    training_target,
)
from services.cloud_service import CloudPair, PointCloud
from services.geometry_service import RigidTransform, basis_rotation
from services.metrics_service import clean_l2
from services.sampling_service import make_rng, sample_rotation_haar, sample_translation

ACTIONS = default_action_set()


def random_state(rng):
    return ResidualState(sample_rotation_haar(math.pi, rng), sample_translation(0.5, rng))


def test_action_set_layout():
    assert len(ACTIONS) == 24
    assert [a.kind for a in ACTIONS] == ["rotation"] * 12 + ["translation"] * 12
    assert len(ACTIONS.indices("large")) == 12 and len(ACTIONS.indices("small")) == 12
    first = ACTIONS[0]
    assert (first.axis, first.sign, first.size_class) == ("x", 1, "small")
    assert first.magnitude == pytest.approx(math.radians(0.5))
    assert ACTIONS[23].magnitude == 0.1 and ACTIONS[23].sign == -1
    assert [len(g) for g in ACTIONS.groups()] == [6, 6, 6, 6]
    assert [len(g) for g in ACTIONS.groups("by_size_class")] == [12, 12]
    print("✅ 24 actions in canonical order")


def test_action_set_record():
    back = ActionSet.from_dict(ACTIONS.to_dict())
    assert [a.name for a in back] == [a.name for a in ACTIONS]
    print("✅ Action set record keeps the ordering")


def test_invalid_actions_rejected():
    with pytest.raises(ValidationError):
        ActionSpec("rotation", "x", 1, 0.0, "small")
    with pytest.raises(ValidationError):
        ActionSpec("translation", "y", 2, 0.1, "large")
    with pytest.raises(ValidationError):
        ActionSpec("translation", "y", 1, 0.1, "small")
    print("✅ Invalid actions rejected")


def test_rotation_actions_never_touch_translation():
    acc = AccumulatedTransform(np.eye(3), np.array([0.12345678901234, -0.3, 0.7]))
    before = acc.translation_acc.copy()
    rng = make_rng(2)
    for index in rng.integers(0, 12, size=200):
        acc = apply_action(acc, ACTIONS[int(index)])
    assert np.array_equal(acc.translation_acc, before)
    print("✅ Rotation actions leave the translation bit-identical")


def test_translation_actions_never_touch_rotation():
    rotation = basis_rotation(1, 0.4)
    acc = AccumulatedTransform(rotation, np.zeros(3))
    for index in range(12, 24):
        acc = apply_action(acc, ACTIONS[index])
    assert np.array_equal(acc.rotation_acc, rotation)
    assert np.allclose(acc.translation_acc, 0.0, atol=1e-15)
    print("✅ Translation actions leave the rotation bit-identical")


def test_advance_residual_matches_recomputation():
    rng = make_rng(3)
    gt = RigidTransform(sample_rotation_haar(math.pi, rng), sample_translation(0.5, rng))
    acc = AccumulatedTransform.identity()
    state = residual(gt, acc)
    for index in rng.integers(0, 24, size=30):
        action = ACTIONS[int(index)]
        acc = apply_action(acc, action)
        state = advance_residual(action, state)
        fresh = residual(gt, acc)
        assert np.allclose(state.rotation_residual, fresh.rotation_residual, atol=1e-12)
        assert np.allclose(state.translation_residual, fresh.translation_residual, atol=1e-12)
    print("✅ Residual bookkeeping matches recomputation")


def test_se3_oracle_examples():
    rz10 = basis_rotation(2, math.radians(10.0))
    state = ResidualState(rz10, np.zeros(3))
    plus_z = ActionSpec("rotation", "z", 1, math.radians(10.0), "large")
    assert oracle_reward_se3(plus_z, state) == pytest.approx(0.174533, abs=1e-6)
    assert oracle_reward_se3(plus_z.negated(), state) == pytest.approx(-0.174533, abs=1e-6)

    state = ResidualState(np.eye(3), np.array([0.1, 0.0, 0.0]))
    plus_x = ActionSpec("translation", "x", 1, 0.1, "large")
    assert oracle_reward_se3(plus_x, state) == pytest.approx(0.1, abs=1e-15)
    print("✅ SE(3) oracle examples")


def test_identity_residual_rewards():
    v = reward_vector_se3(ResidualState(np.eye(3), np.zeros(3)))
    expected = -np.array([a.magnitude for a in ACTIONS])
    assert np.allclose(v, expected, atol=1e-12)
    print("✅ Every move hurts at the identity residual")


def test_oracle_decoupling():
    rng = make_rng(4)
    for _ in range(420):
        state = random_state(rng)
        moved_t = ResidualState(state.rotation_residual, sample_translation(0.5, rng))
        moved_r = ResidualState(sample_rotation_haar(math.pi, rng), state.translation_residual)
        for index, action in enumerate(ACTIONS):
            r = oracle_reward_se3(action, state)
            if index < 12:
                assert r == oracle_reward_se3(action, moved_t)
            else:
                assert r == oracle_reward_se3(action, moved_r)
    print("✅ Each reward depends only on the component it moves")


def test_negated_pairs_never_both_help():
    rng = make_rng(5)
    for _ in range(500):
        state = ResidualState(sample_rotation_haar(math.radians(150.0), rng), sample_translation(0.5, rng))
        for action in ACTIONS:
            if action.sign > 0:
                assert oracle_reward_se3(action, state) + oracle_reward_se3(action.negated(), state) <= 1e-12
    print("✅ r+ + r- <= 0 for every pair")


def test_greedy_step_reduces_distance():
    rng = make_rng(6)
    for _ in range(200):
        state = random_state(rng)
        v = reward_vector_se3(state)
        best = int(np.argmax(v))
        if v[best] > 0:
            after = advance_residual(ACTIONS[best], state)
            assert after.distance_to_identity() <= state.distance_to_identity() + 1e-12
    print("✅ Positive argmax action never increases the residual")


def toy_pair():
    points = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -1.0, 0.0]])
    gt = RigidTransform(np.eye(3), [0.3, 0.0, 0.0])
    cloud = PointCloud(points)
    return CloudPair(source=cloud, target=PointCloud(gt.apply(points)), clean_source=cloud, gt=gt)


def test_point_oracle_matches_direct_recomputation():
    pair = toy_pair()
    acc = AccumulatedTransform.identity()
    plus_x = ActionSpec("translation", "x", 1, 0.1, "large")
    before = clean_l2(pair, acc.as_transform())
    after = clean_l2(pair, RigidTransform(np.eye(3), [0.1, 0.0, 0.0]))
    assert oracle_reward_points(plus_x, pair, acc, "l2_clean") == pytest.approx(before - after)
    assert oracle_reward_points(plus_x, pair, acc, "l2_clean") == pytest.approx(0.1)
    print("✅ Point oracle equals direct recomputation")


def test_point_rotation_about_centroid_keeps_centroid():
    pair = toy_pair()
    acc = AccumulatedTransform(basis_rotation(0, 0.2), np.array([0.05, -0.1, 0.2]))
    centroid = acc.as_transform().apply(pair.source.points).mean(axis=0)
    after = action_about_centroid(acc, ACTIONS[1], centroid)
    moved = after.apply(pair.source.points).mean(axis=0)
    assert np.allclose(moved, centroid, atol=1e-12)
    print("✅ Point-oracle rotations pivot on the current centroid")


def test_reward_sources():
    pair = toy_pair()
    acc = AccumulatedTransform.identity()
    se3 = Se3OracleRewards().rewards(pair, acc)
    l2 = PointOracleRewards("l2_clean").rewards(pair, acc)
    mcd = PointOracleRewards("mcd").rewards(pair, acc)
    assert se3.shape == l2.shape == mcd.shape == (24,)
    assert int(np.argmax(se3)) == 13 and int(np.argmax(l2)) == 13
    assert PointOracleRewards("mcd").name == "oracle_mcd"
    print("✅ Oracle reward sources agree on the obvious move")


def test_group_normalization():
    groups = ACTIONS.groups()
    rng = make_rng(7)
    raw = reward_vector_se3(random_state(rng))
    normalized = normalize_rewards_per_group(raw)
    for group in groups:
        assert np.argmax(raw[group]) == np.argmax(normalized[group])
        assert np.array_equal(np.sign(raw[group]), np.sign(normalized[group]))
    again = normalize_rewards_per_group(normalized)
    assert np.allclose(again, normalized, atol=1e-15)
    with pytest.raises(ValidationError):
        normalize_rewards_per_group(np.zeros(5))
    print("✅ Per-group normalization")


def test_group_normalization_example():
    v = np.zeros(24)
    group = ACTIONS.groups()[0]
    v[group] = [0.3, -0.3, 0.0, 0.0, 0.0, 0.0]
    out = normalize_rewards_per_group(v)
    assert np.allclose(out[group], [0.70711, -0.70711, 0, 0, 0, 0], atol=1e-5)
    assert np.array_equal(out[ACTIONS.groups()[1]], np.zeros(6))
    print("✅ (0.3, -0.3, 0...) normalizes to (0.70711, -0.70711, 0...)")


def test_training_target_is_normalized():
    gt = RigidTransform(basis_rotation(2, 0.3), [0.2, -0.1, 0.05])
    target = training_target(gt)
    for group in ACTIONS.groups():
        assert np.linalg.norm(target[group]) == pytest.approx(1.0)
    print("✅ Training targets have unit-norm groups")


if __name__ == "__main__":
    print("🧪 Testing actions and oracles")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
