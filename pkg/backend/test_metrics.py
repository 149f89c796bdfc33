#!/usr/bin/env python3
"""
Tests for the evaluation metrics.
This script tests:
1. Isotropic rotation and translation errors
2. Clean l2 distance (mean and sum)
3. Chamfer and modified Chamfer distances
"""

import math

import numpy as np
import pytest

from services.cloud_service import PerturbationConfig, make_pair, synth_shape
from services.geometry_service import RigidTransform, basis_rotation
from services.metrics_service import (
    chamfer,
    clean_l2,
    evaluate,
    modified_chamfer,
    rot_error_iso,
    trans_error,
)
from services.sampling_service import TransformSampleConfig, make_rng


def clean_pair(seed=0, protocol="clean"):
    shape = synth_shape("box", 1024, make_rng(seed))
    pcfg = PerturbationConfig.for_protocol(protocol, n_points=256, seed=seed)
    return make_pair(shape, TransformSampleConfig(seed=seed), pcfg, make_rng(seed))


def test_exact_estimate_scores_zero():
    pair = clean_pair()
    report = evaluate(pair, pair.gt)
    assert report.rot_err_deg < 1e-6
    assert report.trans_err < 1e-12
    assert report.clean_l2 < 1e-12
    assert report.mcd < 1e-12
    print("✅ Ground-truth estimate scores zero")


def test_rotation_and_translation_errors():
    assert rot_error_iso(basis_rotation(2, math.radians(10.0)), np.eye(3)) == pytest.approx(10.0)
    assert rot_error_iso(np.eye(3), basis_rotation(0, math.radians(25.0))) == pytest.approx(25.0)
    assert trans_error([0.1, 0.0, 0.0], [0.0, 0.0, 0.0]) == pytest.approx(0.1)
    print("✅ Rotation error in degrees, translation error in units")


def test_clean_l2_of_translation_offset():
    pair = clean_pair(1)
    offset = RigidTransform(pair.gt.rotation, pair.gt.translation + np.array([0.0, 0.2, 0.0]))
    assert clean_l2(pair, offset) == pytest.approx(0.2)
    assert clean_l2(pair, offset, reduction="sum") == pytest.approx(0.2 * pair.clean_source.count)
    print("✅ Clean l2 measures the per-point offset")


def test_chamfer_small_example():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    # a→b: 1; b→a: (1 + 9) / 2
    assert chamfer(a, b) == pytest.approx(6.0)
    assert chamfer(b, a) == pytest.approx(6.0)
    print("✅ Chamfer averages each direction")


def test_modified_chamfer_on_noisy_pair():
    pair = clean_pair(2, "noisy")
    at_gt = modified_chamfer(pair, pair.gt)
    off = RigidTransform(pair.gt.rotation, pair.gt.translation + np.array([0.3, 0.0, 0.0]))
    assert modified_chamfer(pair, off) > at_gt
    assert modified_chamfer(pair, off, plain=True) > modified_chamfer(pair, pair.gt, plain=True)
    print("✅ Modified and plain Chamfer both grow with misalignment")


def test_modified_chamfer_grows_with_misalignment():
    pair = clean_pair(3, "partial")
    at_gt = modified_chamfer(pair, pair.gt)
    off = RigidTransform(pair.gt.rotation @ basis_rotation(1, math.radians(20.0)), pair.gt.translation)
    assert modified_chamfer(pair, off) > at_gt
    print("✅ Modified Chamfer grows away from the ground truth")


if __name__ == "__main__":
    print("🧪 Testing metrics")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
