#!/usr/bin/env python3
"""
Tests for point clouds and the perturbation protocols.
This script tests:
1. Normalization, subsampling, noise and plane cropping
2. Clean / noisy / partial pair construction
3. xyz / ply / OFF reading and writing with line-numbered errors
4. Analytic shapes
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from exceptions import DataFormatError, ValidationError
from services.cloud_service import (
    CloudService,
    PerturbationConfig,
    PointCloud,
    add_noise,
    crop_plane,
    make_pair,
    normalize_unit_sphere,
    subsample,
    synth_shape,
)
from services.sampling_service import TransformSampleConfig, make_rng


def sphere(n=2048, seed=0):
    return synth_shape("sphere", n, make_rng(seed))


def test_point_cloud_rejects_bad_arrays():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))
    print("✅ Bad point arrays rejected")


def test_normalize_unit_sphere():
    cloud = PointCloud(np.array([[1.0, 1.0, 1.0], [3.0, 1.0, 1.0], [2.0, 2.0, 1.0]]))
    normalized = normalize_unit_sphere(cloud)
    assert np.allclose(normalized.centroid(), 0.0)
    assert np.max(np.linalg.norm(normalized.points, axis=1)) == pytest.approx(1.0)
    single = normalize_unit_sphere(PointCloud(np.array([[5.0, 5.0, 5.0]])))
    assert np.array_equal(single.points, np.zeros((1, 3)))
    print("✅ Normalization to the unit sphere")


def test_subsample_without_replacement():
    cloud = PointCloud(np.arange(30, dtype=float).reshape(10, 3))
    sample = subsample(cloud, 10, make_rng(1))
    assert sorted(map(tuple, sample.points)) == sorted(map(tuple, cloud.points))
    with pytest.raises(ValidationError):
        subsample(cloud, 11, make_rng(1))
    print("✅ Subsampling draws distinct points")


def test_noise_is_clipped():
    cloud = sphere(500)
    noisy = add_noise(cloud, 1.0, 0.05, make_rng(2))
    assert np.max(np.abs(noisy.points - cloud.points)) <= 0.05 + 1e-15
    assert add_noise(cloud, 0.0, 0.05, make_rng(2)) is cloud
    print("✅ Noise clipped to the bound")


def test_crop_keeps_points_farthest_along_normal():
    points = np.array([[0.0, 0.0, float(z)] for z in range(10)])
    cropped = crop_plane(PointCloud(points), 0.7, normal=np.array([0.0, 0.0, 1.0]))
    assert cropped.count == 7
    assert np.array_equal(cropped.points[:, 2], np.arange(3, 10, dtype=float))
    print("✅ Plane crop keeps the top 70%")


def test_clean_pair_is_exactly_aligned():
    pair = make_pair(sphere(), TransformSampleConfig(seed=3), PerturbationConfig.clean(n_points=256), make_rng(3))
    assert pair.source.count == 256 and pair.target.count == 256
    assert np.allclose(pair.gt.apply(pair.source.points), pair.target.points, atol=1e-12)
    assert np.array_equal(pair.source.points, pair.clean_source.points)
    print("✅ Clean target is the transformed source")


def test_noisy_pair_resamples_independently():
    pair = make_pair(sphere(), TransformSampleConfig(seed=4), PerturbationConfig.noisy(n_points=256), make_rng(4))
    assert not np.allclose(pair.gt.apply(pair.source.points), pair.target.points)
    assert np.max(np.abs(pair.source.points - pair.clean_source.points)) <= 0.05 + 1e-12
    assert pair.clean_target is not None and pair.clean_target.count == 256
    print("✅ Noisy pair uses independent samples")


def test_partial_pair_counts():
    pcfg = PerturbationConfig.partial(n_points=1024)
    assert pcfg.final_points == 717
    pair = make_pair(sphere(), TransformSampleConfig(seed=5), pcfg, make_rng(5))
    assert pair.source.count == 717 and pair.target.count == 717
    assert pair.clean_source.count == 1024
    print("✅ Partial pair keeps 717 of 1024 points")


def test_pair_is_reproducible_and_checks_size():
    a = make_pair(sphere(), TransformSampleConfig(), PerturbationConfig.noisy(n_points=128))
    b = make_pair(sphere(), TransformSampleConfig(), PerturbationConfig.noisy(n_points=128))
    assert np.array_equal(a.target.points, b.target.points)
    with pytest.raises(ValidationError):
        make_pair(sphere(100), TransformSampleConfig(), PerturbationConfig.clean(n_points=128))
    with pytest.raises(ValidationError):
        PerturbationConfig.for_protocol("blurry")
    print("✅ Pairs reproducible from seeds")


def test_shapes_fit_the_unit_sphere():
    rng = make_rng(6)
    for kind in ("sphere", "box", "helix", "torus"):
        cloud = synth_shape(kind, 1000, rng)
        radius = np.max(np.linalg.norm(cloud.points, axis=1))
        assert radius <= 1.0 + 1e-9, kind
        assert radius > 0.9, kind
    jittered = synth_shape("torus", 500, rng, {"major": 0.6, "minor": 0.2})
    assert np.max(np.linalg.norm(jittered.points, axis=1)) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        synth_shape("teapot", 10, rng)
    print("✅ Analytic shapes inside the unit sphere")


def test_xyz_and_ply_write_read():
    service = CloudService()
    cloud = sphere(64)
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("cloud.xyz", "cloud.ply"):
            path = service.write(cloud, Path(tmp) / name)
            assert np.array_equal(service.read(path).points, cloud.points)
    print("✅ xyz and ply keep full precision")


def test_malformed_xyz_reports_line():
    service = CloudService()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bad.xyz"
        path.write_text("0 0 0\n# comment\n1 two 3\n")
        with pytest.raises(DataFormatError) as info:
            service.read(path)
        assert info.value.line_number == 3
        with pytest.raises(DataFormatError):
            service.read(Path(tmp) / "missing.xyz")
        with pytest.raises(DataFormatError):
            service.read(Path(tmp) / "cloud.obj")
    print("✅ Malformed xyz reports its line")


def test_off_mesh_is_sampled_on_surface():
    service = CloudService(mesh_samples=300, seed=9)
    off = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "square.off"
        path.write_text(off)
        cloud = service.read(path)
        assert cloud.count == 300
        assert np.allclose(cloud.points[:, 2], 0.0)
        assert cloud.points[:, :2].min() >= 0.0 and cloud.points[:, :2].max() <= 1.0
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
        with pytest.raises(DataFormatError) as info:
            service.read(path)
        assert info.value.line_number == 6
    print("✅ OFF meshes sampled on their surface")


def test_partial_fraction_rounds_up():
    pcfg = PerturbationConfig.partial(n_points=100)
    assert pcfg.final_points == 70
    print("✅ Partial count rounds up")


if __name__ == "__main__":
    print("🧪 Testing point clouds")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
