"""
Transformation samplers.

`haar` draws rotations from the Haar measure of SO(3) restricted to a
maximum angle: the axis is uniform on the sphere and the angle follows the
density f(θ) ∝ 1 − cos θ on [0, max_angle]. `naive_euler` draws three Euler
angles uniformly and composes them in ZYX order, which over-samples some
axes; it is kept for the sampling ablation.

Randomness comes from numpy's PCG64 bit generator (`numpy.random.Generator`)
seeded explicitly, so sample streams are identical across platforms.
"""

import logging
import math
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from exceptions import ValidationError
from services.geometry_service import (
    RigidTransform,
    basis_rotation,
    rotation_from_axis_angle,
    rotation_to_axis_angle,
    AxisAngle,
)

logger = logging.getLogger(__name__)

DEFAULT_SEED = 1234
_BISECTION_TOL = 1e-12
_SERIES_CUTOFF = 1e-3


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed"""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Independent per-sample streams derived from (seed, sample index)"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for one keyed stream; stream_rng(s, i) equals spawn_rngs(s, n)[i]"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _theta_minus_sin(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    series = theta ** 3 / 6.0 - theta ** 5 / 120.0 + theta ** 7 / 5040.0
    return np.where(theta < _SERIES_CUTOFF, series, theta - np.sin(theta))


def haar_angle_cdf(theta, max_angle: float):
    """F(θ) = (θ − sin θ) / (Θ − sin Θ) on [0, Θ]"""
    theta = np.clip(np.asarray(theta, dtype=np.float64), 0.0, max_angle)
    return _theta_minus_sin(theta) / _theta_minus_sin(np.asarray(max_angle))


def _invert_haar_cdf(u: np.ndarray, max_angle: float) -> np.ndarray:
    """Vectorized bisection of the truncated angle CDF"""
    lo = np.zeros_like(u)
    hi = np.full_like(u, max_angle)
    total = float(_theta_minus_sin(np.asarray(max_angle)))
    target = u * total
    iterations = max(1, int(math.ceil(math.log2(max(max_angle, _BISECTION_TOL) / _BISECTION_TOL))))
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = _theta_minus_sin(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _check_cap(value: float, name: str) -> None:
    if not (0.0 < value <= math.pi):
        raise ValidationError(f"{name} must lie in (0, pi], got {value}")


def sample_unit_axes(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform directions on the sphere from normalized Gaussian draws"""
    axes = rng.standard_normal((count, 3))
    norms = np.linalg.norm(axes, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return axes / norms


def sample_haar_angles(max_angle: float, rng: np.random.Generator, count: int) -> np.ndarray:
    _check_cap(max_angle, "max_angle")
    return _invert_haar_cdf(rng.random(count), max_angle)


def sample_rotation_haar(max_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation with angle at most max_angle"""
    _check_cap(max_angle, "max_angle")
    axis = sample_unit_axes(rng, 1)[0]
    angle = float(_invert_haar_cdf(np.array([rng.random()]), max_angle)[0])
    return rotation_from_axis_angle(AxisAngle(axis / np.linalg.norm(axis), angle))


def euler_zyx(z: float, y: float, x: float) -> np.ndarray:
    """R = Rz(z) · Ry(y) · Rx(x)"""
    return basis_rotation(2, z) @ basis_rotation(1, y) @ basis_rotation(0, x)


def sample_rotation_naive(max_euler: float, rng: np.random.Generator) -> np.ndarray:
    """Three Euler angles uniform in [−max_euler, max_euler], composed ZYX"""
    _check_cap(max_euler, "max_euler")
    z, y, x = rng.uniform(-max_euler, max_euler, size=3)
    return euler_zyx(z, y, x)


def sample_translation(max_component: float, rng: np.random.Generator) -> np.ndarray:
    if max_component < 0:
        raise ValidationError(f"max_component must be non-negative, got {max_component}")
    return rng.uniform(-max_component, max_component, size=3)


class TransformSampleConfig(BaseModel):
    """How ground-truth transforms are drawn.

    A zero max_angle means no rotation; the samplers themselves reject it.
    """

    method: Literal["haar", "naive_euler"] = "haar"
    max_angle: float = Field(default=math.radians(60.0), ge=0.0, le=math.pi)
    max_translation: float = Field(default=0.5, ge=0.0)
    seed: int = DEFAULT_SEED

    @field_validator("seed")
    @classmethod
    def _seed_fits_64_bits(cls, value: int) -> int:
        if not (0 <= value < 2 ** 64):
            raise ValueError("seed must be a non-negative 64-bit integer")
        return value

    @classmethod
    def small_range(cls, seed: int = DEFAULT_SEED) -> "TransformSampleConfig":
        """Curriculum warm-up range: 10 degrees, 0.5/7 per translation axis"""
        return cls(max_angle=math.radians(10.0), max_translation=0.5 / 7.0, seed=seed)

    @classmethod
    def naive_test_set(cls, seed: int = DEFAULT_SEED) -> "TransformSampleConfig":
        """Naive 32-degree-per-axis Euler range of the sampling comparison"""
        return cls(method="naive_euler", max_angle=math.radians(32.0), max_translation=0.5, seed=seed)


def sample_transform(cfg: TransformSampleConfig, rng: Optional[np.random.Generator] = None) -> RigidTransform:
    """Draw one ground-truth transform; uses a generator seeded from cfg.seed when none is given"""
    if rng is None:
        rng = make_rng(cfg.seed)
    if cfg.max_angle == 0.0:
        rotation = np.eye(3)
    elif cfg.method == "haar":
        rotation = sample_rotation_haar(cfg.max_angle, rng)
    else:
        rotation = sample_rotation_naive(cfg.max_angle, rng)
    return RigidTransform(rotation, sample_translation(cfg.max_translation, rng))


class SamplingService:
    """Seeded sampler that owns its RNG stream"""

    def __init__(self, cfg: TransformSampleConfig):
        self.cfg = cfg
        self.rng = make_rng(cfg.seed)

    def next_transform(self) -> RigidTransform:
        return sample_transform(self.cfg, self.rng)

    def rotation_rows(self, count: int) -> List[dict]:
        """Angle/axis rows for sampler histograms (sample-rot CSV)"""
        rows = []
        for _ in range(count):
            if self.cfg.max_angle == 0.0:
                rotation = np.eye(3)
            elif self.cfg.method == "haar":
                rotation = sample_rotation_haar(self.cfg.max_angle, self.rng)
            else:
                rotation = sample_rotation_naive(self.cfg.max_angle, self.rng)
            aa = rotation_to_axis_angle(rotation)
            rows.append({
                "method": self.cfg.method,
                "angle_rad": aa.angle,
                "axis_x": float(aa.axis[0]),
                "axis_y": float(aa.axis[1]),
                "axis_z": float(aa.axis[2]),
            })
        logger.info(f"Sampled {count} rotations ({self.cfg.method}, cap {math.degrees(self.cfg.max_angle):.1f} deg)")
        return rows
