"""
Exact SO(3)/SE(3) arithmetic for the registration agent.

Rotations are plain 3x3 float64 arrays validated on construction; rigid
transforms pair one with a translation 3-vector. The transformation-space
distance D = D_t + D_R drives the reward oracle in action_service.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Sequence

import numpy as np

from exceptions import ValidationError

ORTHONORMAL_TOL = 1e-9
UNIT_AXIS_TOL = 1e-12

# Small angles take the skew-part axis; near pi the symmetric part is used
_SMALL_ANGLE = 1e-10
_NEAR_PI = 1e-6


def as_vector3(values: Sequence[float]) -> np.ndarray:
    """Coerce to a finite float64 3-vector"""
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if vec.shape != (3,):
        raise ValidationError(f"Expected 3 components, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValidationError("Vector components must be finite")
    return vec


def orthonormality_residual(matrix: np.ndarray) -> float:
    """Largest absolute entry of RᵀR − I"""
    return float(np.max(np.abs(matrix.T @ matrix - np.eye(3))))


def as_rotation(matrix: Any, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    """Validate a 3x3 rotation matrix (orthonormal, det +1) and return it as float64"""
    rot = np.asarray(matrix, dtype=np.float64)
    if rot.shape == (9,):
        rot = rot.reshape(3, 3)
    if rot.shape != (3, 3):
        raise ValidationError(f"Expected a 3x3 rotation matrix, got shape {rot.shape}")
    if not np.all(np.isfinite(rot)):
        raise ValidationError("Rotation matrix entries must be finite")
    residual = orthonormality_residual(rot)
    if residual > tol:
        raise ValidationError(f"Rotation matrix is not orthonormal (residual {residual:.3e})")
    det = float(np.linalg.det(rot))
    if abs(det - 1.0) > tol:
        raise ValidationError(f"Rotation matrix determinant must be +1, got {det:.12f}")
    return rot


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to a near-orthonormal matrix (symmetric orthogonalization via SVD)"""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def maybe_orthonormalize(matrix: np.ndarray, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    """Re-orthonormalize only once drift exceeds the tolerance"""
    if orthonormality_residual(matrix) > tol:
        return orthonormalize(matrix)
    return matrix


@dataclass(frozen=True)
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = as_vector3(self.axis)
        norm = float(np.linalg.norm(axis))
        if abs(norm - 1.0) > UNIT_AXIS_TOL:
            raise ValidationError(f"Rotation axis must be unit length, got norm {norm:.15f}")
        if not (0.0 <= self.angle <= math.pi):
            raise ValidationError(f"Rotation angle must lie in [0, pi], got {self.angle}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", float(self.angle))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_from_axis_angle(aa: AxisAngle) -> np.ndarray:
    """Rodrigues formula: R = I + sin θ K + (1 − cos θ) K²"""
    k = skew(aa.axis)
    return np.eye(3) + math.sin(aa.angle) * k + (1.0 - math.cos(aa.angle)) * (k @ k)


def rotation_to_axis_angle(rotation: np.ndarray) -> AxisAngle:
    """Inverse of rotation_from_axis_angle; the axis sign is ambiguous at angle pi"""
    rot = np.asarray(rotation, dtype=np.float64)
    angle = rotation_angle(rot)
    if angle < _SMALL_ANGLE:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    if math.pi - angle < _NEAR_PI:
        sym = (rot + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(sym)))
        axis = sym[:, col] / math.sqrt(max(sym[col, col], 0.0))
    else:
        axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
        axis = axis / (2.0 * math.sin(angle))
    return AxisAngle(axis / np.linalg.norm(axis), angle)


def basis_rotation(axis_index: int, angle: float) -> np.ndarray:
    """Rotation by angle about the x (0), y (1) or z (2) axis"""
    c, s = math.cos(angle), math.sin(angle)
    if axis_index == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis_index == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis_index == 2:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValidationError(f"Axis index must be 0, 1 or 2, got {axis_index}")


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, applied as p ↦ R·p + t"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_rotation(self.rotation))
        object.__setattr__(self, "translation", as_vector3(self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> Dict[str, Any]:
        """Structured-text record: 9 row-major rotation reals + 3 translation reals"""
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RigidTransform":
        rotation = np.asarray(data["rotation"], dtype=np.float64)
        if rotation.size != 9:
            raise ValidationError(f"Rotation record needs 9 values, got {rotation.size}")
        return cls(rotation.reshape(3, 3), data["translation"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Apply b first, then a"""
    rotation = maybe_orthonormalize(a.rotation @ b.rotation)
    return RigidTransform(rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_angle(rotation: np.ndarray) -> float:
    """Angle of a rotation, arccos((tr R − 1) / 2) with the argument clamped to [−1, 1].

    Evaluated as atan2(sin, cos) using the skew part for the sine, which is
    the same value but keeps full precision near 0 and pi where arccos does not.
    """
    cos_angle = min(1.0, max(-1.0, (float(np.trace(rotation)) - 1.0) / 2.0))
    skew_part = np.array([
        rotation[2, 1] - rotation[1, 2],
        rotation[0, 2] - rotation[2, 0],
        rotation[1, 0] - rotation[0, 1],
    ])
    sin_angle = min(1.0, float(np.linalg.norm(skew_part)) / 2.0)
    return math.atan2(sin_angle, cos_angle)


def rotation_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """D_R(R1, R2) = arccos((tr(R1 R2⁻¹) − 1) / 2), in radians within [0, pi]"""
    return rotation_angle(r1 @ r2.T)


def translation_distance(t1: np.ndarray, t2: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64)))


def transform_distance(a: RigidTransform, b: RigidTransform) -> float:
    """D = D_t + D_R; radians and model units are added with unit weights"""
    return translation_distance(a.translation, b.translation) + rotation_distance(a.rotation, b.rotation)
