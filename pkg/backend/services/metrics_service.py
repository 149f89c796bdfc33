"""
Evaluation metrics: isotropic rotation/translation error, clean ℓ2 distance
and the modified Chamfer distance.
"""

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from exceptions import ValidationError
from services.cloud_service import CloudPair
from services.geometry_service import RigidTransform, rotation_angle


class EvalReport(BaseModel):
    rot_err_deg: float = Field(ge=0.0)
    trans_err: float = Field(ge=0.0)
    clean_l2: float = Field(ge=0.0)
    mcd: float = Field(ge=0.0)


def rot_error_iso(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic angle of R_gt⁻¹·R_est, in degrees"""
    return math.degrees(rotation_angle(np.asarray(r_gt).T @ np.asarray(r_est)))


def trans_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def clean_l2(pair: CloudPair, est: RigidTransform, reduction: Literal["mean", "sum"] = "mean") -> float:
    """Per-point ‖est(p) − gt(p)‖ over the clean, complete source"""
    if pair.clean_source is None:
        raise ValidationError("clean_l2 needs the clean source cloud")
    diff = est.apply(pair.clean_source.points) - pair.gt.apply(pair.clean_source.points)
    distances = np.linalg.norm(diff, axis=1)
    return float(distances.sum() if reduction == "sum" else distances.mean())


def nearest_squared_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(reference).query(query, k=1)
    return np.asarray(distances) ** 2


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric squared Chamfer distance, each direction averaged"""
    return float(nearest_squared_distances(points_a, points_b).mean()
                 + nearest_squared_distances(points_b, points_a).mean())


def modified_chamfer(pair: CloudPair, est: RigidTransform, plain: bool = False) -> float:
    """Observed clouds measured against the clean, complete counterpart of the other side.

    X = est(observed source), Y = observed target. X is compared with the
    clean target, Y with est(clean source). plain=True compares X and Y directly.
    """
    x = est.apply(pair.source.points)
    y = pair.target.points
    if plain:
        return chamfer(x, y)
    if pair.clean_source is None:
        raise ValidationError("modified_chamfer needs the clean source cloud")
    y_clean = pair.clean_target_or_default().points
    x_clean = est.apply(pair.clean_source.points)
    return float(nearest_squared_distances(x, y_clean).mean()
                 + nearest_squared_distances(y, x_clean).mean())


def evaluate(pair: CloudPair, est: RigidTransform, plain_chamfer: bool = False,
             l2_reduction: Literal["mean", "sum"] = "mean") -> EvalReport:
    return EvalReport(
        rot_err_deg=rot_error_iso(est.rotation, pair.gt.rotation),
        trans_err=trans_error(est.translation, pair.gt.translation),
        clean_l2=clean_l2(pair, est, l2_reduction),
        mcd=modified_chamfer(pair, est, plain_chamfer),
    )
