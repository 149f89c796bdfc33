"""
Point-to-point ICP with an SVD (Kabsch) rigid solve.

Used standalone as a baseline and to refine the agent's discrete estimate.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from exceptions import DegenerateInputError, ValidationError
from services.cloud_service import CloudPair
from services.geometry_service import RigidTransform, compose, orthonormalize

logger = logging.getLogger(__name__)

KDTREE_MIN_POINTS = 512
_KDTREE_CANDIDATES = 8
_QUERY_CHUNK = 256
_RANK_TOL = 1e-12


class IcpConfig(BaseModel):
    max_iterations: int = Field(default=50, ge=1)
    convergence_tol: float = Field(default=1e-8, gt=0.0)
    max_correspondence_distance: Optional[float] = Field(default=None, gt=0.0)


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    degenerate: bool = False
    mse_history: List[float] = field(default_factory=list)


def kabsch(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Least-squares proper rigid transform mapping src onto dst"""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValidationError(f"Correspondences must be matching N×3 arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateInputError(f"Kabsch needs at least 3 correspondences, got {src.shape[0]}")

    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (src.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("Weights must be non-negative with a positive sum, one per correspondence")
    w = w / w.sum()
    src_centroid = w @ src
    dst_centroid = w @ dst
    covariance = (src - src_centroid).T @ ((dst - dst_centroid) * w[:, None])

    u, s, vt = np.linalg.svd(covariance)
    if s[0] <= 0.0 or s[1] <= _RANK_TOL * s[0]:
        raise DegenerateInputError(f"Correspondence covariance is rank deficient (singular values {s})")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rotation = orthonormalize(rotation)
    return RigidTransform(rotation, dst_centroid - rotation @ src_centroid)


def _squared_distances(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    return np.sum((candidates - query[:, None, :]) ** 2, axis=-1)


def nearest_neighbor(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Index of the nearest reference point for every query point; ties go to the lowest index"""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] == 0:
        raise ValidationError("Reference cloud is empty")

    if reference.shape[0] > KDTREE_MIN_POINTS:
        k = min(_KDTREE_CANDIDATES, reference.shape[0])
        _, cand = cKDTree(reference).query(query, k=k)
        cand = cand.reshape(query.shape[0], k)
        d2 = _squared_distances(query, reference[cand])
        best = d2.min(axis=1, keepdims=True)
        return np.where(d2 == best, cand, reference.shape[0]).min(axis=1)

    out = np.empty(query.shape[0], dtype=np.int64)
    for start in range(0, query.shape[0], _QUERY_CHUNK):
        chunk = query[start:start + _QUERY_CHUNK]
        d2 = _squared_distances(chunk, reference[None, :, :])
        out[start:start + _QUERY_CHUNK] = np.argmin(d2, axis=1)
    return out


def icp(
    source: np.ndarray,
    target: np.ndarray,
    cfg: Optional[IcpConfig] = None,
    init: Optional[RigidTransform] = None,
) -> IcpResult:
    cfg = cfg or IcpConfig()
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    estimate = init or RigidTransform.identity()
    history: List[float] = []
    previous = None

    for iteration in range(cfg.max_iterations):
        moved = estimate.apply(source)
        matches = nearest_neighbor(moved, target)
        d2 = np.sum((target[matches] - moved) ** 2, axis=1)
        keep = np.ones(len(d2), dtype=bool)
        if cfg.max_correspondence_distance is not None:
            keep = d2 <= cfg.max_correspondence_distance ** 2
        mse = float(d2[keep].mean()) if keep.any() else float("inf")
        history.append(mse)
        logger.debug(f"ICP iteration {iteration}: mse {mse:.3e}, {int(keep.sum())} correspondences")

        if previous is not None and previous - mse < cfg.convergence_tol:
            return IcpResult(estimate, iteration, True, False, history)
        try:
            step = kabsch(moved[keep], target[matches][keep])
        except DegenerateInputError as e:
            logger.warning(f"ICP stopped at iteration {iteration}: {e}")
            return IcpResult(estimate, iteration, False, True, history)
        estimate = compose(step, estimate)
        previous = mse

    return IcpResult(estimate, cfg.max_iterations, False, False, history)


def refine_v2(pair: CloudPair, agent_estimate: RigidTransform, cfg: Optional[IcpConfig] = None) -> RigidTransform:
    """ICP on the observed clouds, initialized at the agent's estimate"""
    return icp(pair.source.points, pair.target.points, cfg, init=agent_estimate).transform
