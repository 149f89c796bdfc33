"""
The discrete action set, decoupled action application and reward oracles.

Rotation actions left-multiply the accumulated rotation; translation actions
add to the accumulated translation. Neither touches the other component, so
a rotation never induces a translation of the (centered) source.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence

import numpy as np

from exceptions import ValidationError
from services.cloud_service import CloudPair
from services.geometry_service import (
    RigidTransform,
    basis_rotation,
    maybe_orthonormalize,
    rotation_angle,
)
from services import metrics_service

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")
N_ACTIONS = 24
SMALL_ROTATION = math.radians(0.5)
LARGE_ROTATION = math.radians(10.0)
SMALL_TRANSLATION = 0.01
LARGE_TRANSLATION = 0.1

RewardGrouping = Literal["by_magnitude", "by_size_class"]
PointDistanceKind = Literal["l2_clean", "mcd"]


@dataclass(frozen=True)
class ActionSpec:
    kind: Literal["rotation", "translation"]
    axis: Literal["x", "y", "z"]
    sign: int
    magnitude: float
    size_class: Literal["large", "small"]

    def __post_init__(self):
        if self.magnitude <= 0:
            raise ValidationError(f"Action magnitude must be positive, got {self.magnitude}")
        if self.sign not in (1, -1):
            raise ValidationError(f"Action sign must be +1 or -1, got {self.sign}")
        small = SMALL_ROTATION if self.kind == "rotation" else SMALL_TRANSLATION
        large = LARGE_ROTATION if self.kind == "rotation" else LARGE_TRANSLATION
        expected = {small: "small", large: "large"}.get(self.magnitude)
        if expected is not None and expected != self.size_class:
            raise ValidationError(f"Size class '{self.size_class}' does not match magnitude {self.magnitude}")

    @property
    def axis_index(self) -> int:
        return AXES.index(self.axis)

    @property
    def name(self) -> str:
        sign = "+" if self.sign > 0 else "-"
        if self.kind == "rotation":
            return f"rot_{self.axis}{sign}{math.degrees(self.magnitude):g}deg"
        return f"trans_{self.axis}{sign}{self.magnitude:g}"

    def rotation_matrix(self) -> np.ndarray:
        return basis_rotation(self.axis_index, self.sign * self.magnitude)

    def translation_vector(self) -> np.ndarray:
        vec = np.zeros(3)
        vec[self.axis_index] = self.sign * self.magnitude
        return vec

    def negated(self) -> "ActionSpec":
        return ActionSpec(self.kind, self.axis, -self.sign, self.magnitude, self.size_class)

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "axis": self.axis,
            "sign": self.sign,
            "magnitude": self.magnitude,
            "size_class": self.size_class,
            "name": self.name,
        }


class ActionSet:
    """Ordered, fixed list of actions; reward vectors are aligned to this order"""

    def __init__(self, actions: Sequence[ActionSpec]):
        self.actions: List[ActionSpec] = list(actions)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> ActionSpec:
        return self.actions[index]

    def __iter__(self):
        return iter(self.actions)

    def indices(self, size_class: Optional[str] = None, kind: Optional[str] = None) -> List[int]:
        return [
            i for i, a in enumerate(self.actions)
            if (size_class is None or a.size_class == size_class) and (kind is None or a.kind == kind)
        ]

    def groups(self, grouping: RewardGrouping = "by_magnitude") -> List[List[int]]:
        """Index groups that are normalized together"""
        keys: Dict[tuple, List[int]] = {}
        for i, a in enumerate(self.actions):
            key = (a.kind, a.magnitude) if grouping == "by_magnitude" else (a.size_class,)
            keys.setdefault(key, []).append(i)
        return list(keys.values())

    def to_dict(self) -> Dict[str, object]:
        return {"actions": [dict(index=i, **a.to_dict()) for i, a in enumerate(self.actions)]}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ActionSet":
        specs = []
        for entry in sorted(data["actions"], key=lambda e: e["index"]):
            specs.append(ActionSpec(entry["kind"], entry["axis"], int(entry["sign"]),
                                    float(entry["magnitude"]), entry["size_class"]))
        return cls(specs)


def default_action_set() -> ActionSet:
    """Rotations (x, y, z × ± × 0.5°, 10°) followed by translations (× 0.01, 0.1)"""
    actions = []
    for kind, small, large in (
        ("rotation", SMALL_ROTATION, LARGE_ROTATION),
        ("translation", SMALL_TRANSLATION, LARGE_TRANSLATION),
    ):
        for axis in AXES:
            for sign in (1, -1):
                actions.append(ActionSpec(kind, axis, sign, small, "small"))
                actions.append(ActionSpec(kind, axis, sign, large, "large"))
    return ActionSet(actions)


@dataclass(frozen=True)
class AccumulatedTransform:
    rotation_acc: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def identity(cls) -> "AccumulatedTransform":
        return cls()

    def as_transform(self) -> RigidTransform:
        return RigidTransform(self.rotation_acc, self.translation_acc)


@dataclass(frozen=True)
class ResidualState:
    """Motion still separating the accumulator from the ground truth"""

    rotation_residual: np.ndarray
    translation_residual: np.ndarray

    def distance_to_identity(self) -> float:
        return float(np.linalg.norm(self.translation_residual)) + rotation_angle(self.rotation_residual)


def apply_action(acc: AccumulatedTransform, a: ActionSpec) -> AccumulatedTransform:
    if a.kind == "rotation":
        rotation = maybe_orthonormalize(a.rotation_matrix() @ acc.rotation_acc)
        return AccumulatedTransform(rotation, acc.translation_acc)
    return AccumulatedTransform(acc.rotation_acc, acc.translation_acc + a.translation_vector())


def residual(gt: RigidTransform, acc: AccumulatedTransform) -> ResidualState:
    """(R_gt · R_accᵀ, t_gt − t_acc)"""
    return ResidualState(gt.rotation @ acc.rotation_acc.T, gt.translation - acc.translation_acc)


def advance_residual(a: ActionSpec, s: ResidualState) -> ResidualState:
    """Residual after the accumulator takes action a"""
    if a.kind == "rotation":
        return ResidualState(s.rotation_residual @ a.rotation_matrix().T, s.translation_residual)
    return ResidualState(s.rotation_residual, s.translation_residual - a.translation_vector())


def oracle_reward_se3(a: ActionSpec, s: ResidualState) -> float:
    """D(s, 1) − D(a ⊕ s, 1).

    Only the component the action moves is evaluated: the other term is the
    same before and after and cancels exactly.
    """
    if a.kind == "rotation":
        after = s.rotation_residual @ a.rotation_matrix().T
        return rotation_angle(s.rotation_residual) - rotation_angle(after)
    after = s.translation_residual - a.translation_vector()
    return float(np.linalg.norm(s.translation_residual)) - float(np.linalg.norm(after))


def action_about_centroid(acc: AccumulatedTransform, a: ActionSpec, centroid: np.ndarray) -> RigidTransform:
    """Estimate after action a, rotating about the given centroid of the current source"""
    if a.kind == "translation":
        return RigidTransform(acc.rotation_acc, acc.translation_acc + a.translation_vector())
    r_a = a.rotation_matrix()
    rotation = maybe_orthonormalize(r_a @ acc.rotation_acc)
    return RigidTransform(rotation, r_a @ (acc.translation_acc - centroid) + centroid)


def point_distance(pair: CloudPair, est: RigidTransform, distance_kind: PointDistanceKind) -> float:
    if distance_kind == "l2_clean":
        return metrics_service.clean_l2(pair, est)
    if distance_kind == "mcd":
        return metrics_service.modified_chamfer(pair, est)
    raise ValidationError(f"Unknown point distance '{distance_kind}'")


def oracle_reward_points(
    a: ActionSpec,
    pair: CloudPair,
    acc: AccumulatedTransform,
    distance_kind: PointDistanceKind,
    before: Optional[float] = None,
) -> float:
    """D(X, Y) − D(X'_a, Y) for a point-based distance"""
    current = acc.as_transform()
    if before is None:
        before = point_distance(pair, current, distance_kind)
    centroid = current.apply(pair.source.points).mean(axis=0)
    return before - point_distance(pair, action_about_centroid(acc, a, centroid), distance_kind)


def reward_vector(oracle: Callable[[ActionSpec], float], actions: Optional[ActionSet] = None) -> np.ndarray:
    """Element i is the oracle reward of action i"""
    actions = actions or default_action_set()
    return np.array([oracle(a) for a in actions], dtype=np.float64)


def reward_vector_se3(s: ResidualState, actions: Optional[ActionSet] = None) -> np.ndarray:
    return reward_vector(lambda a: oracle_reward_se3(a, s), actions)


def reward_vector_points(
    pair: CloudPair,
    acc: AccumulatedTransform,
    distance_kind: PointDistanceKind,
    actions: Optional[ActionSet] = None,
) -> np.ndarray:
    before = point_distance(pair, acc.as_transform(), distance_kind)
    return reward_vector(lambda a: oracle_reward_points(a, pair, acc, distance_kind, before), actions)


def normalize_rewards_per_group(
    v: np.ndarray,
    actions: Optional[ActionSet] = None,
    grouping: RewardGrouping = "by_magnitude",
) -> np.ndarray:
    """Scale each step-size group to unit ℓ2 norm; all-zero groups pass through"""
    actions = actions or default_action_set()
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (len(actions),):
        raise ValidationError(f"Reward vector must have {len(actions)} entries, got shape {v.shape}")
    out = v.copy()
    for group in actions.groups(grouping):
        norm = float(np.linalg.norm(v[group]))
        if norm > 0.0:
            out[group] = v[group] / norm
    return out


class Se3OracleRewards:
    """Exact rewards from the known ground truth"""

    name = "oracle_se3"

    def __init__(self, actions: Optional[ActionSet] = None):
        self.actions = actions or default_action_set()

    def rewards(self, pair: CloudPair, acc: AccumulatedTransform) -> np.ndarray:
        return reward_vector_se3(residual(pair.gt, acc), self.actions)


class PointOracleRewards:
    """Rewards from a point-based distance (clean ℓ2 or modified Chamfer)"""

    def __init__(self, distance_kind: PointDistanceKind, actions: Optional[ActionSet] = None):
        self.distance_kind = distance_kind
        self.name = f"oracle_{'l2' if distance_kind == 'l2_clean' else 'mcd'}"
        self.actions = actions or default_action_set()

    def rewards(self, pair: CloudPair, acc: AccumulatedTransform) -> np.ndarray:
        return reward_vector_points(pair, acc, self.distance_kind, self.actions)


def training_target(
    gt: RigidTransform,
    actions: Optional[ActionSet] = None,
    grouping: RewardGrouping = "by_magnitude",
) -> np.ndarray:
    """Normalized SE(3) reward vector at the initial (identity) accumulator"""
    raw = reward_vector_se3(residual(gt, AccumulatedTransform.identity()), actions)
    return normalize_rewards_per_group(raw, actions, grouping)
