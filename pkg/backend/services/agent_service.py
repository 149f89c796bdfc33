"""
Greedy registration agent.

Each iteration queries a reward source for the 24-vector at the current
accumulated transform, masks it to the size class of the current schedule
phase, picks an action with the policy and applies it. There is no stop
action; the schedule fixes the number of iterations.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from exceptions import RegistrationStepError, ValidationError
from services.action_service import (
    AccumulatedTransform,
    ActionSet,
    apply_action,
    default_action_set,
)
from services.cloud_service import CloudPair, PointCloud
from services.geometry_service import RigidTransform
from services.metrics_service import chamfer, rot_error_iso, trans_error
from services.sampling_service import DEFAULT_SEED, make_rng

logger = logging.getLogger(__name__)

STOCH1_DEFAULT = (0.85, 0.15, 0.05)


class PolicySpec(BaseModel):
    """greedy: masked argmax. stoch1: top-3 with fixed probabilities.
    stoch2: uniform over positive rewards. uniform: random masked action."""

    kind: Literal["greedy", "stoch1", "stoch2", "uniform"] = "greedy"
    stoch1_probs: Tuple[float, float, float] = STOCH1_DEFAULT
    seed: int = DEFAULT_SEED

    @field_validator("stoch1_probs")
    @classmethod
    def _positive(cls, value):
        if any(p <= 0 for p in value):
            raise ValueError("stoch1 probabilities must be positive")
        return value

    def normalized_probs(self) -> np.ndarray:
        """The printed probabilities sum to 1.05, so they are renormalized"""
        probs = np.asarray(self.stoch1_probs, dtype=np.float64)
        return probs / probs.sum()


class SchedulePhase(BaseModel):
    iterations: int = Field(ge=1)
    size_class: Literal["large", "small", "all"]


class Schedule(BaseModel):
    phases: List[SchedulePhase]

    @field_validator("phases")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("schedule needs at least one phase")
        return value

    @classmethod
    def default(cls, large: int = 20, small: int = 40) -> "Schedule":
        return cls(phases=[
            SchedulePhase(iterations=large, size_class="large"),
            SchedulePhase(iterations=small, size_class="small"),
        ])

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)

    def size_classes(self) -> List[str]:
        """Allowed size class for every iteration"""
        out: List[str] = []
        for phase in self.phases:
            out.extend([phase.size_class] * phase.iterations)
        return out


class RewardSource(Protocol):
    name: str

    def rewards(self, pair: CloudPair, acc: AccumulatedTransform) -> np.ndarray:
        ...


@dataclass
class TraceRecord:
    iteration: int
    action_index: int
    action_name: str
    rewards: np.ndarray
    accumulated: AccumulatedTransform
    rot_err_deg: float
    trans_err: float
    chamfer: float


@dataclass
class RegistrationTrace:
    records: List[TraceRecord] = field(default_factory=list)
    initial_rot_err_deg: float = 0.0
    initial_trans_err: float = 0.0
    initial_chamfer: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def action_indices(self) -> List[int]:
        return [r.action_index for r in self.records]

    def to_rows(self) -> List[dict]:
        """Rows of the trace CSV"""
        return [
            {
                "iter": r.iteration,
                "action_index": r.action_index,
                "action_name": r.action_name,
                "rot_err_deg": r.rot_err_deg,
                "trans_err": r.trans_err,
                "chamfer": r.chamfer,
            }
            for r in self.records
        ]


def first_iteration_below(trace: RegistrationTrace, rot_deg: float, trans: float) -> Optional[int]:
    """First iteration whose rotation and translation errors are both under the thresholds"""
    for r in trace.records:
        if r.rot_err_deg < rot_deg and r.trans_err < trans:
            return r.iteration
    return None


def _masked_order(rewards: np.ndarray, mask: Sequence[int]) -> List[int]:
    """Mask indices by descending reward, ties to the lower index"""
    return sorted(mask, key=lambda i: (-rewards[i], i))


def select_action(policy: PolicySpec, rewards: np.ndarray, mask: Sequence[int], rng: np.random.Generator) -> int:
    if len(mask) == 0:
        raise ValidationError("Action mask is empty")
    rewards = np.asarray(rewards, dtype=np.float64)
    mask = sorted(int(i) for i in mask)
    if policy.kind == "greedy":
        return int(_masked_order(rewards, mask)[0])
    if policy.kind == "stoch1":
        top = _masked_order(rewards, mask)[:3]
        probs = policy.normalized_probs()[: len(top)]
        return int(top[rng.choice(len(top), p=probs / probs.sum())])
    if policy.kind == "stoch2":
        positive = [i for i in mask if rewards[i] > 0.0]
        if not positive:
            return int(_masked_order(rewards, mask)[0])
        return int(positive[rng.integers(len(positive))])
    return int(mask[rng.integers(len(mask))])


def estimate_to_cloud(pair: CloudPair, estimate) -> PointCloud:
    """Observed source under the estimate: rotated by R_acc, then offset by t_acc"""
    if isinstance(estimate, AccumulatedTransform):
        estimate = estimate.as_transform()
    return PointCloud(estimate.apply(pair.source.points))


def replay(action_indices: Sequence[int], actions: Optional[ActionSet] = None) -> AccumulatedTransform:
    actions = actions or default_action_set()
    acc = AccumulatedTransform.identity()
    for index in action_indices:
        acc = apply_action(acc, actions[index])
    return acc


class AgentService:
    """Runs the fixed-budget registration loop for one reward source"""

    def __init__(
        self,
        reward_source: RewardSource,
        schedule: Optional[Schedule] = None,
        policy: Optional[PolicySpec] = None,
        actions: Optional[ActionSet] = None,
    ):
        self.reward_source = reward_source
        self.schedule = schedule or Schedule.default()
        self.policy = policy or PolicySpec()
        self.actions = actions or default_action_set()

    def run_registration(
        self,
        pair: CloudPair,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[RigidTransform, RegistrationTrace]:
        rng = rng if rng is not None else make_rng(self.policy.seed)
        acc = AccumulatedTransform.identity()
        target = pair.target.points
        trace = RegistrationTrace(
            initial_rot_err_deg=rot_error_iso(np.eye(3), pair.gt.rotation),
            initial_trans_err=trans_error(np.zeros(3), pair.gt.translation),
            initial_chamfer=chamfer(pair.source.points, target),
        )
        masks = {c: self.actions.indices(None if c == "all" else c) for c in ("large", "small", "all")}

        for iteration, size_class in enumerate(self.schedule.size_classes()):
            try:
                rewards = np.asarray(self.reward_source.rewards(pair, acc), dtype=np.float64)
            except Exception as e:
                logger.error(f"Reward source '{getattr(self.reward_source, 'name', '?')}' failed at iteration {iteration}: {e}")
                raise RegistrationStepError(iteration, e) from e
            index = select_action(self.policy, rewards, masks[size_class], rng)
            action = self.actions[index]
            acc = apply_action(acc, action)
            trace.records.append(TraceRecord(
                iteration=iteration,
                action_index=index,
                action_name=action.name,
                rewards=rewards,
                accumulated=acc,
                rot_err_deg=rot_error_iso(acc.rotation_acc, pair.gt.rotation),
                trans_err=trans_error(acc.translation_acc, pair.gt.translation),
                chamfer=chamfer(estimate_to_cloud(pair, acc).points, target),
            ))
            logger.debug(f"Iteration {iteration}: {action.name} (reward {rewards[index]:.5f})")

        return acc.as_transform(), trace


def run_registration(
    reward_source: RewardSource,
    pair: CloudPair,
    schedule: Optional[Schedule] = None,
    policy: Optional[PolicySpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[RigidTransform, RegistrationTrace]:
    return AgentService(reward_source, schedule, policy).run_registration(pair, rng)
