"""
Training loop for the reward network: i.i.d. generative sampling, curriculum
over the transform range, plain SGD with step decay, and the weights file.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from exceptions import DataFormatError, ValidationError
from services.action_service import ActionSet, RewardGrouping, default_action_set, training_target
from services.cloud_service import PerturbationConfig, PointCloud, make_pair
from services.rewardnet_service import (
    NetConfig,
    NetworkParameters,
    RewardNetwork,
    Sample,
    backward,
)
from services.sampling_service import DEFAULT_SEED, TransformSampleConfig, spawn_rngs

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1
ADHOC_SMALL_PROBABILITY = 0.5

CurriculumMode = Literal["curriculum", "uniform", "adhoc"]
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "decay_loss", "val_loss", "transform_range"]


class TrainConfig(BaseModel):
    lr_initial: float = Field(default=0.1, gt=0.0)
    lr_decay_epochs: List[int] = Field(default_factory=lambda: [150, 180])
    lr_decay_factor: float = Field(default=0.1, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    grad_clip_norm: Optional[float] = Field(default=5.0, gt=0.0)
    total_epochs: int = Field(default=200, ge=1)
    curriculum_boundary_epoch: int = Field(default=30, ge=0)
    curriculum_mode: CurriculumMode = "curriculum"
    sampling_mode: Literal["haar", "naive_euler"] = "haar"
    small_range: TransformSampleConfig = Field(default_factory=TransformSampleConfig.small_range)
    full_range: TransformSampleConfig = Field(default_factory=TransformSampleConfig)
    batch_size: int = Field(default=8, ge=1)
    samples_per_epoch: int = Field(default=160, ge=1)
    val_samples: int = Field(default=16, ge=1)
    n_points: int = Field(default=64, ge=2)
    protocol: Literal["clean", "noisy", "partial"] = "clean"
    reward_grouping: RewardGrouping = "by_magnitude"
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _consistent(self) -> "TrainConfig":
        if self.curriculum_mode == "curriculum" and self.curriculum_boundary_epoch >= self.total_epochs:
            raise ValueError("curriculum_boundary_epoch must be smaller than total_epochs")
        if sorted(self.lr_decay_epochs) != list(self.lr_decay_epochs):
            raise ValueError("lr_decay_epochs must be ascending")
        return self

    @classmethod
    def desk(cls, seed: int = DEFAULT_SEED) -> "TrainConfig":
        return cls(seed=seed)

    @classmethod
    def full(cls, seed: int = DEFAULT_SEED) -> "TrainConfig":
        return cls(lr_decay_epochs=[300, 700, 1000], total_epochs=1300, curriculum_boundary_epoch=70,
                   n_points=1024, batch_size=32, samples_per_epoch=4603, val_samples=509,
                   grad_clip_norm=None, seed=seed)

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig.for_protocol(self.protocol, n_points=self.n_points, seed=self.seed)

    def transform_range(self, small: bool) -> TransformSampleConfig:
        """Small or full range, drawn with the configured sampling mode"""
        if self.sampling_mode == "haar":
            return self.small_range if small else self.full_range
        if small:
            return self.small_range.model_copy(update={"method": "naive_euler"})
        return TransformSampleConfig.naive_test_set(seed=self.seed).model_copy(
            update={"max_translation": self.full_range.max_translation})


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr_initial · factor^(number of decay epochs already reached)"""
    passed = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr_initial * cfg.lr_decay_factor ** passed


def sgd_step(params: NetworkParameters, grads: NetworkParameters, epoch: int, cfg: TrainConfig) -> NetworkParameters:
    lr = lr_at(epoch, cfg)
    updated = params.copy()
    for name, block in params.items():
        updated[name] = block - lr * grads[name]
    return updated


def clip_gradients(grads: NetworkParameters, max_norm: Optional[float]) -> NetworkParameters:
    """Rescale so the global L2 norm is at most max_norm; None leaves the gradients untouched"""
    if max_norm is None:
        return grads
    norm = math.sqrt(grads.squared_norm())
    if norm <= max_norm:
        return grads
    logger.debug(f"Clipping gradient norm {norm:.3f} to {max_norm:g}")
    clipped = grads.copy()
    for name, block in grads.items():
        clipped[name] = block * (max_norm / norm)
    return clipped


class EpochRecord(BaseModel):
    """train_loss and val_loss are reward-vector losses; decay_loss is the λ‖Θ‖² term at the end of the epoch"""

    epoch: int
    lr: float
    train_loss: float
    decay_loss: float
    val_loss: float
    transform_range: str


@dataclass
class TrainingHistory:
    records: List[EpochRecord]

    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def val_losses(self) -> List[float]:
        return [r.val_loss for r in self.records]

    def to_rows(self) -> List[dict]:
        return [r.model_dump() for r in self.records]


class TrainingService:
    """Trains one reward network on a list of (normalized) training shapes"""

    def __init__(self, net_cfg: NetConfig, train_cfg: TrainConfig, actions: Optional[ActionSet] = None):
        self.net_cfg = net_cfg
        self.train_cfg = train_cfg
        self.net = RewardNetwork(net_cfg)
        self.actions = actions or default_action_set()
        self.pcfg = train_cfg.perturbation()

    def _range_for(self, epoch: int, rng: np.random.Generator) -> Tuple[TransformSampleConfig, str]:
        mode = self.train_cfg.curriculum_mode
        if mode == "curriculum":
            small = epoch < self.train_cfg.curriculum_boundary_epoch
        elif mode == "adhoc":
            small = bool(rng.random() < ADHOC_SMALL_PROBABILITY)
        else:
            small = False
        return self.train_cfg.transform_range(small), "small" if small else "full"

    def draw_sample(self, shapes: Sequence[PointCloud], tcfg: TransformSampleConfig, rng: np.random.Generator) -> Sample:
        """Fresh (source, target, normalized oracle rewards at the initial state) triple"""
        shape = shapes[int(rng.integers(len(shapes)))]
        pair = make_pair(shape, tcfg, self.pcfg, rng)
        target = training_target(pair.gt, self.actions, self.train_cfg.reward_grouping)
        return pair.source.points, pair.target.points, target

    def validation_set(self, shapes: Sequence[PointCloud], rng: np.random.Generator) -> List[Sample]:
        tcfg = self.train_cfg.transform_range(small=False)
        return [self.draw_sample(shapes, tcfg, rng) for _ in range(self.train_cfg.val_samples)]

    def validate(self, params: NetworkParameters, val_set: Sequence[Sample]) -> float:
        """Mean reward-vector loss over the validation samples, weight decay excluded"""
        if not val_set:
            raise ValidationError("Validation set is empty")
        losses = [np.sum((g - self.net.forward(params, src, tgt)) ** 2) / g.size for src, tgt, g in val_set]
        return float(np.mean(losses))

    def train(
        self,
        shapes: Sequence[PointCloud],
        val_shapes: Optional[Sequence[PointCloud]] = None,
        params: Optional[NetworkParameters] = None,
    ) -> Tuple[NetworkParameters, TrainingHistory]:
        if not shapes:
            raise ValidationError("Training needs at least one shape")
        cfg = self.train_cfg
        train_rng, val_rng = spawn_rngs(cfg.seed, 2)
        params = params.copy() if params is not None else self.net.init_parameters()
        val_set = self.validation_set(val_shapes or shapes, val_rng)
        batches = math.ceil(cfg.samples_per_epoch / cfg.batch_size)

        logger.info(f"Training for {cfg.total_epochs} epochs on {len(shapes)} shapes "
                    f"({cfg.curriculum_mode}, {cfg.sampling_mode}, {params.size} parameters)")
        records: List[EpochRecord] = []
        for epoch in range(cfg.total_epochs):
            tcfg, range_name = self._range_for(epoch, train_rng)
            epoch_losses = []
            remaining = cfg.samples_per_epoch
            for _ in range(batches):
                size = min(cfg.batch_size, remaining)
                remaining -= size
                if cfg.curriculum_mode == "adhoc":
                    batch = []
                    for _ in range(size):
                        tcfg, range_name = self._range_for(epoch, train_rng)
                        batch.append(self.draw_sample(shapes, tcfg, train_rng))
                    range_name = "mixed"
                else:
                    batch = [self.draw_sample(shapes, tcfg, train_rng) for _ in range(size)]
                batch_loss, grads = backward(self.net, params, batch, cfg.weight_decay)
                data_loss = batch_loss - cfg.weight_decay * params.squared_norm()
                params = sgd_step(params, clip_gradients(grads, cfg.grad_clip_norm), epoch, cfg)
                epoch_losses.append(data_loss * size)

            record = EpochRecord(
                epoch=epoch,
                lr=lr_at(epoch, cfg),
                train_loss=float(np.sum(epoch_losses) / cfg.samples_per_epoch),
                decay_loss=cfg.weight_decay * params.squared_norm(),
                val_loss=self.validate(params, val_set),
                transform_range=range_name,
            )
            records.append(record)
            logger.info(f"Epoch {epoch}: train {record.train_loss:.5f}, val {record.val_loss:.5f}, "
                        f"lr {record.lr:g}, range {range_name}")
        return params, TrainingHistory(records)


# --- weights file -----------------------------------------------------------

@dataclass
class LoadedWeights:
    params: NetworkParameters
    net_cfg: NetConfig
    actions: ActionSet
    train_cfg: Optional[Dict[str, object]]


def save_weights(
    path,
    params: NetworkParameters,
    net_cfg: NetConfig,
    train_cfg: Optional[TrainConfig] = None,
    actions: Optional[ActionSet] = None,
) -> Path:
    """Write the .npz container; the file appears only once it is complete"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    actions = actions or default_action_set()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        np.savez(
            handle,
            format_version=np.array(WEIGHTS_FORMAT_VERSION),
            net_config=np.array(net_cfg.model_dump_json()),
            action_set=np.array(json.dumps(actions.to_dict())),
            train_config=np.array(train_cfg.model_dump_json() if train_cfg else "null"),
            params=params.flatten().astype(np.float64),
        )
    os.replace(tmp, path)
    logger.info(f"Saved {params.size} parameters to {path}")
    return path


def load_weights(path) -> LoadedWeights:
    path = Path(path)
    if not path.exists():
        raise DataFormatError("Weights file not found", path=str(path))
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != WEIGHTS_FORMAT_VERSION:
                raise DataFormatError(f"Unsupported weights format version {version}", path=str(path))
            net_cfg = NetConfig.model_validate_json(str(data["net_config"]))
            actions = ActionSet.from_dict(json.loads(str(data["action_set"])))
            train_cfg = json.loads(str(data["train_config"]))
            flat = np.asarray(data["params"], dtype=np.float64)
    except DataFormatError:
        raise
    except Exception as e:
        raise DataFormatError(f"Unreadable weights file: {e}", path=str(path)) from e

    try:
        params = RewardNetwork(net_cfg).init_parameters().restore(flat)
    except ValidationError as e:
        raise DataFormatError(str(e), path=str(path)) from e
    return LoadedWeights(params=params, net_cfg=net_cfg, actions=actions, train_cfg=train_cfg)
