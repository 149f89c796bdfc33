"""
Experiment harness: datasets, test-set evaluation, traces, ablations,
timing and CSV output.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator
from scipy import stats

from exceptions import DataFormatError, ValidationError
from services.action_service import PointOracleRewards, Se3OracleRewards, default_action_set
from services.agent_service import AgentService, PolicySpec, RegistrationTrace, RewardSource, Schedule
from services.cloud_service import (
    SHAPE_KINDS,
    CloudPair,
    CloudService,
    PerturbationConfig,
    PointCloud,
    make_pair,
    normalize_unit_sphere,
    synth_shape,
)
from services.geometry_service import RigidTransform
from services.icp_service import IcpConfig, icp, refine_v2
from services.metrics_service import EvalReport, evaluate, rot_error_iso, trans_error
from services.rewardnet_service import NetConfig, NetworkRewards, RewardNetwork
from services.sampling_service import DEFAULT_SEED, SamplingService, TransformSampleConfig, make_rng, spawn_rngs, stream_rng
from services.training_service import TrainConfig, TrainingService, load_weights

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = os.getenv("STEPREG_OUTPUT_DIR", "./data/results")
DEFAULT_WORKERS = int(os.getenv("STEPREG_WORKERS", "4"))
VARIANTS_PER_FAMILY = 10
METRIC_COLUMNS = ["rot_err_deg", "trans_err", "clean_l2", "mcd"]
EVAL_COLUMNS = ["pair_index", "shape", "init_rot_err_deg", "init_trans_err"] + METRIC_COLUMNS + ["elapsed_ms"]
TRACE_COLUMNS = ["iter", "action_index", "action_name", "rot_err_deg", "trans_err", "chamfer"]
TRACE_METRICS = ["rot_err_deg", "trans_err", "chamfer"]
MEAN_TRACE_COLUMNS = ["iter", "n_pairs"] + [f"{m}_{s}" for m in TRACE_METRICS for s in ("mean", "std", "ci95")]
ABLATION_COLUMNS = ["ablation", "arm"] + METRIC_COLUMNS + ["n_pairs", "status"]
ROTATION_COLUMNS = ["method", "angle_rad", "axis_x", "axis_y", "axis_z"]

RewardSourceKind = Literal["oracle_se3", "oracle_l2", "oracle_mcd", "network", "icp"]
AblationKind = Literal["reward", "sampling", "curriculum", "policy"]


class DatasetSpec(BaseModel):
    kind: Literal["synthetic", "manifest"] = "synthetic"
    manifest_path: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"
    shape_points: int = Field(default=2048, ge=1)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _manifest_needs_path(self) -> "DatasetSpec":
        if self.kind == "manifest" and not self.manifest_path:
            raise ValueError("a manifest dataset needs manifest_path")
        return self


class ExperimentConfig(BaseModel):
    protocol: Literal["clean", "noisy", "partial"] = "clean"
    n_points: int = Field(default=1024, ge=2)
    n_pairs: int = Field(default=100, ge=1)
    transform: TransformSampleConfig = Field(default_factory=TransformSampleConfig)
    perturbation: Optional[PerturbationConfig] = None
    policy: PolicySpec = Field(default_factory=PolicySpec)
    schedule: Schedule = Field(default_factory=Schedule.default)
    reward_source: RewardSourceKind = "oracle_se3"
    weights_path: Optional[str] = None
    refine_icp: bool = False
    icp: IcpConfig = Field(default_factory=IcpConfig)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    plain_chamfer: bool = False
    l2_reduction: Literal["mean", "sum"] = "mean"
    output_path: Optional[str] = None
    workers: int = Field(default=DEFAULT_WORKERS, ge=1)
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.reward_source == "network" and not self.weights_path:
            raise ValueError("reward_source 'network' needs weights_path")
        if self.n_points > self.dataset.shape_points:
            raise ValueError("dataset.shape_points must be at least n_points")
        if self.perturbation is not None and self.protocol == "partial":
            preset = PerturbationConfig.partial(n_points=self.perturbation.n_points)
            if (self.perturbation.crop_fraction != preset.crop_fraction
                    or self.perturbation.final_points != preset.final_points):
                raise ValueError(
                    f"partial protocol needs crop_fraction {preset.crop_fraction} "
                    f"and final_points {preset.final_points}"
                )
        return self

    def resolved_perturbation(self) -> PerturbationConfig:
        """Protocol preset unless an explicit perturbation config is given"""
        if self.perturbation is not None:
            return self.perturbation
        return PerturbationConfig.for_protocol(self.protocol, n_points=self.n_points, seed=self.seed)

    @classmethod
    def from_yaml(cls, path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise DataFormatError("Config file not found", path=str(path))
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise DataFormatError(f"Invalid YAML: {e}", path=str(path)) from e
        if not isinstance(data, dict):
            raise DataFormatError("Config file must hold a mapping", path=str(path))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(data)


# --- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    file: str
    category: str


@dataclass
class DatasetSplit:
    train: List[ManifestEntry]
    val: List[ManifestEntry]
    test: List[ManifestEntry]

    def counts(self) -> Dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    def entries(self, split: str) -> List[ManifestEntry]:
        return {"train": self.train, "val": self.val, "test": self.test}[split]


def read_manifest(path) -> List[ManifestEntry]:
    """YAML list of {file, category}; relative files resolve against the manifest's directory"""
    path = Path(path)
    if not path.exists():
        raise DataFormatError("Manifest not found", path=str(path))
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise DataFormatError(f"Invalid YAML: {e}", path=str(path)) from e
    if isinstance(data, dict):
        data = data.get("entries")
    if not isinstance(data, list):
        raise DataFormatError("Manifest must be a list of {file, category} entries", path=str(path))

    entries = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "file" not in item or "category" not in item:
            raise DataFormatError(f"Entry {i} needs 'file' and 'category'", path=str(path))
        file = Path(str(item["file"]))
        if not file.is_absolute():
            file = path.parent / file
        entries.append(ManifestEntry(str(file), str(item["category"])))
    return entries


def split_manifest(entries: Sequence[ManifestEntry], val_fraction: float = 0.1) -> DatasetSplit:
    """First half of the categories (in order of appearance) trains and validates, the second half tests.

    The last val_fraction of each training category's entries is held out for validation.
    """
    categories: List[str] = []
    by_category: Dict[str, List[ManifestEntry]] = {}
    for entry in entries:
        if not entry.category:
            raise DataFormatError(f"Entry '{entry.file}' has no category")
        if entry.category not in by_category:
            categories.append(entry.category)
            by_category[entry.category] = []
        by_category[entry.category].append(entry)
    if len(categories) < 2:
        raise ValidationError(f"Splitting by category needs at least 2 categories, got {len(categories)}")

    half = len(categories) // 2
    train, val, test = [], [], []
    for category in categories[:half]:
        items = by_category[category]
        n_val = int(round(len(items) * val_fraction))
        if n_val >= len(items):
            n_val = len(items) - 1
        train.extend(items[:len(items) - n_val])
        val.extend(items[len(items) - n_val:])
    for category in categories[half:]:
        test.extend(by_category[category])
    split = DatasetSplit(train, val, test)
    logger.info(f"Split {len(categories)} categories: {split.counts()}")
    return split


def _jitter(kind: str, rng: np.random.Generator) -> Dict[str, float]:
    if kind in ("sphere", "box"):
        return {"aspect_y": float(rng.uniform(0.6, 1.4)), "aspect_z": float(rng.uniform(0.6, 1.4))}
    if kind == "helix":
        return {"turns": float(rng.uniform(1.5, 3.0)), "radius": float(rng.uniform(0.4, 0.8))}
    return {"major": float(rng.uniform(0.5, 0.8)), "minor": float(rng.uniform(0.15, 0.35))}


def synthetic_categories(seed: int = DEFAULT_SEED) -> List[Tuple[str, str, Optional[Dict[str, float]]]]:
    """40 categories: 4 shape families × 10 jittered variants, family by family.

    Variant 0 of each family is the unjittered shape.
    """
    rng = make_rng(seed)
    out = []
    for kind in SHAPE_KINDS:
        for variant in range(VARIANTS_PER_FAMILY):
            params = None if variant == 0 else _jitter(kind, rng)
            out.append((f"{kind}_{variant:02d}", kind, params))
    return out


def synthetic_entries(seed: int = DEFAULT_SEED) -> List[ManifestEntry]:
    return [ManifestEntry(name, name) for name, _, _ in synthetic_categories(seed)]


# --- CSV ----------------------------------------------------------------------

def write_csv(path, rows: Sequence[Dict[str, Any]], columns: Sequence[str], header: Optional[Dict[str, Any]] = None) -> Path:
    """CSV with '# key: value' header comments; written to a temporary sibling and renamed on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    frame = pd.DataFrame(list(rows), columns=list(columns))
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            for key, value in (header or {}).items():
                text = value if isinstance(value, str) else json.dumps(value, default=str, sort_keys=True)
                f.write(f"# {key}: {text}\n")
            frame.to_csv(f, index=False, float_format="%.10g")
        os.replace(tmp, path)
    except Exception:
        if tmp.exists():
            tmp.unlink()
        raise
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


# --- evaluation ---------------------------------------------------------------

@dataclass
class PairResult:
    index: int
    shape: str
    estimate: RigidTransform
    report: EvalReport
    init_rot_err_deg: float
    init_trans_err: float
    elapsed_ms: float
    trace: Optional[RegistrationTrace] = None

    def to_row(self) -> Dict[str, Any]:
        return {
            "pair_index": self.index,
            "shape": self.shape,
            "init_rot_err_deg": self.init_rot_err_deg,
            "init_trans_err": self.init_trans_err,
            **self.report.model_dump(),
            "elapsed_ms": self.elapsed_ms,
        }


def summary_row(results: Sequence[PairResult]) -> Dict[str, Any]:
    rows = [r.to_row() for r in results]
    out: Dict[str, Any] = {"pair_index": "mean", "shape": ""}
    for column in ["init_rot_err_deg", "init_trans_err"] + METRIC_COLUMNS + ["elapsed_ms"]:
        out[column] = float(np.mean([row[column] for row in rows])) if rows else float("nan")
    return out


def aggregate_traces(traces: Sequence[RegistrationTrace], confidence: float = 0.95) -> Tuple[List[Dict[str, Any]], Dict[str, float]]:
    """Per-iteration mean, sample std and confidence half-width (Student t) over equally long traces.

    Also returns the mean initial errors. With a single trace the half-width is NaN.
    """
    if not traces:
        raise ValidationError("No traces to aggregate")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ValidationError(f"Traces differ in length: {sorted(lengths)}")
    n = len(traces)
    values = np.array([[[getattr(r, m) for m in TRACE_METRICS] for r in t.records] for t in traces], dtype=np.float64)
    mean = values.mean(axis=0)
    if n > 1:
        std = values.std(axis=0, ddof=1)
        half = stats.t.ppf(0.5 + confidence / 2.0, n - 1) * std / np.sqrt(n)
    else:
        std = np.zeros_like(mean)
        half = np.full_like(mean, np.nan)

    rows = []
    for i, record in enumerate(traces[0].records):
        row: Dict[str, Any] = {"iter": record.iteration, "n_pairs": n}
        for j, metric in enumerate(TRACE_METRICS):
            row[f"{metric}_mean"] = float(mean[i, j])
            row[f"{metric}_std"] = float(std[i, j])
            row[f"{metric}_ci95"] = float(half[i, j])
        rows.append(row)
    initial = {
        "rot_err_deg": float(np.mean([t.initial_rot_err_deg for t in traces])),
        "trans_err": float(np.mean([t.initial_trans_err for t in traces])),
        "chamfer": float(np.mean([t.initial_chamfer for t in traces])),
    }
    return rows, initial


class BenchService:
    """Builds test sets and runs registrations for one ExperimentConfig"""

    def __init__(self, cfg: ExperimentConfig, cloud_service: Optional[CloudService] = None):
        self.cfg = cfg
        self.cloud_service = cloud_service or CloudService(mesh_samples=cfg.dataset.shape_points, seed=cfg.seed)
        self._network: Optional[NetworkRewards] = None

    # datasets

    def load_shapes(self, split: Optional[str] = None) -> List[Tuple[str, PointCloud]]:
        """(category, normalized cloud) for every entry of the split"""
        spec = self.cfg.dataset
        split = split or spec.split
        if spec.kind == "synthetic":
            categories = synthetic_categories(self.cfg.seed)
            chosen = split_manifest(synthetic_entries(self.cfg.seed), spec.val_fraction).entries(split)
            names = {e.category for e in chosen}
            rngs = spawn_rngs(self.cfg.seed, len(categories))
            return [
                (name, normalize_unit_sphere(synth_shape(kind, spec.shape_points, rng, params)))
                for (name, kind, params), rng in zip(categories, rngs) if name in names
            ]
        entries = split_manifest(read_manifest(spec.manifest_path), spec.val_fraction).entries(split)
        shapes = []
        for entry in entries:
            cloud = self.cloud_service.read(entry.file, n_samples=spec.shape_points)
            shapes.append((entry.category, normalize_unit_sphere(cloud)))
        return shapes

    def test_pairs(self, transform: Optional[TransformSampleConfig] = None) -> List[Tuple[str, CloudPair]]:
        """Deterministic test set: pair i uses shape i mod |shapes| and its own RNG stream"""
        shapes = self.load_shapes()
        if not shapes:
            raise ValidationError(f"No shapes in the '{self.cfg.dataset.split}' split")
        transform = transform or self.cfg.transform
        pcfg = self.cfg.resolved_perturbation()
        rngs = spawn_rngs(self.cfg.seed, self.cfg.n_pairs)
        pairs = []
        for i, rng in enumerate(rngs):
            name, shape = shapes[i % len(shapes)]
            pairs.append((name, make_pair(shape, transform, pcfg, rng)))
        return pairs

    # reward sources

    def network_rewards(self) -> NetworkRewards:
        if self._network is None:
            loaded = load_weights(self.cfg.weights_path)
            expected = [a.name for a in default_action_set()]
            if [a.name for a in loaded.actions] != expected:
                raise DataFormatError("Weights were trained for a different action set", path=self.cfg.weights_path)
            self._network = NetworkRewards(RewardNetwork(loaded.net_cfg), loaded.params)
        return self._network

    def reward_source(self, kind: Optional[str] = None) -> Optional[RewardSource]:
        kind = kind or self.cfg.reward_source
        if kind == "oracle_se3":
            return Se3OracleRewards()
        if kind == "oracle_l2":
            return PointOracleRewards("l2_clean")
        if kind == "oracle_mcd":
            return PointOracleRewards("mcd")
        if kind == "network":
            return self.network_rewards()
        if kind == "icp":
            return None
        raise ValidationError(f"Unknown reward source '{kind}'")

    # registration

    def register_pair(
        self,
        index: int,
        name: str,
        pair: CloudPair,
        source: Optional[RewardSource],
        policy: Optional[PolicySpec] = None,
        keep_trace: bool = False,
    ) -> PairResult:
        policy = policy or self.cfg.policy
        rng = stream_rng(policy.seed, index, 1)
        trace = None
        start = time.perf_counter()
        if source is None:
            estimate = icp(pair.source.points, pair.target.points, self.cfg.icp).transform
        else:
            agent = AgentService(source, self.cfg.schedule, policy)
            estimate, trace = agent.run_registration(pair, rng)
            if self.cfg.refine_icp:
                estimate = refine_v2(pair, estimate, self.cfg.icp)
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        report = evaluate(pair, estimate, self.cfg.plain_chamfer, self.cfg.l2_reduction)
        return PairResult(
            index=index,
            shape=name,
            estimate=estimate,
            report=report,
            init_rot_err_deg=rot_error_iso(np.eye(3), pair.gt.rotation),
            init_trans_err=trans_error(np.zeros(3), pair.gt.translation),
            elapsed_ms=elapsed_ms,
            trace=trace if keep_trace else None,
        )

    def evaluate(
        self,
        source_kind: Optional[str] = None,
        source: Optional[RewardSource] = None,
        policy: Optional[PolicySpec] = None,
        transform: Optional[TransformSampleConfig] = None,
        keep_trace: bool = False,
    ) -> List[PairResult]:
        """Register every test pair; rows come back in test-set order"""
        pairs = self.test_pairs(transform)
        if source is None:
            source = self.reward_source(source_kind)
        label = source.name if source is not None else "icp"
        logger.info(f"Evaluating {len(pairs)} {self.cfg.protocol} pairs with {label} "
                    f"({(policy or self.cfg.policy).kind}, {self.cfg.workers} workers)")

        def run(item):
            i, (name, pair) = item
            return self.register_pair(i, name, pair, source, policy, keep_trace)

        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            results = list(pool.map(run, enumerate(pairs)))
        summary = summary_row(results)
        logger.info(f"Mean rotation error {summary['rot_err_deg']:.3f} deg, translation error {summary['trans_err']:.4f}")
        return results

    def trace(self, pair_index: int = 0) -> Tuple[PairResult, RegistrationTrace]:
        pairs = self.test_pairs()
        if not 0 <= pair_index < len(pairs):
            raise ValidationError(f"Pair index {pair_index} outside the test set of {len(pairs)}")
        source = self.reward_source()
        if source is None:
            raise ValidationError("Traces need an agent reward source, not plain ICP")
        name, pair = pairs[pair_index]
        result = self.register_pair(pair_index, name, pair, source, keep_trace=True)
        return result, result.trace

    def mean_trace(self) -> Tuple[List[Dict[str, Any]], Dict[str, float]]:
        """Per-iteration errors averaged over the whole test set"""
        if self.cfg.reward_source == "icp":
            raise ValidationError("Traces need an agent reward source, not plain ICP")
        results = self.evaluate(keep_trace=True)
        return aggregate_traces([r.trace for r in results])

    def time_registrations(self) -> Dict[str, float]:
        """Wall-clock milliseconds per registration call, I/O excluded"""
        source = self.reward_source()
        pairs = self.test_pairs()
        elapsed = [self.register_pair(i, name, pair, source).elapsed_ms for i, (name, pair) in enumerate(pairs)]
        return {
            "n_pairs": len(elapsed),
            "mean_ms": float(np.mean(elapsed)),
            "std_ms": float(np.std(elapsed)),
            "min_ms": float(np.min(elapsed)),
            "max_ms": float(np.max(elapsed)),
        }

    # ablations

    def _train_arm(self, net_cfg: NetConfig, train_cfg: TrainConfig) -> NetworkRewards:
        spec = self.cfg.dataset.model_copy(update={"split": "train"})
        train_bench = BenchService(self.cfg.model_copy(update={"dataset": spec}), self.cloud_service)
        shapes = [cloud for _, cloud in train_bench.load_shapes()]
        service = TrainingService(net_cfg, train_cfg)
        params, _ = service.train(shapes)
        return NetworkRewards(service.net, params)

    def run_ablation(
        self,
        kind: AblationKind,
        net_cfg: Optional[NetConfig] = None,
        train_cfg: Optional[TrainConfig] = None,
    ) -> List[Dict[str, Any]]:
        """One row per arm with the mean metrics; a failing arm is reported and the others continue"""
        net_cfg = net_cfg or NetConfig.desk(seed=self.cfg.seed)
        train_cfg = train_cfg or TrainConfig.desk(seed=self.cfg.seed)
        transform = None
        if kind == "reward":
            arms = [(name, lambda name=name: dict(source_kind=name)) for name in ("oracle_se3", "oracle_l2", "oracle_mcd")]
        elif kind == "policy":
            arms = [
                (name, lambda name=name: dict(policy=self.cfg.policy.model_copy(update={"kind": name})))
                for name in ("greedy", "stoch1", "stoch2", "uniform")
            ]
        elif kind == "sampling":
            transform = TransformSampleConfig.naive_test_set(seed=self.cfg.seed)
            arms = [
                (name, lambda mode=mode: dict(source=self._train_arm(
                    net_cfg, train_cfg.model_copy(update={"sampling_mode": mode}))))
                for name, mode in (("isotropic", "haar"), ("naive", "naive_euler"))
            ]
        elif kind == "curriculum":
            arms = [
                (mode, lambda mode=mode: dict(source=self._train_arm(
                    net_cfg, train_cfg.model_copy(update={"curriculum_mode": mode}))))
                for mode in ("curriculum", "uniform", "adhoc")
            ]
        else:
            raise ValidationError(f"Unknown ablation '{kind}'")

        rows = []
        for arm, make_args in arms:
            try:
                results = self.evaluate(transform=transform, **make_args())
                means = summary_row(results)
                rows.append({"ablation": kind, "arm": arm, **{c: means[c] for c in METRIC_COLUMNS},
                             "n_pairs": len(results), "status": "ok"})
            except Exception as e:
                logger.warning(f"Ablation '{kind}' arm '{arm}' failed: {e}")
                rows.append({"ablation": kind, "arm": arm, **{c: float("nan") for c in METRIC_COLUMNS},
                             "n_pairs": 0, "status": f"error: {e}"})
        return rows


def sample_rotation_rows(method: str, max_angle: float, count: int, seed: int = DEFAULT_SEED) -> List[Dict[str, Any]]:
    if count < 1:
        raise ValidationError(f"count must be positive, got {count}")
    cfg = TransformSampleConfig(method=method, max_angle=max_angle, seed=seed)
    return SamplingService(cfg).rotation_rows(count)


def csv_header(cfg: BaseModel, command: str, **extra) -> Dict[str, Any]:
    """Resolved config and seed for the CSV header comments"""
    header: Dict[str, Any] = {"command": command, "seed": getattr(cfg, "seed", None)}
    header.update(extra)
    header["config"] = cfg.model_dump(mode="json")
    return header


def default_output(name: str) -> Path:
    return Path(DEFAULT_OUTPUT_DIR) / name
