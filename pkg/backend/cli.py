#!/usr/bin/env python3
"""
Command-line entry point: datasets, training, registration runs, ablations
and CSV output.

Exit codes: 0 ok, 2 usage or invalid configuration, 3 data error, 4 runtime failure.
"""

import json
import logging
import math
import os
from enum import Enum
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import pydantic
import typer
import yaml
from dotenv import load_dotenv

from exceptions import DataFormatError, ValidationError
from services.bench_service import (
    ABLATION_COLUMNS,
    EVAL_COLUMNS,
    MEAN_TRACE_COLUMNS,
    ROTATION_COLUMNS,
    TRACE_COLUMNS,
    BenchService,
    DatasetSpec,
    ExperimentConfig,
    csv_header,
    default_output,
    read_manifest,
    sample_rotation_rows,
    split_manifest,
    summary_row,
    synthetic_categories,
    synthetic_entries,
    write_csv,
)
from services.cloud_service import CloudService, make_pair, normalize_unit_sphere, synth_shape
from services.ledger_service import LedgerService
from services.rewardnet_service import NetConfig
from services.sampling_service import TransformSampleConfig, make_rng, spawn_rngs
from services.training_service import HISTORY_COLUMNS, TrainConfig, TrainingService, save_weights

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

app = typer.Typer(help="Rigid point-cloud registration by a greedy agent over discrete actions", add_completion=False)


class Protocol(str, Enum):
    clean = "clean"
    noisy = "noisy"
    partial = "partial"


class RewardSourceChoice(str, Enum):
    oracle_se3 = "oracle_se3"
    oracle_l2 = "oracle_l2"
    oracle_mcd = "oracle_mcd"
    network = "network"
    icp = "icp"


class PolicyChoice(str, Enum):
    greedy = "greedy"
    stoch1 = "stoch1"
    stoch2 = "stoch2"
    uniform = "uniform"


class SamplingChoice(str, Enum):
    haar = "haar"
    naive_euler = "naive_euler"


class CurriculumChoice(str, Enum):
    curriculum = "curriculum"
    uniform = "uniform"
    adhoc = "adhoc"


class AblationChoice(str, Enum):
    reward = "reward"
    sampling = "sampling"
    curriculum = "curriculum"
    policy = "policy"


class Preset(str, Enum):
    desk = "desk"
    full = "full"


class SplitChoice(str, Enum):
    train = "train"
    val = "val"
    test = "test"


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    level = "DEBUG" if verbose else os.getenv("STEPREG_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def handle_errors(fn):
    """Map failures onto exit codes"""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except typer.Exit:
            raise
        except pydantic.ValidationError as e:
            logger.error(f"Invalid configuration: {e}")
            typer.echo(f"Invalid configuration: {e}", err=True)
            raise typer.Exit(EXIT_USAGE)
        except (DataFormatError, ValidationError, FileNotFoundError) as e:
            logger.error(f"Data error: {e}")
            typer.echo(f"Error: {e}", err=True)
            raise typer.Exit(EXIT_DATA)
        except Exception as e:
            logger.error(f"{fn.__name__} failed: {e}")
            typer.echo(f"Error: {e}", err=True)
            raise typer.Exit(EXIT_RUNTIME)

    return wrapper


def build_config(
    config: Optional[Path] = None,
    protocol: Optional[Protocol] = None,
    n_pairs: Optional[int] = None,
    n_points: Optional[int] = None,
    reward_source: Optional[RewardSourceChoice] = None,
    weights: Optional[Path] = None,
    policy: Optional[PolicyChoice] = None,
    refine_icp: Optional[bool] = None,
    icp_max_dist: Optional[float] = None,
    max_angle_deg: Optional[float] = None,
    max_translation: Optional[float] = None,
    manifest: Optional[Path] = None,
    split: Optional[SplitChoice] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    plain_chamfer: Optional[bool] = None,
) -> ExperimentConfig:
    """YAML file values first, then command-line flags on top"""
    data: Dict[str, Any] = {}
    if config is not None:
        data = ExperimentConfig.from_yaml(config).model_dump()
    flat = {
        "protocol": protocol.value if protocol else None,
        "n_pairs": n_pairs,
        "n_points": n_points,
        "reward_source": reward_source.value if reward_source else None,
        "weights_path": str(weights) if weights else None,
        "refine_icp": refine_icp,
        "workers": workers,
        "seed": seed,
        "plain_chamfer": plain_chamfer,
    }
    data.update({k: v for k, v in flat.items() if v is not None})
    policy_data = dict(data.get("policy", {}))
    if policy is not None:
        policy_data["kind"] = policy.value
    if seed is not None:
        policy_data["seed"] = seed
    data["policy"] = policy_data
    if max_angle_deg is not None or max_translation is not None or seed is not None:
        transform = dict(data.get("transform", {}))
        if max_angle_deg is not None:
            transform["max_angle"] = math.radians(max_angle_deg)
        if max_translation is not None:
            transform["max_translation"] = max_translation
        if seed is not None:
            transform["seed"] = seed
        data["transform"] = transform
    if icp_max_dist is not None:
        data["icp"] = {**data.get("icp", {}), "max_correspondence_distance": icp_max_dist}
    dataset = dict(data.get("dataset", {}))
    if manifest is not None:
        dataset.update(kind="manifest", manifest_path=str(manifest))
    if split is not None:
        dataset["split"] = split.value
    dataset.setdefault("shape_points", max(DatasetSpec().shape_points, data.get("n_points", 0)))
    data["dataset"] = dataset
    return ExperimentConfig.model_validate(data)


def record(no_ledger: bool, **kwargs) -> None:
    if no_ledger:
        return
    LedgerService().record_run(**kwargs)


# --- commands -----------------------------------------------------------------

@app.command("gen-data")
@handle_errors
def gen_data(
    out: Path = typer.Option(Path("./data/synthetic"), help="Output directory"),
    manifest: Optional[Path] = typer.Option(None, help="Split an existing manifest instead of generating shapes"),
    points: int = typer.Option(2048, help="Points per synthetic shape"),
    val_fraction: float = typer.Option(0.1, help="Held-out fraction of each training category"),
    seed: int = typer.Option(1234),
):
    """Write synthetic category shapes (or split a manifest) and print the split counts"""
    if manifest is not None:
        split = split_manifest(read_manifest(manifest), val_fraction)
    else:
        cloud_service = CloudService(seed=seed)
        entries = []
        categories = synthetic_categories(seed)
        for (name, kind, params), rng in zip(categories, spawn_rngs(seed, len(categories))):
            cloud = normalize_unit_sphere(synth_shape(kind, points, rng, params))
            cloud_service.write(cloud, out / f"{name}.xyz")
            entries.append({"file": f"{name}.xyz", "category": name})
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(entries, f, sort_keys=False)
        split = split_manifest(synthetic_entries(seed), val_fraction)
        typer.echo(f"Wrote {len(entries)} shapes and {out / 'manifest.yaml'}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "split.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump({k: [e.file for e in split.entries(k)] for k in ("train", "val", "test")}, f)
    typer.echo(json.dumps(split.counts()))


@app.command()
@handle_errors
def train(
    out: Path = typer.Option(None, help="Weights file (.npz)"),
    preset: Preset = typer.Option(Preset.desk),
    epochs: Optional[int] = typer.Option(None),
    boundary: Optional[int] = typer.Option(None, help="Curriculum boundary epoch"),
    curriculum_mode: CurriculumChoice = typer.Option(CurriculumChoice.curriculum),
    sampling_mode: SamplingChoice = typer.Option(SamplingChoice.haar),
    samples_per_epoch: Optional[int] = typer.Option(None),
    batch_size: Optional[int] = typer.Option(None),
    n_points: Optional[int] = typer.Option(None),
    protocol: Protocol = typer.Option(Protocol.clean),
    manifest: Optional[Path] = typer.Option(None),
    history: Optional[Path] = typer.Option(None, help="Per-epoch loss CSV"),
    seed: int = typer.Option(1234),
    no_ledger: bool = typer.Option(False, "--no-ledger"),
):
    """Train the reward network on the training split"""
    net_cfg = NetConfig.full(seed) if preset == Preset.full else NetConfig.desk(seed)
    base = TrainConfig.full(seed) if preset == Preset.full else TrainConfig.desk(seed)
    updates = {
        "total_epochs": epochs,
        "curriculum_boundary_epoch": boundary,
        "samples_per_epoch": samples_per_epoch,
        "batch_size": batch_size,
        "n_points": n_points,
    }
    data = base.model_dump()
    data.update({k: v for k, v in updates.items() if v is not None})
    data.update(curriculum_mode=curriculum_mode.value, sampling_mode=sampling_mode.value, protocol=protocol.value)
    train_cfg = TrainConfig.model_validate(data)

    bench = BenchService(build_config(manifest=manifest, split=SplitChoice.train, n_points=train_cfg.n_points, seed=seed))
    shapes = [cloud for _, cloud in bench.load_shapes("train")]
    val_shapes = [cloud for _, cloud in bench.load_shapes("val")] or None
    service = TrainingService(net_cfg, train_cfg)
    params, hist = service.train(shapes, val_shapes)

    out = out or default_output("weights.npz")
    save_weights(out, params, net_cfg, train_cfg)
    if history is not None:
        write_csv(history, hist.to_rows(), HISTORY_COLUMNS,
                  csv_header(train_cfg, "train", net_config=net_cfg.model_dump()))
    final = hist.records[-1]
    record(no_ledger, command="train", config={"net": net_cfg.model_dump(), "train": train_cfg.model_dump()},
           seed=seed, protocol=protocol.value, reward_source="network", output_path=str(out))
    typer.echo(f"Trained {train_cfg.total_epochs} epochs: train loss {final.train_loss:.5f}, "
               f"val loss {final.val_loss:.5f} -> {out}")


@app.command()
@handle_errors
def register(
    shape: str = typer.Option("sphere", help="Synthetic shape kind"),
    source_file: Optional[Path] = typer.Option(None, "--source", help="Point-cloud file instead of a synthetic shape"),
    protocol: Protocol = typer.Option(Protocol.clean),
    n_points: int = typer.Option(1024),
    reward_source: RewardSourceChoice = typer.Option(RewardSourceChoice.oracle_se3),
    weights: Optional[Path] = typer.Option(None),
    policy: PolicyChoice = typer.Option(PolicyChoice.greedy),
    refine_icp: bool = typer.Option(False, "--refine-icp"),
    max_angle_deg: float = typer.Option(60.0),
    max_translation: float = typer.Option(0.5),
    seed: int = typer.Option(1234),
):
    """Register one pair and print its EvalReport"""
    cfg = build_config(protocol=protocol, n_points=n_points, n_pairs=1, reward_source=reward_source,
                       weights=weights, policy=policy, refine_icp=refine_icp, max_angle_deg=max_angle_deg,
                       max_translation=max_translation, seed=seed, workers=1)
    bench = BenchService(cfg)
    rng = make_rng(seed)
    if source_file is not None:
        cloud = normalize_unit_sphere(bench.cloud_service.read(source_file))
    else:
        cloud = synth_shape(shape, cfg.dataset.shape_points, rng)
    pair = make_pair(cloud, cfg.transform, cfg.resolved_perturbation(), rng)
    name = source_file.stem if source_file is not None else shape
    result = bench.register_pair(0, name, pair, bench.reward_source())
    typer.echo(json.dumps({
        "estimate": result.estimate.to_dict(),
        "ground_truth": pair.gt.to_dict(),
        **result.report.model_dump(),
        "elapsed_ms": result.elapsed_ms,
    }, indent=2))


@app.command("eval")
@handle_errors
def eval_command(
    config: Optional[Path] = typer.Option(None, help="YAML experiment config"),
    protocol: Optional[Protocol] = typer.Option(None),
    n_pairs: Optional[int] = typer.Option(None),
    n_points: Optional[int] = typer.Option(None),
    reward_source: Optional[RewardSourceChoice] = typer.Option(None),
    weights: Optional[Path] = typer.Option(None),
    policy: Optional[PolicyChoice] = typer.Option(None),
    refine_icp: Optional[bool] = typer.Option(None, "--refine-icp/--no-refine-icp"),
    icp_max_dist: Optional[float] = typer.Option(None, help="Correspondence gate for the ICP baseline"),
    plain_chamfer: Optional[bool] = typer.Option(None, "--plain-chamfer/--modified-chamfer"),
    manifest: Optional[Path] = typer.Option(None),
    workers: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    out: Optional[Path] = typer.Option(None, help="Output CSV"),
    no_ledger: bool = typer.Option(False, "--no-ledger"),
):
    """Register the whole test set and write one row per pair plus a summary row"""
    cfg = build_config(config, protocol, n_pairs, n_points, reward_source, weights, policy, refine_icp,
                       icp_max_dist, manifest=manifest, workers=workers, seed=seed, plain_chamfer=plain_chamfer)
    results = BenchService(cfg).evaluate()
    summary = summary_row(results)
    out = out or Path(cfg.output_path or default_output("eval.csv"))
    write_csv(out, [r.to_row() for r in results] + [summary], EVAL_COLUMNS, csv_header(cfg, "eval"))
    metrics = {k: summary[k] for k in ("rot_err_deg", "trans_err", "clean_l2", "mcd")}
    record(no_ledger, command="eval", config=cfg.model_dump(mode="json"), seed=cfg.seed, metrics=metrics,
           protocol=cfg.protocol, reward_source=cfg.reward_source, policy=cfg.policy.kind,
           n_pairs=len(results), output_path=str(out))
    typer.echo(json.dumps(metrics))


@app.command("sample-rot")
@handle_errors
def sample_rot(
    method: SamplingChoice = typer.Option(SamplingChoice.haar),
    max_angle_deg: float = typer.Option(180.0),
    count: int = typer.Option(10000),
    seed: int = typer.Option(1234),
    out: Optional[Path] = typer.Option(None),
):
    """Angle/axis samples for sampler histograms"""
    rows = sample_rotation_rows(method.value, math.radians(max_angle_deg), count, seed)
    out = out or default_output(f"rotations_{method.value}.csv")
    cfg = TransformSampleConfig(method=method.value, max_angle=math.radians(max_angle_deg), seed=seed)
    write_csv(out, rows, ROTATION_COLUMNS, csv_header(cfg, "sample-rot", count=count))
    typer.echo(f"Wrote {len(rows)} rotations to {out}")


@app.command()
@handle_errors
def trace(
    config: Optional[Path] = typer.Option(None),
    protocol: Optional[Protocol] = typer.Option(None),
    n_points: Optional[int] = typer.Option(None),
    reward_source: Optional[RewardSourceChoice] = typer.Option(None),
    weights: Optional[Path] = typer.Option(None),
    policy: Optional[PolicyChoice] = typer.Option(None),
    pair_index: int = typer.Option(0),
    all_pairs: bool = typer.Option(False, "--all-pairs", help="Average over the whole test set instead of one pair"),
    n_pairs: Optional[int] = typer.Option(None, help="Test-set size with --all-pairs"),
    workers: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    out: Optional[Path] = typer.Option(None),
):
    """Per-iteration errors and Chamfer distance for one test pair, or their mean over the test set"""
    out = out or default_output("trace_mean.csv" if all_pairs else "trace.csv")
    if all_pairs:
        cfg = build_config(config, protocol, n_pairs, n_points, reward_source, weights, policy,
                           seed=seed, workers=workers)
        rows, initial = BenchService(cfg).mean_trace()
        write_csv(out, rows, MEAN_TRACE_COLUMNS, csv_header(cfg, "trace", aggregate="mean", initial=initial))
        typer.echo(f"Wrote {len(rows)} averaged iterations over {cfg.n_pairs} pairs to {out}")
        return

    cfg = build_config(config, protocol, max(pair_index + 1, 1), n_points, reward_source, weights, policy,
                       seed=seed, workers=1)
    result, registration_trace = BenchService(cfg).trace(pair_index)
    write_csv(out, registration_trace.to_rows(), TRACE_COLUMNS, csv_header(
        cfg, "trace", pair_index=pair_index,
        initial={"rot_err_deg": registration_trace.initial_rot_err_deg,
                 "trans_err": registration_trace.initial_trans_err,
                 "chamfer": registration_trace.initial_chamfer},
    ))
    typer.echo(f"Wrote {len(registration_trace)} iterations to {out}")


@app.command()
@handle_errors
def ablate(
    kind: AblationChoice = typer.Argument(..., help="reward, sampling, curriculum or policy"),
    config: Optional[Path] = typer.Option(None),
    protocol: Optional[Protocol] = typer.Option(None),
    n_pairs: Optional[int] = typer.Option(None),
    n_points: Optional[int] = typer.Option(None),
    epochs: Optional[int] = typer.Option(None, help="Training epochs for the trained arms"),
    workers: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    out: Optional[Path] = typer.Option(None),
    no_ledger: bool = typer.Option(False, "--no-ledger"),
):
    """One row per ablation arm with the mean metrics"""
    cfg = build_config(config, protocol, n_pairs, n_points, workers=workers, seed=seed)
    train_cfg = TrainConfig.desk(seed=cfg.seed)
    if epochs is not None:
        boundary = min(train_cfg.curriculum_boundary_epoch, max(epochs - 1, 0))
        train_cfg = TrainConfig.model_validate({**train_cfg.model_dump(), "total_epochs": epochs,
                                                "curriculum_boundary_epoch": boundary})
    rows = BenchService(cfg).run_ablation(kind.value, NetConfig.desk(seed=cfg.seed), train_cfg)
    out = out or default_output(f"ablation_{kind.value}.csv")
    write_csv(out, rows, ABLATION_COLUMNS, csv_header(cfg, "ablate", ablation=kind.value))
    for row in rows:
        if row["status"] == "ok":
            record(no_ledger, command="ablate", config={"arm": row["arm"], **cfg.model_dump(mode="json")},
                   seed=cfg.seed, metrics=row, protocol=cfg.protocol, reward_source=f"{kind.value}:{row['arm']}",
                   policy=cfg.policy.kind, n_pairs=row["n_pairs"], output_path=str(out))
    typer.echo(json.dumps([{k: row[k] for k in ("arm", "rot_err_deg", "trans_err", "status")} for row in rows]))


@app.command("time")
@handle_errors
def time_command(
    config: Optional[Path] = typer.Option(None),
    protocol: Optional[Protocol] = typer.Option(None),
    n_pairs: Optional[int] = typer.Option(None),
    n_points: Optional[int] = typer.Option(None),
    reward_source: Optional[RewardSourceChoice] = typer.Option(None),
    weights: Optional[Path] = typer.Option(None),
    refine_icp: Optional[bool] = typer.Option(None, "--refine-icp/--no-refine-icp"),
    seed: Optional[int] = typer.Option(None),
):
    """Wall-clock milliseconds per registration call"""
    cfg = build_config(config, protocol, n_pairs, n_points, reward_source, weights, refine_icp=refine_icp, seed=seed)
    typer.echo(json.dumps(BenchService(cfg).time_registrations()))


@app.command()
@handle_errors
def runs(
    limit: int = typer.Option(20),
    command: Optional[str] = typer.Option(None),
):
    """Recent runs from the experiment ledger"""
    rows: List[Dict[str, Any]] = LedgerService().list_runs(limit, command)
    typer.echo(json.dumps(rows, indent=2))


@app.command()
def serve(
    host: str = typer.Option("127.0.0.1"),
    port: int = typer.Option(8000),
):
    """Run the HTTP service"""
    import uvicorn

    uvicorn.run("main:app", host=host, port=port)


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run the CLI on argv and return the exit status"""
    try:
        result = app(args=argv, standalone_mode=False)
    except typer.Exit as e:
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:
        exit_code = getattr(e, "exit_code", None)
        if exit_code is not None:
            typer.echo(str(e), err=True)
            return exit_code
        return EXIT_RUNTIME
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    app()
