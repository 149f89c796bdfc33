import math
import logging
import os
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from dotenv import load_dotenv
import numpy as np
import uvicorn

from database import init_db
from exceptions import DataFormatError, ValidationError
from models import (
    RegisterRequest,
    RegisterResponse,
    RunResponse,
    SampleRotationsRequest,
    SampleRotationsResponse,
)
from services.action_service import default_action_set
from services.agent_service import PolicySpec
from services.bench_service import BenchService, ExperimentConfig, sample_rotation_rows
from services.cloud_service import PointCloud, make_pair, normalize_unit_sphere, synth_shape
from services.ledger_service import LedgerService
from services.sampling_service import make_rng

load_dotenv()

# Configure logging
logging.basicConfig(level=os.getenv("STEPREG_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)

app = FastAPI(
    title="StepReg Registration Backend",
    description="Rigid point-cloud registration with a greedy discrete-action agent",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

ledger_service: Optional[LedgerService] = None


def get_ledger() -> LedgerService:
    global ledger_service
    if ledger_service is None:
        ledger_service = LedgerService()
    return ledger_service


@app.on_event("startup")
async def startup_event():
    """Initialize the run ledger on startup"""
    logger.info("Starting registration backend...")
    init_db()
    logger.info("Registration backend started successfully")


@app.get("/")
async def root():
    """Health check endpoint"""
    return {"message": "Registration backend is running", "status": "healthy"}


@app.get("/ping")
async def ping():
    """Simple ping endpoint for connection testing"""
    return JSONResponse(content={"status": "ok"})


@app.get("/health")
async def health_check():
    """Detailed health check"""
    try:
        runs = get_ledger().list_runs(limit=1)
        return {
            "status": "healthy",
            "database": "connected",
            "actions": len(default_action_set()),
            "latest_run": runs[0]["id"] if runs else None,
        }
    except Exception as e:
        logger.error(f"Health check failed: {e}")
        raise HTTPException(status_code=500, detail="Service unhealthy")


@app.get("/actions")
async def list_actions():
    """The canonical action set; reward vectors follow this order"""
    return default_action_set().to_dict()


@app.post("/register", response_model=RegisterResponse)
def register(request: RegisterRequest):
    """Register one synthetic or uploaded shape against its transformed copy"""
    try:
        cfg = ExperimentConfig(
            protocol=request.protocol,
            n_points=request.n_points,
            n_pairs=1,
            reward_source=request.reward_source,
            weights_path=request.weights_path,
            policy=PolicySpec(kind=request.policy, seed=request.seed),
            refine_icp=request.refine_icp,
            transform={"max_angle": math.radians(request.max_angle_deg),
                       "max_translation": request.max_translation, "seed": request.seed},
            dataset={"shape_points": max(2048, request.n_points)},
            workers=1,
            seed=request.seed,
        )
        bench = BenchService(cfg)
        rng = make_rng(request.seed)
        if request.points is not None:
            shape = normalize_unit_sphere(PointCloud(np.asarray(request.points, dtype=np.float64)))
        else:
            shape = synth_shape(request.shape, cfg.dataset.shape_points, rng)
        pair = make_pair(shape, cfg.transform, cfg.resolved_perturbation(), rng)
        result = bench.register_pair(0, request.shape, pair, bench.reward_source(), keep_trace=request.include_trace)

        logger.info(f"Registered {request.shape} with {request.reward_source}: "
                    f"{result.report.rot_err_deg:.3f} deg, {result.report.trans_err:.4f}")
        estimate = result.estimate.to_dict()
        gt = pair.gt.to_dict()
        return RegisterResponse(
            rotation=estimate["rotation"],
            translation=estimate["translation"],
            gt_rotation=gt["rotation"],
            gt_translation=gt["translation"],
            trace=result.trace.to_rows() if result.trace is not None else None,
            **result.report.model_dump(),
        )
    except HTTPException:
        raise
    except (ValidationError, DataFormatError) as e:
        logger.warning(f"Rejected registration request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except ValueError as e:
        logger.warning(f"Invalid registration request: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error registering pair: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/sample-rotations", response_model=SampleRotationsResponse)
def sample_rotations(request: SampleRotationsRequest):
    """Angle/axis samples of the Haar or naive sampler"""
    try:
        rows = sample_rotation_rows(request.method, math.radians(request.max_angle_deg), request.count, request.seed)
        return SampleRotationsResponse(rows=rows, count=len(rows))
    except (ValidationError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error sampling rotations: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.get("/runs", response_model=RunResponse)
async def list_runs(limit: int = 20, command: Optional[str] = None):
    """Recent rows of the experiment ledger"""
    try:
        runs = get_ledger().list_runs(limit, command)
        return RunResponse(runs=runs, total=len(runs))
    except Exception as e:
        logger.error(f"Error listing runs: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.get("/runs/{run_id}")
async def get_run(run_id: int):
    try:
        run = get_ledger().get_run(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail="Run not found")
        return run
    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Error reading run {run_id}: {e}")
        raise HTTPException(status_code=500, detail=str(e))


if __name__ == "__main__":
    uvicorn.run(app, host="0.0.0.0", port=8000)
