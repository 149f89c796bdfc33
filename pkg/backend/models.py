from sqlalchemy import Column, Integer, String, Text, DateTime, Float
from datetime import datetime
from typing import Dict, Any, Optional, List
from pydantic import BaseModel
from database import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)  # eval, ablate, train
    protocol = Column(String, nullable=True)
    reward_source = Column(String, nullable=True)
    policy = Column(String, nullable=True)
    seed = Column(Integer)
    n_pairs = Column(Integer, nullable=True)
    config_json = Column(Text)
    rot_err_deg = Column(Float, nullable=True)
    trans_err = Column(Float, nullable=True)
    clean_l2 = Column(Float, nullable=True)
    mcd = Column(Float, nullable=True)
    output_path = Column(String, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    def to_dict(self) -> Dict[str, Any]:
        """Convert run to dictionary"""
        return {
            "id": self.id,
            "command": self.command,
            "protocol": self.protocol,
            "reward_source": self.reward_source,
            "policy": self.policy,
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "rot_err_deg": self.rot_err_deg,
            "trans_err": self.trans_err,
            "clean_l2": self.clean_l2,
            "mcd": self.mcd,
            "output_path": self.output_path,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }


# Pydantic models for API
class RegisterRequest(BaseModel):
    shape: str = "sphere"
    points: Optional[List[List[float]]] = None
    protocol: str = "clean"
    n_points: int = 256
    max_angle_deg: float = 60.0
    max_translation: float = 0.5
    seed: int = 1234
    reward_source: str = "oracle_se3"
    weights_path: Optional[str] = None
    policy: str = "greedy"
    refine_icp: bool = False
    include_trace: bool = False


class RegisterResponse(BaseModel):
    rotation: List[float]
    translation: List[float]
    gt_rotation: List[float]
    gt_translation: List[float]
    rot_err_deg: float
    trans_err: float
    clean_l2: float
    mcd: float
    trace: Optional[List[Dict[str, Any]]] = None


class SampleRotationsRequest(BaseModel):
    method: str = "haar"
    max_angle_deg: float = 180.0
    count: int = 1000
    seed: int = 1234


class SampleRotationsResponse(BaseModel):
    rows: List[Dict[str, Any]]
    count: int


class RunResponse(BaseModel):
    runs: List[Dict[str, Any]]
    total: int
