import json
import logging
from typing import Any, Dict, List, Optional

import database
from models import ExperimentRun

logger = logging.getLogger(__name__)


class LedgerService:
    """Records experiment runs in the SQL ledger"""

    def __init__(self):
        database.init_db()

    def record_run(
        self,
        command: str,
        config: Dict[str, Any],
        seed: int,
        metrics: Optional[Dict[str, float]] = None,
        protocol: Optional[str] = None,
        reward_source: Optional[str] = None,
        policy: Optional[str] = None,
        n_pairs: Optional[int] = None,
        output_path: Optional[str] = None,
    ) -> int:
        metrics = metrics or {}
        db = database.SessionLocal()
        try:
            run = ExperimentRun(
                command=command,
                protocol=protocol,
                reward_source=reward_source,
                policy=policy,
                seed=seed,
                n_pairs=n_pairs,
                config_json=json.dumps(config, default=str),
                rot_err_deg=metrics.get("rot_err_deg"),
                trans_err=metrics.get("trans_err"),
                clean_l2=metrics.get("clean_l2"),
                mcd=metrics.get("mcd"),
                output_path=output_path,
            )
            db.add(run)
            db.commit()
            db.refresh(run)
            logger.info(f"Recorded {command} run {run.id}")
            return run.id
        except Exception as e:
            db.rollback()
            logger.error(f"Error recording {command} run: {e}")
            raise
        finally:
            db.close()

    def list_runs(self, limit: int = 20, command: Optional[str] = None) -> List[Dict[str, Any]]:
        db = database.SessionLocal()
        try:
            query = db.query(ExperimentRun)
            if command:
                query = query.filter(ExperimentRun.command == command)
            runs = query.order_by(ExperimentRun.id.desc()).limit(limit).all()
            return [run.to_dict() for run in runs]
        finally:
            db.close()

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        db = database.SessionLocal()
        try:
            run = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
            return run.to_dict() if run else None
        finally:
            db.close()
