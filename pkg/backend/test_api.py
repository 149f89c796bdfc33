#!/usr/bin/env python3
"""
Tests for the HTTP service.
This script tests:
1. Health endpoints and the action listing
2. Single-pair registration and its error responses
3. Rotation sampling
4. Run ledger endpoints
"""

import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

import database
import main
from services.ledger_service import LedgerService


def client_for(tmp):
    database.configure_database(f"sqlite:///{Path(tmp) / 'api.db'}")
    main.ledger_service = None
    return TestClient(main.app)


def test_health_endpoints():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        assert client.get("/").json()["status"] == "healthy"
        assert client.get("/ping").json() == {"status": "ok"}
        health = client.get("/health").json()
        assert health["actions"] == 24 and health["latest_run"] is None
    print("✅ Health endpoints respond")


def test_actions_listing():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        response = client.get("/actions")
        assert response.status_code == 200
        body = response.json()
        assert len(body["actions"]) == 24
    print("✅ Action listing has 24 entries")


def test_register_synthetic_shape():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        response = client.post("/register", json={"shape": "torus", "n_points": 64, "seed": 5,
                                                  "max_angle_deg": 30.0, "include_trace": True})
        assert response.status_code == 200
        body = response.json()
        assert len(body["rotation"]) == 9 and len(body["translation"]) == 3
        assert body["rot_err_deg"] < 5.0
        assert len(body["trace"]) == 60
    print("✅ Registration of one synthetic pair")


def test_register_rejects_bad_requests():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        assert client.post("/register", json={"protocol": "bogus"}).status_code == 422
        assert client.post("/register", json={"reward_source": "network"}).status_code == 422
        assert client.post("/register", json={"shape": "teapot"}).status_code == 400
    print("✅ Bad registration requests rejected")


def test_sample_rotations():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        body = client.post("/sample-rotations", json={"count": 5, "max_angle_deg": 90.0}).json()
        assert body["count"] == 5 and len(body["rows"]) == 5
        assert client.post("/sample-rotations", json={"count": 0}).status_code == 400
    print("✅ Rotation samples over HTTP")


def test_runs_endpoints():
    with tempfile.TemporaryDirectory() as tmp, client_for(tmp) as client:
        assert client.get("/runs").json() == {"runs": [], "total": 0}
        run_id = LedgerService().record_run("eval", {"n_pairs": 1}, seed=9, protocol="clean")
        listed = client.get("/runs").json()
        assert listed["total"] == 1 and listed["runs"][0]["id"] == run_id
        assert client.get(f"/runs/{run_id}").json()["seed"] == 9
        assert client.get("/runs/999").status_code == 404
    print("✅ Ledger endpoints list and fetch runs")


if __name__ == "__main__":
    print("🧪 Testing the HTTP service")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
