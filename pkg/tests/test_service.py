import json
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from fdp import nets, phantoms, service
from fdp.domain import write_case_bundle


@pytest.fixture(scope="module")
def client():
    model = nets.Stage2Model(np.random.default_rng(0), nets.NetConfig())
    return TestClient(service.create_app(model))


def open_session(client, seed=7):
    r = client.post("/cases", json={"phantom_seed": seed})
    assert r.status_code == 201
    body = r.json()
    hi = {s["name"]: 0.08 for s in body["structures"] if s["kind"] == "PTV"}
    wt = {s["name"]: 1.0 for s in body["structures"] if s["kind"] == "OAR"}
    return body["session_id"], hi, wt


class TestHealth:
    def test_healthz(self, client):
        r = client.get("/healthz")
        assert r.status_code == 200
        assert r.json()["status"] == "ok"


class TestCases:
    def test_phantom_session(self, client):
        r = client.post("/cases", json={"phantom_seed": 7})
        assert r.status_code == 201
        body = r.json()
        assert body["case_id"] == "phantom-00000007"
        assert body["slider_ranges"]["hi"] == [0.02, 0.20]
        kinds = {s["kind"] for s in body["structures"]}
        assert kinds == {"PTV", "OAR"}

    def test_bundle_path_session(self, client, tmp_path):
        case = phantoms.generate_phantom(phantoms.random_spec(3))
        write_case_bundle(case, tmp_path / "b")
        r = client.post("/cases", json={"bundle_path": str(tmp_path / "b")})
        assert r.status_code == 201
        assert r.json()["case_id"] == case.case_id

    def test_bad_path_404(self, client):
        assert client.post("/cases", json={"bundle_path": "/no/such/dir"}).status_code == 404

    def test_needs_exactly_one_source(self, client):
        assert client.post("/cases", json={}).status_code == 400

    def test_two_sessions_independent(self, client):
        s1, hi, wt = open_session(client, 7)
        s2, hi2, wt2 = open_session(client, 7)
        assert s1 != s2
        client.post(f"/cases/{s1}/predict", json={"hi_target": hi, "oar_weight": wt})
        r = client.post(f"/cases/{s2}/objectives", json={})
        assert r.status_code == 409   # session 2 has no prediction of its own


class TestPredict:
    def test_predict_contract(self, client):
        sid, hi, wt = open_session(client)
        r = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt})
        assert r.status_code == 200
        body = r.json()
        assert body["previous_dvh"] is None
        assert set(body["dvh"]) == set(hi) | set(wt)
        first = next(iter(body["dvh"].values()))
        assert len(first["dose_gy"]) == 101
        assert body["latency_ms"] > 0
        assert body["slice"]["rows"] == 32

        wt2 = dict(wt)
        first_oar = next(iter(wt2))
        wt2[first_oar] = 0.7
        r2 = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt2})
        assert r2.json()["previous_dvh"] is not None
        assert r2.json()["previous_dvh"].keys() == body["dvh"].keys()

    def test_predict_pure(self, client):
        sid, hi, wt = open_session(client)
        a = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt}).json()
        b = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt}).json()
        assert a["dvh"] == b["dvh"]
        assert a["metrics"] == b["metrics"]

    def test_out_of_range_422(self, client):
        sid, hi, wt = open_session(client)
        bad = {k: 0.5 for k in hi}
        r = client.post(f"/cases/{sid}/predict", json={"hi_target": bad, "oar_weight": wt})
        assert r.status_code == 422

    def test_incomplete_422(self, client):
        sid, hi, wt = open_session(client)
        r = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": {}})
        assert r.status_code == 422

    def test_unknown_session_404(self, client):
        r = client.post("/cases/zzz/predict", json={"hi_target": {}, "oar_weight": {}})
        assert r.status_code == 404


class TestObjectivesAndPlan:
    def test_objectives_before_predict_409(self, client):
        sid, _, _ = open_session(client, seed=9)
        assert client.post(f"/cases/{sid}/objectives", json={}).status_code == 409
        assert client.post(f"/cases/{sid}/plan", json={}).status_code == 409

    def test_objectives_round_trip(self, client):
        from fdp.objectives import parse_objectives
        sid, hi, wt = open_session(client)
        client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt})
        r = client.post(f"/cases/{sid}/objectives", json={})
        assert r.status_code == 200
        objset = parse_objectives(r.json()["text"])
        assert len(objset.objectives) == len(r.json()["objectives"])

    def test_plan_streams_then_result(self, client):
        sid, hi, wt = open_session(client)
        client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt})
        r = client.post(f"/cases/{sid}/plan", json={"max_iterations": 25})
        assert r.status_code == 200
        lines = r.text.strip().splitlines()
        assert len(lines) >= 3
        assert lines[-1].startswith("RESULT ")
        result = json.loads(lines[-1][len("RESULT "):])
        assert np.isfinite(result["total_penalty"])
        assert result["per_objective"]
        assert set(result["achieved_dvh"]) == set(hi) | set(wt)


class TestConcurrency:
    def test_parallel_sessions_isolated(self, client):
        sids = []
        for seed in (5, 6):
            sid, hi, wt = open_session(client, seed)
            sids.append((sid, hi, wt))
        results = {}

        def drive(sid, hi, wt):
            r = client.post(f"/cases/{sid}/predict", json={"hi_target": hi, "oar_weight": wt})
            results[sid] = r.json()["metrics"]

        threads = [threading.Thread(target=drive, args=s) for s in sids]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(results) == 2
        assert set(results[sids[0][0]]) != set(results[sids[1][0]])
