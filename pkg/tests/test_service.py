import json
import time

import pytest
from fastapi.testclient import TestClient

from metaforge.registry import check_compat, parse_config
from metaforge.service import create_app


@pytest.fixture()
def client():
    with TestClient(create_app()) as c:
        yield c


def quick_doc(**hyper):
    base = {"k_shot": 4, "iterations": 3, "meta_batch": 2, "eval_tasks": 3,
            "widths": [6]}
    base.update(hyper)
    return {
        "slots": {"task_construction": "regression", "meta_learner": "optimization",
                  "base_learner": "mse", "backbone": "mlp",
                  "optimization_strategy": "unrolled", "training_method": "serial"},
        "hyper": base, "seed": 9,
    }


def wait_done(client, run_id, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        snap = client.get(f"/runs/{run_id}").json()
        if snap["status"] in ("done", "failed"):
            return snap
        time.sleep(0.02)
    raise TimeoutError(f"run {run_id} did not finish")


def test_modules_same_source_as_registry(client):
    payload = client.get("/modules").json()
    from metaforge.registry import registry_list
    expected = [{"slot": d.slot, "option": d.option, "name": d.name,
                 "canonical": d.canonical, "implemented": d.implemented,
                 "tags": sorted(d.tags)} for d in registry_list("all")]
    assert payload["descriptors"] == expected
    assert payload["slots"][0] == "task_construction"
    assert any(a["name"] == "maml" for a in payload["algorithms"])


def test_validate_passthrough_verbatim(client):
    doc = quick_doc()
    doc["slots"]["optimization_strategy"] = "implicit"
    doc["hyper"] = {**doc["hyper"], "first_order": True}
    body = client.post("/validate", json=doc)
    assert body.status_code == 200
    payload = body.json()
    report = check_compat(parse_config(doc))
    assert payload == report.to_json()
    assert any(v["rule"] == "R4" for v in payload["violations"])


def test_validate_ok_config(client):
    body = client.post("/validate", json=quick_doc()).json()
    assert body["ok"] is True
    assert body["violations"] == []


def test_malformed_body_400(client):
    resp = client.post("/validate", content=b"{not json",
                       headers={"content-type": "application/json"})
    assert resp.status_code == 400
    assert "JSON" in resp.json()["error"]
    resp = client.post("/validate", json={"slots": {}})
    assert resp.status_code == 400
    assert "missing" in resp.json()["error"]


def test_generate_endpoint(client):
    resp = client.post("/generate", json=quick_doc())
    assert resp.status_code == 200
    script = resp.json()["script"]
    body = [l for l in script.splitlines() if l and not l.startswith("#")]
    assert len(body) == 2


def test_generate_rejects_violations(client):
    doc = quick_doc()
    doc["slots"]["backbone"] = "vgg16"
    resp = client.post("/generate", json=doc)
    assert resp.status_code == 400
    assert "R6" in resp.json()["error"]


def test_run_lifecycle_with_monotonic_metrics(client):
    resp = client.post("/runs", json=quick_doc(iterations=5))
    assert resp.status_code == 200
    run_id = resp.json()["id"]

    seen = []
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        snap = client.get(f"/runs/{run_id}").json()
        seen.append(len(snap["losses"]))
        if snap["status"] == "done":
            break
        time.sleep(0.01)
    assert snap["status"] == "done"
    assert all(a <= b for a, b in zip(seen, seen[1:]))  # append-only series
    assert len(snap["losses"]) == 5

    report = client.get(f"/runs/{run_id}/report")
    assert report.status_code == 200
    payload = report.json()
    assert payload["losses"] == snap["losses"]
    assert set(payload["eval"]) == {"pre", "post", "curve"}


def test_runs_queue_fifo(client):
    ids = [client.post("/runs", json=quick_doc(iterations=2)).json()["id"]
           for _ in range(3)]
    finals = [wait_done(client, i) for i in ids]
    assert all(f["status"] == "done" for f in finals)


def test_unknown_run_id_404(client):
    assert client.get("/runs/run-999").status_code == 404
    assert client.get("/runs/run-999/report").status_code == 404


def test_report_before_done_409(client):
    run_id = client.post("/runs", json=quick_doc(iterations=50)).json()["id"]
    resp = client.get(f"/runs/{run_id}/report")
    assert resp.status_code in (409, 200)  # 200 only if it already finished
    wait_done(client, run_id)


def test_run_launch_rejects_violating_config(client):
    doc = quick_doc()
    doc["slots"]["meta_learner"] = "bayesian"
    resp = client.post("/runs", json=doc)
    assert resp.status_code == 400
    assert any(v["rule"] == "R7" for v in resp.json()["report"]["violations"])


def test_device_endpoint(client):
    payload = client.get("/device").json()
    assert payload["accelerator"] is False
    assert "serial" in payload["modes"]
