"""HTTP service backing the composer UI.

Endpoints (all JSON):
  GET  /modules            registry listing (same source as the CLI)
  POST /validate           config -> compatibility report
  POST /generate           config -> two-line script
  POST /runs               launch a run, returns its id; FIFO queue, one at a time
  GET  /runs/{id}          status plus incremental per-iteration losses
  GET  /runs/{id}/report   final report once the run finished
"""

from __future__ import annotations

import json
import queue
import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .registry import (
    ALGORITHMS,
    ConfigError,
    RegistryError,
    SLOTS,
    check_compat,
    emit_command,
    parse_config,
    registry_list,
)
from .runner import RunError, device_check, run


class RunManager:
    """Single worker draining a FIFO queue; all state behind one lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._runs: dict[str, dict] = {}
        self._counter = 0
        self._worker = threading.Thread(target=self._drain, daemon=True)
        self._worker.start()

    def submit(self, cfg) -> str:
        with self._lock:
            self._counter += 1
            run_id = f"run-{self._counter}"
            self._runs[run_id] = {"status": "queued", "losses": [],
                                  "report": None, "error": None}
        self._queue.put((run_id, cfg))
        return run_id

    def _drain(self):
        while True:
            run_id, cfg = self._queue.get()
            with self._lock:
                self._runs[run_id]["status"] = "running"

            def progress(iteration, loss, run_id=run_id):
                with self._lock:
                    self._runs[run_id]["losses"].append(loss)

            try:
                report = run(cfg, progress=progress)
                with self._lock:
                    self._runs[run_id]["status"] = "done"
                    self._runs[run_id]["report"] = report.to_json()
            except Exception as exc:
                with self._lock:
                    self._runs[run_id]["status"] = "failed"
                    self._runs[run_id]["error"] = f"{type(exc).__name__}: {exc}"

    def snapshot(self, run_id: str) -> dict | None:
        with self._lock:
            state = self._runs.get(run_id)
            if state is None:
                return None
            return {"id": run_id, "status": state["status"],
                    "losses": list(state["losses"]), "error": state["error"]}

    def report(self, run_id: str):
        with self._lock:
            state = self._runs.get(run_id)
            if state is None:
                return None, "unknown run id"
            if state["status"] != "done":
                return None, f"run is {state['status']}"
            return state["report"], None


async def _parse_body(request: Request):
    try:
        body = await request.body()
        doc = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"request body is not valid JSON: {exc}")
    return parse_config(doc)


def create_app(manager: RunManager | None = None) -> FastAPI:
    app = FastAPI(title="metaforge composer service")
    app.state.manager = manager or RunManager()

    @app.get("/modules")
    def modules():
        return {
            "slots": list(SLOTS),
            "descriptors": [{"slot": d.slot, "option": d.option, "name": d.name,
                             "canonical": d.canonical,
                             "implemented": d.implemented,
                             "tags": sorted(d.tags)}
                            for d in registry_list("all")],
            "algorithms": [{"name": a.name, "category": a.category,
                            "implemented": a.implemented,
                            "strategies": sorted(a.strategies)}
                           for a in ALGORITHMS.values()],
        }

    @app.get("/device")
    def device():
        return device_check().to_json()

    @app.post("/validate")
    async def validate(request: Request):
        try:
            cfg = await _parse_body(request)
        except ConfigError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return check_compat(cfg).to_json()

    @app.post("/generate")
    async def generate(request: Request):
        try:
            cfg = await _parse_body(request)
            script = emit_command(cfg)
        except ConfigError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except RegistryError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {"script": script}

    @app.post("/runs")
    async def launch(request: Request):
        try:
            cfg = await _parse_body(request)
        except ConfigError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        report = check_compat(cfg)
        if not report.ok:
            return JSONResponse(
                {"error": "configuration has compatibility violations",
                 "report": report.to_json()}, status_code=400)
        run_id = app.state.manager.submit(cfg)
        return {"id": run_id}

    @app.get("/runs/{run_id}")
    def status(run_id: str):
        snap = app.state.manager.snapshot(run_id)
        if snap is None:
            return JSONResponse({"error": "unknown run id"}, status_code=404)
        return snap

    @app.get("/runs/{run_id}/report")
    def final_report(run_id: str):
        report, err = app.state.manager.report(run_id)
        if report is None:
            code = 404 if err == "unknown run id" else 409
            return JSONResponse({"error": err}, status_code=code)
        return report

    return app
