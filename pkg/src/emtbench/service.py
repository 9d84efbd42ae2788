"""Queue/run/artifact service.

One FIFO worker owns run execution (real-time exclusivity); every piece
of state lives in a plain run directory — a case snapshot, an atomically
replaced status.json and the artifacts — so API responses are pure
functions of the disk and a restart recovers cleanly: interrupted runs
become failed, queued ones run.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse

from . import rtexec
from .caseformat import case_to_json_dict, try_parse_case
from .recorder import load_index, minmax_decimate
from .scenario import TestCase

import numpy as np

QUEUED = "queued"
RUNNING = "running"
DONE = "done"
FAILED = "failed"
ABORTED = "aborted"

STATUS_NAME = "status.json"
CASE_NAME = "case.case"


class ValidationFailed(Exception):
    def __init__(self, diagnostics):
        super().__init__("case validation failed")
        self.diagnostics = diagnostics


class UnknownRun(Exception):
    pass


def _atomic_write(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=1))
    os.replace(tmp, path)


@dataclass
class _Job:
    run_id: str
    case: TestCase
    mode: str


class BenchService:
    """Disk-backed FIFO run queue with a single worker."""

    def __init__(self, runs_dir: Path | str, token: str | None = None):
        self.runs_dir = Path(runs_dir)
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.token = token
        self._queue: list[_Job] = []
        self._cv = threading.Condition()
        self._seq = 0
        self._abort_events: dict[str, threading.Event] = {}
        self._live: dict[str, dict] = {}
        self._stop = False
        self._recover()
        self._worker = threading.Thread(target=self._worker_loop,
                                        name="bench-worker", daemon=True)
        self._worker.start()
        self._monitor = threading.Thread(target=self._monitor_loop,
                                         name="bench-monitor", daemon=True)
        self._monitor.start()

    # -- lifecycle ---------------------------------------------------------

    def _recover(self) -> None:
        """Crash recovery: running -> failed, queued -> re-enqueued."""
        records = []
        for run_dir in sorted(self.runs_dir.iterdir()):
            status_path = run_dir / STATUS_NAME
            if not status_path.is_file():
                continue
            try:
                status = json.loads(status_path.read_text())
            except json.JSONDecodeError:
                continue
            records.append((status.get("seq", 0), run_dir, status))
            self._seq = max(self._seq, status.get("seq", 0))
        for seq, run_dir, status in sorted(records):
            if status["status"] == RUNNING:
                status["status"] = FAILED
                status["error"] = ("service restarted while this case was "
                                   "running; partial artifacts kept")
                status["ended"] = time.time()
                _atomic_write(run_dir / STATUS_NAME, status)
            elif status["status"] == QUEUED:
                case_text = (run_dir / CASE_NAME).read_text()
                case, diags = try_parse_case(case_text)
                if case is None:
                    status["status"] = FAILED
                    status["error"] = "case no longer parses: " + \
                        "; ".join(str(d) for d in diags)
                    _atomic_write(run_dir / STATUS_NAME, status)
                    continue
                self._queue.append(_Job(run_dir.name, case,
                                        status.get("mode", "batch")))

    def close(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        self._worker.join(timeout=5)

    # -- queue -------------------------------------------------------------

    def enqueue(self, case_text: str, mode: str = "batch") -> dict:
        case, diags = try_parse_case(case_text)
        if case is None:
            raise ValidationFailed([str(d) for d in diags])
        if mode not in (rtexec.BATCH, rtexec.REALTIME):
            raise ValidationFailed([f"unknown mode {mode!r}"])
        with self._cv:
            self._seq += 1
            run_id = f"{self._seq:06d}-{secrets.token_hex(3)}"
            run_dir = self.runs_dir / run_id
            run_dir.mkdir()
            (run_dir / CASE_NAME).write_text(case_text)
            status = {
                "id": run_id,
                "seq": self._seq,
                "name": case.name,
                "status": QUEUED,
                "mode": mode,
                "submitted": time.time(),
                "started": None,
                "ended": None,
                "error": None,
                "progress": 0.0,
                "artifacts": [CASE_NAME],
            }
            _atomic_write(run_dir / STATUS_NAME, status)
            self._queue.append(_Job(run_id, case, mode))
            self._cv.notify_all()
        return status

    def abort(self, run_id: str) -> dict:
        status = self.status(run_id)
        with self._cv:
            for job in list(self._queue):
                if job.run_id == run_id:
                    self._queue.remove(job)
                    status["status"] = ABORTED
                    status["ended"] = time.time()
                    status["error"] = "aborted before start"
                    _atomic_write(self.runs_dir / run_id / STATUS_NAME,
                                  status)
                    return status
            event = self._abort_events.get(run_id)
        if event is not None:
            event.set()
            return status
        return status

    # -- worker ------------------------------------------------------------

    def _worker_loop(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._stop:
                    self._cv.wait(timeout=0.5)
                if self._stop:
                    return
                job = self._queue.pop(0)
            self._execute(job)

    def _execute(self, job: _Job) -> None:
        run_dir = self.runs_dir / job.run_id
        status = json.loads((run_dir / STATUS_NAME).read_text())
        status["status"] = RUNNING
        status["started"] = time.time()
        _atomic_write(run_dir / STATUS_NAME, status)
        abort_event = threading.Event()
        self._abort_events[job.run_id] = abort_event
        live = {"progress": 0.0, "step": 0, "n_steps": job.case.n_steps}
        self._live[job.run_id] = live

        def progress(k, n):
            live["step"] = k
            live["n_steps"] = n
            live["progress"] = k / n if n else 1.0

        try:
            result = rtexec.run(
                job.case, job.mode, out_dir=run_dir,
                abort_event=abort_event, progress=progress)
            aborted = result.counters.get("aborted", False)
            status["status"] = ABORTED if aborted else DONE
            status["progress"] = live["progress"] if aborted else 1.0
            status["timing"] = result.timing.to_dict()
        except Exception as exc:  # run failures become terminal records
            status["status"] = FAILED
            status["error"] = f"{type(exc).__name__}: {exc}"
        finally:
            self._abort_events.pop(job.run_id, None)
            self._live.pop(job.run_id, None)
            status["ended"] = time.time()
            status["artifacts"] = sorted(
                p.name for p in run_dir.iterdir()
                if p.is_file() and not p.name.endswith(".tmp"))
            if (run_dir / "store").is_dir():
                status["artifacts"].append("store")
            _atomic_write(run_dir / STATUS_NAME, status)

    def _monitor_loop(self) -> None:
        """Persists live progress so GET responses stay disk-pure."""
        while True:
            time.sleep(0.5)
            for run_id, live in list(self._live.items()):
                path = self.runs_dir / run_id / STATUS_NAME
                try:
                    status = json.loads(path.read_text())
                except (OSError, json.JSONDecodeError):
                    continue
                if status["status"] != RUNNING:
                    continue
                status["progress"] = live["progress"]
                status["step"] = live["step"]
                status["n_steps"] = live["n_steps"]
                _atomic_write(path, status)

    # -- disk-pure reads -----------------------------------------------------

    def list_runs(self) -> list[dict]:
        out = []
        for run_dir in self.runs_dir.iterdir():
            path = run_dir / STATUS_NAME
            if path.is_file():
                try:
                    out.append(json.loads(path.read_text()))
                except json.JSONDecodeError:
                    continue
        out.sort(key=lambda s: s.get("seq", 0))
        return out

    def status(self, run_id: str) -> dict:
        path = self.runs_dir / run_id / STATUS_NAME
        if not path.is_file():
            raise UnknownRun(run_id)
        return json.loads(path.read_text())

    def case_json(self, run_id: str) -> dict:
        text = (self.runs_dir / run_id / CASE_NAME).read_text()
        case, _ = try_parse_case(text)
        return case_to_json_dict(case) if case else {}

    def channels(self, run_id: str) -> dict:
        status = self.status(run_id)
        store = self.runs_dir / run_id / "store"
        if not (store / "index.json").is_file():
            raise FileNotFoundError(
                f"run {run_id} has not started recording")
        index = load_index(store)
        # report flushed sample counts (live runs grow block by block)
        for entry in index["channels"]:
            size = (store / entry["file"]).stat().st_size
            entry["samples"] = min(entry["samples"], size // 8)
        return {"run_id": run_id, "status": status["status"],
                "dt": index["dt"], "channels": index["channels"]}

    def fetch_data(self, run_id: str, channel_ids: list[str],
                   t_from: float | None, t_to: float | None,
                   decimation: int) -> dict:
        index = self.channels(run_id)
        by_id = {c["id"]: c for c in index["channels"]}
        dt = index["dt"]
        store = self.runs_dir / run_id / "store"
        out = {"run_id": run_id, "dt": dt, "channels": {}}
        for cid in channel_ids:
            if cid not in by_id:
                raise KeyError(cid)
            entry = by_id[cid]
            raw = np.fromfile(store / entry["file"], dtype="<f8",
                              count=entry["samples"])
            n = len(raw)
            lo = 0 if t_from is None else int(np.floor(t_from / dt))
            hi = n if t_to is None else int(np.ceil(t_to / dt)) + 1
            if lo < 0 or lo >= n or hi > n or hi <= lo:
                raise ValueError(
                    f"range [{t_from},{t_to}] outside recorded span "
                    f"[0,{(n - 1) * dt:.6f}]")
            seg = raw[lo:hi]
            if decimation > 1:
                buckets = max(1, len(seg) // decimation)
                starts, mins, maxs = minmax_decimate(seg, buckets)
                out["channels"][cid] = {
                    "t": ((lo + starts) * dt).tolist(),
                    "min": mins.tolist(),
                    "max": maxs.tolist(),
                    "decimated": True,
                }
            else:
                t = (lo + np.arange(len(seg))) * dt
                out["channels"][cid] = {
                    "t": t.tolist(),
                    "min": seg.tolist(),
                    "max": seg.tolist(),
                    "decimated": False,
                }
        return out

    def artifact_path(self, run_id: str, name: str) -> Path:
        if "/" in name or ".." in name:
            raise UnknownRun(name)
        path = self.runs_dir / run_id / name
        if not path.is_file():
            raise FileNotFoundError(name)
        return path

    def event_stream(self, run_id: str):
        """SSE generator: status+progress at least once per second while
        the run lives; one terminal event then ends."""
        last_sent = 0.0
        last_payload = None
        while True:
            status = self.status(run_id)
            payload = json.dumps({
                "id": status["id"],
                "status": status["status"],
                "progress": status.get("progress", 0.0),
                "step": status.get("step"),
                "error": status.get("error"),
            })
            now = time.monotonic()
            if payload != last_payload or now - last_sent >= 1.0:
                yield f"event: status\ndata: {payload}\n\n"
                last_sent = now
                last_payload = payload
            if status["status"] in (DONE, FAILED, ABORTED):
                artifacts = json.dumps(status.get("artifacts", []))
                yield f"event: end\ndata: {artifacts}\n\n"
                return
            time.sleep(0.25)


def create_app(service: BenchService,
               frontend_dir: Path | str | None = None) -> FastAPI:
    app = FastAPI(title="emtbench", version="0.1.0")

    def check_auth(request: Request) -> None:
        if service.token is None:
            return
        header = request.headers.get("authorization", "")
        token = header.removeprefix("Bearer ").strip() or \
            request.headers.get("x-auth-token", "")
        if token != service.token:
            raise HTTPException(401, "bad or missing token")

    auth = Depends(check_auth)

    @app.post("/cases", status_code=201)
    def submit(body: dict, _=auth):
        text = body.get("case", "")
        mode = body.get("mode", "batch")
        try:
            return service.enqueue(text, mode)
        except ValidationFailed as exc:
            raise HTTPException(422, detail={
                "message": "case validation failed",
                "diagnostics": exc.diagnostics,
            })

    @app.get("/cases")
    def list_cases(_=auth):
        return service.list_runs()

    @app.get("/cases/{run_id}")
    def get_case(run_id: str, _=auth):
        try:
            status = service.status(run_id)
        except UnknownRun:
            raise HTTPException(404, f"unknown run {run_id}")
        status["case"] = service.case_json(run_id)
        return status

    @app.delete("/cases/{run_id}")
    def abort_case(run_id: str, _=auth):
        try:
            return service.abort(run_id)
        except UnknownRun:
            raise HTTPException(404, f"unknown run {run_id}")

    @app.get("/cases/{run_id}/channels")
    def get_channels(run_id: str, _=auth):
        try:
            return service.channels(run_id)
        except UnknownRun:
            raise HTTPException(404, f"unknown run {run_id}")
        except FileNotFoundError:
            raise HTTPException(409, "run has not started")

    @app.get("/cases/{run_id}/data")
    def get_data(run_id: str, channels: str, _=auth,
                 t_from: float | None = None, t_to: float | None = None,
                 decimation: int = 1):
        ids = [c for c in channels.split(",") if c]
        try:
            return service.fetch_data(run_id, ids, t_from, t_to,
                                      max(1, decimation))
        except UnknownRun:
            raise HTTPException(404, f"unknown run {run_id}")
        except FileNotFoundError:
            raise HTTPException(409, "run has not started")
        except KeyError as exc:
            raise HTTPException(404, f"unknown channel {exc.args[0]!r}")
        except ValueError as exc:
            raise HTTPException(416, str(exc))

    @app.get("/cases/{run_id}/events")
    def get_events(run_id: str, _=auth):
        try:
            service.status(run_id)
        except UnknownRun:
            raise HTTPException(404, f"unknown run {run_id}")
        return StreamingResponse(service.event_stream(run_id),
                                 media_type="text/event-stream")

    @app.get("/cases/{run_id}/artifacts/{name}")
    def get_artifact(run_id: str, name: str, _=auth):
        try:
            return FileResponse(service.artifact_path(run_id, name))
        except (UnknownRun, FileNotFoundError):
            raise HTTPException(404, f"no artifact {name!r}")

    @app.get("/cases/{run_id}/store/{name}")
    def get_store_file(run_id: str, name: str, _=auth):
        if "/" in name or ".." in name:
            raise HTTPException(404, "bad name")
        path = service.runs_dir / run_id / "store" / name
        if not path.is_file():
            raise HTTPException(404, f"no store file {name!r}")
        return FileResponse(path)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="console")

    return app
