"""HTTP serving of ABX sessions over a stdlib ThreadingHTTPServer.

The server owns the answer key: clients fetch a manifest, pull trials in
order, fetch stimuli by opaque id, and post interval choices. Every
response is scored server-side and appended to a JSON-lines log with an
fsync before the request is acknowledged, so a crash never loses an
acknowledged trial. Restarting on an existing log resumes at the first
unanswered trial, and duplicate posts return the already-recorded
outcome without touching the log (first write wins).

Routes:
    GET  /sessions/{sid}              manifest + progress (no answers)
    GET  /sessions/{sid}/trials/next  next unresolved trial or done flag
    GET  /stimuli/{opaque_id}         PNG bytes
    POST /sessions/{sid}/responses    {index, response, response_time_ms,
                                       timestamp} -> progress
    POST /sessions/{sid}/skips        {index, reason} -> progress

Responses may echo the stimulus ids the client actually displayed
(stimulus_a/b/x); the server rejects the post if they disagree with the
trial spec. Skips land in a sidecar next to the log, never in the trial
log itself, so a completed log still replays to the identical fit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .psychometrics import TrialRecord, read_trials
from .session import SessionPlan

__all__ = ["SessionServer", "serve_sessions", "MIN_PLAUSIBLE_RT_MS", "MAX_PLAUSIBLE_RT_MS"]

# Response times outside this window are flagged, not rejected: the
# record stays usable and the flag sidecar marks it for exclusion.
MIN_PLAUSIBLE_RT_MS = 100.0
MAX_PLAUSIBLE_RT_MS = 60_000.0


class _SessionState:
    """Mutable per-session progress: answered map, log handle, lock."""

    def __init__(self, plan: SessionPlan, log_path: Path):
        self.plan = plan
        self.log_path = Path(log_path)
        self.skip_path = Path(f"{log_path}.skips")
        self.lock = threading.Lock()
        self.answered: dict = {}
        self.skipped: dict = {}
        self.n_flagged = 0
        self._index_of_x = {t.stimulus_x: t.index for t in plan.trials}
        if self.log_path.exists():
            self._replay()
        if self.skip_path.exists():
            self._replay_skips()
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        # single append-only handle: one writer per session log
        self._log_fh = open(self.log_path, "a")

    def _replay(self) -> None:
        for record in read_trials(self.log_path):
            if record.session_id != self.plan.session_id:
                raise ValueError(
                    f"{self.log_path}: log belongs to session "
                    f"{record.session_id!r}, not {self.plan.session_id!r}"
                )
            index = self._index_of_x.get(record.stimulus_x)
            if index is None:
                raise ValueError(
                    f"{self.log_path}: record references unknown stimulus "
                    f"{record.stimulus_x!r}"
                )
            self.answered.setdefault(index, record)

    def _replay_skips(self) -> None:
        with open(self.skip_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                if record.get("session_id") != self.plan.session_id:
                    raise ValueError(
                        f"{self.skip_path}: skip record belongs to session "
                        f"{record.get('session_id')!r}, not "
                        f"{self.plan.session_id!r}"
                    )
                self.skipped.setdefault(int(record["index"]), record)

    def next_index(self) -> int | None:
        for trial in self.plan.trials:
            if trial.index not in self.answered and trial.index not in self.skipped:
                return trial.index
        return None

    def progress(self) -> dict:
        nxt = self.next_index()
        return {
            "session_id": self.plan.session_id,
            "n_trials": len(self.plan),
            "n_answered": len(self.answered),
            "n_skipped": len(self.skipped),
            "n_flagged": self.n_flagged,
            "next_index": nxt,
            "done": nxt is None,
        }

    def submit(self, index: int, response: str, response_time_ms: float,
               timestamp: str, echo: dict | None = None) -> tuple[int, dict]:
        """Score and persist one response; returns (http_status, payload).

        echo, when given, carries the stimulus ids the client displayed
        (keys stimulus_a/b/x); a disagreement with the trial spec means
        the client rendered the wrong images and the post is rejected.
        """
        if response not in ("A", "B"):
            return 400, {"error": "bad-response", "message": "response must be 'A' or 'B'"}
        if not isinstance(index, int) or not 0 <= index < len(self.plan):
            return 400, {"error": "bad-index", "message": f"no trial {index!r}"}
        trial = self.plan.trials[index]
        for slot in ("stimulus_a", "stimulus_b", "stimulus_x"):
            if echo and slot in echo and echo[slot] != getattr(trial, slot):
                return 400, {
                    "error": "stimulus-mismatch",
                    "slot": slot,
                    "expected": getattr(trial, slot),
                    "got": echo[slot],
                }
        with self.lock:
            if index in self.answered:
                payload = self.progress()
                payload["duplicate"] = True
                # the trial was already scored, so echoing the stored record
                # reveals nothing the client could not infer from its own log
                payload["record"] = dataclasses.asdict(self.answered[index])
                return 200, payload
            if index in self.skipped:
                return 409, {"error": "already-skipped", "got": index}
            expected = self.next_index()
            if index != expected:
                return 409, {
                    "error": "out-of-order",
                    "expected": expected,
                    "got": index,
                }
            record = TrialRecord(
                session_id=self.plan.session_id,
                condition=trial.condition,
                scale=trial.scale,
                image_id=trial.image_id,
                stimulus_a=trial.stimulus_a,
                stimulus_b=trial.stimulus_b,
                stimulus_x=trial.stimulus_x,
                response=response,
                correct=response == trial.answer,
                response_time_ms=float(response_time_ms),
                timestamp=str(timestamp),
            )
            self._log_fh.write(json.dumps(dataclasses.asdict(record)) + "\n")
            self._log_fh.flush()
            os.fsync(self._log_fh.fileno())
            self.answered[index] = record
            if not MIN_PLAUSIBLE_RT_MS <= record.response_time_ms <= MAX_PLAUSIBLE_RT_MS:
                self.n_flagged += 1
                with open(f"{self.log_path}.flags", "a") as fh:
                    fh.write(json.dumps({
                        "index": index,
                        "response_time_ms": record.response_time_ms,
                        "reason": "implausible-response-time",
                    }) + "\n")
            payload = self.progress()
            payload["recorded"] = True
            return 200, payload

    def skip(self, index: int, reason: str, timestamp: str = "") -> tuple[int, dict]:
        """Mark a trial unrunnable (e.g. a stimulus failed to load).

        The acknowledgment is durable before it is sent: the skip lands
        in the sidecar with an fsync, never in the trial log, so skipped
        trials stay out of every fit while the session can still finish.
        """
        if not isinstance(index, int) or not 0 <= index < len(self.plan):
            return 400, {"error": "bad-index", "message": f"no trial {index!r}"}
        with self.lock:
            if index in self.skipped:
                payload = self.progress()
                payload["duplicate"] = True
                payload["skip"] = self.skipped[index]
                return 200, payload
            if index in self.answered:
                return 409, {"error": "already-answered", "got": index}
            expected = self.next_index()
            if index != expected:
                return 409, {
                    "error": "out-of-order",
                    "expected": expected,
                    "got": index,
                }
            record = {
                "session_id": self.plan.session_id,
                "index": index,
                "reason": str(reason),
                "timestamp": str(timestamp),
            }
            with open(self.skip_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self.skipped[index] = record
            payload = self.progress()
            payload["skipped"] = True
            payload["skip"] = record
            return 200, payload

    def close(self) -> None:
        self._log_fh.close()


class _Handler(BaseHTTPRequestHandler):
    server_version = "fovmet"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        states = self.server.states  # type: ignore[attr-defined]
        if len(parts) == 2 and parts[0] == "stimuli":
            self._serve_stimulus(parts[1])
        elif len(parts) == 2 and parts[0] == "sessions" and parts[1] in states:
            state = states[parts[1]]
            with state.lock:
                payload = state.plan.client_manifest()
                payload.update(state.progress())
            self._json(200, payload)
        elif (
            len(parts) == 4
            and parts[0] == "sessions"
            and parts[1] in states
            and parts[2:] == ["trials", "next"]
        ):
            state = states[parts[1]]
            with state.lock:
                index = state.next_index()
                if index is None:
                    self._json(200, {"done": True})
                    return
                trial = state.plan.trials[index]
                self._json(200, {
                    "done": False,
                    "index": trial.index,
                    "stimulus_a": trial.stimulus_a,
                    "stimulus_b": trial.stimulus_b,
                    "stimulus_x": trial.stimulus_x,
                    "stimulus_ms": state.plan.stimulus_ms,
                    "blank_ms": state.plan.blank_ms,
                })
        else:
            self._json(404, {"error": "not-found", "path": self.path})

    def _serve_stimulus(self, opaque: str) -> None:
        path = self.server.stimulus_path(opaque)  # type: ignore[attr-defined]
        if path is None or not path.exists():
            self._json(404, {"error": "unknown-stimulus", "id": opaque})
            return
        body = path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        states = self.server.states  # type: ignore[attr-defined]
        if not (
            len(parts) == 3
            and parts[0] == "sessions"
            and parts[1] in states
            and parts[2] in ("responses", "skips")
        ):
            self._json(404, {"error": "not-found", "path": self.path})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            if parts[2] == "skips":
                status, payload = states[parts[1]].skip(
                    body["index"],
                    str(body.get("reason", "")),
                    str(body.get("timestamp", "")),
                )
            else:
                status, payload = states[parts[1]].submit(
                    body["index"],
                    body["response"],
                    float(body.get("response_time_ms", 0.0)),
                    str(body.get("timestamp", "")),
                    echo=body,
                )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            self._json(400, {"error": "bad-request", "message": str(exc)})
            return
        self._json(status, payload)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, states: dict, stimulus_dir: Path):
        super().__init__(address, _Handler)
        self.states = states
        self._stimulus_dir = Path(stimulus_dir)
        self._known = set()
        for state in states.values():
            self._known.update(state.plan.stimuli)

    def stimulus_path(self, opaque: str) -> Path | None:
        if opaque not in self._known:
            return None
        return self._stimulus_dir / f"{opaque}.png"


class SessionServer:
    """Threaded HTTP server hosting one or more session plans.

    Each plan logs to log_dir/{session_id}.jsonl. Existing logs are
    replayed at construction so a restarted server resumes where the
    previous process stopped.
    """

    def __init__(
        self,
        plans,
        stimulus_dir,
        log_dir,
        host: str = "127.0.0.1",
        port: int = 0,
        require_stimuli: bool = True,
    ):
        if isinstance(plans, SessionPlan):
            plans = [plans]
        if not plans:
            raise ValueError("need at least one session plan")
        self.stimulus_dir = Path(stimulus_dir)
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        if require_stimuli:
            missing = [
                opaque
                for plan in plans
                for opaque in plan.stimuli
                if not (self.stimulus_dir / f"{opaque}.png").exists()
            ]
            if missing:
                raise FileNotFoundError(
                    f"{len(missing)} stimulus files missing from "
                    f"{self.stimulus_dir}, first: {missing[0]}.png"
                )
        self.states = {
            plan.session_id: _SessionState(
                plan, self.log_dir / f"{plan.session_id}.jsonl"
            )
            for plan in plans
        }
        self._http = _Server((host, port), self.states, self.stimulus_dir)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._http.server_address[1]

    @property
    def base_url(self) -> str:
        host = self._http.server_address[0]
        return f"http://{host}:{self.port}"

    def log_path(self, session_id: str) -> Path:
        return self.states[session_id].log_path

    def start(self) -> "SessionServer":
        self._thread = threading.Thread(
            target=self._http.serve_forever, daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._http.serve_forever()

    def shutdown(self) -> None:
        self._http.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._http.server_close()
        for state in self.states.values():
            state.close()


def serve_sessions(
    plan,
    stimulus_dir,
    log_dir,
    host: str = "127.0.0.1",
    port: int = 0,
    require_stimuli: bool = True,
) -> SessionServer:
    """Construct and start a server for one plan (or a list of plans)."""
    return SessionServer(
        plan, stimulus_dir, log_dir, host=host, port=port,
        require_stimuli=require_stimuli,
    ).start()
