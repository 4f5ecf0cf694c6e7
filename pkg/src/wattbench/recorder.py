"""HTTP service for recording and replaying input automation.

A browser-based front end posts raw input events here; the service
forwards them to the device (so the operator sees their effect live),
buffers them while a recording is open, and normalizes the buffer into
a stored script on stop.  Scripts replay through the same service.

Endpoints:
    GET  /api/screen                     current screenshot (PNG)
    GET  /api/profile                    device screen geometry (JSON)
    GET  /api/automations[?app=ID]       stored scripts
    POST /api/input                      {"events": [...]} raw events
    POST /api/record/start               {"app_id": ...}
    POST /api/record/stop                {"label": ...} -> saved script
    POST /api/replay                     {"app": ..., "label": ...}
"""

from __future__ import annotations

import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .adblink import AdbClient, AdbError, DeviceProfile
from .automation import (TAP_THRESHOLD_PX, CoordinateOutOfBounds, InvalidScript,
                         KeyEvent, PointerEvent, RawEvent, ScriptStore, Script,
                         TextEvent, UnknownScript, UnpairedPointerEvent, _shell_text,
                         normalize, parse_raw_event, replay)
from .clock import Clock, RealClock

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class RecorderService:
    """Recording state machine plus the device it drives."""

    def __init__(self, client: AdbClient, serial: str, profile: DeviceProfile,
                 store: ScriptStore, clock: Clock | None = None):
        self.client = client
        self.serial = serial
        self.profile = profile
        self.store = store
        self.clock = clock or RealClock()
        self._lock = threading.Lock()
        self.recording_app: str | None = None
        self.events: list[RawEvent] = []
        self._pending_down: PointerEvent | None = None

    # -- device passthrough

    def screenshot_png(self) -> bytes:
        return self.client.shell(self.serial, "screencap -p").stdout

    def _forward(self, ev: RawEvent) -> bool:
        """Feed the event to the device; gestures go out on pointer-up."""
        if isinstance(ev, PointerEvent):
            if ev.action == "down":
                self._pending_down = ev
                return False
            if ev.action == "up" and self._pending_down is not None:
                down, self._pending_down = self._pending_down, None
                dist = math.hypot(ev.x_px - down.x_px, ev.y_px - down.y_px)
                if dist < TAP_THRESHOLD_PX:
                    cmd = f"input tap {round(down.x_px)} {round(down.y_px)}"
                else:
                    dur = max(int(ev.ts_ms - down.ts_ms), 1)
                    cmd = (f"input swipe {round(down.x_px)} {round(down.y_px)} "
                           f"{round(ev.x_px)} {round(ev.y_px)} {dur}")
                self.client.shell(self.serial, cmd)
                return True
            return False
        if isinstance(ev, KeyEvent):
            self.client.shell(self.serial, f"input keyevent {ev.keycode}")
            return True
        if isinstance(ev, TextEvent):
            self.client.shell(self.serial, f"input text {_shell_text(ev.text)}")
            return True
        return False

    # -- API operations

    def post_input(self, body: dict) -> dict:
        raw = body.get("events")
        if not isinstance(raw, list):
            raise ApiError(400, "body must carry an 'events' list")
        try:
            events = [parse_raw_event(e) for e in raw]
        except (ValueError, TypeError, KeyError) as exc:
            raise ApiError(400, f"bad event: {exc}")
        with self._lock:
            for ev in events:
                if isinstance(ev, PointerEvent) and not (
                        0 <= ev.x_px < self.profile.screen_width_px
                        and 0 <= ev.y_px < self.profile.screen_height_px):
                    raise ApiError(400, f"({ev.x_px}, {ev.y_px}) is off screen")
            forwarded = sum(1 for ev in events if self._forward(ev))
            if self.recording_app is not None:
                self.events.extend(events)
        return {"ok": True, "forwarded": forwarded,
                "recording": self.recording_app is not None}

    def record_start(self, body: dict) -> dict:
        app_id = body.get("app_id")
        if not isinstance(app_id, str) or not app_id:
            raise ApiError(400, "app_id required")
        with self._lock:
            if self.recording_app is not None:
                raise ApiError(409, f"already recording for {self.recording_app}")
            self.recording_app = app_id
            self.events = []
            self._pending_down = None
        return {"ok": True, "app_id": app_id}

    def record_stop(self, body: dict) -> dict:
        label = body.get("label")
        if not isinstance(label, str) or not label:
            raise ApiError(400, "label required")
        with self._lock:
            if self.recording_app is None:
                raise ApiError(409, "no recording in progress")
            app_id = self.recording_app
            events = self.events
            self.recording_app = None
            self.events = []
        try:
            commands = normalize(events, self.profile)
            script = Script(app_id, label, self.profile, tuple(commands))
            self.store.save(script)
        except (CoordinateOutOfBounds, UnpairedPointerEvent, InvalidScript) as exc:
            raise ApiError(400, str(exc))
        return {"ok": True, "script": script.to_dict()}

    def do_replay(self, body: dict) -> dict:
        app = body.get("app")
        label = body.get("label")
        if not isinstance(app, str) or not isinstance(label, str):
            raise ApiError(400, "app and label required")
        try:
            script = self.store.load(app, label)
        except UnknownScript:
            raise ApiError(404, f"no script {app}/{label}")
        sent = replay(self.client, self.serial, script,
                      profile=self.profile, clock=self.clock)
        return {"ok": True, "commands_sent": sent}

    def list_automations(self, app: str | None) -> dict:
        entries = [{"app_id": a, "label": l} for a, l in self.store.list(app)]
        return {"ok": True, "automations": entries}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> RecorderService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        log.debug("recorder http: " + fmt, *args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw or b"{}")
        except json.JSONDecodeError as exc:
            raise ApiError(400, f"bad JSON body: {exc}")
        if not isinstance(body, dict):
            raise ApiError(400, "JSON body must be an object")
        return body

    def do_OPTIONS(self):  # CORS preflight for the browser front end
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        try:
            path, _, query = self.path.partition("?")
            if path == "/api/screen":
                png = self.service.screenshot_png()
                self.send_response(200)
                self.send_header("Content-Type", "image/png")
                self.send_header("Content-Length", str(len(png)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(png)
                return
            if path == "/api/profile":
                self._send_json(200, {"ok": True,
                                      "profile": self.service.profile.to_dict()})
                return
            if path == "/api/automations":
                app = None
                for part in query.split("&"):
                    if part.startswith("app="):
                        app = part.removeprefix("app=")
                self._send_json(200, self.service.list_automations(app))
                return
            self._send_json(404, {"ok": False, "error": f"no such path {path}"})
        except ApiError as exc:
            self._send_json(exc.status, {"ok": False, "error": str(exc)})
        except AdbError as exc:
            self._send_json(502, {"ok": False, "error": f"device: {exc}"})

    def do_POST(self):
        try:
            body = self._read_json()
            routes = {
                "/api/input": self.service.post_input,
                "/api/record/start": self.service.record_start,
                "/api/record/stop": self.service.record_stop,
                "/api/replay": self.service.do_replay,
            }
            handler = routes.get(self.path)
            if handler is None:
                self._send_json(404, {"ok": False, "error": f"no such path {self.path}"})
                return
            self._send_json(200, handler(body))
        except ApiError as exc:
            self._send_json(exc.status, {"ok": False, "error": str(exc)})
        except AdbError as exc:
            self._send_json(502, {"ok": False, "error": f"device: {exc}"})


class RecorderHandle:
    def __init__(self, server: ThreadingHTTPServer, thread: threading.Thread,
                 service: RecorderService):
        self._server = server
        self._thread = thread
        self.service = service

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "RecorderHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(service: RecorderService, host: str = "127.0.0.1",
          port: int = 0) -> RecorderHandle:
    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    server.service = service  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, name="recorder-http",
                              daemon=True)
    thread.start()
    return RecorderHandle(server, thread, service)
