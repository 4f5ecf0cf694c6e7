"""Device-independent input automation.

Recorded raw input (pixel coordinates, millisecond timestamps) is
normalized into scripts whose coordinates are ratios of the usable
screen rectangle, so a script captured on one device replays on another
with a different resolution or toolbar layout.  Replay denormalizes the
ratios through the target device's profile and feeds `input` shell
commands over an ADB connection.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .adblink import AdbClient, DeviceProfile
from .clock import Clock, RealClock

TAP_THRESHOLD_PX = 24.0
GAP_THRESHOLD_MS = 1000
MAX_WAIT_MS = 60000

COMMAND_KINDS = ("tap", "swipe", "text", "keyevent", "wait")


class InvalidScript(Exception):
    """Script JSON violates the schema."""


class CoordinateOutOfBounds(Exception):
    """Raw pointer event lies outside the device screen."""


class UnpairedPointerEvent(Exception):
    """Pointer stream has a down without an up, or vice versa."""


class UnknownScript(KeyError):
    """No stored script under the requested app/label."""


# --- raw events -------------------------------------------------------------

@dataclass(frozen=True)
class PointerEvent:
    action: str  # down | move | up
    x_px: float
    y_px: float
    ts_ms: float


@dataclass(frozen=True)
class KeyEvent:
    keycode: int
    ts_ms: float


@dataclass(frozen=True)
class TextEvent:
    text: str
    ts_ms: float


RawEvent = PointerEvent | KeyEvent | TextEvent


def parse_raw_event(d: dict) -> RawEvent:
    kind = d.get("type")
    if kind == "pointer":
        action = d.get("action")
        if action not in ("down", "move", "up"):
            raise ValueError(f"bad pointer action {action!r}")
        return PointerEvent(action, float(d["x_px"]), float(d["y_px"]), float(d["ts_ms"]))
    if kind == "key":
        return KeyEvent(int(d["keycode"]), float(d["ts_ms"]))
    if kind == "text":
        return TextEvent(str(d["text"]), float(d["ts_ms"]))
    raise ValueError(f"bad raw event type {kind!r}")


# --- commands and scripts ---------------------------------------------------

@dataclass(frozen=True)
class Command:
    kind: str
    x_ratio: float | None = None
    y_ratio: float | None = None
    x2_ratio: float | None = None
    y2_ratio: float | None = None
    duration_ms: int | None = None
    text: str | None = None
    keycode: int | None = None

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "tap":
            d.update(x_ratio=self.x_ratio, y_ratio=self.y_ratio)
        elif self.kind == "swipe":
            d.update(x_ratio=self.x_ratio, y_ratio=self.y_ratio,
                     x2_ratio=self.x2_ratio, y2_ratio=self.y2_ratio,
                     duration_ms=self.duration_ms)
        elif self.kind == "text":
            d["text"] = self.text
        elif self.kind == "keyevent":
            d["keycode"] = self.keycode
        elif self.kind == "wait":
            d["duration_ms"] = self.duration_ms
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Command":
        kind = d.get("kind")
        if kind not in COMMAND_KINDS:
            raise InvalidScript(f"unknown command kind {kind!r}")
        try:
            if kind == "tap":
                cmd = cls(kind, x_ratio=float(d["x_ratio"]), y_ratio=float(d["y_ratio"]))
            elif kind == "swipe":
                cmd = cls(kind, x_ratio=float(d["x_ratio"]), y_ratio=float(d["y_ratio"]),
                          x2_ratio=float(d["x2_ratio"]), y2_ratio=float(d["y2_ratio"]),
                          duration_ms=int(d["duration_ms"]))
            elif kind == "text":
                cmd = cls(kind, text=str(d["text"]))
            elif kind == "keyevent":
                cmd = cls(kind, keycode=int(d["keycode"]))
            else:
                cmd = cls(kind, duration_ms=int(d["duration_ms"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScript(f"bad {kind} command: {exc}") from exc
        cmd.validate()
        return cmd

    def validate(self) -> None:
        ratios = [r for r in (self.x_ratio, self.y_ratio, self.x2_ratio, self.y2_ratio)
                  if r is not None]
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise InvalidScript(f"{self.kind} ratio outside [0, 1]")
        if self.duration_ms is not None and not 0 <= self.duration_ms <= MAX_WAIT_MS:
            raise InvalidScript(f"{self.kind} duration outside [0, {MAX_WAIT_MS}] ms")
        if self.kind == "keyevent" and (self.keycode is None or self.keycode < 0):
            raise InvalidScript("keyevent needs a non-negative keycode")
        if self.kind == "text" and not self.text:
            raise InvalidScript("text command needs text")


@dataclass(frozen=True)
class Script:
    app_id: str
    label: str
    source_profile: DeviceProfile
    commands: tuple[Command, ...]

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "label": self.label,
            "source_profile": self.source_profile.to_dict(),
            "commands": [c.to_dict() for c in self.commands],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Script":
        try:
            app_id, label = d["app_id"], d["label"]
            profile = DeviceProfile.from_dict(d["source_profile"])
            commands = tuple(Command.from_dict(c) for c in d["commands"])
        except InvalidScript:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScript(f"bad script: {exc}") from exc
        if not isinstance(app_id, str) or not app_id:
            raise InvalidScript("app_id must be a non-empty string")
        if not isinstance(label, str) or not label:
            raise InvalidScript("label must be a non-empty string")
        return cls(app_id, label, profile, commands)

    @classmethod
    def from_json(cls, text: str) -> "Script":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidScript(f"not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidScript("script JSON must be an object")
        return cls.from_dict(d)


# --- normalization ----------------------------------------------------------

def _ratio(px: float, origin: int, extent: int) -> float:
    r = (px - origin) / extent
    return min(max(r, 0.0), 1.0)


def _check_on_screen(ev: PointerEvent, profile: DeviceProfile) -> None:
    if not (0 <= ev.x_px < profile.screen_width_px
            and 0 <= ev.y_px < profile.screen_height_px):
        raise CoordinateOutOfBounds(
            f"({ev.x_px}, {ev.y_px}) outside "
            f"{profile.screen_width_px}x{profile.screen_height_px} at {ev.ts_ms} ms")


def normalize(events: Sequence[RawEvent], profile: DeviceProfile, *,
              tap_threshold_px: float = TAP_THRESHOLD_PX,
              gap_threshold_ms: float = GAP_THRESHOLD_MS,
              max_wait_ms: int = MAX_WAIT_MS) -> list[Command]:
    """Turn a raw event stream into normalized commands.

    Down/up pairs closer than tap_threshold_px become taps at the down
    position; anything farther becomes a swipe.  Intermediate moves are
    dropped.  Idle gaps of at least gap_threshold_ms between gestures
    become explicit waits, capped at max_wait_ms.
    """
    commands: list[Command] = []
    down: PointerEvent | None = None
    last_end_ms: float | None = None

    def emit_gap(start_ms: float) -> None:
        nonlocal last_end_ms
        if last_end_ms is not None:
            gap = start_ms - last_end_ms
            if gap >= gap_threshold_ms:
                commands.append(Command("wait", duration_ms=min(int(gap), max_wait_ms)))
        last_end_ms = None

    ox, oy = profile.usable_origin_x_px, profile.usable_origin_y_px
    uw, uh = profile.usable_width_px, profile.usable_height_px

    for ev in sorted(events, key=lambda e: e.ts_ms):
        if isinstance(ev, PointerEvent):
            _check_on_screen(ev, profile)
            if ev.action == "down":
                if down is not None:
                    raise UnpairedPointerEvent(f"down at {ev.ts_ms} ms while a gesture is open")
                emit_gap(ev.ts_ms)
                down = ev
            elif ev.action == "up":
                if down is None:
                    raise UnpairedPointerEvent(f"up at {ev.ts_ms} ms without a down")
                dist = math.hypot(ev.x_px - down.x_px, ev.y_px - down.y_px)
                if dist < tap_threshold_px:
                    commands.append(Command(
                        "tap",
                        x_ratio=_ratio(down.x_px, ox, uw),
                        y_ratio=_ratio(down.y_px, oy, uh)))
                else:
                    dur = min(max(int(ev.ts_ms - down.ts_ms), 1), max_wait_ms)
                    commands.append(Command(
                        "swipe",
                        x_ratio=_ratio(down.x_px, ox, uw),
                        y_ratio=_ratio(down.y_px, oy, uh),
                        x2_ratio=_ratio(ev.x_px, ox, uw),
                        y2_ratio=_ratio(ev.y_px, oy, uh),
                        duration_ms=dur))
                last_end_ms = ev.ts_ms
                down = None
            # moves only matter for their endpoints, which down/up carry
        elif isinstance(ev, KeyEvent):
            if down is not None:
                raise UnpairedPointerEvent(f"key event at {ev.ts_ms} ms inside a gesture")
            emit_gap(ev.ts_ms)
            commands.append(Command("keyevent", keycode=ev.keycode))
            last_end_ms = ev.ts_ms
        elif isinstance(ev, TextEvent):
            if down is not None:
                raise UnpairedPointerEvent(f"text event at {ev.ts_ms} ms inside a gesture")
            emit_gap(ev.ts_ms)
            commands.append(Command("text", text=ev.text))
            last_end_ms = ev.ts_ms

    if down is not None:
        raise UnpairedPointerEvent(f"down at {down.ts_ms} ms never released")
    return commands


# --- denormalization and replay ---------------------------------------------

def _pixel(ratio: float, origin: int, extent: int) -> int:
    px = round(origin + ratio * extent)
    return min(max(px, origin), origin + extent - 1)


_TEXT_SAFE = re.compile(r"[A-Za-z0-9 @._:/,+-]*\Z")


def _shell_text(text: str) -> str:
    # `input text` has no quoting; restrict to characters that survive
    # the shell verbatim and encode spaces the way the tool expects.
    if not _TEXT_SAFE.match(text):
        raise InvalidScript(f"text {text!r} has characters input text cannot carry")
    return text.replace(" ", "%s")


def denormalize_command(cmd: Command, profile: DeviceProfile) -> str | None:
    """Shell command for one script command; None for waits."""
    ox, oy = profile.usable_origin_x_px, profile.usable_origin_y_px
    uw, uh = profile.usable_width_px, profile.usable_height_px
    if cmd.kind == "tap":
        return f"input tap {_pixel(cmd.x_ratio, ox, uw)} {_pixel(cmd.y_ratio, oy, uh)}"
    if cmd.kind == "swipe":
        return ("input swipe "
                f"{_pixel(cmd.x_ratio, ox, uw)} {_pixel(cmd.y_ratio, oy, uh)} "
                f"{_pixel(cmd.x2_ratio, ox, uw)} {_pixel(cmd.y2_ratio, oy, uh)} "
                f"{cmd.duration_ms}")
    if cmd.kind == "text":
        return f"input text {_shell_text(cmd.text)}"
    if cmd.kind == "keyevent":
        return f"input keyevent {cmd.keycode}"
    if cmd.kind == "wait":
        return None
    raise InvalidScript(f"unknown command kind {cmd.kind!r}")


def denormalize(script: Script | Iterable[Command], profile: DeviceProfile) -> list[str]:
    """Shell commands for a whole script, waits omitted."""
    commands = script.commands if isinstance(script, Script) else script
    out = []
    for cmd in commands:
        shell = denormalize_command(cmd, profile)
        if shell is not None:
            out.append(shell)
    return out


def replay(client: AdbClient, serial: str, script: Script,
           profile: DeviceProfile | None = None,
           clock: Clock | None = None) -> int:
    """Replay a script on a device; returns the number of input commands sent.

    The target profile defaults to the script's source profile.  Waits
    and swipe durations advance the clock so the replayed timeline keeps
    the recording's relative timing.
    """
    profile = profile or script.source_profile
    clock = clock or RealClock()
    sent = 0
    for cmd in script.commands:
        if cmd.kind == "wait":
            clock.sleep(cmd.duration_ms / 1000.0)
            continue
        client.shell(serial, denormalize_command(cmd, profile))
        sent += 1
        if cmd.kind == "swipe":
            clock.sleep(cmd.duration_ms / 1000.0)
    return sent


# --- on-disk script store ---------------------------------------------------

_NAME_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*\Z")


def _safe_name(name: str, what: str) -> str:
    if not _NAME_RE.match(name) or ".." in name:
        raise InvalidScript(f"bad {what} {name!r}")
    return name


class ScriptStore:
    """Directory of scripts laid out as <root>/<app_id>/<label>.json."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, app_id: str, label: str) -> Path:
        return self.root / _safe_name(app_id, "app id") / (_safe_name(label, "label") + ".json")

    def save(self, script: Script) -> Path:
        path = self.path(script.app_id, script.label)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(script.to_json() + "\n")
        return path

    def load(self, app_id: str, label: str) -> Script:
        path = self.path(app_id, label)
        if not path.exists():
            raise UnknownScript(f"{app_id}/{label}")
        return Script.from_json(path.read_text())

    def list(self, app_id: str | None = None) -> list[tuple[str, str]]:
        """(app_id, label) pairs, sorted."""
        if not self.root.exists():
            return []
        apps = [self.root / app_id] if app_id else sorted(self.root.iterdir())
        out = []
        for app_dir in apps:
            if not app_dir.is_dir():
                continue
            for f in sorted(app_dir.glob("*.json")):
                out.append((app_dir.name, f.stem))
        return out
