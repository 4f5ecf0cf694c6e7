"""Attention-aware screen dimming: policy, controller, telemetry analysis.

While any attention-loss event is open the screen is held at a dimmed
target derived from the user's brightness; when the last event ends the
original brightness (or auto mode) comes back.  Telemetry records the
alternating active/dim intervals, from which we estimate how much
charge dimming saved on a given device's power model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .clock import Clock, RealClock
from .metrics import empirical_cdf
from .sim import BRIGHTNESS_MAX, PowerModel

TELEMETRY_CSV_HEADER = ["session_id", "ts_start_ms", "ts_end_ms", "state", "brightness"]


class UnmatchedEnd(Exception):
    """An event ended that was never started."""


class MalformedTelemetry(ValueError):
    """Telemetry CSV rows violate the schema."""


# --- policy -----------------------------------------------------------------

@dataclass(frozen=True)
class DimPolicy:
    """Brightness bands: low dims to zero, mid halves, high pins to a fixed level."""

    low_max: int = 100
    high_min: int = 200
    high_target: int = 150

    def __post_init__(self):
        if not 0 <= self.low_max < self.high_min <= BRIGHTNESS_MAX:
            raise ValueError("need 0 <= low_max < high_min <= 250")
        if not 0 <= self.high_target <= BRIGHTNESS_MAX:
            raise ValueError("high_target outside [0, 250]")

    def dim_target(self, brightness: int) -> int:
        if not 0 <= brightness <= BRIGHTNESS_MAX:
            raise ValueError(f"brightness {brightness} outside [0, {BRIGHTNESS_MAX}]")
        if brightness <= self.low_max:
            return 0
        if brightness >= self.high_min:
            return self.high_target
        return round(brightness / 2)


DEFAULT_POLICY = DimPolicy()


def dim_target(brightness: int, policy: DimPolicy = DEFAULT_POLICY) -> int:
    return policy.dim_target(brightness)


def savings_table(model: PowerModel,
                  brightness_values: Sequence[int] = (0, 50, 100, 150, 200, 250),
                  policy: DimPolicy = DEFAULT_POLICY) -> list[dict]:
    """Per-brightness idle current plus aggressive/conservative savings.

    Aggressive assumes dimming all the way to zero; conservative dims to
    the policy target.  Percentages are of the undimmed screen current.
    """
    rows = []
    floor = model.screen_current_mA(0)
    for b in brightness_values:
        cur = model.screen_current_mA(b)
        target = policy.dim_target(b)
        rows.append({
            "brightness": int(b),
            "current_mA": cur,
            "dim_target": target,
            "aggressive_savings_pct": 100.0 * (1.0 - floor / cur),
            "conservative_savings_pct":
                100.0 * (1.0 - model.screen_current_mA(target) / cur),
        })
    return rows


# --- controller -------------------------------------------------------------

class BrightnessPort(Protocol):
    """What the controller needs from a device."""

    def get(self) -> tuple[int, str]:
        """Current (brightness, mode); mode is 'auto' or 'manual'."""
        ...

    def set_brightness(self, value: int) -> None:
        """Switch to manual mode at the given brightness."""
        ...

    def restore(self, brightness: int, mode: str) -> None:
        """Put the device back to the saved brightness or auto mode."""
        ...


class AdbBrightnessPort:
    """BrightnessPort over an ADB shell connection."""

    def __init__(self, client, serial: str):
        self.client = client
        self.serial = serial

    def get(self) -> tuple[int, str]:
        b = self.client.shell(self.serial, "settings get system screen_brightness").text()
        m = self.client.shell(self.serial, "settings get system screen_brightness_mode").text()
        return int(b.strip()), ("auto" if m.strip() == "1" else "manual")

    def set_brightness(self, value: int) -> None:
        self.client.shell(self.serial, "settings put system screen_brightness_mode 0")
        self.client.shell(self.serial, f"settings put system screen_brightness {value}")

    def restore(self, brightness: int, mode: str) -> None:
        if mode == "auto":
            self.client.shell(self.serial, "settings put system screen_brightness_mode 1")
        else:
            self.client.shell(self.serial, "settings put system screen_brightness_mode 0")
            self.client.shell(self.serial, f"settings put system screen_brightness {brightness}")


@dataclass(frozen=True)
class TelemetryInterval:
    session_id: str
    ts_start_ms: int
    ts_end_ms: int
    state: str  # active | dim
    brightness: int

    def __post_init__(self):
        if self.state not in ("active", "dim"):
            raise MalformedTelemetry(f"bad state {self.state!r}")
        if self.ts_end_ms < self.ts_start_ms:
            raise MalformedTelemetry("interval ends before it starts")
        if not 0 <= self.brightness <= BRIGHTNESS_MAX:
            raise MalformedTelemetry(f"brightness {self.brightness} outside [0, 250]")

    @property
    def duration_ms(self) -> int:
        return self.ts_end_ms - self.ts_start_ms

    @property
    def device_id(self) -> str:
        return self.session_id.split("/", 1)[0]


class DimController:
    """Reference-counted dimming over attention-loss events.

    Overlapping events of different kinds share one dim episode: the
    first start saves brightness and mode and dims, the last end
    restores.  Starting an already-open kind is a no-op; ending an
    unopened kind raises UnmatchedEnd.  Interval telemetry accumulates
    in .intervals, carrying the user's brightness in both states.
    """

    def __init__(self, port: BrightnessPort, session_id: str,
                 policy: DimPolicy = DEFAULT_POLICY,
                 clock: Clock | None = None):
        self.port = port
        self.session_id = session_id
        self.policy = policy
        self.clock = clock or RealClock()
        self.active_kinds: set[str] = set()
        self.saved: tuple[int, str] | None = None
        self.intervals: list[TelemetryInterval] = []
        self._state = "active"
        self._state_since_ms = self._now_ms()
        self._user_brightness: int | None = None

    def _now_ms(self) -> int:
        return self.clock.now_ns() // 1_000_000

    @property
    def is_dimmed(self) -> bool:
        return self._state == "dim"

    @property
    def active_events(self) -> int:
        return len(self.active_kinds)

    def _close_interval(self, now_ms: int, brightness: int) -> None:
        self.intervals.append(TelemetryInterval(
            self.session_id, self._state_since_ms, now_ms, self._state, brightness))
        self._state_since_ms = now_ms

    def on_event_start(self, kind: str) -> None:
        if kind in self.active_kinds:
            return
        self.active_kinds.add(kind)
        if len(self.active_kinds) > 1:
            return
        brightness, mode = self.port.get()
        self.saved = (brightness, mode)
        self._user_brightness = brightness
        self.port.set_brightness(self.policy.dim_target(brightness))
        self._close_interval(self._now_ms(), brightness)
        self._state = "dim"

    def on_event_end(self, kind: str) -> None:
        if kind not in self.active_kinds:
            raise UnmatchedEnd(f"event {kind!r} is not open")
        self.active_kinds.remove(kind)
        if self.active_kinds:
            return
        assert self.saved is not None
        brightness, mode = self.saved
        self.port.restore(brightness, mode)
        self._close_interval(self._now_ms(), brightness)
        self._state = "active"
        self.saved = None

    def close(self) -> list[TelemetryInterval]:
        """Close the open interval and return the telemetry collected so far."""
        brightness = self._user_brightness
        if brightness is None:
            brightness, _ = self.port.get()
        now = self._now_ms()
        if now > self._state_since_ms:
            self._close_interval(now, brightness)
        return list(self.intervals)


# --- telemetry IO -----------------------------------------------------------

def write_telemetry_csv(path: str | Path, intervals: Iterable[TelemetryInterval]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TELEMETRY_CSV_HEADER)
        for iv in intervals:
            w.writerow([iv.session_id, iv.ts_start_ms, iv.ts_end_ms, iv.state, iv.brightness])


def read_telemetry_csv(path: str | Path) -> list[TelemetryInterval]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != TELEMETRY_CSV_HEADER:
            raise MalformedTelemetry(f"unexpected telemetry header {header!r}")
        out = []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise MalformedTelemetry(f"line {lineno}: expected 5 fields")
            try:
                out.append(TelemetryInterval(row[0], int(row[1]), int(row[2]),
                                             row[3], int(row[4])))
            except ValueError as exc:
                raise MalformedTelemetry(f"line {lineno}: {exc}") from exc
    return out


# --- telemetry analysis -----------------------------------------------------

@dataclass(frozen=True)
class DimWindow:
    """A dim episode together with the active time that preceded it."""

    session_id: str
    active_ms: int
    dim_ms: int
    brightness: int

    @property
    def dim_fraction(self) -> float:
        total = self.active_ms + self.dim_ms
        return self.dim_ms / total if total else 0.0


def dim_windows(intervals: Sequence[TelemetryInterval]) -> list[DimWindow]:
    """Pair each dim interval with the active interval that led into it.

    Pairing is per session, in time order: a dim interval's companion is
    the immediately preceding active interval ending where the dim
    starts.  A dim with no such companion stands alone (fraction 1).
    Trailing active time with no dim after it produces no window.
    """
    by_session: dict[str, list[TelemetryInterval]] = {}
    for iv in intervals:
        by_session.setdefault(iv.session_id, []).append(iv)
    windows = []
    for session_id in sorted(by_session):
        ivs = sorted(by_session[session_id], key=lambda iv: iv.ts_start_ms)
        prev: TelemetryInterval | None = None
        for iv in ivs:
            if iv.state == "dim":
                active_ms = 0
                if prev is not None and prev.state == "active" \
                        and prev.ts_end_ms == iv.ts_start_ms:
                    active_ms = prev.duration_ms
                windows.append(DimWindow(session_id, active_ms, iv.duration_ms,
                                         iv.brightness))
            prev = iv
    return windows


def dim_fractions(intervals: Sequence[TelemetryInterval]) -> list[float]:
    return [w.dim_fraction for w in dim_windows(intervals)]


def fraction_cdf(intervals: Sequence[TelemetryInterval]) -> tuple[list[float], list[float]]:
    return empirical_cdf(dim_fractions(intervals))


def estimate_savings(intervals: Sequence[TelemetryInterval], model: PowerModel,
                     policy: DimPolicy = DEFAULT_POLICY) -> float:
    """Fraction of screen charge the dim episodes saved.

    The baseline spends I(B) over every interval at the user's
    brightness B; dimming spends I(dim_target(B)) instead during dim
    intervals.  Returns saved/baseline in [0, 1]; zero total time gives 0.
    """
    baseline = 0.0
    saved = 0.0
    for iv in intervals:
        cur = model.screen_current_mA(iv.brightness)
        baseline += cur * iv.duration_ms
        if iv.state == "dim":
            dimmed = model.screen_current_mA(policy.dim_target(iv.brightness))
            saved += (cur - dimmed) * iv.duration_ms
    return saved / baseline if baseline > 0 else 0.0
