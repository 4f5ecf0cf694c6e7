"""A simulated Android device speaking the ADB smart-socket protocol.

The simulator models whole-device current draw as a sum of three terms:
a piecewise-linear screen/idle term over brightness, a CPU term, and a
network-throughput term.  All device state changes are driven by shell
commands arriving over the wire, recorded on a timeline, and every
derived quantity (battery samples, /proc counters) is evaluated
analytically from that timeline.  With a virtual clock the whole thing
is bit-for-bit deterministic.
"""

from __future__ import annotations

import io
import json
import logging
import socket
import socketserver
import threading
from bisect import bisect_right
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .adblink import (DeviceProfile, ProtocolError, encode_frame, read_frame,
                      validate_serial)
from .clock import Clock, RealClock, VirtualClock

log = logging.getLogger(__name__)

NS = 1_000_000_000
BRIGHTNESS_MAX = 250


class BindFailed(Exception):
    """Could not bind the simulator's TCP endpoint."""


# --- power model ------------------------------------------------------------

@dataclass(frozen=True)
class PowerModel:
    """Whole-device current model.

    brightness_points maps brightness (0..250) to median idle current in mA
    and must cover both endpoints, strictly increasing in both columns;
    between points the current is interpolated piecewise-linearly.
    """

    brightness_points: tuple[tuple[int, float], ...]
    cpu_coeff_mA_per_percent: float = 0.0
    network_coeff_mA_per_MBps: float = 0.0

    def __post_init__(self):
        pts = tuple((int(b), float(c)) for b, c in self.brightness_points)
        object.__setattr__(self, "brightness_points", pts)
        if len(pts) < 2:
            raise ValueError("power model needs at least two brightness points")
        bs = [b for b, _ in pts]
        cs = [c for _, c in pts]
        if bs[0] != 0 or bs[-1] != BRIGHTNESS_MAX:
            raise ValueError("brightness points must cover 0 and 250")
        if any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
            raise ValueError("brightness points must be strictly increasing")
        if any(c2 <= c1 for c1, c2 in zip(cs, cs[1:])):
            raise ValueError("currents must be strictly increasing with brightness")
        if any(c <= 0 for c in cs):
            raise ValueError("currents must be positive")
        if self.cpu_coeff_mA_per_percent < 0 or self.network_coeff_mA_per_MBps < 0:
            raise ValueError("load coefficients must be non-negative")

    def screen_current_mA(self, brightness: float) -> float:
        if not 0 <= brightness <= BRIGHTNESS_MAX:
            raise ValueError(f"brightness {brightness} outside [0, {BRIGHTNESS_MAX}]")
        bs = [b for b, _ in self.brightness_points]
        cs = [c for _, c in self.brightness_points]
        return float(np.interp(brightness, bs, cs))

    def current_mA(self, brightness: float, cpu_percent: float = 0.0,
                   throughput_MBps: float = 0.0) -> float:
        return (self.screen_current_mA(brightness)
                + self.cpu_coeff_mA_per_percent * cpu_percent
                + self.network_coeff_mA_per_MBps * throughput_MBps)

    def to_dict(self) -> dict:
        return {
            "brightness_points": [list(p) for p in self.brightness_points],
            "cpu_coeff_mA_per_percent": self.cpu_coeff_mA_per_percent,
            "network_coeff_mA_per_MBps": self.network_coeff_mA_per_MBps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerModel":
        # Accept either a bare model or a full device config.
        if "power" in d and "brightness_points" not in d:
            d = d["power"]
        return cls(
            brightness_points=tuple(tuple(p) for p in d["brightness_points"]),
            cpu_coeff_mA_per_percent=d.get("cpu_coeff_mA_per_percent", 0.0),
            network_coeff_mA_per_MBps=d.get("network_coeff_mA_per_MBps", 0.0),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PowerModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class AppLoad:
    """Per-app load model while the app is active in the foreground."""

    cpu_percent: float = 0.0
    bandwidth_MB_per_page: float = 0.0

    def __post_init__(self):
        if self.cpu_percent < 0 or self.bandwidth_MB_per_page < 0:
            raise ValueError("load model values must be non-negative")


@dataclass
class SimDeviceConfig:
    profile: DeviceProfile
    power: PowerModel
    brightness: int = 100
    brightness_mode: str = "manual"
    installed: set[str] = field(default_factory=set)
    rest_cpu_percent: float = 2.0
    apps: dict[str, AppLoad] = field(default_factory=dict)
    voltage_mV: float = 3850.0
    busy_hold_s: float = 15.0
    page_transfer_s: float = 10.0

    def __post_init__(self):
        if not 0 <= self.brightness <= BRIGHTNESS_MAX:
            raise ValueError("brightness outside [0, 250]")
        if self.brightness_mode not in ("auto", "manual"):
            raise ValueError("brightness_mode must be 'auto' or 'manual'")
        if not 0.0 <= self.rest_cpu_percent <= 5.0:
            raise ValueError("rest_cpu_percent outside the [0, 5] rest band")
        if self.voltage_mV <= 0:
            raise ValueError("voltage must be positive")
        if self.page_transfer_s <= 0:
            raise ValueError("page_transfer_s must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SimDeviceConfig":
        profile = DeviceProfile.from_dict(d["profile"])
        return cls(
            profile=profile,
            power=PowerModel.from_dict(d["power"]),
            brightness=d.get("brightness", 100),
            brightness_mode=d.get("brightness_mode", "manual"),
            installed=set(d.get("installed", [])),
            rest_cpu_percent=d.get("rest_cpu_percent", 2.0),
            apps={pkg: AppLoad(**load) for pkg, load in d.get("apps", {}).items()},
            voltage_mV=d.get("voltage_mV", 3850.0),
            busy_hold_s=d.get("busy_hold_s", 15.0),
            page_transfer_s=d.get("page_transfer_s", 10.0),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SimDeviceConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def bundled_profile_path(name: str) -> Path:
    """Path of a bundled device config (e.g. 'j7duo' or 'j7duo.json')."""
    if not name.endswith(".json"):
        name += ".json"
    return Path(str(resources.files("wattbench").joinpath("data", name)))


# --- state timeline ---------------------------------------------------------

class _Timeline:
    """Timestamped record of everything that affects current draw."""

    def __init__(self, epoch_ns: int, brightness: int, rest_cpu_percent: float):
        self.epoch_ns = epoch_ns
        self.rest = rest_cpu_percent
        self.brightness_events: list[tuple[int, int]] = [(epoch_ns, brightness)]
        # (start_ns, end_ns, cpu_percent) busy windows; non-overlapping, sorted.
        self.busy: list[list] = []
        # (start_ns, end_ns, rx_bytes, tx_bytes) page transfers.
        self.transfers: list[tuple[int, int, int, int]] = []

    def set_brightness(self, ts_ns: int, value: int) -> None:
        self.brightness_events.append((ts_ns, value))

    def stimulus(self, ts_ns: int, cpu_percent: float, hold_s: float) -> None:
        """App activity at ts keeps the CPU busy for hold_s."""
        if cpu_percent <= 0:
            return
        end = ts_ns + round(hold_s * NS)
        if self.busy and self.busy[-1][1] >= ts_ns and self.busy[-1][2] == cpu_percent:
            self.busy[-1][1] = max(self.busy[-1][1], end)
        else:
            if self.busy and self.busy[-1][1] > ts_ns:
                self.busy[-1][1] = ts_ns
            self.busy.append([ts_ns, end, cpu_percent])

    def add_transfer(self, ts_ns: int, total_bytes: int, window_s: float) -> None:
        tx = total_bytes // 10
        rx = total_bytes - tx
        self.transfers.append((ts_ns, ts_ns + round(window_s * NS), rx, tx))

    # -- point evaluation

    def brightness_at(self, ts_ns: int) -> int:
        idx = bisect_right(self.brightness_events, ts_ns, key=lambda e: e[0]) - 1
        return self.brightness_events[max(idx, 0)][1]

    def cpu_percent_at(self, ts_ns: int) -> float:
        pct = self.rest
        for start, end, p in self.busy:
            if start <= ts_ns < end:
                pct = self.rest + p
                break
        return min(pct, 100.0)

    def throughput_MBps_at(self, ts_ns: int) -> float:
        total = 0.0
        for start, end, rx, tx in self.transfers:
            if start <= ts_ns < end:
                total += (rx + tx) / 1e6 / ((end - start) / NS)
        return total

    # -- interval evaluation

    def breakpoints(self, t0_ns: int, t1_ns: int) -> list[int]:
        pts = {t0_ns, t1_ns}
        for ts, _ in self.brightness_events:
            if t0_ns < ts < t1_ns:
                pts.add(ts)
        for start, end, _ in self.busy:
            for ts in (start, end):
                if t0_ns < ts < t1_ns:
                    pts.add(ts)
        for start, end, _, _ in self.transfers:
            for ts in (start, end):
                if t0_ns < ts < t1_ns:
                    pts.add(ts)
        return sorted(pts)

    def busy_integral_jiffies(self, t1_ns: int) -> float:
        """Busy CPU time in jiffies (USER_HZ=100) accumulated since epoch."""
        total = 0.0
        for start, end, p in self.busy:
            lo, hi = max(start, self.epoch_ns), min(end, t1_ns)
            if hi > lo:
                eff = min(self.rest + p, 100.0) - self.rest
                total += eff * (hi - lo) / NS
        total += self.rest * max(t1_ns - self.epoch_ns, 0) / NS
        return total  # percent-seconds == jiffies at USER_HZ=100

    def bytes_at(self, ts_ns: int) -> tuple[int, int]:
        rx_total = tx_total = 0
        for start, end, rx, tx in self.transfers:
            if ts_ns >= end:
                rx_total += rx
                tx_total += tx
            elif ts_ns > start:
                frac = (ts_ns - start) / (end - start)
                rx_total += int(rx * frac)
                tx_total += int(tx * frac)
        return rx_total, tx_total


# --- the device -------------------------------------------------------------

class DeviceSimulator:
    """Holds device state and interprets shell commands.

    One in-flight command at a time (the lock); analytic reads take the
    same lock so they always see a consistent timeline.
    """

    def __init__(self, config: SimDeviceConfig, clock: Clock):
        self.config = config
        self.clock = clock
        self.serial = config.profile.serial
        self._lock = threading.RLock()
        self.epoch_ns = clock.now_ns()
        self.timeline = _Timeline(self.epoch_ns, config.brightness,
                                  config.rest_cpu_percent)
        self.brightness = config.brightness
        self.brightness_mode = config.brightness_mode
        self.installed: set[str] = set(config.installed)
        self.foreground: str | None = None
        self.settings: dict[tuple[str, str], str] = {
            ("system", "screen_brightness"): str(config.brightness),
            ("system", "screen_brightness_mode"):
                "1" if config.brightness_mode == "auto" else "0",
        }
        self.dnd = False
        self.app_data: dict[str, dict] = {}
        self.input_log: list[tuple[int, str]] = []
        self.command_log: list[tuple[int, str]] = []

    # -- analytics

    def instantaneous_current_mA(self, ts_ns: int | None = None) -> float:
        with self._lock:
            ts = self.clock.now_ns() if ts_ns is None else ts_ns
            return self.config.power.current_mA(
                self.timeline.brightness_at(ts),
                self.timeline.cpu_percent_at(ts),
                self.timeline.throughput_MBps_at(ts),
            )

    def segments(self, t0_ns: int, t1_ns: int) -> list[tuple[int, int, float]]:
        """Piecewise-constant (start_ns, end_ns, current_mA) over [t0, t1]."""
        with self._lock:
            pts = self.timeline.breakpoints(t0_ns, t1_ns)
            out = []
            for s, e in zip(pts, pts[1:]):
                out.append((s, e, self.instantaneous_current_mA(s)))
            return out

    def analytic_discharge_mAh(self, t0_ns: int, t1_ns: int) -> float:
        """Exact time-integral of current over the window, in mAh."""
        return sum(c * (e - s) / NS for s, e, c in self.segments(t0_ns, t1_ns)) / 3600.0

    def battery_samples(self, rate_hz: float, t0_ns: int, t1_ns: int,
                        include_end: bool = False) -> np.ndarray:
        """Columns ts_ns, current_mA, voltage_mV; samples at t0 + k/rate over [t0, t1)."""
        if rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        step_ns = NS / rate_hz
        n = max(int((t1_ns - t0_ns) / step_ns), 0)
        ts = t0_ns + np.arange(n) * step_ns
        if include_end and (n == 0 or ts[-1] < t1_ns):
            ts = np.append(ts, float(t1_ns))
        current = np.empty_like(ts)
        for s, e, c in self.segments(t0_ns, t1_ns):
            mask = (ts >= s) & (ts < e)
            current[mask] = c
        if len(ts) and include_end:
            current[-1] = self.instantaneous_current_mA(t1_ns)
        out = np.column_stack([ts, current, np.full_like(ts, self.config.voltage_mV)])
        return out

    # -- /proc synthesis

    def synth_proc_stat(self) -> str:
        with self._lock:
            now = self.clock.now_ns()
            busy_real = self.timeline.busy_integral_jiffies(now)
            idle_real = 100.0 * (now - self.epoch_ns) / NS - busy_real
            busy = int(busy_real)
            idle = int(idle_real)
            user = busy * 7 // 10
            system = busy - user
            fields = [user, 0, system, idle, 0, 0, 0, 0, 0, 0]
            line = "cpu  " + " ".join(str(v) for v in fields)
            line0 = "cpu0 " + " ".join(str(v) for v in fields)
            return f"{line}\n{line0}\nctxt 0\nbtime 0\nprocesses 1\n"

    def synth_proc_net(self) -> str:
        with self._lock:
            rx, tx = self.timeline.bytes_at(self.clock.now_ns())
            header = (
                "Inter-|   Receive                                                |  Transmit\n"
                " face |bytes    packets errs drop fifo frame compressed multicast|bytes    "
                "packets errs drop fifo colls carrier compressed\n"
            )
            lo = f"    lo: {0:8d} {0:7d}    0    0    0     0          0         0 {0:8d} {0:7d}    0    0    0     0       0          0\n"
            pkts_rx, pkts_tx = rx // 1400, tx // 1400
            wlan = (f" wlan0: {rx:8d} {pkts_rx:7d}    0    0    0     0          0         0 "
                    f"{tx:8d} {pkts_tx:7d}    0    0    0     0       0          0\n")
            return header + lo + wlan

    def synth_meminfo(self) -> str:
        with self._lock:
            total_kb = 3_882_912
            used_kb = 1_500_000 + (250_000 if self.foreground else 0)
            free_kb = total_kb - used_kb
            return (f"MemTotal:       {total_kb} kB\n"
                    f"MemFree:        {free_kb} kB\n"
                    f"MemAvailable:   {free_kb} kB\n")

    def snapshot(self) -> dict:
        """Point-in-time device state for test oracles."""
        with self._lock:
            return {
                "brightness": self.brightness,
                "brightness_mode": self.brightness_mode,
                "background_disabled": self.dnd,
                "installed": sorted(self.installed),
                "foreground": self.foreground,
                "settings": {f"{ns}/{k}": v for (ns, k), v in sorted(self.settings.items())},
                "app_data": {pkg: dict(d) for pkg, d in self.app_data.items()},
            }

    # -- command interpreter

    def run_shell(self, command: str) -> bytes:
        """Execute one shell command; returns raw stdout.

        Raises _CommandRejected for malformed recognized commands, which
        the server turns into a protocol-level FAIL.
        """
        with self._lock:
            now = self.clock.now_ns()
            self.command_log.append((now, command))
            argv = command.split()
            if not argv:
                return b""
            try:
                handler = getattr(self, f"_cmd_{argv[0].replace('-', '_')}")
            except AttributeError:
                return f"/system/bin/sh: {argv[0]}: inaccessible or not found\n".encode()
            return handler(command, argv, now)

    def _cmd_echo(self, command, argv, now):
        return (" ".join(argv[1:]) + "\n").encode()

    def _cmd_cat(self, command, argv, now):
        paths = {
            "/proc/stat": self.synth_proc_stat,
            "/proc/net/dev": self.synth_proc_net,
            "/proc/meminfo": self.synth_meminfo,
        }
        if len(argv) == 2 and argv[1] in paths:
            return paths[argv[1]]().encode()
        return f"cat: {' '.join(argv[1:])}: No such file or directory\n".encode()

    def _cmd_sleep(self, command, argv, now):
        try:
            seconds = float(argv[1])
        except (IndexError, ValueError):
            raise _CommandRejected("sleep: bad interval")
        self.clock.sleep(seconds)
        return b""

    def _stimulus(self, now):
        load = self.config.apps.get(self.foreground or "")
        if load:
            self.timeline.stimulus(now, load.cpu_percent, self.config.busy_hold_s)

    def _cmd_input(self, command, argv, now):
        if len(argv) < 2:
            raise _CommandRejected("input: missing subcommand")
        sub = argv[1]
        w, h = self.config.profile.screen_width_px, self.config.profile.screen_height_px
        if sub == "tap":
            try:
                x, y = int(argv[2]), int(argv[3])
            except (IndexError, ValueError):
                raise _CommandRejected("bad coordinates")
            if not (0 <= x < w and 0 <= y < h):
                raise _CommandRejected("bad coordinates")
        elif sub == "swipe":
            try:
                coords = [int(v) for v in argv[2:6]]
                if len(argv) > 6:
                    int(argv[6])
            except (IndexError, ValueError):
                raise _CommandRejected("bad coordinates")
            if len(coords) != 4 or not all(
                    0 <= c < lim for c, lim in zip(coords, (w, h, w, h))):
                raise _CommandRejected("bad coordinates")
        elif sub == "text":
            if len(argv) < 3:
                raise _CommandRejected("input text: missing argument")
            if self.foreground:
                data = self.app_data.setdefault(self.foreground, {})
                data["typed"] = data.get("typed", "") + argv[2].replace("%s", " ")
        elif sub == "keyevent":
            try:
                int(argv[2])
            except (IndexError, ValueError):
                raise _CommandRejected("input keyevent: bad keycode")
        else:
            raise _CommandRejected(f"input: unknown subcommand {sub}")
        self.input_log.append((now, command))
        if self.foreground:
            data = self.app_data.setdefault(self.foreground, {})
            data["inputs"] = data.get("inputs", 0) + 1
        self._stimulus(now)
        return b""

    def _cmd_settings(self, command, argv, now):
        if len(argv) >= 4 and argv[1] == "get":
            return (self.settings.get((argv[2], argv[3]), "null") + "\n").encode()
        if len(argv) >= 5 and argv[1] == "put":
            ns, key, value = argv[2], argv[3], " ".join(argv[4:])
            if (ns, key) == ("system", "screen_brightness"):
                try:
                    b = int(value)
                except ValueError:
                    raise _CommandRejected("bad brightness value")
                if not 0 <= b <= BRIGHTNESS_MAX:
                    raise _CommandRejected("bad brightness value")
                self.brightness = b
                self.timeline.set_brightness(now, b)
            elif (ns, key) == ("system", "screen_brightness_mode"):
                if value not in ("0", "1"):
                    raise _CommandRejected("bad brightness mode")
                self.brightness_mode = "auto" if value == "1" else "manual"
            self.settings[(ns, key)] = value
            return b""
        raise _CommandRejected("settings: bad arguments")

    def _cmd_cmd(self, command, argv, now):
        if len(argv) >= 3 and argv[1] == "notification":
            if argv[2] == "set_dnd" and len(argv) >= 4 and argv[3] in ("on", "off"):
                self.dnd = argv[3] == "on"
                return b""
            if argv[2] == "get_dnd":
                return (b"on\n" if self.dnd else b"off\n")
        raise _CommandRejected("cmd: bad arguments")

    def _cmd_pm(self, command, argv, now):
        if len(argv) >= 3 and argv[1] == "install":
            source = argv[-1]
            pkg = Path(source).name.removesuffix(".apk")
            self.installed.add(pkg)
            return b"Success\n"
        if len(argv) >= 3 and argv[1] == "clear":
            pkg = argv[2]
            if pkg not in self.installed:
                return b"Failed\n"
            self.app_data[pkg] = {}
            if self.foreground == pkg:
                self.foreground = None
            return b"Success\n"
        if len(argv) >= 3 and argv[1] == "list" and argv[2] == "packages":
            return "".join(f"package:{p}\n" for p in sorted(self.installed)).encode()
        raise _CommandRejected("pm: bad arguments")

    def _cmd_am(self, command, argv, now):
        if len(argv) < 2 or argv[1] != "start":
            raise _CommandRejected("am: bad arguments")
        if "-n" in argv:
            comp = argv[argv.index("-n") + 1]
            pkg = comp.split("/")[0]
            if pkg not in self.installed:
                return f"Error: Activity class {{{comp}}} does not exist.\n".encode()
            self.foreground = pkg
            data = self.app_data.setdefault(pkg, {})
            data["launches"] = data.get("launches", 0) + 1
            self._stimulus(now)
            return f"Starting: Intent {{ cmp={comp} }}\n".encode()
        if "-d" in argv:
            url = argv[argv.index("-d") + 1]
            pkg = argv[-1] if not argv[-1].startswith("-") and argv[-1] != url else None
            if pkg is None or pkg not in self.installed:
                return f"Error: Activity not started, unable to resolve Intent for {url}\n".encode()
            self.foreground = pkg
            data = self.app_data.setdefault(pkg, {})
            data["pages"] = data.get("pages", 0) + 1
            load = self.config.apps.get(pkg)
            if load and load.bandwidth_MB_per_page > 0:
                self.timeline.add_transfer(now, int(load.bandwidth_MB_per_page * 1e6),
                                           self.config.page_transfer_s)
            self._stimulus(now)
            return f"Starting: Intent {{ act=android.intent.action.VIEW dat={url} }}\n".encode()
        raise _CommandRejected("am start: bad arguments")

    def _cmd_wm(self, command, argv, now):
        if len(argv) >= 2 and argv[1] == "size":
            p = self.config.profile
            return f"Physical size: {p.screen_width_px}x{p.screen_height_px}\n".encode()
        raise _CommandRejected("wm: bad arguments")

    def _cmd_screencap(self, command, argv, now):
        return self._placeholder_png()

    def _placeholder_png(self) -> bytes:
        from PIL import Image, ImageDraw

        p = self.config.profile
        scale = max(p.screen_width_px, p.screen_height_px) / 512
        w, h = max(int(p.screen_width_px / scale), 1), max(int(p.screen_height_px / scale), 1)
        shade = 40 + round(self.brightness * 0.6)
        img = Image.new("RGB", (w, h), (shade, shade, shade + 10))
        draw = ImageDraw.Draw(img)
        draw.rectangle([0, 0, w - 1, int(h * 0.03)], fill=(20, 20, 30))
        draw.rectangle([0, 0, w - 1, h - 1], outline=(220, 220, 220))
        label = self.foreground or self.serial
        draw.text((4, int(h * 0.05)), label, fill=(235, 235, 235))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


class _CommandRejected(Exception):
    """Recognized command with arguments the device refuses (wire FAIL)."""


# --- wire server ------------------------------------------------------------

class _SimServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _Handler(socketserver.BaseRequestHandler):
    """One smart-socket conversation: host services, then at most one
    transport selection followed by one device service."""

    def handle(self):
        sim: DeviceSimulator = self.server.simulator  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        try:
            while True:
                try:
                    service = read_frame(sock).decode("utf-8", errors="replace")
                except ProtocolError:
                    return  # client hung up between requests
                if service == "host:version":
                    sock.sendall(b"OKAY" + encode_frame(b"0029"))
                elif service == "host:devices":
                    payload = f"{sim.serial}\tdevice\n".encode()
                    sock.sendall(b"OKAY" + encode_frame(payload))
                elif service.startswith("host:transport:"):
                    serial = service.removeprefix("host:transport:")
                    if serial != sim.serial:
                        msg = f"device '{serial}' not found".encode()
                        sock.sendall(b"FAIL" + encode_frame(msg))
                        return
                    sock.sendall(b"OKAY")
                    self._device_service(sock, sim)
                    return
                elif service.startswith("shell:"):
                    sock.sendall(b"FAIL" + encode_frame(b"no transport selected"))
                    return
                else:
                    msg = f"unknown host service {service}".encode()
                    sock.sendall(b"FAIL" + encode_frame(msg))
                    return
        except (ConnectionError, OSError):
            return
        except Exception:
            log.exception("sim handler error")
            return

    def _device_service(self, sock: socket.socket, sim: DeviceSimulator):
        service = read_frame(sock).decode("utf-8", errors="replace")
        if not service.startswith("shell:"):
            sock.sendall(b"FAIL" + encode_frame(b"unsupported device service"))
            return
        command = service.removeprefix("shell:")
        try:
            output = sim.run_shell(command)
        except _CommandRejected as exc:
            sock.sendall(b"FAIL" + encode_frame(str(exc).encode()))
            return
        sock.sendall(b"OKAY" + output)
        # Stream ends by closing (handled by the server after return).


class ServerHandle:
    """Running simulator endpoint plus test/analysis accessors."""

    def __init__(self, server: _SimServer, simulator: DeviceSimulator,
                 thread: threading.Thread):
        self._server = server
        self._thread = thread
        self.simulator = simulator

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def serial(self) -> str:
        return self.simulator.serial

    @property
    def clock(self) -> Clock:
        return self.simulator.clock

    @property
    def input_log(self) -> list[tuple[int, str]]:
        return self.simulator.input_log

    @property
    def command_log(self) -> list[tuple[int, str]]:
        return self.simulator.command_log

    def snapshot(self) -> dict:
        return self.simulator.snapshot()

    def battery_stream(self, rate_hz: float = 1500.0, t0_ns: int | None = None,
                       t1_ns: int | None = None, include_end: bool = False) -> np.ndarray:
        t0 = self.simulator.epoch_ns if t0_ns is None else t0_ns
        t1 = self.simulator.clock.now_ns() if t1_ns is None else t1_ns
        return self.simulator.battery_samples(rate_hz, t0, t1, include_end=include_end)

    def analytic_discharge_mAh(self, t0_ns: int, t1_ns: int) -> float:
        return self.simulator.analytic_discharge_mAh(t0_ns, t1_ns)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(config: SimDeviceConfig, clock_mode: str = "real",
          clock: Clock | None = None, host: str = "127.0.0.1",
          port: int = 0) -> ServerHandle:
    """Start a simulated device on a TCP endpoint.

    clock_mode 'virtual' creates a VirtualClock unless one is passed in;
    sharing the clock with the caller is how a benchmark drives the sim
    deterministically.
    """
    if clock is None:
        clock = VirtualClock() if clock_mode == "virtual" else RealClock()
    validate_serial(config.profile.serial)
    simulator = DeviceSimulator(config, clock)
    try:
        server = _SimServer((host, port), _Handler)
    except OSError as exc:
        raise BindFailed(f"cannot bind {host}:{port}: {exc}") from exc
    server.simulator = simulator  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, name="device-sim", daemon=True)
    thread.start()
    return ServerHandle(server, simulator, thread)
