"""Browser energy benchmark orchestration.

One job = a device, a set of browsers, a page workload, and a run
count.  Each run prepares the browser from a clean profile, waits for
the CPU to settle inside a rest band, then drives the workload while
battery, CPU, and network counters are collected.  Browsers are
isolated: one failing does not stop the others.
"""

from __future__ import annotations

import json
import csv
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import metrics
from .adblink import AdbClient, AdbError, DeviceProfile
from .automation import ScriptStore, denormalize_command, Command, replay
from .clock import Clock, RealClock
from .metrics import CpuTimes, NetCounters

log = logging.getLogger(__name__)


class RestTimeout(Exception):
    """CPU never settled into the rest band before the gate timeout."""


# --- job model ---------------------------------------------------------------

@dataclass(frozen=True)
class GateConfig:
    low_percent: float = 0.0
    high_percent: float = 5.0
    rest_duration_s: float = 15.0
    poll_interval_s: float = 5.0
    timeout_s: float = 300.0

    def __post_init__(self):
        if not 0 <= self.low_percent <= self.high_percent <= 100:
            raise ValueError("need 0 <= low <= high <= 100")
        if self.poll_interval_s <= 0 or self.rest_duration_s <= 0 or self.timeout_s <= 0:
            raise ValueError("gate durations must be positive")


@dataclass(frozen=True)
class Workload:
    name: str
    pages: tuple[str, ...]
    dwell_s: float = 10.0
    scroll_window_s: float = 30.0
    scrolls_down: int = 4

    def __post_init__(self):
        if not self.pages:
            raise ValueError("workload needs at least one page")
        if self.dwell_s < 0 or self.scroll_window_s <= 0 or self.scrolls_down < 0:
            raise ValueError("bad workload timing")

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        return cls(
            name=d.get("name", "custom"),
            pages=tuple(d["pages"]),
            dwell_s=d.get("dwell_s", 10.0),
            scroll_window_s=d.get("scroll_window_s", 30.0),
            scrolls_down=d.get("scrolls_down", 4),
        )


def load_workload(spec: str | dict) -> Workload:
    """A bundled workload by name ('news', 'ads-free') or an inline object."""
    if isinstance(spec, dict):
        return Workload.from_dict(spec)
    name = spec if spec.endswith(".json") else spec + ".json"
    res = resources.files("wattbench").joinpath("data", name)
    if not res.is_file():
        raise ValueError(f"unknown workload {spec!r}")
    return Workload.from_dict(json.loads(res.read_text()))


@dataclass(frozen=True)
class BrowserSpec:
    package: str
    activity: str
    apk: str | None = None
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.package

    @classmethod
    def from_dict(cls, d: dict) -> "BrowserSpec":
        return cls(package=d["package"], activity=d["activity"],
                   apk=d.get("apk"), label=d.get("label"))


@dataclass(frozen=True)
class BrowserAutomation:
    onboarding: str | None = None
    settings: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "BrowserAutomation":
        return cls(onboarding=d.get("onboarding"),
                   settings=tuple(d.get("settings", ())))


@dataclass(frozen=True)
class BenchJob:
    browsers: tuple[BrowserSpec, ...]
    workload: Workload
    automation: dict[str, BrowserAutomation] = field(default_factory=dict)
    gate: GateConfig = GateConfig()
    runs: int = 5
    brightness: int = 100
    scripts_dir: str | None = None

    def __post_init__(self):
        if not self.browsers:
            raise ValueError("job needs at least one browser")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not 0 <= self.brightness <= 250:
            raise ValueError("brightness outside [0, 250]")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchJob":
        return cls(
            browsers=tuple(BrowserSpec.from_dict(b) for b in d["browsers"]),
            workload=load_workload(d["workload"]),
            automation={pkg: BrowserAutomation.from_dict(a)
                        for pkg, a in d.get("automation", {}).items()},
            gate=GateConfig(**d.get("gate", {})),
            runs=d.get("runs", 5),
            brightness=d.get("brightness", 100),
            scripts_dir=d.get("scripts_dir"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchJob":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# --- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class RunReport:
    browser: str
    run: int
    t_start_ns: int
    t_end_ns: int
    discharge_mAh: float
    mean_current_mA: float
    cpu_util_percent: float
    bandwidth_MBytes: float
    pages: int

    @property
    def duration_s(self) -> float:
        return (self.t_end_ns - self.t_start_ns) / 1e9


METRIC_FIELDS = ("duration_s", "discharge_mAh", "mean_current_mA",
                 "cpu_util_percent", "bandwidth_MBytes")


@dataclass(frozen=True)
class BrowserSummary:
    browser: str
    runs: tuple[RunReport, ...]

    def mean(self, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.runs]
        return sum(vals) / len(vals)

    def stddev(self, metric: str) -> float:
        return metrics.population_stddev([getattr(r, metric) for r in self.runs])


@dataclass
class JobReport:
    serial: str
    workload: str
    summaries: list[BrowserSummary]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "workload": self.workload,
            "browsers": [
                {
                    "browser": s.browser,
                    "runs": [vars(r) | {"duration_s": r.duration_s} for r in s.runs],
                    "means": {m: s.mean(m) for m in METRIC_FIELDS},
                    "stddevs": {m: s.stddev(m) for m in METRIC_FIELDS},
                }
                for s in self.summaries
            ],
            "failures": dict(self.failures),
        }


# --- battery source -----------------------------------------------------------

class BatterySource(Protocol):
    """Where per-run battery samples come from."""

    def samples(self, t0_ns: int, t1_ns: int) -> np.ndarray:
        """(N, 3) array of ts_ns, current_mA, voltage_mV covering [t0, t1]."""
        ...


class SimBatterySource:
    """Battery samples out of a device-sim server handle."""

    def __init__(self, handle, rate_hz: float = 1500.0):
        self.handle = handle
        self.rate_hz = rate_hz

    def samples(self, t0_ns: int, t1_ns: int) -> np.ndarray:
        return self.handle.battery_stream(self.rate_hz, t0_ns, t1_ns, include_end=True)


# --- device preparation -------------------------------------------------------

def _get_setting(client: AdbClient, serial: str, ns: str, key: str) -> str:
    return client.shell(serial, f"settings get {ns} {key}").text().strip()


def device_setup(client: AdbClient, serial: str, brightness: int) -> dict:
    """Pin the device into a repeatable state; returns what to restore later.

    Keeps the screen on while plugged in, silences notifications, and
    fixes brightness in manual mode.
    """
    snapshot = {
        "stay_on": _get_setting(client, serial, "global", "stay_on_while_plugged_in"),
        "brightness_mode": _get_setting(client, serial, "system", "screen_brightness_mode"),
        "brightness": _get_setting(client, serial, "system", "screen_brightness"),
        "dnd": client.shell(serial, "cmd notification get_dnd").text().strip(),
    }
    client.shell(serial, "settings put global stay_on_while_plugged_in 7")
    client.shell(serial, "cmd notification set_dnd on")
    client.shell(serial, "settings put system screen_brightness_mode 0")
    client.shell(serial, f"settings put system screen_brightness {brightness}")
    return snapshot


def device_cleanup(client: AdbClient, serial: str, snapshot: dict) -> None:
    def val(key: str, default: str) -> str:
        v = snapshot.get(key, default)
        return default if v in ("", "null", None) else v

    client.shell(serial, f"settings put global stay_on_while_plugged_in {val('stay_on', '0')}")
    client.shell(serial, f"cmd notification set_dnd {val('dnd', 'off')}")
    client.shell(serial, f"settings put system screen_brightness_mode {val('brightness_mode', '0')}")
    client.shell(serial, f"settings put system screen_brightness {val('brightness', '100')}")


# --- CPU rest gate ------------------------------------------------------------

def _read_cpu(client: AdbClient, serial: str) -> CpuTimes:
    return metrics.parse_proc_stat(client.shell(serial, "cat /proc/stat").text())


def _read_net(client: AdbClient, serial: str) -> NetCounters:
    return metrics.parse_proc_net_dev(client.shell(serial, "cat /proc/net/dev").text())


def wait_cpu_rest(client: AdbClient, serial: str, clock: Clock,
                  gate: GateConfig = GateConfig()) -> tuple[int, list[tuple[int, float]]]:
    """Block until CPU utilization has stayed inside the rest band long enough.

    Utilization is sampled every poll interval; the gate opens at the
    first sample time t such that some sample exists at or before
    t - rest_duration and every sample in that trailing window is inside
    [low, high].  Returns the opening timestamp and the sample history.
    Raises RestTimeout if the band never holds within the timeout.
    """
    t0 = clock.now_ns()
    rest_ns = round(gate.rest_duration_s * 1e9)
    prev = CpuTimes(0, 0)
    samples: list[tuple[int, float]] = []
    while True:
        now = clock.now_ns()
        cur = _read_cpu(client, serial)
        util = metrics.cpu_utilization_percent(prev, cur)
        prev = cur
        samples.append((now, util))
        cutoff = now - rest_ns
        window = [u for ts, u in samples if ts >= cutoff]
        anchored = any(ts <= cutoff for ts, _ in samples)
        if anchored and all(gate.low_percent <= u <= gate.high_percent for u in window):
            return now, samples
        if now - t0 >= round(gate.timeout_s * 1e9):
            raise RestTimeout(
                f"cpu stayed outside [{gate.low_percent}, {gate.high_percent}]% "
                f"for {gate.timeout_s:.0f}s")
        clock.sleep(gate.poll_interval_s)


# --- workload driving ---------------------------------------------------------

SCROLL_DOWN = Command("swipe", x_ratio=0.5, y_ratio=0.7,
                      x2_ratio=0.5, y2_ratio=0.3, duration_ms=300)
SCROLL_UP = Command("swipe", x_ratio=0.5, y_ratio=0.3,
                    x2_ratio=0.5, y2_ratio=0.7, duration_ms=300)


def open_page(client: AdbClient, serial: str, package: str, url: str) -> None:
    out = client.shell(
        serial, f"am start -a android.intent.action.VIEW -d {url} {package}").text()
    if "Error" in out:
        raise AdbError(f"could not open {url} in {package}: {out.strip()}")


def run_test(client: AdbClient, serial: str, clock: Clock, profile: DeviceProfile,
             browser: BrowserSpec, workload: Workload) -> int:
    """Visit every workload page: open a tab, dwell, then scroll.

    Scrolling is scrolls_down down-swipes plus half as many up-swipes,
    spread evenly across the scroll window.  Returns pages visited.
    """
    swipes = [SCROLL_DOWN] * workload.scrolls_down + [SCROLL_UP] * (workload.scrolls_down // 2)
    gap_s = workload.scroll_window_s / len(swipes) if swipes else 0.0
    for url in workload.pages:
        open_page(client, serial, browser.package, url)
        clock.sleep(workload.dwell_s)
        for swipe in swipes:
            client.shell(serial, denormalize_command(swipe, profile))
            clock.sleep(gap_s)
    return len(workload.pages)


def prepare_browser(client: AdbClient, serial: str, clock: Clock,
                    profile: DeviceProfile, browser: BrowserSpec,
                    automation: BrowserAutomation, store: ScriptStore | None) -> None:
    """Fresh profile, launch, then scripted onboarding and settings."""
    client.clean(serial, browser.package)
    client.launch(serial, browser.package, browser.activity)
    labels = ([automation.onboarding] if automation.onboarding else []) + list(automation.settings)
    if labels and store is None:
        raise AdbError("job uses automation scripts but no script store was given")
    for label in labels:
        script = store.load(browser.package, label)
        replay(client, serial, script, profile=profile, clock=clock)


# --- the job loop -------------------------------------------------------------

def _one_run(client: AdbClient, serial: str, clock: Clock, profile: DeviceProfile,
             browser: BrowserSpec, automation: BrowserAutomation,
             store: ScriptStore | None, job: BenchJob,
             battery: BatterySource | None, run_index: int) -> tuple[RunReport, np.ndarray | None]:
    prepare_browser(client, serial, clock, profile, browser, automation, store)
    t_start, _ = wait_cpu_rest(client, serial, clock, job.gate)
    cpu0, net0 = _read_cpu(client, serial), _read_net(client, serial)
    pages = run_test(client, serial, clock, profile, browser, job.workload)
    t_end = clock.now_ns()
    cpu1, net1 = _read_cpu(client, serial), _read_net(client, serial)

    samples = battery.samples(t_start, t_end) if battery is not None else None
    discharge = metrics.integrate_discharge(samples) if samples is not None else 0.0
    mean_cur = metrics.mean_current_mA(samples) if samples is not None else 0.0
    report = RunReport(
        browser=browser.name,
        run=run_index,
        t_start_ns=t_start,
        t_end_ns=t_end,
        discharge_mAh=discharge,
        mean_current_mA=mean_cur,
        cpu_util_percent=metrics.cpu_utilization_percent(cpu0, cpu1),
        bandwidth_MBytes=metrics.bandwidth_MBytes(net0, net1),
        pages=pages,
    )
    return report, samples


def _safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def run_job(job: BenchJob, client: AdbClient, serial: str, clock: Clock | None = None,
            battery: BatterySource | None = None, profile: DeviceProfile | None = None,
            store: ScriptStore | None = None, out_dir: str | Path | None = None) -> JobReport:
    """Execute a whole benchmark job; browser failures are isolated.

    When out_dir is given, per-run battery logs plus runs.csv and
    summary.csv land there.
    """
    clock = clock or RealClock()
    if store is None and job.scripts_dir:
        store = ScriptStore(job.scripts_dir)
    if profile is None:
        profile = DeviceProfile(serial=serial, screen_width_px=1080, screen_height_px=1920)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    snapshot = device_setup(client, serial, job.brightness)
    summaries: list[BrowserSummary] = []
    failures: dict[str, str] = {}
    try:
        for browser in job.browsers:
            automation = job.automation.get(browser.package, BrowserAutomation())
            reports: list[RunReport] = []
            try:
                if browser.apk:
                    client.install(serial, browser.apk)
                for run_index in range(job.runs):
                    report, samples = _one_run(client, serial, clock, profile, browser,
                                               automation, store, job, battery, run_index)
                    reports.append(report)
                    if out is not None and samples is not None:
                        name = f"battery_{_safe_filename(browser.name)}_{run_index}.csv"
                        metrics.write_battery_csv(out / name, samples)
                summaries.append(BrowserSummary(browser.name, tuple(reports)))
            except (AdbError, RestTimeout, KeyError) as exc:
                log.warning("browser %s failed: %s", browser.name, exc)
                failures[browser.name] = f"{type(exc).__name__}: {exc}"
    finally:
        device_cleanup(client, serial, snapshot)

    report = JobReport(serial=serial, workload=job.workload.name,
                       summaries=summaries, failures=failures)
    if out is not None:
        write_runs_csv(out / "runs.csv", [r for s in summaries for r in s.runs])
        write_summary_csv(out / "summary.csv", summaries)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


# --- delimited outputs ----------------------------------------------------------

RUNS_CSV_HEADER = ["browser", "run", "t_start_ns", "t_end_ns", "duration_s",
                   "discharge_mAh", "mean_current_mA", "cpu_util_percent",
                   "bandwidth_MBytes", "pages"]


def write_runs_csv(path: str | Path, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RUNS_CSV_HEADER)
        for r in reports:
            w.writerow([r.browser, r.run, r.t_start_ns, r.t_end_ns,
                        f"{r.duration_s:.3f}", f"{r.discharge_mAh:.6f}",
                        f"{r.mean_current_mA:.4f}", f"{r.cpu_util_percent:.3f}",
                        f"{r.bandwidth_MBytes:.4f}", r.pages])


def read_runs_csv(path: str | Path) -> list[RunReport]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != RUNS_CSV_HEADER:
            raise ValueError(f"unexpected runs.csv header {header!r}")
        out = []
        for row in r:
            if not row:
                continue
            out.append(RunReport(
                browser=row[0], run=int(row[1]), t_start_ns=int(row[2]),
                t_end_ns=int(row[3]), discharge_mAh=float(row[5]),
                mean_current_mA=float(row[6]), cpu_util_percent=float(row[7]),
                bandwidth_MBytes=float(row[8]), pages=int(row[9])))
        return out


def write_summary_csv(path: str | Path, summaries: Sequence[BrowserSummary]) -> None:
    header = ["browser", "runs"]
    for m in METRIC_FIELDS:
        header += [f"{m}_mean", f"{m}_stddev"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for s in summaries:
            row: list = [s.browser, len(s.runs)]
            for m in METRIC_FIELDS:
                row += [f"{s.mean(m):.6f}", f"{s.stddev(m):.6f}"]
            w.writerow(row)


def summarize_runs(reports: Sequence[RunReport]) -> list[BrowserSummary]:
    """Group per-run reports by browser, keeping first-seen order."""
    order: list[str] = []
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        if r.browser not in groups:
            order.append(r.browser)
            groups[r.browser] = []
        groups[r.browser].append(r)
    return [BrowserSummary(b, tuple(groups[b])) for b in order]
