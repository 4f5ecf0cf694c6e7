"""Turning raw logs into numbers.

Battery logs are (ts_ns, current_mA, voltage_mV) rows; discharge is the
trapezoidal time-integral of current.  CPU utilization and bandwidth
come from /proc/stat and /proc/net/dev counter deltas.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BATTERY_CSV_HEADER = ["ts_ns", "current_mA", "voltage_mV"]


class MalformedProcFile(ValueError):
    """Counter file text does not have the expected shape."""


class NonMonotonicTimestamps(ValueError):
    """Battery samples are not in strictly increasing time order."""


@dataclass(frozen=True)
class BatterySample:
    ts_ns: int
    current_mA: float
    voltage_mV: float


def _as_array(samples) -> np.ndarray:
    """Coerce samples (ndarray or BatterySample sequence) to an (N, >=2) array."""
    if isinstance(samples, np.ndarray):
        arr = np.asarray(samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise ValueError("sample array must be (N, >=2): ts_ns, current_mA")
        return arr
    rows = [(s.ts_ns, s.current_mA) for s in samples]
    return np.array(rows, dtype=float).reshape(-1, 2)


def integrate_discharge(samples) -> float:
    """Charge drawn over the sample window in mAh (trapezoidal rule).

    Fewer than two samples integrate to zero.
    """
    arr = _as_array(samples)
    if len(arr) < 2:
        return 0.0
    ts_s = arr[:, 0] / 1e9
    if np.any(np.diff(ts_s) <= 0):
        raise NonMonotonicTimestamps("battery timestamps must strictly increase")
    return float(np.trapezoid(arr[:, 1], ts_s)) / 3600.0


def mean_current_mA(samples) -> float:
    """Time-weighted mean current: discharge divided by window length."""
    arr = _as_array(samples)
    if len(arr) < 2:
        return 0.0
    span_s = (arr[-1, 0] - arr[0, 0]) / 1e9
    return integrate_discharge(arr) * 3600.0 / span_s


# --- battery CSV ------------------------------------------------------------

def write_battery_csv(path: str | Path, samples) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BATTERY_CSV_HEADER)
        if isinstance(samples, np.ndarray):
            for ts, cur, volt in samples:
                w.writerow([int(round(ts)), f"{cur:.6f}", f"{volt:.3f}"])
        else:
            for s in samples:
                w.writerow([s.ts_ns, f"{s.current_mA:.6f}", f"{s.voltage_mV:.3f}"])


def read_battery_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != BATTERY_CSV_HEADER:
            raise ValueError(f"unexpected battery CSV header {header!r}")
        rows = [(float(ts), float(cur), float(volt)) for ts, cur, volt in r]
    return np.array(rows, dtype=float).reshape(-1, 3)


# --- /proc/stat -------------------------------------------------------------

@dataclass(frozen=True)
class CpuTimes:
    """Aggregate jiffy counters: everything, and the idle-class part."""

    total: int
    idle: int

    @property
    def busy(self) -> int:
        return self.total - self.idle


def parse_proc_stat(text: str) -> CpuTimes:
    """Aggregate 'cpu' line; idle-class counts the idle and iowait fields."""
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "cpu":
            try:
                fields = [int(v) for v in parts[1:]]
            except ValueError as exc:
                raise MalformedProcFile(f"bad cpu line: {line!r}") from exc
            if len(fields) < 5:
                raise MalformedProcFile(f"cpu line too short: {line!r}")
            return CpuTimes(total=sum(fields), idle=fields[3] + fields[4])
    raise MalformedProcFile("no aggregate cpu line")


def cpu_utilization_percent(before: CpuTimes, after: CpuTimes) -> float:
    """Busy share of elapsed jiffies between two readings, in [0, 100]."""
    d_total = after.total - before.total
    if d_total <= 0:
        return 0.0
    d_busy = after.busy - before.busy
    return min(max(100.0 * d_busy / d_total, 0.0), 100.0)


# --- /proc/net/dev ----------------------------------------------------------

@dataclass(frozen=True)
class NetCounters:
    rx_bytes: int
    tx_bytes: int


def parse_proc_net_dev(text: str, include_loopback: bool = False) -> NetCounters:
    rx = tx = 0
    seen = False
    for line in text.splitlines():
        if ":" not in line:
            continue
        name, _, rest = line.partition(":")
        name = name.strip()
        fields = rest.split()
        if len(fields) < 16:
            raise MalformedProcFile(f"bad interface line: {line!r}")
        if name == "lo" and not include_loopback:
            continue
        rx += int(fields[0])
        tx += int(fields[8])
        seen = True
    if not seen and "|" not in text:
        raise MalformedProcFile("no interface lines")
    return NetCounters(rx, tx)


def bandwidth_MBytes(before: NetCounters, after: NetCounters) -> float:
    """Bytes moved between two readings, in decimal megabytes (1e6 bytes)."""
    delta = (after.rx_bytes - before.rx_bytes) + (after.tx_bytes - before.tx_bytes)
    return max(delta, 0) / 1e6


# --- summary statistics -----------------------------------------------------

def population_stddev(values: Sequence[float]) -> float:
    if not values:
        raise ValueError("stddev of no values")
    mu = sum(values) / len(values)
    return math.sqrt(sum((v - mu) ** 2 for v in values) / len(values))


def empirical_cdf(values: Iterable[float]) -> tuple[list[float], list[float]]:
    """Sorted unique values and, for each, the fraction of samples <= it."""
    data = sorted(values)
    if not data:
        return [], []
    n = len(data)
    xs: list[float] = []
    fs: list[float] = []
    for i, v in enumerate(data):
        if i + 1 < n and data[i + 1] == v:
            continue
        xs.append(v)
        fs.append((i + 1) / n)
    return xs, fs
