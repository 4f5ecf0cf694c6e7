"""Command line front end.

Subcommands:
    sim serve      run a simulated device on a TCP endpoint
    bench run      execute a benchmark job against a device or the sim
    replay         replay a stored automation script on a device
    record serve   HTTP service for recording input automation
    dim estimate   dimming savings from telemetry against a power model
    dim table      per-brightness savings table for device models
    analyze        recompute summaries and figures from raw run logs

Exit codes: 0 success, 1 device or run failure, 2 bad usage or inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
from pathlib import Path

from . import __version__, adblink, automation, dimming, figures, metrics, pipeline, recorder, sim
from .clock import RealClock, VirtualClock

log = logging.getLogger(__name__)


def _resolve_config(arg: str) -> Path:
    """A device config by path, or by bundled name like 'j7duo'."""
    p = Path(arg)
    if p.exists():
        return p
    bundled = sim.bundled_profile_path(arg)
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no device config at {arg!r} and no bundled one by that name")


def _add_adb_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--adb-host", default="127.0.0.1", help="ADB server host")
    p.add_argument("--adb-port", type=int, default=5037, help="ADB server port")


def _wait_forever() -> None:
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass


# --- sim serve ---------------------------------------------------------------

def cmd_sim_serve(args) -> int:
    config = sim.SimDeviceConfig.from_file(_resolve_config(args.profile))
    clock_mode = "virtual" if args.virtual_clock else "real"
    handle = sim.serve(config, clock_mode=clock_mode, port=args.port)
    print(f"device-sim serial={handle.serial} endpoint={handle.host}:{handle.port} "
          f"clock={clock_mode}")
    sys.stdout.flush()
    try:
        if args.duration is not None:
            import time
            time.sleep(args.duration)
        else:
            _wait_forever()
    finally:
        handle.stop()
    return 0


# --- bench run -----------------------------------------------------------------

def cmd_bench_run(args) -> int:
    job = pipeline.BenchJob.from_file(args.job)
    store = automation.ScriptStore(args.scripts) if args.scripts else None
    out_dir = Path(args.out)

    if args.sim_profile:
        config = sim.SimDeviceConfig.from_file(_resolve_config(args.sim_profile))
        clock = VirtualClock() if args.virtual_clock else RealClock()
        handle = sim.serve(config, clock=clock)
        # The sim has no real APK files; register packages without one.
        for b in job.browsers:
            if not b.apk:
                handle.simulator.installed.add(b.package)
        client = adblink.AdbClient("127.0.0.1", handle.port)
        battery = pipeline.SimBatterySource(handle, rate_hz=args.rate_hz)
        serial, profile = handle.serial, config.profile
    else:
        if not args.serial:
            print("bench run needs --serial unless --sim-profile is used", file=sys.stderr)
            return 2
        handle = None
        clock = RealClock()
        client = adblink.AdbClient(args.adb_host, args.adb_port)
        battery = None
        serial = args.serial
        profile = None
        if args.profile:
            profile = adblink.DeviceProfile.from_dict(
                json.loads(Path(args.profile).read_text()))
        print("note: no battery source on a plain ADB device; "
              "discharge columns will be zero", file=sys.stderr)

    try:
        report = pipeline.run_job(job, client, serial, clock=clock, battery=battery,
                                  profile=profile, store=store, out_dir=out_dir)
    finally:
        if handle is not None:
            handle.stop()

    for s in report.summaries:
        for r in s.runs:
            print(f"{r.browser} run {r.run}: {r.duration_s:.1f} s  "
                  f"{r.discharge_mAh:.4f} mAh  {r.mean_current_mA:.1f} mA  "
                  f"{r.cpu_util_percent:.1f}% cpu  {r.bandwidth_MBytes:.2f} MB")
        print(f"{s.browser}: mean discharge {s.mean('discharge_mAh'):.4f} mAh "
              f"(stddev {s.stddev('discharge_mAh'):.4f}) over {len(s.runs)} runs")
    for browser, err in report.failures.items():
        print(f"FAILED {browser}: {err}", file=sys.stderr)

    if report.summaries:
        fig = figures.save_summary_figure(report.summaries, out_dir / "summary.png")
        print(f"wrote {out_dir / 'runs.csv'}, {out_dir / 'summary.csv'}, {fig}")
    return 0 if report.ok else 1


# --- replay --------------------------------------------------------------------

def cmd_replay(args) -> int:
    store = automation.ScriptStore(args.scripts)
    script = store.load(args.app, args.label)
    profile = None
    if args.profile:
        profile = adblink.DeviceProfile.from_dict(json.loads(Path(args.profile).read_text()))
    client = adblink.AdbClient(args.adb_host, args.adb_port)
    sent = automation.replay(client, args.serial, script, profile=profile)
    print(f"replayed {args.app}/{args.label}: {sent} input commands")
    return 0


# --- record serve ----------------------------------------------------------------

def cmd_record_serve(args) -> int:
    sim_handle = None
    if args.sim_profile:
        config = sim.SimDeviceConfig.from_file(_resolve_config(args.sim_profile))
        sim_handle = sim.serve(config)
        client = adblink.AdbClient("127.0.0.1", sim_handle.port)
        serial, profile = sim_handle.serial, config.profile
    else:
        if not args.serial:
            print("record serve needs --serial unless --sim-profile is used",
                  file=sys.stderr)
            return 2
        client = adblink.AdbClient(args.adb_host, args.adb_port)
        serial = args.serial
        if args.profile:
            profile = adblink.DeviceProfile.from_dict(
                json.loads(Path(args.profile).read_text()))
        else:
            out = client.shell(serial, "wm size").text()
            w, h = out.strip().rsplit(" ", 1)[-1].split("x")
            profile = adblink.DeviceProfile(serial=serial, screen_width_px=int(w),
                                            screen_height_px=int(h))

    service = recorder.RecorderService(client, serial, profile,
                                       automation.ScriptStore(args.scripts))
    handle = recorder.serve(service, port=args.port)
    print(f"recorder listening on http://127.0.0.1:{handle.port} serial={serial}")
    sys.stdout.flush()
    try:
        _wait_forever()
    finally:
        handle.stop()
        if sim_handle is not None:
            sim_handle.stop()
    return 0


# --- dim commands ------------------------------------------------------------------

def cmd_dim_estimate(args) -> int:
    intervals = dimming.read_telemetry_csv(args.telemetry)
    model = sim.PowerModel.from_file(_resolve_config(args.model))
    savings = dimming.estimate_savings(intervals, model)
    windows = dimming.dim_windows(intervals)
    xs, fs = dimming.fraction_cdf(intervals)
    print(f"estimated_savings_fraction {savings:.4f}")
    print(f"dim_windows {len(windows)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "windows.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["session_id", "active_ms", "dim_ms", "brightness", "dim_fraction"])
            for win in windows:
                w.writerow([win.session_id, win.active_ms, win.dim_ms,
                            win.brightness, f"{win.dim_fraction:.6f}"])
        with open(out / "cdf.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["dim_fraction", "cum_fraction"])
            for x, frac in zip(xs, fs):
                w.writerow([f"{x:.6f}", f"{frac:.6f}"])
        fig = figures.save_cdf_figure(xs, fs, out / "cdf.png")
        print(f"wrote {out / 'windows.csv'}, {out / 'cdf.csv'}, {fig}")
    return 0


def cmd_dim_table(args) -> int:
    tables: dict[str, list[dict]] = {}
    for arg in args.models:
        path = _resolve_config(arg)
        model = sim.PowerModel.from_file(path)
        tables[path.stem] = dimming.savings_table(model)
    print("model brightness current_mA dim_target aggressive_pct conservative_pct")
    for name in sorted(tables):
        for row in tables[name]:
            print(f"{name} {row['brightness']} {row['current_mA']:.1f} "
                  f"{row['dim_target']} {row['aggressive_savings_pct']:.1f} "
                  f"{row['conservative_savings_pct']:.1f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "savings.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "brightness", "current_mA", "dim_target",
                        "aggressive_savings_pct", "conservative_savings_pct"])
            for name in sorted(tables):
                for row in tables[name]:
                    w.writerow([name, row["brightness"], f"{row['current_mA']:.3f}",
                                row["dim_target"], f"{row['aggressive_savings_pct']:.3f}",
                                f"{row['conservative_savings_pct']:.3f}"])
        fig = figures.save_savings_figure(tables, out / "savings.png")
        print(f"wrote {out / 'savings.csv'}, {fig}")
    return 0


# --- analyze --------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    runs_dir = Path(args.runs)
    reports = pipeline.read_runs_csv(runs_dir / "runs.csv")
    refreshed = []
    for r in reports:
        battery_path = runs_dir / f"battery_{pipeline._safe_filename(r.browser)}_{r.run}.csv"
        if battery_path.exists():
            samples = metrics.read_battery_csv(battery_path)
            refreshed.append(pipeline.RunReport(
                browser=r.browser, run=r.run, t_start_ns=r.t_start_ns,
                t_end_ns=r.t_end_ns,
                discharge_mAh=metrics.integrate_discharge(samples),
                mean_current_mA=metrics.mean_current_mA(samples),
                cpu_util_percent=r.cpu_util_percent,
                bandwidth_MBytes=r.bandwidth_MBytes, pages=r.pages))
        else:
            refreshed.append(r)
    summaries = pipeline.summarize_runs(refreshed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_summary_csv(out / "summary.csv", summaries)
    fig = figures.save_summary_figure(summaries, out / "summary.png")
    for s in summaries:
        print(f"{s.browser}: {len(s.runs)} runs, mean discharge "
              f"{s.mean('discharge_mAh'):.4f} mAh, mean cpu "
              f"{s.mean('cpu_util_percent'):.1f}%")
    print(f"wrote {out / 'summary.csv'}, {fig}")
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wattbench",
                                     description="browser energy benchmarking tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="simulated device")
    sim_sub = p_sim.add_subparsers(dest="sim_command", required=True)
    p = sim_sub.add_parser("serve", help="run a simulated device")
    p.add_argument("--profile", required=True, help="device config path or bundled name")
    p.add_argument("--port", type=int, default=0, help="TCP port (0 picks one)")
    p.add_argument("--virtual-clock", action="store_true")
    p.add_argument("--duration", type=float, default=None,
                   help="stop after this many seconds (default: run until Ctrl-C)")
    p.set_defaults(func=cmd_sim_serve)

    p_bench = sub.add_parser("bench", help="benchmark jobs")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)
    p = bench_sub.add_parser("run", help="run a benchmark job")
    p.add_argument("--job", required=True, help="job JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--serial", help="device serial (real ADB mode)")
    p.add_argument("--profile", help="device profile JSON (real ADB mode)")
    p.add_argument("--sim-profile", help="run against an in-process simulated device")
    p.add_argument("--virtual-clock", action="store_true",
                   help="with --sim-profile: deterministic virtual time")
    p.add_argument("--rate-hz", type=float, default=1500.0,
                   help="battery sample rate in sim mode")
    p.add_argument("--scripts", help="automation script directory")
    _add_adb_args(p)
    p.set_defaults(func=cmd_bench_run)

    p = sub.add_parser("replay", help="replay a stored automation script")
    p.add_argument("--app", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--serial", required=True)
    p.add_argument("--scripts", default="scripts", help="script directory")
    p.add_argument("--profile", help="target device profile JSON")
    _add_adb_args(p)
    p.set_defaults(func=cmd_replay)

    p_rec = sub.add_parser("record", help="input recording service")
    rec_sub = p_rec.add_subparsers(dest="record_command", required=True)
    p = rec_sub.add_parser("serve", help="serve the recording HTTP API")
    p.add_argument("--serial", help="device serial (real ADB mode)")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--scripts", default="scripts", help="script directory")
    p.add_argument("--profile", help="device profile JSON (real ADB mode)")
    p.add_argument("--sim-profile", help="serve against an in-process simulated device")
    _add_adb_args(p)
    p.set_defaults(func=cmd_record_serve)

    p_dim = sub.add_parser("dim", help="screen dimming analysis")
    dim_sub = p_dim.add_subparsers(dest="dim_command", required=True)
    p = dim_sub.add_parser("estimate", help="savings estimate from telemetry")
    p.add_argument("--telemetry", required=True, help="telemetry CSV path")
    p.add_argument("--model", required=True, help="power model path or bundled name")
    p.add_argument("--out", help="directory for CSV and figure outputs")
    p.set_defaults(func=cmd_dim_estimate)
    p = dim_sub.add_parser("table", help="per-brightness savings table")
    p.add_argument("--models", required=True, nargs="+",
                   help="power model paths or bundled names")
    p.add_argument("--out", help="directory for CSV and figure outputs")
    p.set_defaults(func=cmd_dim_table)

    p = sub.add_parser("analyze", help="summaries and figures from run logs")
    p.add_argument("--runs", required=True, help="directory holding runs.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError,
            automation.InvalidScript, automation.UnknownScript) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (adblink.AdbError, pipeline.RestTimeout, sim.BindFailed,
            ConnectionRefusedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
