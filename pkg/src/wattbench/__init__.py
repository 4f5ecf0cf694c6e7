"""wattbench: a desk-scale benchmarking harness for Android browser energy use.

The package ships a client for the ADB server wire protocol (`adblink`), a
simulated device speaking that protocol (`sim`), device-independent input
record/replay (`automation`), a benchmark job runner (`pipeline`), metric
parsers and aggregation (`metrics`), and an event-driven screen dimming
policy plus its telemetry analysis (`dimming`).
"""

__version__ = "0.1.0"
