"""Client for the ADB server's host-side "smart socket" TCP protocol.

Every request frame is four lowercase ASCII hex digits (payload byte
length) followed by the payload; every response begins with the status
token ``OKAY`` or ``FAIL``.  One TCP connection carries at most one
transport selection and one service, which is the ADB server's own
contract, so each operation here opens a fresh socket.

The same client works against a real ADB server on port 5037 or against
the bundled device simulator (:mod:`wattbench.sim`).
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass

DEFAULT_PORT = 5037
DEFAULT_TIMEOUT_S = 30.0
MAX_PAYLOAD = 0xFFFF

_HEX_DIGITS = set(b"0123456789abcdef")


class AdbError(Exception):
    """Base class for ADB client failures."""


class ProtocolError(AdbError):
    """Malformed frame or status token, or a FAIL response (message carried)."""


class NoSuchDevice(AdbError):
    """The requested serial is not attached to the server."""


class AdbTimeout(AdbError):
    """No response within the configured timeout."""


class NoSuchPackage(AdbError):
    """Package operation against a package the device does not have."""


class InstallFailed(AdbError):
    """Device-side install rejected; carries the device's message."""


class LaunchFailed(AdbError):
    """Activity launch rejected; carries the device's message."""


def validate_serial(serial: str) -> str:
    """Check the device serial invariants: ASCII, no whitespace, <= 64 chars."""
    if not serial:
        raise ValueError("device serial must be nonempty")
    if len(serial) > 64:
        raise ValueError("device serial longer than 64 characters")
    if not serial.isascii():
        raise ValueError("device serial must be ASCII")
    if any(c.isspace() for c in serial):
        raise ValueError("device serial must not contain whitespace")
    return serial


@dataclass(frozen=True)
class ShellResult:
    """Raw output of one shell service invocation."""

    stdout: bytes
    duration_ms: float

    def text(self) -> str:
        return self.stdout.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class DeviceProfile:
    """Screen geometry of a device, including the usable rectangle.

    The usable rectangle excludes fixed on-screen furniture (e.g. Samsung
    toolbars); automation coordinates are expressed as ratios of it.
    """

    serial: str
    screen_width_px: int
    screen_height_px: int
    usable_origin_x_px: int = 0
    usable_origin_y_px: int = 0
    usable_width_px: int = 0
    usable_height_px: int = 0

    def __post_init__(self):
        validate_serial(self.serial)
        if self.screen_width_px <= 0 or self.screen_height_px <= 0:
            raise ValueError("screen dimensions must be positive")
        # A zero usable rectangle means "whole screen".
        if self.usable_width_px == 0 and self.usable_height_px == 0:
            object.__setattr__(self, "usable_width_px", self.screen_width_px)
            object.__setattr__(self, "usable_height_px", self.screen_height_px)
        if self.usable_width_px <= 0 or self.usable_height_px <= 0:
            raise ValueError("usable dimensions must be positive")
        if self.usable_origin_x_px < 0 or self.usable_origin_y_px < 0:
            raise ValueError("usable origin must be non-negative")
        if (self.usable_origin_x_px + self.usable_width_px > self.screen_width_px
                or self.usable_origin_y_px + self.usable_height_px > self.screen_height_px):
            raise ValueError("usable rectangle extends beyond the screen")

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "screen_width_px": self.screen_width_px,
            "screen_height_px": self.screen_height_px,
            "usable_origin_x_px": self.usable_origin_x_px,
            "usable_origin_y_px": self.usable_origin_y_px,
            "usable_width_px": self.usable_width_px,
            "usable_height_px": self.usable_height_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(**{k: d[k] for k in (
            "serial", "screen_width_px", "screen_height_px",
            "usable_origin_x_px", "usable_origin_y_px",
            "usable_width_px", "usable_height_px") if k in d})


# --- wire codec -----------------------------------------------------------

def encode_frame(payload: bytes) -> bytes:
    """Length-prefix a payload: 4 lowercase hex digits, then the bytes."""
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds 0xFFFF bytes")
    return b"%04x" % len(payload) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout as exc:
            raise AdbTimeout("timed out waiting for server data") from exc
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed payload; rejects non-hex length prefixes."""
    header = recv_exact(sock, 4)
    if any(b not in _HEX_DIGITS for b in header):
        raise ProtocolError(f"malformed length prefix {header!r}")
    return recv_exact(sock, int(header, 16))


def read_status(sock: socket.socket) -> None:
    """Consume the OKAY/FAIL status token; FAIL raises with its message."""
    token = recv_exact(sock, 4)
    if token == b"OKAY":
        return
    if token == b"FAIL":
        message = read_frame(sock).decode("utf-8", errors="replace")
        raise ProtocolError(message)
    raise ProtocolError(f"malformed status token {token!r}")


# --- client ---------------------------------------------------------------

class AdbClient:
    """Issues smart-socket services against one server endpoint.

    Not shared across concurrent callers; independent clients to the same
    server are safe.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s

    def _open(self) -> socket.socket:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout_s)
        except socket.timeout as exc:
            raise AdbTimeout(f"connect to {self.host}:{self.port} timed out") from exc
        sock.settimeout(self.timeout_s)
        return sock

    def _send_service(self, sock: socket.socket, service: str) -> None:
        sock.sendall(encode_frame(service.encode("utf-8")))
        read_status(sock)

    def version(self) -> str:
        """`host:version`: the server's version as the raw hex payload."""
        with self._open() as sock:
            self._send_service(sock, "host:version")
            return read_frame(sock).decode("ascii")

    def devices(self) -> list[tuple[str, str]]:
        """`host:devices`: (serial, state) pairs in server order."""
        with self._open() as sock:
            self._send_service(sock, "host:devices")
            payload = read_frame(sock).decode("utf-8")
        result = []
        for line in payload.splitlines():
            if not line.strip():
                continue
            try:
                serial, state = line.split("\t")
            except ValueError as exc:
                raise ProtocolError(f"malformed device list line {line!r}") from exc
            result.append((serial, state))
        return result

    def shell(self, serial: str, command: str) -> ShellResult:
        """Run `shell:<command>` on the device; output collected until close."""
        validate_serial(serial)
        started = time.monotonic()
        with self._open() as sock:
            sock.sendall(encode_frame(f"host:transport:{serial}".encode()))
            try:
                read_status(sock)
            except ProtocolError as exc:
                if "not found" in str(exc):
                    raise NoSuchDevice(str(exc)) from None
                raise
            self._send_service(sock, f"shell:{command}")
            chunks = []
            while True:
                try:
                    chunk = sock.recv(65536)
                except socket.timeout as exc:
                    raise AdbTimeout(f"shell {command!r} timed out") from exc
                if not chunk:
                    break
                chunks.append(chunk)
        duration_ms = (time.monotonic() - started) * 1000.0
        return ShellResult(stdout=b"".join(chunks), duration_ms=duration_ms)

    def install(self, serial: str, package_source: str) -> None:
        """Install from a store id or an .apk path; idempotent on re-install."""
        out = self.shell(serial, f"pm install {package_source}").text()
        if "Success" not in out:
            raise InstallFailed(out.strip() or "install failed with no output")

    def clean(self, serial: str, package_id: str) -> None:
        """Reset the package's profile state (`pm clear`)."""
        out = self.shell(serial, f"pm clear {package_id}").text()
        if "Success" not in out:
            raise NoSuchPackage(out.strip() or package_id)

    def launch(self, serial: str, package_id: str, activity: str) -> None:
        """Start an activity and bring the app to the foreground."""
        out = self.shell(serial, f"am start -n {package_id}/{activity}").text()
        if "does not exist" in out or "unable to resolve" in out:
            raise NoSuchPackage(out.strip())
        if "Error" in out:
            raise LaunchFailed(out.strip())


def connect(host: str = "127.0.0.1", port: int = DEFAULT_PORT,
            timeout_s: float = DEFAULT_TIMEOUT_S) -> AdbClient:
    """Open a client and perform the `host:version` handshake.

    Raises ConnectionRefusedError if nothing listens at the endpoint and
    ProtocolError if the listener does not speak the protocol.
    """
    client = AdbClient(host, port, timeout_s)
    client.version()
    return client
