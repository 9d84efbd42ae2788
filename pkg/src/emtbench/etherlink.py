"""Frame sinks for the process-bus publishers.

Raw Ethernet needs privileges most desks don't have, so frames can go to
a standard pcap file, a UDP encapsulation, or an in-memory list for
tests; the raw socket variant is attempted only on request and degrades
with a clear error.
"""

from __future__ import annotations

import socket
import struct

PCAP_MAGIC = 0xA1B2C3D4
PCAP_GLOBAL = struct.Struct("<IHHiIII")
PCAP_REC = struct.Struct("<IIII")
LINKTYPE_ETHERNET = 1


class PcapSink:
    """Standard little-endian microsecond pcap, linktype Ethernet."""

    def __init__(self, path):
        self.path = path
        self._fh = None

    def open(self) -> None:
        self._fh = open(self.path, "wb")
        self._fh.write(PCAP_GLOBAL.pack(
            PCAP_MAGIC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))

    def send(self, frame: bytes, t: float = 0.0) -> None:
        sec = int(t)
        usec = int(round((t - sec) * 1e6))
        if usec >= 1_000_000:
            sec += 1
            usec -= 1_000_000
        self._fh.write(PCAP_REC.pack(sec, usec, len(frame), len(frame)))
        self._fh.write(frame)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_pcap(path) -> list[tuple[float, bytes]]:
    """Return [(timestamp, frame), ...]; validates the global header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < PCAP_GLOBAL.size:
        raise ValueError("not a pcap file: truncated global header")
    magic, *_rest = PCAP_GLOBAL.unpack_from(raw)
    if magic != PCAP_MAGIC:
        raise ValueError(f"unsupported pcap magic 0x{magic:08x}")
    out = []
    pos = PCAP_GLOBAL.size
    while pos + PCAP_REC.size <= len(raw):
        sec, usec, incl, _orig = PCAP_REC.unpack_from(raw, pos)
        pos += PCAP_REC.size
        if pos + incl > len(raw):
            raise ValueError(f"pcap record at {pos} overruns file")
        out.append((sec + usec * 1e-6, raw[pos:pos + incl]))
        pos += incl
    return out


class InMemorySink:
    """Collects (t, frame) tuples; handy for tests and loopback wiring."""

    def __init__(self):
        self.frames: list[tuple[float, bytes]] = []

    def open(self) -> None:
        self.frames.clear()

    def send(self, frame: bytes, t: float = 0.0) -> None:
        self.frames.append((t, frame))

    def close(self) -> None:
        pass


class UdpSink:
    """Encapsulates each frame in one UDP datagram."""

    def __init__(self, address: str, port: int):
        self.address = address
        self.port = port
        self._sock = None

    def open(self) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(self, frame: bytes, t: float = 0.0) -> None:
        self._sock.sendto(frame, (self.address, self.port))

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class RawEthernetSink:
    """AF_PACKET transmit; requires CAP_NET_RAW and a real interface."""

    def __init__(self, interface: str):
        self.interface = interface
        self._sock = None

    def open(self) -> None:
        try:
            self._sock = socket.socket(
                socket.AF_PACKET, socket.SOCK_RAW)  # type: ignore[attr-defined]
            self._sock.bind((self.interface, 0))
        except (AttributeError, PermissionError, OSError) as exc:
            raise PermissionError(
                f"raw ethernet on {self.interface!r} unavailable: {exc}; "
                "use a pcap or UDP sink instead") from exc

    def send(self, frame: bytes, t: float = 0.0) -> None:
        self._sock.send(frame)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def make_sink(spec: str):
    """Build a sink from a spec string: "pcap:<path>", "udp:<host>:<port>",
    "raw:<iface>" or "memory"."""
    if spec == "memory":
        return InMemorySink()
    kind, _, rest = spec.partition(":")
    if kind == "pcap":
        return PcapSink(rest)
    if kind == "udp":
        host, _, port = rest.rpartition(":")
        return UdpSink(host, int(port))
    if kind == "raw":
        return RawEthernetSink(rest)
    raise ValueError(f"unknown sink spec {spec!r}")
