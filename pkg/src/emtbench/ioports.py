"""Virtual I/O boundary: 6-channel 12-bit DAC codes plus 8-in/8-out
digital bits exchanged once per simulation step.

Backends stand in for the lab hardware legs (analog card + solid-state
relay module + dry-contact module): an in-process loopback for closing
the loop against the software relay, file record/replay, and a UDP peer
speaking a fixed 20-byte frame.
"""

from __future__ import annotations

import math
import socket
import struct
from dataclasses import dataclass

DAC_BITS = 12
DAC_MAX = (1 << DAC_BITS) - 1          # 4095
DAC_MID = 2048
TERMINAL_RANGE = 10.0                  # full scale maps to +-10 V
N_ANALOG = 6
N_BITS = 8

# step_index u32, 6x u16 codes, out_bits u8, in_bits u8, flags u16 (LE)
FRAME_STRUCT = struct.Struct("<I6HBBH")
FRAME_SIZE = FRAME_STRUCT.size         # 20 bytes


class PortFailure(Exception):
    """Backend closed or unreachable beyond the retry budget."""


@dataclass(frozen=True)
class AnalogChannelMap:
    channel: int              # 0..5
    signal: str               # selector, e.g. "v:BUS1.A" or "i:CB1.A"
    full_scale: float         # physical value mapped to +10 V
    note: str = ""

    def validate(self) -> None:
        if not 0 <= self.channel < N_ANALOG:
            raise ValueError(f"channel {self.channel} outside 0..5")
        if not self.full_scale > 0:
            raise ValueError(f"full_scale must be > 0, got {self.full_scale}")


@dataclass
class DigitalFrame:
    inputs: int               # 8 bits, relay -> simulator
    outputs: int              # 8 bits, simulator -> relay
    step_index: int


def scale_and_quantize(value: float, chmap: AnalogChannelMap) -> int:
    """Map a physical value to an offset-binary DAC code.

    +-full_scale maps to +-10 V at the virtual terminal, clamped, then
    code = round(4095 (v+10)/20) with ties rounding half up.
    """
    volts = value * (TERMINAL_RANGE / chmap.full_scale)
    if volts > TERMINAL_RANGE:
        volts = TERMINAL_RANGE
    elif volts < -TERMINAL_RANGE:
        volts = -TERMINAL_RANGE
    return int(math.floor(DAC_MAX * (volts + TERMINAL_RANGE)
                          / (2 * TERMINAL_RANGE) + 0.5))


def code_to_value(code: int, chmap: AnalogChannelMap) -> float:
    """Invert scale_and_quantize (to the centre of the code's band)."""
    volts = code * (2 * TERMINAL_RANGE) / DAC_MAX - TERMINAL_RANGE
    return volts * (chmap.full_scale / TERMINAL_RANGE)


def saturates(value: float, chmap: AnalogChannelMap) -> bool:
    return abs(value) > chmap.full_scale


def pack_frame(step_index: int, codes, out_bits: int, in_bits: int,
               flags: int = 0) -> bytes:
    return FRAME_STRUCT.pack(step_index & 0xFFFFFFFF, *codes,
                             out_bits & 0xFF, in_bits & 0xFF, flags & 0xFFFF)


def unpack_frame(data: bytes) -> tuple[int, tuple[int, ...], int, int, int]:
    if len(data) < FRAME_SIZE:
        raise PortFailure(f"short I/O frame: {len(data)} bytes")
    fields = FRAME_STRUCT.unpack_from(data)
    return fields[0], fields[1:7], fields[7], fields[8], fields[9]


class LoopbackBackend:
    """Wires the DAC codes to an in-process consumer (the virtual relay).

    The consumer must provide sample(step_index, codes, out_bits) and
    current_in_bits(). exchange() returns the consumer's state as of the
    samples *before* this call, mirroring the one-step turnaround of the
    physical dry-contact path.
    """

    def __init__(self, consumer=None):
        self.consumer = consumer
        self._in_bits = 0

    def open(self) -> None:
        pass

    def exchange(self, step_index: int, codes, out_bits: int) -> int:
        prior = self._in_bits
        if self.consumer is not None:
            self.consumer.sample(step_index, codes, out_bits)
            self._in_bits = self.consumer.current_in_bits()
        return prior

    def close(self) -> None:
        pass


class FileRecordBackend:
    """Appends one 20-byte frame per exchange; inputs read back as zero
    (or a constant injected for tests)."""

    def __init__(self, path, in_bits: int = 0):
        self.path = path
        self._fh = None
        self._in_bits = in_bits

    def open(self) -> None:
        self._fh = open(self.path, "wb")

    def exchange(self, step_index: int, codes, out_bits: int) -> int:
        if self._fh is None:
            raise PortFailure("record backend not open")
        self._fh.write(pack_frame(step_index, codes, out_bits, self._in_bits))
        return self._in_bits

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class FileReplayBackend:
    """Feeds input bits from a previously recorded frame file.

    Frames are matched by step_index; the freshest frame at or before the
    requested step wins (hold-last-value on gaps).
    """

    def __init__(self, path):
        self.path = path
        self._by_step: list[tuple[int, int]] = []
        self._in_bits = 0

    def open(self) -> None:
        with open(self.path, "rb") as fh:
            raw = fh.read()
        self._by_step = []
        for off in range(0, len(raw) - FRAME_SIZE + 1, FRAME_SIZE):
            idx, _codes, _out, in_bits, _flags = unpack_frame(
                raw[off:off + FRAME_SIZE])
            self._by_step.append((idx, in_bits))
        self._by_step.sort()

    def exchange(self, step_index: int, codes, out_bits: int) -> int:
        for idx, bits in self._by_step:
            if idx > step_index:
                break
            self._in_bits = bits
        return self._in_bits

    def close(self) -> None:
        pass


class UdpPeerBackend:
    """Sends one frame per step to a UDP peer and drains whatever the peer
    sent back, keeping the freshest in_bits. Never waits for the peer:
    silence means hold-last-value and a bumped link_down counter."""

    def __init__(self, address: str, port: int, bind_port: int = 0,
                 failure_budget: int = 100):
        self.address = address
        self.port = port
        self.bind_port = bind_port
        self.failure_budget = failure_budget
        self.link_down_count = 0
        self._errors = 0
        self._in_bits = 0
        self._sock: socket.socket | None = None

    def open(self) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(("0.0.0.0", self.bind_port))
        self._sock.setblocking(False)

    def exchange(self, step_index: int, codes, out_bits: int) -> int:
        if self._sock is None:
            raise PortFailure("udp backend not open")
        frame = pack_frame(step_index, codes, out_bits, self._in_bits)
        try:
            self._sock.sendto(frame, (self.address, self.port))
        except OSError:
            self._errors += 1
            if self._errors > self.failure_budget:
                raise PortFailure(
                    f"udp send to {self.address}:{self.port} failed "
                    f"{self._errors} times") from None
        fresh = False
        while True:
            try:
                data, _ = self._sock.recvfrom(64)
            except (BlockingIOError, OSError):
                break
            if len(data) >= FRAME_SIZE:
                _idx, _codes, _out, in_bits, _flags = unpack_frame(data)
                self._in_bits = in_bits
                fresh = True
        if not fresh:
            self.link_down_count += 1
        return self._in_bits

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class IoPortSet:
    """The per-run port pair; exchange() is called exactly once per step
    from the executor and never blocks waiting for fresher data."""

    def __init__(self, backend):
        self.backend = backend
        self.saturation_count = [0] * N_ANALOG
        self._open = False

    def open(self) -> None:
        self.backend.open()
        self._open = True

    def exchange(self, step_index: int, codes, out_bits: int) -> int:
        return self.backend.exchange(step_index, codes, out_bits)

    def close(self) -> None:
        if self._open:
            self.backend.close()
            self._open = False

    @property
    def link_down_count(self) -> int:
        return getattr(self.backend, "link_down_count", 0)
