"""GOOSE publisher/subscriber: boolean dataset, stNum/sqNum sequencing,
backoff retransmission ladder and time-allowed-to-live staleness.

A data change bumps stNum, resets sqNum to 0 and restarts the ladder at
its fastest interval; heartbeats repeat the dataset with sqNum+1 while
the interval backs off toward the stable tail. timeAllowedToLive is
always twice the interval to the next scheduled frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ._ber import (
    Malformed,
    be_u16,
    decode_uint,
    encode_uint,
    format_mac,
    parse_mac,
    read_tlv,
    tlv,
)

GOOSE_ETHERTYPE = 0x88B8
DEFAULT_DST_MAC = "01:0c:cd:01:00:00"
# Retransmission ladder [s]: fastest burst after a change, stable tail.
LADDER = (0.004, 0.008, 0.016, 0.032, 0.064, 0.128, 0.256, 0.512, 1.0)


@dataclass
class GooseConfig:
    gocb_ref: str = "EMTBENCH/LLN0$GO$gcb0"
    dataset_ref: str = "EMTBENCH/LLN0$TripStatus"
    go_id: str = "EMTBENCH_GOOSE"
    app_id: int = 0x0001
    dst_mac: str = DEFAULT_DST_MAC
    src_mac: str = "02:00:00:00:00:02"
    conf_rev: int = 1
    n_entries: int = 4


@dataclass
class GooseFrame:
    dst_mac: str
    src_mac: str
    app_id: int
    gocb_ref: str
    time_allowed_to_live_ms: int
    dataset_ref: str
    go_id: str
    t_seconds: float
    st_num: int
    sq_num: int
    simulation: bool
    conf_rev: int
    nds_com: bool
    dataset: tuple[bool, ...]


def _encode_utc(t_seconds: float) -> bytes:
    secs = int(t_seconds)
    frac = int((t_seconds - secs) * (1 << 24)) & 0xFFFFFF
    return struct.pack(">I", secs & 0xFFFFFFFF) + frac.to_bytes(3, "big") \
        + b"\x0a"  # quality: 10 bits of fraction accuracy flagged


def _decode_utc(data: bytes, offset: int) -> float:
    if len(data) != 8:
        raise Malformed(offset, f"UtcTime length {len(data)} != 8")
    secs = int.from_bytes(data[:4], "big")
    frac = int.from_bytes(data[4:7], "big")
    return secs + frac / (1 << 24)


def goose_encode(config: GooseConfig, st_num: int, sq_num: int,
                 dataset, tal_ms: int, t_seconds: float,
                 fixed_width: bool = False) -> bytes:
    """Encode one frame. fixed_width pads TAL/stNum/sqNum to 4 bytes
    (legal BER, constant layout) so a publisher can patch a template."""
    if fixed_width:
        enc_uint = lambda v: struct.pack(">I", v & 0xFFFFFFFF)
    else:
        enc_uint = encode_uint
    return _goose_encode(config, st_num, sq_num, dataset, tal_ms,
                         t_seconds, enc_uint)


def _goose_encode(config, st_num, sq_num, dataset, tal_ms, t_seconds,
                  enc_uint) -> bytes:
    booleans = b"".join(tlv(0x83, b"\x01" if d else b"\x00") for d in dataset)
    pdu = (
        tlv(0x80, config.gocb_ref.encode())
        + tlv(0x81, enc_uint(tal_ms))
        + tlv(0x82, config.dataset_ref.encode())
        + tlv(0x83, config.go_id.encode())
        + tlv(0x84, _encode_utc(t_seconds))
        + tlv(0x85, enc_uint(st_num))
        + tlv(0x86, enc_uint(sq_num))
        + tlv(0x87, b"\x00")
        + tlv(0x88, encode_uint(config.conf_rev))
        + tlv(0x89, b"\x00")
        + tlv(0x8A, encode_uint(len(dataset)))
        + tlv(0xAB, booleans)
    )
    apdu = tlv(0x61, pdu)
    length = 8 + len(apdu)
    return (
        parse_mac(config.dst_mac)
        + parse_mac(config.src_mac)
        + be_u16(GOOSE_ETHERTYPE)
        + be_u16(config.app_id)
        + be_u16(length)
        + b"\x00\x00\x00\x00"
        + apdu
    )


def goose_decode(frame: bytes) -> GooseFrame:
    if len(frame) < 18:
        raise Malformed(len(frame), "frame shorter than headers")
    ethertype = int.from_bytes(frame[12:14], "big")
    if ethertype != GOOSE_ETHERTYPE:
        raise Malformed(12, f"ethertype 0x{ethertype:04x} is not GOOSE")
    app_id = int.from_bytes(frame[14:16], "big")
    length = int.from_bytes(frame[16:18], "big")
    if 14 + length > len(frame):
        raise Malformed(16, f"header length {length} exceeds buffer")
    body = frame[14:14 + length]
    tag, pdu, _ = read_tlv(body, 8)
    if tag != 0x61:
        raise Malformed(22, f"expected goosePdu 0x61, got 0x{tag:02x}")

    fields: dict[int, bytes] = {}
    offsets: dict[int, int] = {}
    p = 0
    while p < len(pdu):
        at = p
        tag, val, p = read_tlv(pdu, p)
        fields[tag] = val
        offsets[tag] = at
    required = (0x80, 0x81, 0x82, 0x83, 0x84, 0x85, 0x86, 0x88, 0x8A, 0xAB)
    for tag in required:
        if tag not in fields:
            raise Malformed(len(frame), f"goosePdu missing tag 0x{tag:02x}")

    n_entries = decode_uint(fields[0x8A], offsets[0x8A])
    dataset = []
    p = 0
    data = fields[0xAB]
    while p < len(data):
        at = p
        tag, val, p = read_tlv(data, p)
        if tag != 0x83 or len(val) != 1:
            raise Malformed(at, "dataset entries must be 1-byte booleans")
        dataset.append(val[0] != 0)
    if len(dataset) != n_entries:
        raise Malformed(
            offsets[0xAB],
            f"numDatSetEntries {n_entries} != {len(dataset)} entries")

    return GooseFrame(
        dst_mac=format_mac(frame[0:6]),
        src_mac=format_mac(frame[6:12]),
        app_id=app_id,
        gocb_ref=fields[0x80].decode("ascii", "replace"),
        time_allowed_to_live_ms=decode_uint(fields[0x81], offsets[0x81]),
        dataset_ref=fields[0x82].decode("ascii", "replace"),
        go_id=fields[0x83].decode("ascii", "replace"),
        t_seconds=_decode_utc(fields[0x84], offsets[0x84]),
        st_num=decode_uint(fields[0x85], offsets[0x85]),
        sq_num=decode_uint(fields[0x86], offsets[0x86]),
        simulation=bool(fields.get(0x87, b"\x00")[0]),
        conf_rev=decode_uint(fields[0x88], offsets[0x88]),
        nds_com=bool(fields.get(0x89, b"\x00")[0]),
        dataset=tuple(dataset),
    )


class GoosePublisher:
    """Owns stNum/sqNum and the retransmission schedule.

    Drive with publish_initial() once, on_data_change() whenever the
    dataset differs, and heartbeat_due() every step with the current
    clock (simulated or wall, the caller chooses the timeline).
    """

    def __init__(self, config: GooseConfig, dataset):
        self.config = config
        self.dataset = list(dataset)
        self.st_num = 0
        self.sq_num = 0
        self._ladder_pos = 0
        self._next_tx = 0.0
        # patchable fixed-width template; emission is byte surgery, not a
        # fresh BER build
        template = goose_encode(config, 0, 0, self.dataset, 0, 0.0,
                                fixed_width=True)
        self._frame = bytearray(template)
        self._offsets = self._locate(template, len(self.dataset))

    @staticmethod
    def _locate(template: bytes, n_entries: int):
        """Value offsets of TAL, t, stNum, sqNum and each dataset bool."""
        tag, pdu, nxt = read_tlv(template, 14 + 8)
        pos = nxt - len(pdu)
        end = nxt
        offs = {}
        bools = []
        while pos < end:
            tag, val, nxt2 = read_tlv(template, pos)
            vlo = nxt2 - len(val)
            if tag in (0x81, 0x84, 0x85, 0x86):
                offs[tag] = vlo
            elif tag == 0xAB:
                p = vlo
                while p < nxt2:
                    btag, bval, bnxt = read_tlv(template, p)
                    bools.append(bnxt - len(bval))
                    p = bnxt
            pos = nxt2
        assert len(bools) == n_entries
        return offs[0x81], offs[0x84], offs[0x85], offs[0x86], bools

    def _tal_ms(self) -> int:
        return int(LADDER[self._ladder_pos] * 2000)

    def _emit(self, now: float) -> bytes:
        tal_off, t_off, st_off, sq_off, bool_offs = self._offsets
        frame = self._frame
        struct.pack_into(">I", frame, tal_off, self._tal_ms())
        frame[t_off:t_off + 8] = _encode_utc(now)
        struct.pack_into(">I", frame, st_off, self.st_num & 0xFFFFFFFF)
        struct.pack_into(">I", frame, sq_off, self.sq_num & 0xFFFFFFFF)
        for off, d in zip(bool_offs, self.dataset):
            frame[off] = 1 if d else 0
        return bytes(frame)

    def publish_initial(self, now: float) -> bytes:
        self.st_num += 1
        self.sq_num = 0
        self._ladder_pos = 0
        self._next_tx = now + LADDER[0]
        return self._emit(now)

    def on_data_change(self, dataset, now: float) -> bytes:
        rebuild = len(dataset) != len(self.dataset)
        self.dataset = list(dataset)
        if rebuild:
            template = goose_encode(self.config, 0, 0, self.dataset, 0,
                                    0.0, fixed_width=True)
            self._frame = bytearray(template)
            self._offsets = self._locate(template, len(self.dataset))
        return self.publish_initial(now)

    def heartbeat_due(self, now: float) -> bytes | None:
        if self.st_num == 0:
            return self.publish_initial(now)
        if now < self._next_tx:
            return None
        self.sq_num += 1
        self._ladder_pos = min(self._ladder_pos + 1, len(LADDER) - 1)
        self._next_tx = now + LADDER[self._ladder_pos]
        return self._emit(now)

    def update(self, dataset, now: float) -> bytes | None:
        """Convenience per-step driver: change detection + heartbeat."""
        if list(dataset) != self.dataset:
            return self.on_data_change(dataset, now)
        return self.heartbeat_due(now)


class GooseSubscriber:
    """Tracks one publisher: dataset, sequence bookkeeping, staleness."""

    def __init__(self):
        self.dataset: tuple[bool, ...] = ()
        self.st_num = 0
        self.sq_num = -1
        self.tal_ms = 0
        self.last_rx: float | None = None
        self.missed_changes = 0
        self.discarded = 0

    def receive(self, frame: bytes, now: float) -> GooseFrame | None:
        """Returns the accepted frame, or None when discarded as stale
        ordering (stNum/sqNum not advancing)."""
        parsed = goose_decode(frame)
        if parsed.st_num < self.st_num or (
            parsed.st_num == self.st_num and parsed.sq_num <= self.sq_num
        ):
            self.discarded += 1
            return None
        if self.st_num and parsed.st_num > self.st_num + 1:
            self.missed_changes += parsed.st_num - self.st_num - 1
        self.st_num = parsed.st_num
        self.sq_num = parsed.sq_num
        self.dataset = parsed.dataset
        self.tal_ms = parsed.time_allowed_to_live_ms
        self.last_rx = now
        return parsed

    def is_stale(self, now: float) -> bool:
        if self.last_rx is None:
            return True
        return (now - self.last_rx) > self.tal_ms / 1000.0
