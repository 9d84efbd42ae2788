"""IEC 61850-9-2 Sampled Values codec and publisher (9-2LE profile).

One ASDU per frame, eight INT32 channels (Ia Ib Ic In Va Vb Vc Vn) each
followed by a 32-bit quality word, smpCnt rolling at samples_per_cycle x
nominal frequency. Scaling follows the common implementation agreement:
1 mA per count for currents, 10 mV per count for voltages.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

from ._ber import (
    Malformed,
    be_u16,
    encode_len,
    format_mac,
    parse_mac,
    read_tlv,
    tlv,
)

if os.environ.get("EMTBENCH_NO_NUMBA"):
    _patch_kernel = None
else:
    try:
        from ._kernels import sv_patch_frame as _patch_kernel
    except ImportError:  # pragma: no cover - numba genuinely absent
        _patch_kernel = None

SV_ETHERTYPE = 0x88BA
DEFAULT_DST_MAC = "01:0c:cd:04:00:00"
QUALITY_GOOD = 0x00000000
QUALITY_INVALID = 0x00000001
INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)

CHANNELS = ("ia", "ib", "ic", "in", "va", "vb", "vc", "vn")


@dataclass
class SVConfig:
    sv_id: str = "EMTBENCH01"
    app_id: int = 0x4000
    dst_mac: str = DEFAULT_DST_MAC
    src_mac: str = "02:00:00:00:00:01"
    samples_per_cycle: int = 80
    nominal_freq: float = 50.0
    current_scale: float = 1e-3   # ampere per count
    voltage_scale: float = 1e-2   # volt per count
    conf_rev: int = 1
    smp_synch: int = 0
    channel_bind: dict[str, str] = field(default_factory=dict)

    @property
    def smp_rate(self) -> int:
        rate = self.samples_per_cycle * self.nominal_freq
        if abs(rate - round(rate)) > 1e-9:
            raise ValueError(
                f"samples_per_cycle*nominal_freq = {rate} is not integral")
        return int(round(rate))

    def validate(self) -> None:
        _ = self.smp_rate
        if not self.sv_id or len(self.sv_id.encode()) > 64:
            raise ValueError("svID must be 1..64 bytes")
        if not 0 <= self.app_id <= 0xFFFF:
            raise ValueError("appID must fit 16 bits")
        for key in self.channel_bind:
            if key not in CHANNELS:
                raise ValueError(f"unknown SV channel {key!r}")


@dataclass
class SVFrame:
    dst_mac: str
    src_mac: str
    app_id: int
    sv_id: str
    smp_cnt: int
    conf_rev: int
    smp_synch: int
    values: tuple[int, ...]      # 8 x INT32
    qualities: tuple[int, ...]   # 8 x u32
    extras: tuple[tuple[int, bytes], ...] = ()


def _asdu_bytes(sv_id: bytes, smp_cnt: int, conf_rev: int, smp_synch: int,
                data: bytes) -> bytes:
    asdu = (
        tlv(0x80, sv_id)
        + tlv(0x82, struct.pack(">H", smp_cnt))
        + tlv(0x83, struct.pack(">I", conf_rev))
        + tlv(0x85, bytes([smp_synch]))
        + tlv(0x87, data)
    )
    return asdu


def sv_encode(config: SVConfig, smp_cnt: int, values, qualities) -> bytes:
    """Encode one frame; values are raw INT32 counts (already scaled)."""
    if len(values) != 8 or len(qualities) != 8:
        raise ValueError("need exactly 8 values and 8 qualities")
    data = bytearray()
    for v, q in zip(values, qualities):
        data += struct.pack(">iI", int(v), int(q) & 0xFFFFFFFF)
    asdu = _asdu_bytes(config.sv_id.encode(), smp_cnt, config.conf_rev,
                       config.smp_synch, bytes(data))
    seq = tlv(0x30, asdu)
    sav = tlv(0x80, b"\x01") + tlv(0xA2, seq)
    apdu = tlv(0x60, sav)
    length = 8 + len(apdu)
    return (
        parse_mac(config.dst_mac)
        + parse_mac(config.src_mac)
        + be_u16(SV_ETHERTYPE)
        + be_u16(config.app_id)
        + be_u16(length)
        + b"\x00\x00\x00\x00"
        + apdu
    )


def sv_decode(frame: bytes) -> SVFrame:
    """Parse and structurally validate a 9-2LE frame.

    Unknown TLVs inside the ASDU are tolerated and reported in extras;
    anything inconsistent raises Malformed with the offending offset.
    """
    if len(frame) < 18:
        raise Malformed(len(frame), "frame shorter than headers")
    ethertype = int.from_bytes(frame[12:14], "big")
    if ethertype != SV_ETHERTYPE:
        raise Malformed(12, f"ethertype 0x{ethertype:04x} is not SV")
    app_id = int.from_bytes(frame[14:16], "big")
    length = int.from_bytes(frame[16:18], "big")
    if 14 + length > len(frame):
        raise Malformed(16, f"header length {length} exceeds buffer")
    body = frame[14:14 + length]
    pos = 8  # appid, length, 2x reserved
    tag, sav, _ = read_tlv(body, pos)
    if tag != 0x60:
        raise Malformed(14 + pos, f"expected savPdu 0x60, got 0x{tag:02x}")

    no_asdu = None
    seq = None
    p = 0
    while p < len(sav):
        tag, val, p = read_tlv(sav, p)
        if tag == 0x80:
            no_asdu = int.from_bytes(val, "big")
        elif tag == 0xA2:
            seq = val
    if no_asdu is None or seq is None:
        raise Malformed(14 + pos, "savPdu missing noASDU or seqOfASDU")
    if no_asdu != 1:
        raise Malformed(14 + pos, f"unsupported noASDU {no_asdu}")

    tag, asdu, _ = read_tlv(seq, 0)
    if tag != 0x30:
        raise Malformed(0, f"expected ASDU 0x30, got 0x{tag:02x}")

    sv_id = smp_cnt = conf_rev = smp_synch = data = None
    extras = []
    p = 0
    while p < len(asdu):
        at = p
        tag, val, p = read_tlv(asdu, p)
        if tag == 0x80:
            sv_id = val.decode("ascii", "replace")
        elif tag == 0x82:
            if len(val) != 2:
                raise Malformed(at, f"smpCnt length {len(val)} != 2")
            smp_cnt = int.from_bytes(val, "big")
        elif tag == 0x83:
            if len(val) != 4:
                raise Malformed(at, f"confRev length {len(val)} != 4")
            conf_rev = int.from_bytes(val, "big")
        elif tag == 0x85:
            if len(val) != 1:
                raise Malformed(at, f"smpSynch length {len(val)} != 1")
            smp_synch = val[0]
        elif tag == 0x87:
            if len(val) != 64:
                raise Malformed(at, f"dataset length {len(val)} != 64")
            data = val
        else:
            extras.append((tag, bytes(val)))
    for name, got in (("svID", sv_id), ("smpCnt", smp_cnt),
                      ("confRev", conf_rev), ("smpSynch", smp_synch),
                      ("dataset", data)):
        if got is None:
            raise Malformed(len(frame), f"ASDU missing {name}")

    values, qualities = [], []
    for ch in range(8):
        v, q = struct.unpack_from(">iI", data, ch * 8)
        values.append(v)
        qualities.append(q)
    return SVFrame(
        dst_mac=format_mac(frame[0:6]),
        src_mac=format_mac(frame[6:12]),
        app_id=app_id,
        sv_id=sv_id,
        smp_cnt=smp_cnt,
        conf_rev=conf_rev,
        smp_synch=smp_synch,
        values=tuple(values),
        qualities=tuple(qualities),
        extras=tuple(extras),
    )


def scale_channel(value: float, scale: float) -> tuple[int, int]:
    """Physical value -> (INT32 counts, quality); clamps mark invalid."""
    counts = value / scale
    if counts >= INT32_MAX:
        return INT32_MAX, QUALITY_INVALID
    if counts <= INT32_MIN:
        return INT32_MIN, QUALITY_INVALID
    return int(round(counts)), QUALITY_GOOD


class SVPublisher:
    """Emits frames on the accumulated-phase schedule: the k-th sample
    goes out on the first simulation step at or past k/smp_rate, giving
    the exact long-run rate with at most one step of jitter."""

    def __init__(self, config: SVConfig):
        config.validate()
        self.config = config
        self.period = 1.0 / config.smp_rate
        self.smp_rate = config.smp_rate
        self.emitted = 0
        self.smp_cnt = 0
        # Patchable template: smpCnt and the 64-byte dataset change per
        # frame, everything else is constant for a fixed config.
        template = sv_encode(config, 0, [0] * 8, [0] * 8)
        self._frame = bytearray(template)
        self._cnt_off, self._data_off = self._locate(template)
        self._frame_u8 = None
        if _patch_kernel is not None:
            import numpy as _np
            self._frame_u8 = _np.frombuffer(self._frame, dtype=_np.uint8)
            self._vals_i8 = _np.zeros(8, dtype=_np.int64)
            self._quals_i8 = _np.zeros(8, dtype=_np.int64)

    @staticmethod
    def _locate(template: bytes) -> tuple[int, int]:
        """Absolute offsets of the smpCnt and dataset values."""

        def value_span(buf, pos):
            tag, val, nxt = read_tlv(buf, pos)
            return tag, nxt - len(val), nxt

        _, sav_lo, sav_hi = value_span(template, 14 + 8)
        pos = sav_lo
        while pos < sav_hi:
            tag, lo, pos = value_span(template, pos)
            if tag == 0xA2:
                _, asdu_lo, asdu_hi = value_span(template, lo)
                cnt_off = data_off = None
                p = asdu_lo
                while p < asdu_hi:
                    tag, vlo, p = value_span(template, p)
                    if tag == 0x82:
                        cnt_off = vlo
                    elif tag == 0x87:
                        data_off = vlo
                assert cnt_off is not None and data_off is not None
                return cnt_off, data_off
        raise AssertionError("template missing seqOfASDU")

    @property
    def frame_size(self) -> int:
        return len(self._frame)

    def tick_into(self, t: float, values8, qualities8, ring,
                  stamps, count: int) -> int:
        """Allocation-free tick for paced loops: due frames are patched
        and copied into ring (a bytearray of frame_size-strided slots,
        stamps holding emission times); returns the new frame count.
        Overflowing the ring drops the frame (caller sizes it from the
        planned run length)."""
        stride = len(self._frame)
        capacity = len(ring) // stride
        while t + 1e-12 >= self.emitted * self.period:
            if self._frame_u8 is not None:
                _patch_kernel(self._frame_u8, self._cnt_off, self._data_off,
                              self.smp_cnt, values8, qualities8)
            else:
                struct.pack_into(">H", self._frame, self._cnt_off,
                                 self.smp_cnt)
                off = self._data_off
                for ch in range(8):
                    struct.pack_into(">iI", self._frame, off + ch * 8,
                                     int(values8[ch]),
                                     int(qualities8[ch]) & 0xFFFFFFFF)
            if count < capacity:
                base = count * stride
                ring[base:base + stride] = self._frame
                stamps[count] = t
                count += 1
            self.emitted += 1
            self.smp_cnt = (self.smp_cnt + 1) % self.smp_rate
        return count

    def tick(self, t: float, values8, qualities8) -> list[bytes]:
        """Called once per simulation step with the bound channel values;
        returns zero or more wire frames."""
        frames = []
        while t + 1e-12 >= self.emitted * self.period:
            if self._frame_u8 is not None:
                vals = self._vals_i8
                quals = self._quals_i8
                if vals is not values8:
                    for ch in range(8):
                        vals[ch] = values8[ch]
                        quals[ch] = qualities8[ch]
                _patch_kernel(self._frame_u8, self._cnt_off, self._data_off,
                              self.smp_cnt, vals, quals)
            else:
                struct.pack_into(">H", self._frame, self._cnt_off,
                                 self.smp_cnt)
                off = self._data_off
                for ch in range(8):
                    struct.pack_into(">iI", self._frame, off + ch * 8,
                                     int(values8[ch]),
                                     int(qualities8[ch]) & 0xFFFFFFFF)
            frames.append(bytes(self._frame))
            self.emitted += 1
            self.smp_cnt = (self.smp_cnt + 1) % self.smp_rate
        return frames
