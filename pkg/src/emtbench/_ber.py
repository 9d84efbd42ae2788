"""Minimal BER-TLV helpers shared by the process-bus codecs.

Only what the 9-2LE sampled-values and GOOSE PDUs need: definite-length
TLVs, unsigned integers, visible strings. Every decode error carries the
byte offset it tripped on.
"""

from __future__ import annotations

import struct


class Malformed(Exception):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def encode_len(n: int) -> bytes:
    if n < 0x80:
        return bytes([n])
    if n <= 0xFF:
        return bytes([0x81, n])
    if n <= 0xFFFF:
        return bytes([0x82, n >> 8, n & 0xFF])
    raise ValueError(f"TLV length {n} too large")


def tlv(tag: int, value: bytes) -> bytes:
    return bytes([tag]) + encode_len(len(value)) + value


def encode_uint(value: int) -> bytes:
    """Minimal-length unsigned integer; a leading zero byte keeps values
    with the top bit set non-negative under BER's signed reading."""
    if value < 0:
        raise ValueError("unsigned only")
    out = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    if out[0] & 0x80:
        out = b"\x00" + out
    return out


def decode_uint(data: bytes, offset: int) -> int:
    if not data:
        raise Malformed(offset, "empty integer value")
    if len(data) > 5:
        raise Malformed(offset, f"integer value too long ({len(data)} bytes)")
    return int.from_bytes(data, "big")


def read_tlv(buf: bytes, pos: int) -> tuple[int, bytes, int]:
    """Return (tag, value, next_pos); validates lengths against the buffer."""
    if pos >= len(buf):
        raise Malformed(pos, "expected TLV, hit end of buffer")
    tag = buf[pos]
    lpos = pos + 1
    if lpos >= len(buf):
        raise Malformed(lpos, "TLV truncated before length")
    first = buf[lpos]
    if first < 0x80:
        length, vpos = first, lpos + 1
    elif first == 0x81:
        if lpos + 1 >= len(buf):
            raise Malformed(lpos, "long-form length truncated")
        length, vpos = buf[lpos + 1], lpos + 2
    elif first == 0x82:
        if lpos + 2 >= len(buf):
            raise Malformed(lpos, "long-form length truncated")
        length, vpos = (buf[lpos + 1] << 8) | buf[lpos + 2], lpos + 3
    else:
        raise Malformed(lpos, f"unsupported length form 0x{first:02x}")
    if vpos + length > len(buf):
        raise Malformed(
            vpos, f"TLV length {length} overruns buffer of {len(buf)}")
    return tag, buf[vpos:vpos + length], vpos + length


def be_u16(value: int) -> bytes:
    return struct.pack(">H", value & 0xFFFF)


def parse_mac(text: str) -> bytes:
    parts = text.replace("-", ":").split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC address {text!r}")
    return bytes(int(p, 16) for p in parts)


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)
