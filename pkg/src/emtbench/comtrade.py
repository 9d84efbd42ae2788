"""COMTRADE (IEEE C37.111) records: write, read, compare.

Writes the 1999 revision by default (widest tool support) and reads 1999
and 2013. ASCII data carries full-precision physical values (a=1, b=0),
so write -> read is exact; BINARY quantizes through the per-channel
linear law value = a*raw + b into int16 (BINARY32 is read-only).

compare() is the mechanical form of laying two oscillograms over each
other: resample onto the coarser time base, align by cross-correlation
within one cycle, report per-channel max/RMS deviation and digital
first-assertion time differences.
"""

from __future__ import annotations

import datetime as dt
import math
import struct
from dataclasses import dataclass, field

import numpy as np

REV_1999 = "1999"
REV_2013 = "2013"
ASCII = "ASCII"
BINARY = "BINARY"
BINARY32 = "BINARY32"

# Fixed epoch keeps records bit-identical across runs of the same case.
DEFAULT_EPOCH = dt.datetime(2001, 1, 1, 0, 0, 0)

INT16_MAX = 32767


class ComtradeError(Exception):
    pass


class CfgSyntax(ComtradeError):
    def __init__(self, line: int, message: str):
        super().__init__(f"cfg line {line}: {message}")
        self.line = line


class DatWidthMismatch(ComtradeError):
    pass


class UnsupportedRevision(ComtradeError):
    pass


class ChannelOverflow(ComtradeError):
    def __init__(self, channel: str, sample: int, value: float):
        super().__init__(
            f"channel {channel!r} sample {sample}: value {value:g} outside "
            "the representable raw range")
        self.channel = channel
        self.sample = sample


class NoOverlap(ComtradeError):
    pass


@dataclass
class AnalogChannel:
    ch_id: str
    units: str = ""
    phase: str = ""
    ccbm: str = ""
    a: float = 1.0
    b: float = 0.0
    skew: float = 0.0
    cmin: float = -INT16_MAX
    cmax: float = INT16_MAX
    primary: float = 1.0
    secondary: float = 1.0
    ps: str = "P"
    fixed_scale: bool = False   # write BINARY with a,b as given


@dataclass
class DigitalChannel:
    ch_id: str
    phase: str = ""
    ccbm: str = ""
    normal: int = 0


@dataclass
class ComtradeRecord:
    station: str = "EMTBENCH"
    device: str = "0"
    rev_year: str = REV_1999
    analog: list[AnalogChannel] = field(default_factory=list)
    digital: list[DigitalChannel] = field(default_factory=list)
    line_freq: float = 50.0
    sample_rate: float = 0.0          # samples per second (single rate)
    start_time: dt.datetime = DEFAULT_EPOCH
    trigger_time: dt.datetime = DEFAULT_EPOCH
    file_type: str = ASCII
    timemult: float = 1.0
    t0: float = 0.0                          # instant of sample 1 [s]
    analog_data: np.ndarray | None = None    # (n_analog, n) physical
    digital_data: np.ndarray | None = None   # (n_digital, n) 0/1

    @property
    def n_samples(self) -> int:
        if self.analog_data is not None:
            return self.analog_data.shape[1]
        if self.digital_data is not None:
            return self.digital_data.shape[1]
        return 0

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sample_rate

    def validate(self) -> None:
        n = self.n_samples
        if self.analog_data is not None and \
                self.analog_data.shape[0] != len(self.analog):
            raise ComtradeError("analog channel count != data rows")
        if self.digital_data is not None and \
                self.digital_data.shape[0] != len(self.digital):
            raise ComtradeError("digital channel count != data rows")
        if self.digital_data is not None and self.analog_data is not None \
                and self.digital_data.shape[1] != n:
            raise ComtradeError("analog/digital sample counts differ")
        if not self.sample_rate > 0:
            raise ComtradeError("sample_rate must be > 0")


def _fmt_time(t: dt.datetime) -> str:
    return t.strftime("%d/%m/%Y,%H:%M:%S.%f")


def _parse_time(text: str, line_no: int) -> dt.datetime:
    text = text.strip()
    if not text or text == ",":
        return DEFAULT_EPOCH
    for fmt in ("%d/%m/%Y,%H:%M:%S.%f", "%d/%m/%Y,%H:%M:%S"):
        try:
            return dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise CfgSyntax(line_no, f"bad timestamp {text!r}")


def write(record: ComtradeRecord) -> tuple[str, bytes]:
    """Return (cfg_text, dat_bytes); dat is text (CRLF) for ASCII."""
    record.validate()
    n = record.n_samples
    na, nd = len(record.analog), len(record.digital)
    binary = record.file_type.upper() == BINARY

    raw_rows = []
    lines = [f"{record.station},{record.device},{record.rev_year}"]
    lines.append(f"{na + nd},{na}A,{nd}D")
    for idx, ch in enumerate(record.analog):
        data = record.analog_data[idx]
        if binary:
            if ch.fixed_scale:
                a, b = ch.a, ch.b
            else:
                lo, hi = float(np.min(data)), float(np.max(data))
                b = (hi + lo) / 2.0
                a = max((hi - lo) / (2 * INT16_MAX), 1e-12)
            raw = np.round((data - b) / a)
            bad = np.abs(raw) > INT16_MAX
            if bad.any():
                s = int(np.argmax(bad))
                raise ChannelOverflow(ch.ch_id, s, float(data[s]))
            raw_rows.append(raw.astype("<i2"))
            cmin, cmax = -INT16_MAX, INT16_MAX
        else:
            a, b = 1.0, 0.0
            cmin, cmax = -99999, 99998
        lines.append(
            f"{idx + 1},{ch.ch_id},{ch.phase},{ch.ccbm},{ch.units},"
            f"{a!r},{b!r},{ch.skew!r},{cmin},{cmax},"
            f"{ch.primary!r},{ch.secondary!r},{ch.ps}"
        )
    for idx, ch in enumerate(record.digital):
        lines.append(f"{idx + 1},{ch.ch_id},{ch.phase},{ch.ccbm},{ch.normal}")
    lines.append(f"{record.line_freq:g}")
    lines.append("1")
    lines.append(f"{record.sample_rate!r},{n}")
    lines.append(_fmt_time(record.start_time))
    lines.append(_fmt_time(record.trigger_time))
    lines.append(BINARY if binary else ASCII)
    lines.append(f"{record.timemult:g}")
    if record.rev_year == REV_2013:
        lines.append("0,0")   # time_code,local_code
        lines.append("0,0")   # tmq,leapsec
    cfg = "\r\n".join(lines) + "\r\n"

    times_us = np.round(record.times() * 1e6).astype(np.int64)
    if binary:
        nwords = (nd + 15) // 16
        out = bytearray()
        dig = record.digital_data
        for s in range(n):
            out += struct.pack("<II", s + 1, int(times_us[s]))
            for row in raw_rows:
                out += struct.pack("<h", int(row[s]))
            for w in range(nwords):
                word = 0
                for bit in range(16):
                    ch = w * 16 + bit
                    if ch < nd and dig[ch, s]:
                        word |= 1 << bit
                out += struct.pack("<H", word)
        return cfg, bytes(out)

    rows = []
    for s in range(n):
        cells = [str(s + 1), str(int(times_us[s]))]
        for idx in range(na):
            cells.append(repr(float(record.analog_data[idx, s])))
        for idx in range(nd):
            cells.append(str(int(record.digital_data[idx, s])))
        rows.append(",".join(cells))
    return cfg, ("\r\n".join(rows) + "\r\n").encode("ascii")


def _split(line: str, line_no: int, minimum: int) -> list[str]:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < minimum:
        raise CfgSyntax(line_no, f"expected >= {minimum} fields, "
                                 f"got {len(parts)}")
    return parts


def read(cfg_text: str, dat: bytes) -> ComtradeRecord:
    """Parse a CFG/DAT pair; physical values are materialized via a,b."""
    lines = [ln for ln in cfg_text.replace("\r\n", "\n").split("\n")]
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) < 7:
        raise CfgSyntax(len(lines), "cfg too short")

    head = _split(lines[0], 1, 2)
    rev = head[2].strip() if len(head) >= 3 and head[2].strip() else "1991"
    if rev not in (REV_1999, REV_2013):
        raise UnsupportedRevision(f"revision {rev!r} not supported")
    record = ComtradeRecord(station=head[0], device=head[1], rev_year=rev)

    tt = _split(lines[1], 2, 3)
    try:
        na = int(tt[1].upper().rstrip("A"))
        nd = int(tt[2].upper().rstrip("D"))
    except ValueError as exc:
        raise CfgSyntax(2, f"bad channel counts {lines[1]!r}") from exc

    ln = 2
    scale = []
    for k in range(na):
        parts = _split(lines[ln], ln + 1, 10)
        ch = AnalogChannel(
            ch_id=parts[1], phase=parts[2], ccbm=parts[3], units=parts[4],
            a=float(parts[5]), b=float(parts[6] or 0),
            skew=float(parts[7] or 0),
            cmin=float(parts[8] or 0), cmax=float(parts[9] or 0),
        )
        if len(parts) >= 13:
            ch.primary = float(parts[10] or 1)
            ch.secondary = float(parts[11] or 1)
            ch.ps = parts[12] or "P"
        record.analog.append(ch)
        scale.append((ch.a, ch.b))
        ln += 1
    for k in range(nd):
        parts = _split(lines[ln], ln + 1, 2)
        normal = int(parts[4]) if len(parts) >= 5 and parts[4] else 0
        record.digital.append(DigitalChannel(
            ch_id=parts[1], phase=parts[2] if len(parts) > 2 else "",
            ccbm=parts[3] if len(parts) > 3 else "", normal=normal))
        ln += 1

    try:
        record.line_freq = float(lines[ln]); ln += 1
        nrates = int(lines[ln]); ln += 1
    except ValueError as exc:
        raise CfgSyntax(ln + 1, str(exc)) from exc
    if nrates < 1:
        raise CfgSyntax(ln, "nrates must be >= 1 (timestamp-driven data "
                            "is not supported)")
    endsamp = 0
    for r in range(nrates):
        parts = _split(lines[ln], ln + 1, 2)
        record.sample_rate = float(parts[0])  # last rate wins (single-rate)
        endsamp = int(parts[1])
        ln += 1
    record.start_time = _parse_time(lines[ln], ln + 1); ln += 1
    record.trigger_time = _parse_time(lines[ln], ln + 1); ln += 1
    ftype = lines[ln].strip().upper(); ln += 1
    if ftype not in (ASCII, BINARY, BINARY32):
        raise CfgSyntax(ln, f"unknown file type {ftype!r}")
    record.file_type = ftype
    if ln < len(lines):
        try:
            record.timemult = float(lines[ln])
        except ValueError:
            record.timemult = 1.0

    if ftype == ASCII:
        text = dat.decode("ascii", "replace").replace("\r\n", "\n")
        rows = [r for r in text.split("\n") if r.strip()]
        analog = np.zeros((na, len(rows)))
        digital = np.zeros((nd, len(rows)), dtype=np.int8)
        for s, row in enumerate(rows):
            cells = row.split(",")
            if len(cells) != 2 + na + nd:
                raise DatWidthMismatch(
                    f"dat row {s + 1}: {len(cells)} fields, expected "
                    f"{2 + na + nd}")
            if s == 0 and cells[1]:
                record.t0 = float(cells[1]) * 1e-6 * record.timemult
            for k in range(na):
                a, b = scale[k]
                analog[k, s] = a * float(cells[2 + k]) + b
            for k in range(nd):
                digital[k, s] = int(cells[2 + na + k])
    else:
        asize = 2 if ftype == BINARY else 4
        afmt = "<h" if ftype == BINARY else "<i"
        nwords = (nd + 15) // 16
        rec_size = 8 + asize * na + 2 * nwords
        if len(dat) % rec_size:
            raise DatWidthMismatch(
                f"dat size {len(dat)} is not a multiple of the {rec_size}"
                f"-byte record")
        nrows = len(dat) // rec_size
        analog = np.zeros((na, nrows))
        digital = np.zeros((nd, nrows), dtype=np.int8)
        if nrows:
            _n1, ts1 = struct.unpack_from("<II", dat, 0)
            record.t0 = ts1 * 1e-6 * record.timemult
        for s in range(nrows):
            off = s * rec_size + 8
            for k in range(na):
                raw, = struct.unpack_from(afmt, dat, off)
                a, b = scale[k]
                analog[k, s] = a * raw + b
                off += asize
            for w in range(nwords):
                word, = struct.unpack_from("<H", dat, off)
                off += 2
                for bit in range(16):
                    ch = w * 16 + bit
                    if ch < nd:
                        digital[ch, s] = (word >> bit) & 1

    if endsamp and endsamp != analog.shape[1] and na:
        raise DatWidthMismatch(
            f"cfg declares {endsamp} samples, dat holds {analog.shape[1]}")
    record.analog_data = analog
    record.digital_data = digital
    return record


def write_files(record: ComtradeRecord, base_path) -> tuple[str, str]:
    cfg, dat = write(record)
    cfg_path = f"{base_path}.cfg"
    dat_path = f"{base_path}.dat"
    with open(cfg_path, "w", newline="") as fh:
        fh.write(cfg)
    with open(dat_path, "wb") as fh:
        fh.write(dat)
    return cfg_path, dat_path


def read_files(base_or_cfg_path) -> ComtradeRecord:
    path = str(base_or_cfg_path)
    if path.lower().endswith(".cfg"):
        path = path[:-4]
    with open(path + ".cfg") as fh:
        cfg = fh.read()
    with open(path + ".dat", "rb") as fh:
        dat = fh.read()
    return read(cfg, dat)


@dataclass
class ChannelDeviation:
    id_a: str
    id_b: str
    max_abs: float
    rms: float
    peak: float            # peak |value| of the reference channel
    rms_pct_of_peak: float


@dataclass
class CompareReport:
    lag_seconds: float
    base_rate: float
    channels: list[ChannelDeviation]
    digital_time_diffs: list[tuple[str, str, float]]  # (id_a, id_b, dt)


def compare(rec_a: ComtradeRecord, rec_b: ComtradeRecord,
            channel_map: list[tuple[int, int]] | None = None,
            digital_map: list[tuple[int, int]] | None = None,
            time_align: bool = True) -> CompareReport:
    """Overlay two records: resample onto the coarser base, align within
    +-1 cycle by cross-correlation, report deviations."""
    if channel_map is None:
        npairs = min(len(rec_a.analog), len(rec_b.analog))
        channel_map = [(k, k) for k in range(npairs)]
    if digital_map is None:
        npairs = min(len(rec_a.digital), len(rec_b.digital))
        digital_map = [(k, k) for k in range(npairs)]

    rate = min(rec_a.sample_rate, rec_b.sample_rate)
    ta, tb = rec_a.times(), rec_b.times()
    lo = max(ta[0], tb[0])
    hi = min(ta[-1], tb[-1])
    if hi <= lo:
        raise NoOverlap(f"records do not overlap: [{ta[0]},{ta[-1]}] vs "
                        f"[{tb[0]},{tb[-1]}]")
    base = np.arange(lo, hi, 1.0 / rate)

    def resample(rec, idx, t_axis):
        return np.interp(t_axis, rec.times(), rec.analog_data[idx])

    # Lag search on the first mapped pair, +-1 cycle of the line frequency.
    lag = 0
    if time_align and channel_map:
        ia, ib = channel_map[0]
        xa = resample(rec_a, ia, base)
        xb = resample(rec_b, ib, base)
        max_lag = int(round(rate / rec_a.line_freq))
        best = -math.inf
        for cand in range(-max_lag, max_lag + 1):
            if cand >= 0:
                va, vb = xa[cand:], xb[:len(xb) - cand]
            else:
                va, vb = xa[:cand], xb[-cand:]
            if len(va) < 2:
                continue
            score = float(np.dot(va, vb))
            if score > best:
                best = score
                lag = cand
    lag_seconds = lag / rate

    channels = []
    for ia, ib in channel_map:
        xa = resample(rec_a, ia, base)
        xb = resample(rec_b, ib, base)
        if lag >= 0:
            va, vb = xa[lag:], xb[:len(xb) - lag]
        else:
            va, vb = xa[:lag], xb[-lag:]
        diff = va - vb
        peak = float(np.max(np.abs(va))) or 1.0
        rms = float(np.sqrt(np.mean(diff * diff)))
        channels.append(ChannelDeviation(
            id_a=rec_a.analog[ia].ch_id, id_b=rec_b.analog[ib].ch_id,
            max_abs=float(np.max(np.abs(diff))), rms=rms, peak=peak,
            rms_pct_of_peak=100.0 * rms / peak))

    digital_diffs = []
    for ia, ib in digital_map:
        da = rec_a.digital_data[ia]
        db = rec_b.digital_data[ib]
        fa = np.argmax(da > 0) if (da > 0).any() else None
        fb = np.argmax(db > 0) if (db > 0).any() else None
        if fa is None or fb is None:
            delta = math.inf if fa != fb else 0.0
        else:
            delta = float(fa) / rec_a.sample_rate - float(fb) / rec_b.sample_rate
        digital_diffs.append((rec_a.digital[ia].ch_id,
                              rec_b.digital[ib].ch_id, delta))

    return CompareReport(lag_seconds=lag_seconds, base_rate=rate,
                         channels=channels, digital_time_diffs=digital_diffs)
