"""Software protective relay closing the HiL loop.

Consumes either the loopback DAC codes (inverse-mapped to physical
values, decimated to its sampling rate) or a Sampled Values stream;
estimates fundamental phasors with a full-cycle single-bin DFT; runs
instantaneous overcurrent, IEC standard-inverse IDMT and a self-polarized
mho distance element; latches the trip onto a digital input bit and a
GOOSE dataset bit; records everything it saw in COMTRADE.
"""

from __future__ import annotations

import cmath
import datetime
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import comtrade
from .ioports import AnalogChannelMap, code_to_value
from .sv import sv_decode

if os.environ.get("EMTBENCH_NO_NUMBA"):
    _relay_kernel = _codes_kernel = None
else:
    try:
        from ._kernels import relay_codes_to_values as _codes_kernel
        from ._kernels import relay_sample as _relay_kernel
    except ImportError:  # pragma: no cover - numba genuinely absent
        _relay_kernel = _codes_kernel = None

IDMT_K = 0.14
IDMT_ALPHA = 0.02

# event bits shared with the compiled sample kernel
EV_IOC, EV_IDMT, EV_MHO, EV_TRIP, EV_DROPOUT = 1, 2, 4, 8, 16
_EV_NAMES = ((EV_IOC, "ioc_operate"), (EV_IDMT, "idmt_operate"),
             (EV_MHO, "mho_operate"), (EV_TRIP, "trip"),
             (EV_DROPOUT, "trip_dropout"))


@dataclass
class Phasor:
    magnitude: float          # RMS of the fundamental
    angle: float              # radians in (-pi, pi]
    window_complete: bool

    @property
    def complex(self) -> complex:
        return cmath.rect(self.magnitude, self.angle)


@dataclass
class RelayConfig:
    source: str = "loopback"            # "loopback" | "sv"
    f_nominal: float = 50.0
    samples_per_cycle: int = 16         # relay sampling (80 for SV source)
    # loopback channel assignment: DAC channel index per quantity
    va_ch: int = 0
    vb_ch: int = 1
    vc_ch: int = 2
    ia_ch: int = 3
    ib_ch: int = 4
    ic_ch: int = 5
    ioc_pickup: float = 0.0             # 0 disables the element [A RMS]
    idmt_pickup: float = 0.0            # 0 disables [A RMS]
    idmt_tms: float = 0.1
    mho_zr_ohm: float = 0.0             # 0 disables [ohm]
    mho_zr_deg: float = 85.0
    mho_reach: float = 0.8
    k0: float = 0.0                     # zero-sequence compensation
    i_min: float = 0.1                  # current supervision [A RMS]
    trip_in_bit: int = 0                # simulator digital input bit
    trip_dropout: float = 0.1           # seconds of latch after dropout
    breaker_status_out_bit: int | None = 0  # recorded from out_bits

    def validate(self) -> None:
        if self.source not in ("loopback", "sv"):
            raise ValueError(f"unknown relay source {self.source!r}")
        for name in ("ioc_pickup", "idmt_pickup", "mho_zr_ohm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.idmt_tms <= 2.0:
            raise ValueError("idmt_tms must be in (0, 2]")
        if not 0.0 < self.mho_reach <= 1.0:
            raise ValueError("mho_reach must be in (0, 1]")
        if not 0 <= self.trip_in_bit < 8:
            raise ValueError("trip_in_bit must be 0..7")


def dft_phasor(window: np.ndarray, n_per_cycle: int | None = None) -> Phasor:
    """Fundamental phasor of one nominal cycle of samples.

    The single-bin DFT of an exact integer-cycle window rejects all
    harmonics; magnitude is reported as RMS (peak / sqrt 2).
    """
    n = len(window) if n_per_cycle is None else n_per_cycle
    angles = -2j * math.pi * np.arange(n) / n
    x = (2.0 / n) * np.dot(window[-n:], np.exp(angles))
    return Phasor(magnitude=abs(x) / math.sqrt(2.0),
                  angle=math.atan2(x.imag, x.real),
                  window_complete=True)


def idmt_operate_time(m: float, tms: float) -> float:
    """IEC standard-inverse characteristic t = TMS * 0.14/(M^0.02 - 1)."""
    if m <= 1.0:
        return math.inf
    return tms * IDMT_K / (m ** IDMT_ALPHA - 1.0)


class IdmtElement:
    """Disk-emulation accumulator: trips when the integral of dt/t(M)
    reaches 1; resets instantly when M drops to/below 1."""

    def __init__(self, pickup: float, tms: float):
        self.pickup = pickup
        self.tms = tms
        self.acc = 0.0

    def update(self, i_rms: float, dt: float) -> bool:
        if self.pickup <= 0:
            return False
        m = i_rms / self.pickup
        if m <= 1.0:
            self.acc = 0.0
            return False
        self.acc += dt / idmt_operate_time(m, self.tms)
        return self.acc >= 1.0


MHO_IN = "in_zone"
MHO_OUT = "out_of_zone"
MHO_BLOCKED = "blocked"


def mho_decision(v: complex, i: complex, zr: complex, reach: float,
                 i_min: float = 0.1) -> str:
    """Self-polarized mho: operate when Z = V/I lies inside the circle
    through the origin with diameter reach*Zr."""
    if abs(i) < i_min:
        return MHO_BLOCKED
    z = v / i
    c = reach * zr / 2.0
    return MHO_IN if abs(z - c) <= abs(c) else MHO_OUT


class VirtualRelay:
    """Drives elements at the relay sampling cadence and latches trips.

    Wire as the loopback consumer (sample()/current_in_bits()) or feed
    SV frames through consume_sv_frame().
    """

    def __init__(self, config: RelayConfig, sim_dt: float,
                 analog_maps: list[AnalogChannelMap] | None = None,
                 voltage_scale: float = 1e-2, current_scale: float = 1e-3,
                 max_samples: int | None = None):
        config.validate()
        self.config = config
        self.sim_dt = sim_dt
        self.fs = config.f_nominal * config.samples_per_cycle
        self.period = 1.0 / self.fs
        self.n_win = config.samples_per_cycle
        # Circular windows: phasors are taken straight off the buffer
        # against a fixed DFT kernel; the resulting common rotation
        # cancels in V/I ratios and leaves magnitudes exact.
        self.win = np.zeros((6, self.n_win))
        self.kern = (2.0 / self.n_win) * np.exp(
            -2j * math.pi * np.arange(self.n_win) / self.n_win)
        self.zr = cmath.rect(config.mho_zr_ohm,
                             math.radians(config.mho_zr_deg))
        # [pos, filled, trip, rec_n, ioc_flag, idmt_flag, mho_flag]
        self._istate = np.zeros(7, dtype=np.int64)
        # [idmt_acc, last_operate, trip_time] (-1 = none)
        self._fstate = np.array([0.0, -1.0, -1.0])
        self._pf = np.array([
            config.ioc_pickup, config.idmt_pickup, config.idmt_tms,
            self.period, self.zr.real, self.zr.imag, config.mho_reach,
            config.i_min, config.k0, config.trip_dropout,
        ])
        self._emitted = 0
        # offset the sampling comb a tenth of a period so relay samples
        # do not pile onto the same simulation steps as SV emissions
        self._phase = 0.1 * self.period
        self._out_bits = 0
        self.events: list[dict] = []
        self._maps: dict[int, AnalogChannelMap] = {
            m.channel: m for m in (analog_maps or [])}
        # precomputed code -> physical affine maps per consumed channel
        self._inv: list[tuple[float, float]] = []
        for ch in (config.va_ch, config.vb_ch, config.vc_ch,
                   config.ia_ch, config.ib_ch, config.ic_ch):
            m = self._maps.get(ch)
            if m is None:
                self._inv.append((0.0, 0.0))
            else:
                gain = (2 * 10.0 / 4095) * (m.full_scale / 10.0)
                self._inv.append((gain, -m.full_scale))
        self._chs = (config.va_ch, config.vb_ch, config.vc_ch,
                     config.ia_ch, config.ib_ch, config.ic_ch)
        self._chs_arr = np.array(self._chs, dtype=np.int64)
        self._gains = np.array([g for g, _ in self._inv])
        self._offs = np.array([o for _, o in self._inv])
        self._sv_vscale = voltage_scale
        self._sv_iscale = current_scale
        # record buffers (relay-cadence samples), preallocated and
        # prefaulted so the sample path neither grows nor page-faults
        cap = max(4096, max_samples or 0)
        self._rec_analog = np.empty((6, cap))
        self._rec_analog.fill(0.0)
        self._rec_digital = np.empty((2, cap), dtype=np.int8)
        self._rec_digital.fill(0)
        self._vals_arr = np.zeros(6)

    @property
    def trip(self) -> bool:
        return bool(self._istate[2])

    @property
    def trip_time(self) -> float | None:
        return None if self._fstate[2] < 0.0 else float(self._fstate[2])

    @property
    def _rec_n(self) -> int:
        return int(self._istate[3])

    # -- loopback consumer interface --------------------------------------

    def next_due(self) -> float:
        """Simulated time of the next relay sample."""
        return self._emitted * self.period + self._phase

    def sample(self, step_index: int, codes, out_bits: int) -> None:
        """Called once per exchange with the fresh DAC codes."""
        self._out_bits = out_bits
        t = step_index * self.sim_dt
        if t + 1e-12 < self._emitted * self.period + self._phase:
            return
        self._emitted += 1
        vals = self._vals_arr
        if _codes_kernel is not None and isinstance(codes, np.ndarray):
            _codes_kernel(codes, self._chs_arr, self._gains, self._offs,
                          vals)
        else:
            inv = self._inv
            chs = self._chs
            for q in range(6):
                gain, off = inv[q]
                vals[q] = codes[chs[q]] * gain + off
        self.process_sample(vals, t)

    def current_in_bits(self) -> int:
        return (1 << self.config.trip_in_bit) if self.trip else 0

    # -- SV consumer interface ---------------------------------------------

    def consume_sv_frame(self, frame: bytes, t: float) -> None:
        parsed = sv_decode(frame)
        ia, ib, ic, _in = (x * self._sv_iscale for x in parsed.values[:4])
        va, vb, vc, _vn = (x * self._sv_vscale for x in parsed.values[4:])
        self.process_sample((va, vb, vc, ia, ib, ic), t)

    # -- the relay sample path ----------------------------------------------

    def process_sample(self, values6, t: float) -> int:
        """One relay sample: update windows, run elements, latch trip.
        Returns the current input-bit word."""
        cfg = self.config
        if self._istate[3] >= self._rec_analog.shape[1]:
            self._rec_analog = np.concatenate(
                [self._rec_analog, np.zeros_like(self._rec_analog)], axis=1)
            self._rec_digital = np.concatenate(
                [self._rec_digital, np.zeros_like(self._rec_digital)], axis=1)
        brk = 0
        if cfg.breaker_status_out_bit is not None:
            brk = (self._out_bits >> cfg.breaker_status_out_bit) & 1
        if self._istate[3] == 0:
            self._rec_t0 = t
        vals = self._vals_arr
        if vals is not values6:
            vals[:] = values6

        if _relay_kernel is not None:
            ev = _relay_kernel(self.win, self.kern, vals, t, self._pf,
                               self._istate, self._fstate,
                               self._rec_analog, self._rec_digital, brk)
        else:
            ev = self._sample_py(vals, t, brk)
        if ev:
            for bit, name in _EV_NAMES:
                if ev & bit:
                    self.events.append({"t": t, "event": name})
        return self.current_in_bits()

    def _sample_py(self, vals, t: float, brk: int) -> int:
        """Portable sample path; mirrors the compiled kernel."""
        ist, fst, pf = self._istate, self._fstate, self._pf
        n = self.n_win
        pos = ist[0]
        self.win[:, pos] = vals
        ist[0] = (pos + 1) % n
        if ist[1] < n:
            ist[1] += 1
        events = 0
        operated = False
        if ist[1] >= n:
            ph = self.win @ self.kern  # rotating; ratios/magnitudes exact
            rt2 = math.sqrt(2.0)
            imax = max(abs(ph[3]), abs(ph[4]), abs(ph[5])) / rt2
            if pf[0] > 0 and imax >= pf[0]:
                operated = True
                if ist[4] == 0:
                    ist[4] = 1
                    events |= EV_IOC
            if pf[1] > 0:
                m = imax / pf[1]
                if m <= 1.0:
                    fst[0] = 0.0
                else:
                    fst[0] += pf[3] / idmt_operate_time(m, pf[2])
                    if fst[0] >= 1.0:
                        operated = True
                        if ist[5] == 0:
                            ist[5] = 1
                            events |= EV_IDMT
            if pf[4] != 0.0 or pf[5] != 0.0:
                ires = (ph[3] + ph[4] + ph[5]) / rt2
                for phx in range(3):
                    loop_i = ph[3 + phx] / rt2 + pf[8] * ires
                    verdict = mho_decision(ph[phx] / rt2, loop_i, self.zr,
                                           pf[6], pf[7])
                    if verdict == MHO_IN:
                        operated = True
                        if ist[6] == 0:
                            ist[6] = 1
                            events |= EV_MHO
                        break
        if operated:
            fst[1] = t
            if ist[2] == 0:
                ist[2] = 1
                if fst[2] < 0.0:
                    fst[2] = t
                events |= EV_TRIP
        elif ist[2] == 1 and fst[1] >= 0.0 and t - fst[1] > pf[9]:
            ist[2] = 0
            ist[4] = ist[5] = ist[6] = 0
            events |= EV_DROPOUT
        s = ist[3]
        self._rec_analog[:, s] = vals
        self._rec_digital[0, s] = ist[2]
        self._rec_digital[1, s] = brk
        ist[3] = s + 1
        return events

    # -- artifacts -----------------------------------------------------------

    def build_record(self) -> comtrade.ComtradeRecord:
        rec = comtrade.ComtradeRecord(
            station="EMTBENCH-RELAY", device="VR1",
            sample_rate=self.fs, line_freq=self.config.f_nominal,
            t0=getattr(self, "_rec_t0", 0.0))
        rec.analog = [comtrade.AnalogChannel(ch, units)
                      for ch, units in (("VA", "V"), ("VB", "V"), ("VC", "V"),
                                        ("IA", "A"), ("IB", "A"), ("IC", "A"))]
        rec.digital = [comtrade.DigitalChannel("TRIP"),
                       comtrade.DigitalChannel("52A", normal=1)]
        rec.analog_data = self._rec_analog[:, :self._rec_n].copy()
        rec.digital_data = self._rec_digital[:, :self._rec_n].copy()
        if self.trip_time is not None:
            rec.trigger_time = rec.start_time + \
                datetime.timedelta(seconds=self.trip_time)
        return rec

    def write_event_log(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.events:
                fh.write(json.dumps(entry) + "\n")
