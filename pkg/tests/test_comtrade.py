"""COMTRADE writer/reader identity, fixtures and record comparison."""

import numpy as np
import pytest

from emtbench.comtrade import (
    ASCII,
    BINARY,
    AnalogChannel,
    CfgSyntax,
    ComtradeRecord,
    DatWidthMismatch,
    DigitalChannel,
    NoOverlap,
    UnsupportedRevision,
    compare,
    read,
    read_files,
    write,
    write_files,
)

from conftest import FIXTURES


def _record(n=400, rate=4000.0, file_type=ASCII, freq=50.0):
    t = np.arange(n) / rate
    ia = 1000.0 * np.sin(2 * np.pi * freq * t)
    va = 230e3 * np.sin(2 * np.pi * freq * t + 0.4)
    trip = (t > 0.05).astype(np.int8)
    rec = ComtradeRecord(file_type=file_type, sample_rate=rate,
                         line_freq=freq)
    rec.analog = [AnalogChannel("IA", "A"), AnalogChannel("VA", "V")]
    rec.digital = [DigitalChannel("TRIP")]
    rec.analog_data = np.vstack([ia, va])
    rec.digital_data = trip[None, :]
    return rec


def test_ascii_dat_structure():
    rec = _record(n=4)
    cfg, dat = write(rec)
    lines = dat.decode().strip().split("\r\n")
    assert len(lines) == 4
    for k, line in enumerate(lines):
        cells = line.split(",")
        assert len(cells) == 2 + 2 + 1      # n, t, 2 analog, 1 digital
        assert int(cells[0]) == k + 1


def test_ascii_roundtrip_exact():
    rec = _record()
    cfg, dat = write(rec)
    back = read(cfg, dat)
    assert back.station == rec.station
    assert back.sample_rate == rec.sample_rate
    assert [c.ch_id for c in back.analog] == ["IA", "VA"]
    assert np.array_equal(back.analog_data, rec.analog_data)
    assert np.array_equal(back.digital_data, rec.digital_data)


def test_binary_roundtrip_within_half_lsb():
    rec = _record(file_type=BINARY)
    cfg, dat = write(rec)
    back = read(cfg, dat)
    assert back.file_type == BINARY
    for k in range(2):
        a = back.analog[k].a
        err = np.max(np.abs(back.analog_data[k] - rec.analog_data[k]))
        assert err <= a / 2 + 1e-12
    assert np.array_equal(back.digital_data, rec.digital_data)


def test_write_read_files_roundtrip(tmp_path):
    rec = _record()
    write_files(rec, tmp_path / "case")
    back = read_files(tmp_path / "case.cfg")
    assert np.array_equal(back.analog_data, rec.analog_data)


def test_2013_revision_roundtrip():
    rec = _record()
    rec.rev_year = "2013"
    cfg, dat = write(rec)
    back = read(cfg, dat)
    assert back.rev_year == "2013"
    assert np.array_equal(back.analog_data, rec.analog_data)


def test_third_party_fixture_parses():
    rec = read_files(FIXTURES / "comtrade_thirdparty.cfg")
    # counts per the fixture's documentation
    assert rec.station == "STATION XYZ"
    assert len(rec.analog) == 4
    assert len(rec.digital) == 2
    assert rec.n_samples == 10
    assert rec.sample_rate == 1000.0
    assert rec.analog_data[0, 0] == pytest.approx(5.0)       # 0.05 * 100
    assert rec.analog_data[3, 0] == pytest.approx(100000.0)  # 12.5 * 8000
    assert list(rec.digital_data[0]) == [0, 0, 0, 1, 1, 1, 1, 1, 1, 1]
    assert list(rec.digital_data[1]) == [1, 1, 1, 1, 1, 1, 0, 0, 0, 0]


def test_width_mismatch_detected():
    rec = _record(n=6)
    cfg, dat = write(rec)
    # drop one analog column from every row: claim 3 analogs in cfg
    cfg_bad = cfg.replace("3,2A,1D", "4,3A,1D").replace(
        "2,VA", "2,VA").replace(
        "1,IA,,,A", "1,IA,,,A")
    cfg_bad = cfg_bad.replace(
        "2,VA,,,V", "2,VA,,,V\r\n3,VB,,,V,1.0,0.0,0.0,-99999,98I,1.0,1.0,P")
    with pytest.raises((DatWidthMismatch, CfgSyntax, ValueError)):
        read(cfg_bad, dat)


def test_binary_width_mismatch():
    rec = _record(n=8, file_type=BINARY)
    cfg, dat = write(rec)
    with pytest.raises(DatWidthMismatch):
        read(cfg, dat[:-3])


def test_unsupported_revision():
    rec = _record(n=4)
    cfg, dat = write(rec)
    with pytest.raises(UnsupportedRevision):
        read(cfg.replace(",1999", ",1997"), dat)


def test_compare_self_is_zero():
    rec = _record()
    report = compare(rec, rec)
    assert report.lag_seconds == 0.0
    for ch in report.channels:
        assert ch.max_abs == 0.0
        assert ch.rms == 0.0
    assert report.digital_time_diffs[0][2] == 0.0


def test_compare_resampled_rates_below_1pct():
    # Same 50 Hz waveform sampled at 4000 Hz and 1923 Hz: RMS deviation
    # after interpolation onto the coarser base stays below 1% of peak.
    n_hi, n_lo = 4000, 1923
    t_hi = np.arange(n_hi) / 4000.0
    t_lo = np.arange(n_lo) / 1923.0
    make = lambda t: 100.0 * np.sin(2 * np.pi * 50 * t)
    rec_a = ComtradeRecord(sample_rate=4000.0)
    rec_a.analog = [AnalogChannel("X")]
    rec_a.digital = []
    rec_a.analog_data = make(t_hi)[None, :]
    rec_a.digital_data = np.zeros((0, n_hi), dtype=np.int8)
    rec_b = ComtradeRecord(sample_rate=1923.0)
    rec_b.analog = [AnalogChannel("X")]
    rec_b.digital = []
    rec_b.analog_data = make(t_lo)[None, :]
    rec_b.digital_data = np.zeros((0, n_lo), dtype=np.int8)
    report = compare(rec_a, rec_b)
    assert report.channels[0].rms_pct_of_peak < 1.0


def test_compare_lag_detection_symmetric():
    rate = 2000.0
    n = 2000
    t = np.arange(n) / rate
    shift = 0.004  # 8 samples
    base = np.sin(2 * np.pi * 50 * t)

    def mk(sig):
        rec = ComtradeRecord(sample_rate=rate)
        rec.analog = [AnalogChannel("X")]
        rec.analog_data = sig[None, :]
        rec.digital_data = np.zeros((0, n), dtype=np.int8)
        return rec

    rec_a = mk(np.sin(2 * np.pi * 50 * t))
    rec_b = mk(np.sin(2 * np.pi * 50 * (t - shift)))
    fwd = compare(rec_a, rec_b)
    rev = compare(rec_b, rec_a)
    assert fwd.lag_seconds == pytest.approx(-shift, abs=1.5 / rate)
    assert rev.lag_seconds == pytest.approx(shift, abs=1.5 / rate)


def test_compare_no_overlap():
    rec_a = _record(n=100, rate=1000.0)
    rec_b = _record(n=100, rate=1000.0)
    rec_b.analog_data = rec_b.analog_data.copy()
    # disjoint spans simulated by empty b
    rec_b.analog_data = rec_b.analog_data[:, :1]
    rec_b.digital_data = rec_b.digital_data[:, :1]
    with pytest.raises(NoOverlap):
        compare(rec_a, rec_b)


def test_channel_overflow_reports_channel_and_sample():
    from emtbench.comtrade import ChannelOverflow

    rec = _record(n=16, file_type=BINARY)
    # A fixed scale too fine for the data must overflow int16.
    rec.analog[0].fixed_scale = True
    rec.analog[0].a = 1e-3
    rec.analog[0].b = 0.0
    with pytest.raises(ChannelOverflow) as err:
        write(rec)
    assert err.value.channel == "IA"
    assert 0 <= err.value.sample < 16