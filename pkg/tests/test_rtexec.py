"""Executor: pipeline order, pacing accounting, recorder integration and
the closed HiL loop on the reference case."""

import threading
import time

import numpy as np
import pytest

from emtbench import rtexec
from emtbench.caseformat import parse_case
from emtbench.recorder import load_channel, load_index, minmax_decimate
from emtbench.rtexec import BATCH, REALTIME, RunHooks, run

from conftest import FIXTURES

REFERENCE = (FIXTURES / "ag60km.case").read_text()


def ref_case(t_end=None):
    case = parse_case(REFERENCE)
    if t_end is not None:
        case.t_end = t_end
    return case


@pytest.fixture(scope="module")
def short_run():
    """Batch run of a shortened reference case, shared by read-only tests."""
    case = ref_case(t_end=0.25)
    return run(case, BATCH)


def test_sample_count(short_run):
    case_steps = int(np.floor(0.25 / 52e-6 + 1e-9))
    assert short_run.recorder.buf.shape[1] == case_steps + 1
    assert short_run.timing.steps == case_steps
    assert short_run.timing.overruns == 0
    assert short_run.timing.max_lateness == 0.0


def test_histogram_conserves_steps(short_run):
    assert sum(short_run.timing.jitter_histogram.values()) == \
        short_run.timing.steps


def test_closed_loop_relay_trips_and_breaker_clears(short_run):
    res = short_run
    assert res.relay is not None
    t_trip = res.relay.trip_time
    assert t_trip is not None
    # fault applied at 0.1 s; relay must see it only after inception
    assert 0.1 < t_trip < 0.15
    # trip bit reached the executor: d:in.0 trace asserts
    trip_trace = res.channel("d:in.0")
    assert trip_trace[:int(0.1 / 52e-6)].max() == 0
    assert trip_trace.max() == 1
    # breaker status output drops once all three poles interrupt
    brk_trace = res.channel("d:out.0")
    assert brk_trace[0] == 1
    assert brk_trace[-1] == 0
    # all poles opened within one half-cycle of the trip command
    t_first_trip = np.argmax(trip_trace > 0) * 52e-6
    t_all_open = np.argmax(brk_trace == 0) * 52e-6
    assert t_all_open - t_first_trip <= 10e-3 + 2 * 52e-6
    # post-clearing: fault branch current identically zero
    fault_i = res.channel("i:FAULT.BUSF.A.sw")
    assert fault_i[-1] == 0.0
    last_nonzero = np.max(np.nonzero(fault_i)[0]) if fault_i.any() else 0
    assert last_nonzero * 52e-6 < 0.22  # cleared within 120 ms of inception
    # currents through the breaker end at zero too
    for ph in "ABC":
        assert res.channel(f"i:CB1.{ph}")[-1] == 0.0


def test_pipeline_phase_order():
    case = ref_case()
    phases = []
    hooks = RunHooks(on_phase=lambda name, k: phases.append((k, name)))
    run(case, BATCH, hooks=hooks, t_end_override=0.002)
    per_step = {}
    for k, name in phases:
        per_step.setdefault(k, []).append(name)
    want = ["inputs", "events", "solve", "outputs", "record"]
    for k, seq in per_step.items():
        assert seq == want, f"step {k} out of order: {seq}"


def test_batch_deterministic_bit_identical():
    case = ref_case(t_end=0.12)
    a = run(case, BATCH)
    b = run(ref_case(t_end=0.12), BATCH)
    assert np.array_equal(a.recorder.buf, b.recorder.buf)


def test_store_on_disk(tmp_path):
    case = ref_case()
    res = run(case, BATCH, out_dir=tmp_path, t_end_override=0.05)
    index = load_index(tmp_path / "store")
    assert len(index["channels"]) == 14
    n = res.recorder.buf.shape[1]
    for entry in index["channels"]:
        assert entry["samples"] == n
        assert entry["dt"] == pytest.approx(52e-6)
    va = load_channel(tmp_path / "store", "v:BUS1.A")
    assert np.array_equal(va, res.recorder.buf[0])
    assert (tmp_path / "timing.json").exists()
    assert (tmp_path / "relay.cfg").exists()
    assert (tmp_path / "sv.pcap").exists()
    assert (tmp_path / "goose.pcap").exists()


def test_sv_stream_count(short_run):
    # 0.25 s at 4000 frames/s
    assert short_run.sv_frames == 1000


def test_abort_preserves_partial(tmp_path):
    case = ref_case()
    abort = threading.Event()

    done = {}

    def progress(k, n):
        if k * 52e-6 > 0.05:
            abort.set()

    res = run(case, BATCH, out_dir=tmp_path, abort_event=abort,
              progress=progress)
    assert res.counters["aborted"]
    assert res.timing.steps < case.n_steps
    index = load_index(tmp_path / "store")
    assert index["channels"][0]["samples"] > 0


def test_minmax_decimation_preserves_extremes():
    rng = np.random.default_rng(3)
    x = rng.normal(size=1_000_00)
    starts, mins, maxs = minmax_decimate(x, 2000)
    assert len(mins) == len(maxs) == 2000
    assert mins.min() == x.min()
    assert maxs.max() == x.max()


def test_decimation_identity_when_buckets_exceed_samples():
    x = np.arange(100.0)
    _, mins, maxs = minmax_decimate(x, 500)
    assert np.array_equal(mins, x)
    assert np.array_equal(maxs, x)


# -- realtime ------------------------------------------------------------


def test_realtime_requires_reasonable_dt():
    case = ref_case(t_end=0.01)
    case.dt = 5e-6
    with pytest.raises(ValueError):
        run(case, REALTIME)


def test_realtime_short_run_paces_and_counts():
    case = ref_case(t_end=0.2)
    res = run(case, REALTIME)
    # wall time must be close to simulated time (pacing, no drift)
    assert res.timing.steps == case.n_steps
    assert res.timing.mean_step_work < 52e-6
    assert res.timing.overruns <= max(3, int(0.01 * res.timing.steps))


def test_realtime_matches_batch_bit_identical():
    case = ref_case(t_end=0.12)
    a = run(case, BATCH)
    b = run(ref_case(t_end=0.12), REALTIME)
    assert np.array_equal(a.recorder.buf, b.recorder.buf)


def test_injected_stall_counts_one_overrun():
    case = ref_case()
    stall_step = 400

    def on_phase(name, k):
        if name == "solve" and k == stall_step:
            time.sleep(100e-6)

    res = run(case, REALTIME, hooks=RunHooks(on_phase=on_phase),
              t_end_override=0.05)
    # the stalled step overran; a handful of neighbours may straggle on a
    # shared desk, but the stall itself must be visible
    assert res.timing.overruns >= 1
    assert res.timing.max_lateness >= 48e-6
    w = res.timing
    assert w.max_step_work >= 100e-6


def test_no_gc_and_no_buffer_growth_steady_state():
    import gc

    case = ref_case()
    gen2_before = gc.get_stats()[2]["collections"]
    res = run(case, BATCH, t_end_override=0.1)
    gen2_after = gc.get_stats()[2]["collections"]
    # the run disables gc; no full collections may happen inside
    assert gen2_after - gen2_before <= 1
    # recorder buffer identity: preallocated once
    n = int(np.floor(0.1 / 52e-6 + 1e-9))
    assert res.recorder.buf.shape == (14, n + 1)
