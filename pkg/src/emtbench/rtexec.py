"""Fixed-period executor: drives the solver, exchanges I/O each step,
publishes process-bus frames and accounts for deadline misses.

Per step, in order: (1) latch the freshest digital inputs, (2) apply
scheduled events and input-triggered breaker commands, (3) solve, (4)
write analog codes + digital outputs through the port backend and tick
the publishers, (5) record selected signals. Batch mode runs the same
sequence unpaced; Realtime mode releases step k at t0 + k*dt and never
reschedules after an overrun, so the timeline cannot drift.
"""

from __future__ import annotations

import gc
import json
import os
import shutil
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import solver
from .etherlink import PcapSink
from .goose import GooseConfig, GoosePublisher
from .ioports import DAC_MAX, IoPortSet, LoopbackBackend
from .recorder import ChannelInfo, Recorder

if os.environ.get("EMTBENCH_NO_NUMBA"):
    _kernels = None
else:
    try:
        from . import _kernels
    except ImportError:  # pragma: no cover - numba genuinely absent
        _kernels = None
from .relay import VirtualRelay
from .scenario import RunSetup, TestCase, prepare_run, selector_units
from .sv import SVPublisher, scale_channel

BATCH = "batch"
REALTIME = "realtime"

REALTIME_MIN_DT = 10e-6
DEFAULT_GUARD_BAND = 20e-6
N_CODES = 6
# work-duration histogram bucket edges [us]
HIST_EDGES_US = (5, 10, 20, 30, 40, 52, 75, 100, 200, 500, 1000)


@dataclass
class TimingReport:
    mode: str
    dt: float
    steps: int
    mean_step_work: float
    max_step_work: float
    p99_step_work: float
    overruns: int
    max_lateness: float
    jitter_histogram: dict[str, int]
    refactorizations: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "dt": self.dt,
            "steps": self.steps,
            "mean_step_work": self.mean_step_work,
            "max_step_work": self.max_step_work,
            "p99_step_work": self.p99_step_work,
            "overruns": self.overruns,
            "max_lateness": self.max_lateness,
            "jitter_histogram": self.jitter_histogram,
            "refactorizations": self.refactorizations,
            "warnings": self.warnings,
        }


class RunHooks:
    """Test instrumentation: on_phase(name, step_index) fires at each
    pipeline phase (inputs, events, solve, outputs, record)."""

    def __init__(self, on_phase=None):
        self.on_phase = on_phase


@dataclass
class RunResult:
    out_dir: Path | None
    recorder: Recorder
    timing: TimingReport
    relay: VirtualRelay | None
    state: "solver.SimState"
    system: "solver.ConductanceSystem"
    setup: RunSetup
    sv_frames: int
    goose_frames: int
    counters: dict

    def channel(self, selector: str) -> np.ndarray:
        for row, (sel, _res) in enumerate(self._selmap):
            if sel == selector:
                return self.recorder.buf[row]
        raise KeyError(selector)


class _FrameWriter:
    """Hands frames from the step path to sinks without blocking it.

    The queue drains in bursts (high watermark or idle timeout) so the
    writer barely contends for the interpreter while a paced loop runs;
    everything left over drains at close.
    """

    CAPACITY = 1 << 16
    HIGH_WATER = 1 << 15

    def __init__(self, avoid_cpu: int | None = None):
        self._queue: deque = deque()
        self._wake = threading.Event()
        self._stop = False
        self.dropped = 0
        self._avoid_cpu = avoid_cpu
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="frame-writer")
        self._thread.start()

    def send(self, sink, frame: bytes, t: float) -> None:
        if len(self._queue) >= self.CAPACITY:
            self.dropped += 1
            return
        self._queue.append((sink, frame, t))
        if len(self._queue) >= self.HIGH_WATER:
            self._wake.set()

    def _loop(self) -> None:
        _keep_off_cpu(self._avoid_cpu)
        while True:
            signalled = self._wake.wait(timeout=5.0)
            self._wake.clear()
            # drain only on high water or shutdown; an idle timeout must
            # not start a long burst next to a paced loop
            if not signalled and not self._stop:
                continue
            while self._queue:
                sink, frame, t = self._queue.popleft()
                sink.send(frame, t)
            if self._stop and not self._queue:
                return

    def close(self) -> None:
        self._stop = True
        self._wake.set()
        self._thread.join(timeout=10)


def _keep_off_cpu(cpu: int | None) -> None:
    """Steer a helper thread away from the paced CPU when possible."""
    if cpu is None:
        return
    try:
        cpus = os.sched_getaffinity(0) - {cpu}
        if cpus:
            os.sched_setaffinity(0, cpus)
    except (AttributeError, OSError):
        pass


def run(case: TestCase, mode: str = BATCH,
        out_dir: Path | str | None = None, *,
        ports: IoPortSet | None = None,
        hooks: RunHooks | None = None,
        guard_band: float = DEFAULT_GUARD_BAND,
        rt_priority: bool = True,
        pin_cpu: bool = True,
        abort_event: threading.Event | None = None,
        progress=None,
        sv_sink=None,
        goose_sink=None,
        t_end_override: float | None = None) -> RunResult:
    """Execute a validated case; returns artifacts and the timing report.

    out_dir, when given, receives store/, timing.json, relay record and
    pcap files; everything is also available in memory on the result.
    """
    if mode not in (BATCH, REALTIME):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == REALTIME and case.dt < REALTIME_MIN_DT:
        raise ValueError(
            f"realtime requires dt >= {REALTIME_MIN_DT:g}s, got {case.dt:g}")

    setup = prepare_run(case)
    dt = case.dt
    t_end = t_end_override if t_end_override is not None else case.t_end
    n_steps = int(np.floor(t_end / dt + 1e-9))
    warnings = list(setup.warnings)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    # Paced runs record into RAM-backed staging and persist afterwards:
    # network/journalled filesystems on the write path would perturb the
    # step schedule. A symlink keeps the store live-readable meanwhile.
    staging = None
    store_dir = out_path / "store" if out_path is not None else None
    if mode == REALTIME and out_path is not None:
        shm = Path("/dev/shm")
        if shm.is_dir() and os.access(shm, os.W_OK):
            staging = Path(tempfile.mkdtemp(prefix="emtbench-rt-", dir=shm))
            store_dir = staging / "store"
            link = out_path / "store"
            if link.is_symlink() or link.exists():
                if link.is_symlink():
                    link.unlink()
                else:
                    shutil.rmtree(link)
            link.symlink_to(store_dir)

    rt_cpu = None
    if mode == REALTIME and pin_cpu:
        rt_cpu = _pick_rt_cpu()

    sys_ = solver.build(setup.circuit, dt)
    state = solver.initialize(sys_)

    # Step-0 events apply before the initial sample.
    for cmd in setup.switch_commands.get(0, []):
        for bid in cmd.branch_ids:
            solver.command_switch(sys_, state, bid, cmd.target)
    setout_bits = 0
    for cmd in setup.out_bit_commands.get(0, []):
        if cmd.level:
            setout_bits |= 1 << cmd.bit
        else:
            setout_bits &= ~(1 << cmd.bit)

    # -- recorder ---------------------------------------------------------
    channels = [ChannelInfo(sel, sel, selector_units(sel))
                for sel, _res in setup.outputs]
    recorder = Recorder(channels, n_steps + 1, dt, out_dir=store_dir,
                        avoid_cpu=rt_cpu)
    line_pos = {bid: pos for pos, bid in enumerate(sys_.line_branch)}

    # -- io ports / relay ---------------------------------------------------
    relay = None
    if ports is None:
        if case.relay is not None:
            relay = VirtualRelay(
                case.relay, sim_dt=dt, analog_maps=case.analog_map,
                voltage_scale=(case.sv_publish.voltage_scale
                               if case.sv_publish else 1e-2),
                current_scale=(case.sv_publish.current_scale
                               if case.sv_publish else 1e-3),
                max_samples=int(t_end * case.relay.f_nominal
                                * case.relay.samples_per_cycle) + 4)
            ports = IoPortSet(LoopbackBackend(relay))
        else:
            ports = IoPortSet(LoopbackBackend(None))
    ports.open()

    writer = _FrameWriter(avoid_cpu=rt_cpu)
    sv_pub = None
    own_sv_sink = False
    sv_count = 0
    pcap_base = staging if staging is not None else out_path
    if case.sv_publish is not None:
        sv_pub = SVPublisher(case.sv_publish)
        if sv_sink is None and out_path is not None:
            sv_sink = PcapSink(pcap_base / "sv.pcap")
            own_sv_sink = True
        if sv_sink is not None:
            sv_sink.open()
    sv_scales = None
    if sv_pub is not None:
        cfg = case.sv_publish
        sv_scales = [cfg.current_scale] * 4 + [cfg.voltage_scale] * 4

    goose_pub = None
    own_goose_sink = False
    goose_count = 0
    if case.relay is not None:
        goose_pub = GoosePublisher(GooseConfig(), dataset=[False] * 4)
        if goose_sink is None and out_path is not None:
            goose_sink = PcapSink(pcap_base / "goose.pcap")
            own_goose_sink = True
        if goose_sink is not None:
            goose_sink.open()
    trip_bit = case.relay.trip_in_bit if case.relay is not None else 0
    pole_ports = ()
    if setup.input_open_rules:
        pole_ports = tuple(sys_.switch_port[bid]
                           for bid in setup.input_open_rules[0][1])[:3]

    status_rules = [(bit, tuple(sys_.switch_port[bid] for bid in ids))
                    for bit, ids in setup.out_status_rules]

    on_phase = hooks.on_phase if hooks is not None else None

    # Gather tables: (mode, index) with mode 0=v, 1=branch_i, 2=line-to
    # port, 3=constant zero. Indexing numpy scalars straight off the state
    # arrays keeps the per-step Python work flat and call-free.
    def compile_gather(res):
        if res is None:
            return (3, 0)
        kind, idx = res
        if kind == "v":
            return (0, idx)
        if kind == "i":
            return (1, idx)
        return (2, sys_.lm_lo + line_pos[idx])

    analog_tab = [(m.channel, compile_gather(res), 10.0 / m.full_scale)
                  for m, res in zip(sorted(case.analog_map,
                                           key=lambda m: m.channel),
                                    setup.analog_resolved)]
    sv_tab = None
    if sv_pub is not None:
        sv_tab = [(compile_gather(res), sv_scales[ch])
                  for ch, res in enumerate(setup.sv_resolved)]

    def gather_value(mode: int, idx: int) -> float:
        if mode == 0:
            return state.v[idx]
        if mode == 1:
            return state.branch_i[idx]
        if mode == 2:
            return state.port_i[idx]
        return 0.0

    use_kernels = _kernels is not None
    # compiled-kernel argument tables
    a_modes = np.zeros(N_CODES, dtype=np.int64)
    a_idxs = np.zeros(N_CODES, dtype=np.int64)
    a_invfs = np.zeros(N_CODES, dtype=np.float64)
    a_modes[:] = 3
    for ch, (gmode, gidx), inv_fs in analog_tab:
        a_modes[ch] = gmode
        a_idxs[ch] = gidx
        a_invfs[ch] = inv_fs
    codes = np.full(N_CODES, 2048, dtype=np.int64)
    sat = np.zeros(N_CODES, dtype=np.int64)

    r_modes = np.zeros(len(setup.outputs), dtype=np.int64)
    r_idxs = np.zeros(len(setup.outputs), dtype=np.int64)
    d_aux_rules = []   # (aux_slot, "din"|"dout", bit)
    for row, (sel, res) in enumerate(setup.outputs):
        kind, idx = res
        if kind == "v":
            r_modes[row], r_idxs[row] = 0, idx
        elif kind == "i":
            r_modes[row], r_idxs[row] = 1, idx
        elif kind == "ito":
            r_modes[row], r_idxs[row] = 2, sys_.lm_lo + line_pos[idx]
        else:
            slot = len(d_aux_rules)
            r_modes[row], r_idxs[row] = 3, slot
            d_aux_rules.append((slot, kind, idx))
    aux = np.zeros(max(1, len(d_aux_rules)), dtype=np.float64)

    if sv_tab is not None:
        s_modes = np.array([g[0][0] for g in sv_tab], dtype=np.int64)
        s_idxs = np.array([g[0][1] for g in sv_tab], dtype=np.int64)
        s_scales = np.array([g[1] for g in sv_tab], dtype=np.float64)
        # write straight into the publisher's patch buffers when it has
        # them, avoiding a per-emission copy
        sv_vals = getattr(sv_pub, "_vals_i8", None)
        if sv_vals is None:
            sv_vals = np.zeros(8, dtype=np.int64)
            sv_quals = np.zeros(8, dtype=np.int64)
        else:
            sv_quals = sv_pub._quals_i8

    def fill_codes() -> None:
        if use_kernels:
            _kernels.analog_codes(state.v, state.branch_i, state.port_i,
                                  a_modes, a_idxs, a_invfs, codes, sat)
            return
        for ch, (gmode, gidx), inv_fs in analog_tab:
            volts = gather_value(gmode, gidx) * inv_fs
            if volts > 10.0:
                volts = 10.0
                sat[ch] += 1
            elif volts < -10.0:
                volts = -10.0
                sat[ch] += 1
            codes[ch] = int(204.75 * (volts + 10.0) + 0.5)

    def sv_values():
        if use_kernels:
            _kernels.sv_counts(state.v, state.branch_i, state.port_i,
                               s_modes, s_idxs, s_scales, sv_vals, sv_quals)
            return sv_vals, sv_quals
        for ch in range(8):
            (gmode, gidx), scale = sv_tab[ch]
            if gmode == 3:
                sv_vals[ch] = 0
                sv_quals[ch] = 1  # unbound channel: flagged not-good
                continue
            counts = gather_value(gmode, gidx) / scale
            if counts >= 2147483647.0:
                sv_vals[ch] = 2147483647
                sv_quals[ch] = 1
            elif counts <= -2147483648.0:
                sv_vals[ch] = -2147483648
                sv_quals[ch] = 1
            else:
                sv_vals[ch] = int(round(counts))
                sv_quals[ch] = 0
        return sv_vals, sv_quals

    # Loopback ports collapse to direct consumer calls on the step path;
    # non-sample steps skip the relay entirely. Other backends go through
    # the generic exchange.
    backend = ports.backend
    if isinstance(backend, LoopbackBackend) and relay is not None:
        relay_state = {"bits": 0, "due": relay.next_due()}

        def exchange(k: int, codes_, out_bits_: int) -> int:
            prior = relay_state["bits"]
            if k * dt + 1e-12 >= relay_state["due"]:
                relay.sample(k, codes_, out_bits_)
                relay_state["bits"] = relay.current_in_bits()
                relay_state["due"] = relay.next_due()
            return prior
    else:
        exchange = ports.exchange

    rec_buf = recorder.buf
    aux_key = -1

    def record(k: int, in_bits: int, out_bits: int) -> None:
        nonlocal aux_key
        key = (in_bits << 8) | out_bits
        if key != aux_key:
            aux_key = key
            for slot, kind, bit in d_aux_rules:
                bits = in_bits if kind == "din" else out_bits
                aux[slot] = (bits >> bit) & 1
        if use_kernels:
            _kernels.record_column(rec_buf, k, state.v, state.branch_i,
                                   state.port_i, r_modes, r_idxs, aux)
        else:
            for row in range(len(r_modes)):
                m = r_modes[row]
                idx = r_idxs[row]
                if m == 0:
                    rec_buf[row, k] = state.v[idx]
                elif m == 1:
                    rec_buf[row, k] = state.branch_i[idx]
                elif m == 2:
                    rec_buf[row, k] = state.port_i[idx]
                else:
                    rec_buf[row, k] = aux[idx]
        recorder.mark(k)

    def out_bits_now() -> int:
        bits = setout_bits
        for bit, sw_ports in status_rules:
            closed = all(sys_.g[p] > 0.0 for p in sw_ports)
            if closed:
                bits |= 1 << bit
            else:
                bits &= ~(1 << bit)
        return bits

    # SV frames land in a preallocated ring on the step path; the pcap
    # materializes from it after the loop.
    sv_ring = sv_stamps = None
    if sv_pub is not None:
        capacity = int(t_end * sv_pub.smp_rate) + 8
        sv_ring = bytearray(capacity * sv_pub.frame_size)
        sv_stamps = np.zeros(capacity)

    # Initial sample: state at t=0 plus the t=0 publisher emissions.
    in_bits = 0
    prev_in = 0
    out_bits = out_bits_now()
    record(0, 0, out_bits)
    if sv_pub is not None:
        vals, quals = sv_values()
        sv_count = sv_pub.tick_into(0.0, vals, quals, sv_ring, sv_stamps,
                                    sv_count)
    if goose_pub is not None:
        frame = goose_pub.publish_initial(0.0)
        goose_count += 1
        if goose_sink is not None:
            writer.send(goose_sink, frame, 0.0)

    # Fault in every compiled path before the clock starts.
    fill_codes()
    if sv_pub is not None:
        sv_values()
    if relay is not None:
        twin = VirtualRelay(case.relay, sim_dt=dt,
                            analog_maps=case.analog_map, max_samples=64)
        for j in range(1, 40):
            twin.sample(j * int(1 + twin.period / dt), codes, 0)
        del twin
    old_switch_interval = None
    if mode == REALTIME:
        # pin first, then fault caches/JIT in on the pinned cpu
        warnings.extend(_request_rt_scheduling(rt_priority, pin_cpu, rt_cpu))
        _trim_heap()
        solver.warmup(setup.circuit, dt, steps=64)
        import sys as _sys
        old_switch_interval = _sys.getswitchinterval()
        _sys.setswitchinterval(1e-4)  # bound helper-thread interpreter holds

    work_ns = np.empty(n_steps + 1, dtype=np.int64)
    work_ns.fill(0)
    overruns = 0
    max_late = 0
    dt_ns = int(round(dt * 1e9))
    budget_ns = dt_ns
    progress_every = max(1, int(0.25 / dt))
    aborted = False
    prev_in_latch = 0
    k = 0
    out_epoch = sys_.topology_epoch
    sv_next = sv_pub.emitted * sv_pub.period if sv_pub is not None else 0.0
    goose_in = 0
    goose_epoch = sys_.topology_epoch
    goose_next = goose_pub._next_tx if goose_pub is not None else 0.0
    # scalar gate for the (sparse) command table
    cmd_steps = sorted(set(setup.switch_commands) |
                       set(setup.out_bit_commands))
    cmd_steps = [s for s in cmd_steps if s >= 1]
    next_cmd = cmd_steps[0] if cmd_steps else n_steps + 1
    cmd_pos = 0

    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    perf = time.perf_counter_ns
    try:
        t0 = perf()
        for k in range(1, n_steps + 1):
            if mode == REALTIME:
                release = t0 + (k - 1) * dt_ns
                now = perf()
                wait = release - now
                if wait > 0:
                    _wait_until(release, guard_band, perf)
            start = perf()

            # (1) inputs: freshest bits from the previous exchange
            if on_phase is not None:
                on_phase("inputs", k)
            in_bits = prev_in

            # (2) scheduled events + input-triggered commands
            if on_phase is not None:
                on_phase("events", k)
            if k >= next_cmd:
                cmds = setup.switch_commands.get(k)
                if cmds is not None:
                    for cmd in cmds:
                        for bid in cmd.branch_ids:
                            solver.command_switch(sys_, state, bid,
                                                  cmd.target)
                ocmds = setup.out_bit_commands.get(k)
                if ocmds is not None:
                    for cmd in ocmds:
                        if cmd.level:
                            setout_bits |= 1 << cmd.bit
                        else:
                            setout_bits &= ~(1 << cmd.bit)
                    out_epoch = -1  # force digital output recompute
                cmd_pos += 1
                next_cmd = cmd_steps[cmd_pos] if cmd_pos < len(cmd_steps) \
                    else n_steps + 1
            rising = in_bits & ~prev_in_latch
            if rising:
                for bit, ids in setup.input_open_rules:
                    if (rising >> bit) & 1:
                        for bid in ids:
                            solver.command_switch(sys_, state, bid, "open")
                for bit, ids in setup.input_close_rules:
                    if (rising >> bit) & 1:
                        for bid in ids:
                            solver.command_switch(sys_, state, bid, "closed")
            prev_in_latch = in_bits

            # (3) solve
            if on_phase is not None:
                on_phase("solve", k)
            solver.step(sys_, state)

            # (4) outputs: DAC codes, digital outs, publishers
            if on_phase is not None:
                on_phase("outputs", k)
            fill_codes()
            epoch = sys_.topology_epoch
            if epoch != out_epoch:
                out_epoch = epoch
                out_bits = out_bits_now()
            prev_in = exchange(k, codes, out_bits)
            t_sim = state.t
            if sv_pub is not None and \
                    t_sim + 1e-12 >= sv_next:
                vals, quals = sv_values()
                sv_count = sv_pub.tick_into(t_sim, vals, quals, sv_ring,
                                            sv_stamps, sv_count)
                sv_next = sv_pub.emitted * sv_pub.period
            if goose_pub is not None:
                frame = None
                if prev_in != goose_in or epoch != goose_epoch:
                    goose_in = prev_in
                    goose_epoch = epoch
                    ds = goose_pub.dataset
                    new_ds = [bool((prev_in >> trip_bit) & 1)] + \
                        [bool(sys_.g[p] > 0.0) for p in pole_ports]
                    new_ds += [False] * (4 - len(new_ds))
                    if new_ds != ds:
                        frame = goose_pub.on_data_change(new_ds, t_sim)
                elif t_sim >= goose_next:
                    frame = goose_pub.heartbeat_due(t_sim)
                if frame is not None:
                    goose_next = goose_pub._next_tx
                    goose_count += 1
                    if goose_sink is not None:
                        writer.send(goose_sink, frame, t_sim)

            # (5) record
            if on_phase is not None:
                on_phase("record", k)
            record(k, in_bits, out_bits)

            end = perf()
            work_ns[k] = end - start
            if mode == REALTIME:
                if end - start > budget_ns:
                    overruns += 1
                late = end - (release + dt_ns)
                if late > max_late:
                    max_late = late

            if progress is not None and k % progress_every == 0:
                progress(k, n_steps)
            if abort_event is not None and abort_event.is_set():
                aborted = True
                break
    finally:
        if gc_was_enabled:
            gc.enable()
        if old_switch_interval is not None:
            import sys as _sys
            _sys.setswitchinterval(old_switch_interval)
        ports.close()
        recorder.close()
        writer.close()
        if mode == REALTIME:
            _restore_scheduling()
        if sv_pub is not None and sv_sink is not None and sv_count:
            stride = sv_pub.frame_size
            view = memoryview(sv_ring)
            for c in range(sv_count):
                sv_sink.send(bytes(view[c * stride:(c + 1) * stride]),
                             float(sv_stamps[c]))
        if own_sv_sink:
            sv_sink.close()
        if own_goose_sink:
            goose_sink.close()
        if staging is not None:
            link = out_path / "store"
            if link.is_symlink():
                link.unlink()
            for item in sorted(staging.iterdir()):
                shutil.move(str(item), str(out_path / item.name))
            shutil.rmtree(staging, ignore_errors=True)

    steps_done = k
    w = work_ns[1:steps_done + 1] / 1e9
    hist = {}
    edges = [e * 1e-6 for e in HIST_EDGES_US]
    counts, _ = np.histogram(w, bins=[0.0] + edges + [np.inf])
    labels = [f"<{e}us" for e in HIST_EDGES_US] + \
             [f">={HIST_EDGES_US[-1]}us"]
    for label, count in zip(labels, counts):
        hist[label] = int(count)
    timing = TimingReport(
        mode=mode, dt=dt, steps=int(steps_done),
        mean_step_work=float(w.mean()) if len(w) else 0.0,
        max_step_work=float(w.max()) if len(w) else 0.0,
        p99_step_work=float(np.percentile(w, 99)) if len(w) else 0.0,
        overruns=int(overruns) if mode == REALTIME else 0,
        max_lateness=float(max_late) / 1e9 if mode == REALTIME else 0.0,
        jitter_histogram=hist,
        refactorizations=sys_.refactor_count,
        warnings=warnings,
    )

    counters = {
        "saturation": [int(x) for x in sat],
        "link_down": ports.link_down_count,
        "dropped_blocks": recorder.dropped_blocks,
        "dropped_frames": writer.dropped,
        "aborted": aborted,
    }

    if out_path is not None:
        (out_path / "timing.json").write_text(
            json.dumps(timing.to_dict(), indent=1))
        (out_path / "counters.json").write_text(
            json.dumps(counters, indent=1))
        if relay is not None:
            from .comtrade import write_files
            write_files(relay.build_record(), out_path / "relay")
            relay.write_event_log(out_path / "relay_events.jsonl")

    result = RunResult(
        out_dir=out_path, recorder=recorder, timing=timing, relay=relay,
        state=state, system=sys_, setup=setup, sv_frames=sv_count,
        goose_frames=goose_count, counters=counters)
    result._selmap = setup.outputs
    return result


def _trim_heap() -> None:
    """Return freed arenas to the OS so the paced loop starts from a
    compact heap (best effort)."""
    try:
        import ctypes
        ctypes.CDLL("libc.so.6").malloc_trim(0)
    except Exception:
        pass


def _wait_until(release_ns: int, guard_band: float, perf) -> None:
    """Coarse sleep toward the release, then spin the guard band."""
    guard_ns = int(guard_band * 1e9)
    while True:
        now = perf()
        remaining = release_ns - now
        if remaining <= 0:
            return
        if remaining > guard_ns + 100_000:
            time.sleep((remaining - guard_ns) / 1e9)
        else:
            break
    while perf() < release_ns:
        pass


_saved_affinity = None


def _pick_rt_cpu() -> int | None:
    """Quick per-CPU latency probe; picks the calmest CPU to pin.

    Containers often expose asymmetric vCPUs (SMT siblings, noisy
    neighbours); ~25 ms of paced probing per candidate finds out.
    """
    try:
        cpus = sorted(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        return None
    if len(cpus) < 2:
        return None
    saved = set(cpus)
    perf = time.perf_counter_ns
    scores = {}
    x = np.zeros(16)
    try:
        for cpu in cpus:
            os.sched_setaffinity(0, {cpu})
            worst = np.zeros(500, dtype=np.int64)
            for i in range(500):
                s = perf()
                x += 1.0
                worst[i] = perf() - s
                target = s + 50_000
                while perf() < target:
                    pass
            scores[cpu] = float(np.percentile(worst, 95))
    except OSError:
        return max(cpus)
    finally:
        try:
            os.sched_setaffinity(0, saved)
        except OSError:
            pass
    return min(scores, key=scores.get)


def _request_rt_scheduling(rt_priority: bool, pin_cpu: bool,
                           rt_cpu: int | None) -> list[str]:
    """Best effort: elevated priority and a pinned CPU; warnings, never
    errors, when the host refuses."""
    global _saved_affinity
    warnings = []
    if rt_priority:
        try:
            os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(10))
        except (PermissionError, OSError) as exc:
            warnings.append(f"realtime priority unavailable: {exc}")
    if pin_cpu and rt_cpu is not None:
        try:
            _saved_affinity = set(os.sched_getaffinity(0))
            os.sched_setaffinity(0, {rt_cpu})
        except (AttributeError, OSError) as exc:
            warnings.append(f"cpu pinning unavailable: {exc}")
    elif pin_cpu:
        warnings.append("cpu pinning unavailable: single-cpu host")
    return warnings


def _restore_scheduling() -> None:
    global _saved_affinity
    try:
        os.sched_setscheduler(0, os.SCHED_OTHER, os.sched_param(0))
    except (PermissionError, OSError):
        pass
    if _saved_affinity is not None:
        try:
            os.sched_setaffinity(0, _saved_affinity)
        except OSError:
            pass
        _saved_affinity = None
