"""Fixed-step trapezoidal nodal solver.

Every branch is compiled into one or two *ports*: a port contributes a
conductance g between its end nodes and a current-offset slot s such that
the port current (from -> to) is

    i = g * (v_from - v_to) + s

Lumped storage elements carry their trapezoidal history in s; ideal
sources behind a resistance contribute s = -g * e(t); each travelling-wave
line end is its own port against ground with s driven by the delayed
far-end quantities. The nodal system G v = rhs is dense and refactorized
only when a switch changes state.

The step path is fully vectorized over ports and writes into buffers
allocated at build time, so steady-state stepping allocates nothing of
consequence and runs in a few microseconds for relay-test-sized circuits.

Companion conductances: R -> 1/R, L -> dt/2L, C -> 2C/dt, series RL ->
dt/(2L + R dt), line end -> 1/(zc + r_total/4).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

if os.environ.get("EMTBENCH_NO_NUMBA"):
    _step_kernel = None
else:
    try:
        from ._kernels import step_kernel as _step_kernel
    except ImportError:  # pragma: no cover - numba genuinely absent
        _step_kernel = None

from .circuit import (
    SWITCH_BREAKER,
    AcVoltageSource,
    BergeronLine,
    Branch,
    Capacitor,
    Circuit,
    Inductor,
    NotASwitch,
    Resistor,
    SeriesRL,
    Switch,
    UnknownBranch,
)

R_CLOSED = 1e-3          # closed-switch resistance [ohm]
G_INIT_SHORT = 1e6       # capacitor conductance for the t=0 snapshot [S]
RESIDUAL_RTOL = 1e-9     # per-step factor-solve residual bound
ZERO_CURRENT_ATOL = 1e-9 # |i| below this counts as a current zero [A]


class SolverError(Exception):
    pass


class SingularSystem(SolverError):
    """The nodal matrix cannot be factorized (or refined) at this topology."""


@dataclass
class SwitchAck:
    branch_id: int
    action: str          # "opened" | "closed" | "armed" | "noop"
    topology_epoch: int


@dataclass
class SimState:
    """Mutable per-run state; hand off between contexts only between steps.

    v includes a ground slot: v[0] == 0.0 always, v[1:] are the solved
    node voltages. branch_i holds one current per branch (for sources the
    current delivered into from_node; for lines the from-end current).
    """

    t: float
    step_index: int
    v: np.ndarray
    branch_i: np.ndarray
    s: np.ndarray               # per-port current offsets
    port_i: np.ndarray          # per-port currents (from -> to)
    line_buf: np.ndarray        # (n_lines, buf_len, 4): vk, vm, ik, im
    armed: dict[int, float] = field(default_factory=dict)  # port -> last i
    pending_open: list[int] = field(default_factory=list)  # ports to drop


class ConductanceSystem:
    """Compiled circuit: port arrays, nodal matrix and its factors."""

    def __init__(self, circuit: Circuit, dt: float):
        if not dt > 0.0:
            raise SolverError(f"dt={dt:g} must be > 0")
        circuit.validate(dt)
        self.circuit = circuit
        self.dt = dt
        self.n = circuit.node_count
        self.topology_epoch = 0
        self.refactor_count = 0
        self.last_residual_rel = 0.0
        self.kernel = _step_kernel
        self._compile()
        self._rebuild()

    # -- compilation -----------------------------------------------------

    def _compile(self) -> None:
        ckt, dt = self.circuit, self.dt
        # Port group order: static | reactive | source | line-k | line-m.
        static, reactive, source, lines = [], [], [], []
        for j, b in enumerate(ckt.branches):
            if isinstance(b, Resistor):
                static.append((j, b.from_node, b.to_node, 1.0 / b.r, None))
            elif isinstance(b, Switch):
                g = 1.0 / R_CLOSED if b.closed0 else 0.0
                static.append((j, b.from_node, b.to_node, g, b))
            elif isinstance(b, Inductor):
                g = dt / (2.0 * b.l)
                reactive.append((j, b.from_node, b.to_node, g, 1.0, g))
            elif isinstance(b, Capacitor):
                g = 2.0 * b.c / dt
                reactive.append((j, b.from_node, b.to_node, g, -1.0, -g))
            elif isinstance(b, SeriesRL):
                a = b.r * dt / (2.0 * b.l)
                g = dt / (2.0 * b.l + b.r * dt)
                reactive.append(
                    (j, b.from_node, b.to_node, g, (1.0 - a) / (1.0 + a), g)
                )
            elif isinstance(b, AcVoltageSource):
                source.append((j, b.from_node, b.to_node, b))
            elif isinstance(b, BergeronLine):
                lines.append((j, b))

        pf, pt, g0 = [], [], []
        self.switch_port: dict[int, int] = {}   # branch id -> port
        self.switch_branch: dict[int, int] = {} # port -> branch id
        self._switch_closed: dict[int, bool] = {}
        primary_port = [0] * len(ckt.branches)
        primary_sign = [1.0] * len(ckt.branches)

        for j, fn, tn, g, b in static:
            primary_port[j] = len(pf)
            if b is not None:
                self.switch_port[j] = len(pf)
                self.switch_branch[len(pf)] = j
                self._switch_closed[len(pf)] = b.closed0
            pf.append(fn); pt.append(tn); g0.append(g)

        self.react_lo = len(pf)
        c1, c2 = [], []
        for j, fn, tn, g, a1, a2 in reactive:
            primary_port[j] = len(pf)
            pf.append(fn); pt.append(tn); g0.append(g)
            c1.append(a1); c2.append(a2)
        self.react_hi = len(pf)

        self.src_lo = len(pf)
        src_w, src_ph, src_coef = [], [], []
        for j, fn, tn, b in source:
            primary_port[j] = len(pf)
            primary_sign[j] = -1.0  # report current delivered into from_node
            pf.append(fn); pt.append(tn); g0.append(1.0 / b.source_r)
            src_w.append(2.0 * math.pi * b.freq)
            src_ph.append(b.phase)
            src_coef.append(b.peak / b.source_r)
        self.src_hi = len(pf)

        self.lk_lo = len(pf)
        zs, hs, delays, knodes, mnodes = [], [], [], [], []
        for j, b in lines:
            primary_port[j] = len(pf)
            z = b.zc + b.r_total / 4.0
            zs.append(z)
            hs.append((b.zc - b.r_total / 4.0) / z)
            delays.append(b.tau / dt)
            knodes.append(b.from_node); mnodes.append(b.to_node)
            pf.append(b.from_node); pt.append(0); g0.append(1.0 / z)
        self.lk_hi = self.lm_lo = len(pf)
        for idx, (j, b) in enumerate(lines):
            pf.append(b.to_node); pt.append(0); g0.append(1.0 / zs[idx])
        self.lm_hi = len(pf)
        self.line_branch = [j for j, _ in lines]

        self.n_ports = len(pf)
        self.pfrom = np.asarray(pf, dtype=np.intp)
        self.pto = np.asarray(pt, dtype=np.intp)
        self.g = np.asarray(g0, dtype=np.float64)
        self.react_c1 = np.asarray(c1, dtype=np.float64)
        self.react_c2 = np.asarray(c2, dtype=np.float64)
        self.src_w = np.asarray(src_w, dtype=np.float64)
        self.src_ph = np.asarray(src_ph, dtype=np.float64)
        self.src_coef = np.asarray(src_coef, dtype=np.float64)
        self.primary_port = np.asarray(primary_port, dtype=np.intp)
        self.primary_sign = np.asarray(primary_sign, dtype=np.float64)

        # Line delay machinery: per line the delayed sample is a linear
        # blend of the entries floor(d) and ceil(d) steps back.
        self.n_lines = len(lines)
        d = np.asarray(delays, dtype=np.float64)
        self.line_z = np.asarray(zs, dtype=np.float64)
        self.line_h = np.asarray(hs, dtype=np.float64)
        self.line_lo = np.ceil(d).astype(np.intp)    # older sample offset
        self.line_hi = np.floor(d).astype(np.intp)   # newer sample offset
        self.line_wa = d - np.floor(d)               # weight of older sample
        self.line_wb = 1.0 - self.line_wa
        self.line_ca = 0.5 * (1.0 + np.asarray(hs))
        self.line_cb = 0.5 * (1.0 - np.asarray(hs))
        self.line_knode = np.asarray(knodes, dtype=np.intp)
        self.line_mnode = np.asarray(mnodes, dtype=np.intp)
        self.buf_len = int(self.line_lo.max()) + 2 if lines else 1
        self.line_row0 = (
            np.arange(self.n_lines, dtype=np.intp) * self.buf_len
        )

        # Incidence (ports x nodes, ground column dropped) and its
        # negated transpose: rhs = inj @ s.
        inc = np.zeros((self.n_ports, self.n), dtype=np.float64)
        for p in range(self.n_ports):
            if self.pfrom[p] > 0:
                inc[p, self.pfrom[p] - 1] = 1.0
            if self.pto[p] > 0:
                inc[p, self.pto[p] - 1] = -1.0
        self._inc = inc
        self._inj = -inc.T.copy()

        # Step-path scratch (never reallocated).
        self._scratch = np.zeros((4, self.n))
        self._rhs = self._scratch[0]
        self._vsol = self._scratch[1]
        self._resid = self._scratch[2]
        self._delta = self._scratch[3]

        # Packed argument blocks keep the compiled-kernel call cheap.
        self._hdr = np.array([
            self.src_lo, self.src_hi, self.react_lo, self.react_hi,
            self.n_lines, self.buf_len, self.lk_lo, self.lm_lo,
        ], dtype=np.int64)
        self._src_f = np.vstack([self.src_w, self.src_ph, self.src_coef]) \
            if self.src_hi > self.src_lo else np.zeros((3, 0))
        self._react_f = np.vstack([self.react_c1, self.react_c2]) \
            if self.react_hi > self.react_lo else np.zeros((2, 0))
        self._line_f = np.vstack([
            self.line_z, self.line_h, self.line_ca, self.line_cb,
            self.line_wa, self.line_wb,
        ]) if self.n_lines else np.zeros((6, 0))
        self._line_i = np.vstack([
            self.line_lo, self.line_hi, self.line_knode, self.line_mnode,
        ]).astype(np.int64) if self.n_lines else np.zeros((4, 0),
                                                          dtype=np.int64)
        self._vb = np.zeros(self.n_ports)
        self._vf = np.zeros(self.n_ports)
        self._vt = np.zeros(self.n_ports)
        self._srcbuf = np.zeros(self.src_hi - self.src_lo)
        nl = self.n_lines
        self._rows = np.zeros(nl, dtype=np.intp)
        self._dl_a = np.zeros((nl, 4))
        self._dl_b = np.zeros((nl, 4))
        self._dl = np.zeros((nl, 4))
        self._lk = np.zeros(nl)
        self._lm = np.zeros(nl)
        self._ltmp = np.zeros(nl)
        self._ltmp2 = np.zeros(nl)
        self._rows2 = np.zeros(nl, dtype=np.intp)
        self._rtmp = np.zeros(self.react_hi - self.react_lo)
        self._bi = np.zeros(len(ckt.branches))

    # -- factorization ---------------------------------------------------

    def _rebuild(self) -> None:
        G = self._inc.T @ (self.g[:, None] * self._inc)
        try:
            chol = np.linalg.cholesky(G)
            Ginv = np.linalg.inv(G)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(
                f"nodal matrix singular at epoch {self.topology_epoch} "
                f"({self.n} nodes): {exc}"
            ) from exc
        self.G = G
        self.chol = chol
        self.Ginv = Ginv
        self.refactor_count += 1

    def _set_switch(self, port: int, closed: bool) -> None:
        self.g[port] = 1.0 / R_CLOSED if closed else 0.0
        self._switch_closed[port] = closed
        self.topology_epoch += 1
        self._rebuild()

    def switch_closed(self, branch_id: int) -> bool:
        return self._switch_closed[self._switch_port_for(branch_id)]

    def _switch_port_for(self, branch_id: int) -> int:
        if not 0 <= branch_id < len(self.circuit.branches):
            raise UnknownBranch(f"branch id {branch_id} out of range")
        if branch_id not in self.switch_port:
            raise NotASwitch(f"branch {branch_id} is not a switch")
        return self.switch_port[branch_id]


def build(circuit: Circuit, dt: float) -> ConductanceSystem:
    """Assemble and factorize the nodal system for step size dt."""
    return ConductanceSystem(circuit, dt)


def initialize(system: ConductanceSystem) -> SimState:
    """Solve the t=0 snapshot and seed histories.

    At the application instant inductors carry no current and capacitor
    voltages hold at zero, so the snapshot uses open inductor ports and
    near-short capacitor ports; the resulting branch voltages/currents
    seed the trapezoidal histories for the first real step.
    """
    sys_ = system
    g_init = sys_.g.copy()
    ckt = sys_.circuit
    for j, b in enumerate(ckt.branches):
        p = sys_.primary_port[j]
        if isinstance(b, (Inductor, SeriesRL)):
            g_init[p] = 0.0
        elif isinstance(b, Capacitor):
            g_init[p] = G_INIT_SHORT
    s = np.zeros(sys_.n_ports)
    if sys_.src_hi > sys_.src_lo:
        e_ang = sys_.src_ph.copy()
        s[sys_.src_lo:sys_.src_hi] = -sys_.src_coef * np.cos(e_ang)
    G0 = sys_._inc.T @ (g_init[:, None] * sys_._inc)
    # Nodes isolated once inductors are opened get a vanishing shunt so the
    # snapshot stays solvable (their voltage reads 0).
    dz = np.diag_indices_from(G0)
    G0[dz] += np.where(G0[dz] == 0.0, 1e-9, 0.0)
    rhs = sys_._inj @ s
    try:
        v1 = np.linalg.solve(G0, rhs)
    except np.linalg.LinAlgError:
        G0[dz] += 1e-9
        v1 = np.linalg.solve(G0, rhs)
    v1 += np.linalg.solve(G0, rhs - G0 @ v1)

    v = np.zeros(sys_.n + 1)
    v[1:] = v1
    vb = v[sys_.pfrom] - v[sys_.pto]
    port_i = g_init * vb + s

    # Seed reactive histories and line buffers from the snapshot.
    lo, hi = sys_.react_lo, sys_.react_hi
    s[lo:hi] = sys_.react_c1 * port_i[lo:hi] + sys_.react_c2 * vb[lo:hi]
    line_buf = np.zeros((sys_.n_lines, sys_.buf_len, 4))
    if sys_.n_lines:
        line_buf[:, 0, 0] = v[sys_.line_knode]
        line_buf[:, 0, 1] = v[sys_.line_mnode]
        line_buf[:, 0, 2] = port_i[sys_.lk_lo:sys_.lk_hi]
        line_buf[:, 0, 3] = port_i[sys_.lm_lo:sys_.lm_hi]

    branch_i = port_i[sys_.primary_port] * sys_.primary_sign
    return SimState(
        t=0.0,
        step_index=0,
        v=v,
        branch_i=branch_i,
        s=s,
        port_i=port_i,
        line_buf=line_buf,
    )


def pre_step(system: ConductanceSystem, state: SimState) -> int:
    """Apply pending breaker opens; returns the step index about to be
    computed."""
    if state.pending_open:
        for p in state.pending_open:
            system._set_switch(p, False)
            state.armed.pop(p, None)
        state.pending_open.clear()
    return state.step_index + 1


def post_step(system: ConductanceSystem, state: SimState, k: int) -> None:
    """Zero-crossing checks and clock bookkeeping after the solve."""
    if state.armed:
        i = state.port_i
        for p, iprev in list(state.armed.items()):
            inow = float(i[p])
            if (
                abs(inow) <= ZERO_CURRENT_ATOL
                or (iprev < 0.0 < inow)
                or (inow < 0.0 < iprev)
            ):
                state.pending_open.append(p)
            else:
                state.armed[p] = inow
    state.t = k * system.dt
    state.step_index = k


def step(system: ConductanceSystem, state: SimState) -> SimState:
    """Advance one step; mutates and returns state. Bit-deterministic."""
    sys_ = system
    k = pre_step(sys_, state)
    t = k * sys_.dt

    if sys_.kernel is not None:
        rrel = sys_.kernel(
            k, sys_.dt, RESIDUAL_RTOL, sys_._hdr,
            sys_.g, state.s, sys_.pfrom, sys_.pto,
            sys_._src_f, sys_._react_f, sys_._line_f, sys_._line_i,
            state.line_buf,
            sys_.G, sys_.Ginv,
            state.v, state.port_i, state.branch_i,
            sys_.primary_port, sys_.primary_sign,
            sys_._scratch,
        )
        if rrel < 0.0:
            raise SingularSystem(
                f"step {k}: residual exceeds {RESIDUAL_RTOL:g} (relative) "
                "after refinement"
            )
        sys_.last_residual_rel = rrel
    else:
        _step_numpy(sys_, state, k, t)

    # Zero-crossing breaker poles: open at the next boundary after the
    # current changes sign (or sits at zero).
    if state.armed:
        i = state.port_i
        for p, iprev in list(state.armed.items()):
            inow = float(i[p])
            if (
                abs(inow) <= ZERO_CURRENT_ATOL
                or (iprev < 0.0 < inow)
                or (inow < 0.0 < iprev)
            ):
                state.pending_open.append(p)
            else:
                state.armed[p] = inow

    state.t = t
    state.step_index = k
    return state


def _step_numpy(sys_: ConductanceSystem, state: SimState, k: int,
                t: float) -> None:
    """Portable step path; same math as the compiled kernel."""
    s = state.s

    # Source slots: s = -(peak/R) cos(w t + ph).
    if sys_.src_hi > sys_.src_lo:
        sb = sys_._srcbuf
        np.multiply(sys_.src_w, t, out=sb)
        np.add(sb, sys_.src_ph, out=sb)
        np.cos(sb, out=sb)
        np.multiply(sb, sys_.src_coef, out=sb)
        np.negative(sb, out=sb)
        s[sys_.src_lo:sys_.src_hi] = sb

    # Line-end slots from the delay buffers.
    nl = sys_.n_lines
    if nl:
        flat = state.line_buf.reshape(nl * sys_.buf_len, 4)
        rows = sys_._rows
        np.subtract(k, sys_.line_lo, out=rows)
        np.mod(rows, sys_.buf_len, out=rows)
        np.add(rows, sys_.line_row0, out=rows)
        np.take(flat, rows, axis=0, out=sys_._dl_a)
        np.subtract(k, sys_.line_hi, out=rows)
        np.mod(rows, sys_.buf_len, out=rows)
        np.add(rows, sys_.line_row0, out=rows)
        np.take(flat, rows, axis=0, out=sys_._dl_b)
        dl = sys_._dl
        np.multiply(sys_._dl_a, sys_.line_wa[:, None], out=dl)
        dl += sys_._dl_b * sys_.line_wb[:, None]
        vk_d, vm_d, ik_d, im_d = dl[:, 0], dl[:, 1], dl[:, 2], dl[:, 3]
        z, h = sys_.line_z, sys_.line_h
        lk, lm = sys_._lk, sys_._lm
        tmp, tmp2 = sys_._ltmp, sys_._ltmp2
        # I_k = -ca (vm_d/z + h im_d) - cb (vk_d/z + h ik_d), mirrored for
        # I_m, with ca = (1+h)/2 and cb = (1-h)/2.
        np.multiply(h, im_d, out=tmp)
        np.divide(vm_d, z, out=lk); lk += tmp; lk *= sys_.line_ca
        np.multiply(h, ik_d, out=tmp2)
        np.divide(vk_d, z, out=tmp); tmp += tmp2; tmp *= sys_.line_cb
        lk += tmp; np.negative(lk, out=lk)
        np.multiply(h, ik_d, out=tmp)
        np.divide(vk_d, z, out=lm); lm += tmp; lm *= sys_.line_ca
        np.multiply(h, im_d, out=tmp2)
        np.divide(vm_d, z, out=tmp); tmp += tmp2; tmp *= sys_.line_cb
        lm += tmp; np.negative(lm, out=lm)
        s[sys_.lk_lo:sys_.lk_hi] = lk
        s[sys_.lm_lo:sys_.lm_hi] = lm

    # Solve G v = rhs with the cached factors; refine if the residual
    # exceeds the contract bound.
    rhs, vsol, resid = sys_._rhs, sys_._vsol, sys_._resid
    np.matmul(sys_._inj, s, out=rhs)
    np.matmul(sys_.Ginv, rhs, out=vsol)
    np.matmul(sys_.G, vsol, out=resid)
    resid -= rhs
    scale = max(float(np.max(np.abs(rhs))), 1e-30)
    rmax = float(np.max(np.abs(resid)))
    if rmax > RESIDUAL_RTOL * scale:
        for _ in range(3):
            vsol -= sys_.Ginv @ resid
            np.matmul(sys_.G, vsol, out=resid)
            resid -= rhs
            rmax = float(np.max(np.abs(resid)))
            if rmax <= RESIDUAL_RTOL * scale:
                break
        else:
            raise SingularSystem(
                f"step {k}: residual {rmax:.3e} exceeds "
                f"{RESIDUAL_RTOL:g} * {scale:.3e} after refinement"
            )
    sys_.last_residual_rel = rmax / scale
    state.v[1:] = vsol

    # Port voltages and currents.
    v, vb = state.v, sys_._vb
    np.take(v, sys_.pfrom, out=sys_._vf)
    np.take(v, sys_.pto, out=sys_._vt)
    np.subtract(sys_._vf, sys_._vt, out=vb)
    i = state.port_i
    np.multiply(sys_.g, vb, out=i)
    i += s

    # Trapezoidal histories for the next step.
    lo, hi = sys_.react_lo, sys_.react_hi
    if hi > lo:
        sh = s[lo:hi]
        rtmp = sys_._rtmp
        np.multiply(sys_.react_c1, i[lo:hi], out=rtmp)
        np.multiply(sys_.react_c2, vb[lo:hi], out=sh)
        sh += rtmp

    # Push line terminal samples into the ring buffers.
    if nl:
        r = sys_._rows2
        np.add(k % sys_.buf_len, sys_.line_row0, out=r)
        flat[r, 0] = v[sys_.line_knode]
        flat[r, 1] = v[sys_.line_mnode]
        flat[r, 2] = i[sys_.lk_lo:sys_.lk_hi]
        flat[r, 3] = i[sys_.lm_lo:sys_.lm_hi]

    np.take(i, sys_.primary_port, out=sys_._bi)
    np.multiply(sys_._bi, sys_.primary_sign, out=state.branch_i)


def command_switch(
    system: ConductanceSystem,
    state: SimState,
    branch_id: int,
    target: str,
) -> SwitchAck:
    """Request a switch state; target is "open" or "closed".

    Plain switches change at the next step boundary. A
    zero-crossing breaker pole commanded open keeps conducting until its
    current next crosses zero, then opens at that step boundary.
    """
    if target not in ("open", "closed"):
        raise ValueError(f"target must be 'open' or 'closed', got {target!r}")
    sys_ = system
    port = sys_._switch_port_for(branch_id)
    closed = sys_._switch_closed[port]
    branch = sys_.circuit.branches[branch_id]

    if target == "closed":
        state.armed.pop(port, None)
        if port in state.pending_open:
            state.pending_open.remove(port)
        if closed:
            return SwitchAck(branch_id, "noop", sys_.topology_epoch)
        sys_._set_switch(port, True)
        return SwitchAck(branch_id, "closed", sys_.topology_epoch)

    if not closed:
        return SwitchAck(branch_id, "noop", sys_.topology_epoch)
    if (
        isinstance(branch, Switch)
        and branch.mode == SWITCH_BREAKER
        and abs(float(state.port_i[port])) > ZERO_CURRENT_ATOL
    ):
        if port not in state.armed:
            state.armed[port] = float(state.port_i[port])
        return SwitchAck(branch_id, "armed", sys_.topology_epoch)
    sys_._set_switch(port, False)
    state.armed.pop(port, None)
    return SwitchAck(branch_id, "opened", sys_.topology_epoch)


def warmup(circuit: Circuit, dt: float, steps: int = 3) -> None:
    """Step a throwaway twin of the circuit to trigger JIT compilation and
    fault in code paths before a paced run starts."""
    sys_ = build(circuit, dt)
    state = initialize(sys_)
    for _ in range(steps):
        step(sys_, state)
