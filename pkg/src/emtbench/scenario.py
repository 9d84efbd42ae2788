"""Test-case model: circuit + events + I/O maps + recording selections.

Signal selectors name what gets recorded, externalized and bound to the
process-bus publishers:

    v:<node>        node voltage [V]
    i:<label>       branch current [A] (from-end current for lines)
    i:<label>@to    receiving-end current of a travelling-wave line
    d:in.<bit>      digital input trace (relay -> simulator)
    d:out.<bit>     digital output trace (simulator -> relay)

Fault events expand at run preparation into an Rf branch behind a
zero-crossing switch (closed at `at`, opened at `at+duration`), so the
stored TestCase itself round-trips unchanged through the case format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .circuit import Branch, Circuit, Resistor, Switch, UnknownBranch
from .ioports import AnalogChannelMap
from .relay import RelayConfig
from .sv import SVConfig

GROUND_NAMES = {"0", "gnd", "GND", "ground"}
FAULT_TYPES = ("AG", "BG", "CG", "AB", "BC", "CA", "ABG", "BCG", "CAG", "ABC")
MAX_STEPS = 10**8
MIN_FAULT_R = 1e-6   # bolted faults keep a representable resistance


class ScenarioError(Exception):
    pass


class UnknownBus(ScenarioError):
    pass


class MissingPhaseNode(ScenarioError):
    pass


@dataclass(frozen=True)
class ApplyFault:
    bus: str
    fault_type: str
    rf: float
    duration: float


@dataclass(frozen=True)
class OpenBreaker:
    breaker: str


@dataclass(frozen=True)
class CloseBreaker:
    breaker: str


@dataclass(frozen=True)
class SetDigitalOutput:
    bit: int
    level: int


Action = ApplyFault | OpenBreaker | CloseBreaker | SetDigitalOutput


@dataclass(frozen=True)
class Event:
    at: float
    action: Action


@dataclass(frozen=True)
class DigitalInRule:
    bit: int
    action: str      # "open_breaker" | "close_breaker"
    target: str      # breaker group or switch label


@dataclass(frozen=True)
class DigitalOutRule:
    bit: int
    source: str      # "breaker_closed"
    target: str


@dataclass
class TestCase:
    name: str
    circuit: Circuit
    node_names: dict[str, int]
    t_end: float
    dt: float = 52e-6
    breaker_groups: dict[str, list[str]] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    analog_map: list[AnalogChannelMap] = field(default_factory=list)
    digital_in: list[DigitalInRule] = field(default_factory=list)
    digital_out: list[DigitalOutRule] = field(default_factory=list)
    relay: RelayConfig | None = None
    sv_publish: SVConfig | None = None
    outputs: list[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, TestCase):
            return NotImplemented
        return (
            self.name == other.name
            and self.circuit.node_count == other.circuit.node_count
            and self.circuit.branches == other.circuit.branches
            and self.node_names == other.node_names
            and self.t_end == other.t_end
            and self.dt == other.dt
            and self.breaker_groups == other.breaker_groups
            and self.events == other.events
            and self.analog_map == other.analog_map
            and self.digital_in == other.digital_in
            and self.digital_out == other.digital_out
            and self.relay == other.relay
            and self.sv_publish == other.sv_publish
            and self.outputs == other.outputs
        )

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_end / self.dt + 1e-9))

    def validate(self) -> None:
        if not self.dt > 0:
            raise ScenarioError(f"dt={self.dt:g} must be > 0")
        if not self.t_end > 0:
            raise ScenarioError(f"t_end={self.t_end:g} must be > 0")
        if self.t_end / self.dt > MAX_STEPS:
            raise ScenarioError(
                f"t_end/dt = {self.t_end / self.dt:.3g} exceeds {MAX_STEPS:g}")
        self.circuit.validate(self.dt)
        for ev in self.events:
            if not 0.0 <= ev.at < self.t_end:
                raise ScenarioError(
                    f"event at {ev.at:g}s outside [0, {self.t_end:g})")
            act = ev.action
            if isinstance(act, ApplyFault):
                if act.fault_type not in FAULT_TYPES:
                    raise ScenarioError(
                        f"unknown fault type {act.fault_type!r}")
                if act.rf < 0:
                    raise ScenarioError("fault rf must be >= 0")
                if not act.duration > 0:
                    raise ScenarioError("fault duration must be > 0")
                self._phase_nodes(act.bus, act.fault_type)
            elif isinstance(act, (OpenBreaker, CloseBreaker)):
                self.resolve_breaker(act.breaker)
        seen = set()
        for m in self.analog_map:
            m.validate()
            if m.channel in seen:
                raise ScenarioError(f"analog channel {m.channel} mapped twice")
            seen.add(m.channel)
        for rule in self.digital_in:
            if rule.action not in ("open_breaker", "close_breaker"):
                raise ScenarioError(f"unknown input action {rule.action!r}")
            self.resolve_breaker(rule.target)
        for rule in self.digital_out:
            if rule.source != "breaker_closed":
                raise ScenarioError(f"unknown output source {rule.source!r}")
            self.resolve_breaker(rule.target)
        if self.relay is not None:
            self.relay.validate()
        if self.sv_publish is not None:
            self.sv_publish.validate()
        # Selectors (outputs, analog/SV binds) may reference branches a
        # fault expansion creates, so they resolve in prepare_run against
        # the expanded circuit.

    # -- reference helpers -------------------------------------------------

    def resolve_breaker(self, name: str) -> list[int]:
        """Breaker group or single switch label -> branch ids."""
        if name in self.breaker_groups:
            return [self.circuit.branch_by_label(lbl)
                    for lbl in self.breaker_groups[name]]
        try:
            bid = self.circuit.branch_by_label(name)
        except UnknownBranch:
            raise ScenarioError(
                f"unknown breaker or switch {name!r}") from None
        if not isinstance(self.circuit.branches[bid], Switch):
            raise ScenarioError(f"{name!r} is not a switch")
        return [bid]

    def _phase_nodes(self, bus: str, fault_type: str) -> dict[str, int]:
        if not any(key.startswith(f"{bus}.") for key in self.node_names):
            raise UnknownBus(f"bus {bus!r} has no nodes")
        phases = sorted(set(ch for ch in fault_type if ch in "ABC"))
        nodes = {}
        for ph in phases:
            key = f"{bus}.{ph}"
            if key not in self.node_names:
                raise MissingPhaseNode(f"bus {bus!r} lacks phase node {key}")
            nodes[ph] = self.node_names[key]
        return nodes


def resolve_selector(case: TestCase, selector: str):
    """Parse and resolve a selector; returns (kind, index) with kind in
    v | i | ito | din | dout."""
    kind, _, rest = selector.partition(":")
    if kind == "v":
        if rest not in case.node_names:
            raise ScenarioError(f"selector {selector!r}: unknown node")
        return ("v", case.node_names[rest])
    if kind == "i":
        label, _, suffix = rest.partition("@")
        try:
            bid = case.circuit.branch_by_label(label)
        except UnknownBranch:
            raise ScenarioError(
                f"selector {selector!r}: unknown branch") from None
        if suffix == "to":
            from .circuit import BergeronLine
            if not isinstance(case.circuit.branches[bid], BergeronLine):
                raise ScenarioError(
                    f"selector {selector!r}: @to needs a line branch")
            return ("ito", bid)
        if suffix:
            raise ScenarioError(f"selector {selector!r}: unknown suffix")
        return ("i", bid)
    if kind == "d":
        side, _, bit_s = rest.partition(".")
        if side not in ("in", "out") or not bit_s.isdigit():
            raise ScenarioError(f"selector {selector!r}: want d:in.N/d:out.N")
        bit = int(bit_s)
        if not 0 <= bit < 8:
            raise ScenarioError(f"selector {selector!r}: bit outside 0..7")
        return ("din" if side == "in" else "dout", bit)
    raise ScenarioError(f"selector {selector!r}: unknown kind {kind!r}")


def selector_units(selector: str) -> str:
    return {"v": "V", "i": "A", "d": "bit"}[selector.partition(":")[0]]


# -- fault expansion -----------------------------------------------------


@dataclass
class FaultExpansion:
    branches: list[Branch]
    switch_labels: list[str]       # one per added pair
    added_nodes: dict[str, int]


def expand_fault(event: Event, case: TestCase,
                 next_node: int) -> FaultExpansion:
    """Materialize an ApplyFault as Rf branches behind zero-crossing
    switches. Adds only; existing branches are never touched."""
    act = event.action
    assert isinstance(act, ApplyFault)
    nodes = case._phase_nodes(act.bus, act.fault_type)
    rf = max(act.rf, MIN_FAULT_R)
    grounded = act.fault_type.endswith("G") or act.fault_type == "ABC"
    branches: list[Branch] = []
    labels: list[str] = []
    added: dict[str, int] = {}

    def add_pair(ph: str, n_from: int, n_to: int) -> None:
        mid_name = f"FAULT.{act.bus}.{ph}.x"
        mid = next_node + len(added)
        added[mid_name] = mid
        branches.append(Resistor(n_from, mid, rf,
                                 label=f"FAULT.{act.bus}.{ph}.rf"))
        sw = f"FAULT.{act.bus}.{ph}.sw"
        branches.append(Switch(mid, n_to, closed0=False,
                               mode="zero_crossing_breaker", label=sw))
        labels.append(sw)

    if grounded:
        for ph, node in nodes.items():
            add_pair(ph, node, 0)
    else:
        (ph_a, n_a), (ph_b, n_b) = sorted(nodes.items())
        add_pair(f"{ph_a}{ph_b}", n_a, n_b)
    return FaultExpansion(branches, labels, added)


# -- event scheduling ------------------------------------------------------


@dataclass(frozen=True)
class ScheduledEvent:
    step_index: int
    seq: int                 # declaration order, breaks ties
    event: Event


@dataclass
class Schedule:
    entries: list[ScheduledEvent]
    warnings: list[str]


def snap_to_step(at: float, dt: float, n_steps: int) -> tuple[int, bool]:
    """Nearest step, ties half up; clamps into [0, n_steps]. The bool
    reports whether snapping moved the instant materially."""
    step = int(math.floor(at / dt + 0.5))
    moved = abs(step * dt - at) > 1e-9
    if step > n_steps:
        step = n_steps
        moved = True
    return step, moved


def event_schedule(case: TestCase) -> Schedule:
    """Snap every event to its step; stable order, ties by declaration."""
    entries = []
    warnings = []
    n = case.n_steps
    for seq, ev in enumerate(case.events):
        step, moved = snap_to_step(ev.at, case.dt, n)
        if moved:
            warnings.append(
                f"event {seq} at {ev.at!r}s snapped to step {step} "
                f"(t={step * case.dt:.7g}s)")
        entries.append(ScheduledEvent(step, seq, ev))
    entries.sort(key=lambda e: (e.step_index, e.seq))
    return Schedule(entries, warnings)


# -- run preparation -------------------------------------------------------


@dataclass(frozen=True)
class SwitchCommand:
    step_index: int
    branch_ids: tuple[int, ...]
    target: str              # "open" | "closed"


@dataclass(frozen=True)
class OutBitCommand:
    step_index: int
    bit: int
    level: int


@dataclass
class RunSetup:
    """Everything the executor needs: the expanded circuit, resolved
    selectors and the per-step command table."""

    case: TestCase
    circuit: Circuit
    node_names: dict[str, int]
    switch_commands: dict[int, list[SwitchCommand]]
    out_bit_commands: dict[int, list[OutBitCommand]]
    input_open_rules: list[tuple[int, tuple[int, ...]]]   # bit -> branches
    input_close_rules: list[tuple[int, tuple[int, ...]]]
    out_status_rules: list[tuple[int, tuple[int, ...]]]   # bit <- branches
    outputs: list[tuple[str, tuple]]                      # selector, resolved
    analog_resolved: list[tuple]                          # per channel 0..5
    sv_resolved: list[tuple | None] | None
    warnings: list[str]


def prepare_run(case: TestCase) -> RunSetup:
    """Validate, expand faults, snap events, resolve every reference."""
    case.validate()
    circuit = Circuit(case.circuit.node_count,
                      list(case.circuit.branches),
                      name=case.circuit.name or case.name)
    node_names = dict(case.node_names)
    schedule = event_schedule(case)
    warnings = list(schedule.warnings)
    n = case.n_steps

    # Faults first: they append branches whose ids later commands use.
    expanded_case = replace(case)  # shallow; only used for lookups
    switch_cmds: dict[int, list[SwitchCommand]] = {}
    out_cmds: dict[int, list[OutBitCommand]] = {}

    def add_switch_cmd(step, ids, target):
        switch_cmds.setdefault(step, []).append(
            SwitchCommand(step, tuple(ids), target))

    fault_labels: set[str] = set()
    for entry in schedule.entries:
        act = entry.event.action
        if isinstance(act, ApplyFault):
            exp = expand_fault(entry.event, case, circuit.node_count + 1)
            clash = fault_labels.intersection(exp.switch_labels)
            if clash:
                raise ScenarioError(
                    f"repeated fault on the same bus/phase: {sorted(clash)}")
            fault_labels.update(exp.switch_labels)
            base = len(circuit.branches)
            circuit.branches.extend(exp.branches)
            circuit.node_count += len(exp.added_nodes)
            node_names.update(exp.added_nodes)
            sw_ids = [base + i for i, b in enumerate(exp.branches)
                      if isinstance(b, Switch)]
            add_switch_cmd(entry.step_index, sw_ids, "closed")
            clear_step, moved = snap_to_step(
                entry.event.at + act.duration, case.dt, n)
            if moved:
                warnings.append(
                    f"fault clearing at {entry.event.at + act.duration!r}s "
                    f"snapped to step {clear_step}")
            add_switch_cmd(clear_step, sw_ids, "open")

    tmp_case = TestCase(
        name=case.name, circuit=circuit, node_names=node_names,
        t_end=case.t_end, dt=case.dt, breaker_groups=case.breaker_groups)

    for entry in schedule.entries:
        act = entry.event.action
        if isinstance(act, OpenBreaker):
            add_switch_cmd(entry.step_index,
                           tmp_case.resolve_breaker(act.breaker), "open")
        elif isinstance(act, CloseBreaker):
            add_switch_cmd(entry.step_index,
                           tmp_case.resolve_breaker(act.breaker), "closed")
        elif isinstance(act, SetDigitalOutput):
            out_cmds.setdefault(entry.step_index, []).append(
                OutBitCommand(entry.step_index, act.bit, act.level))

    input_open = []
    input_close = []
    for rule in case.digital_in:
        ids = tuple(tmp_case.resolve_breaker(rule.target))
        if rule.action == "open_breaker":
            input_open.append((rule.bit, ids))
        else:
            input_close.append((rule.bit, ids))
    out_status = [
        (rule.bit, tuple(tmp_case.resolve_breaker(rule.target)))
        for rule in case.digital_out
    ]

    outputs = [(sel, resolve_selector(tmp_case, sel))
               for sel in case.outputs]
    analog_resolved = []
    for m in sorted(case.analog_map, key=lambda m: m.channel):
        analog_resolved.append(resolve_selector(tmp_case, m.signal))

    sv_resolved = None
    if case.sv_publish is not None:
        from .sv import CHANNELS
        sv_resolved = []
        for ch in CHANNELS:
            sel = case.sv_publish.channel_bind.get(ch, "none")
            sv_resolved.append(
                None if sel == "none" else resolve_selector(tmp_case, sel))

    return RunSetup(
        case=case, circuit=circuit, node_names=node_names,
        switch_commands=switch_cmds, out_bit_commands=out_cmds,
        input_open_rules=input_open, input_close_rules=input_close,
        out_status_rules=out_status, outputs=outputs,
        analog_resolved=analog_resolved, sv_resolved=sv_resolved,
        warnings=warnings)
