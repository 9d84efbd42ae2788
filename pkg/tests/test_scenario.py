"""Case model, fault expansion and event scheduling."""

import math

import pytest

from emtbench.caseformat import (
    CaseParseError,
    parse_case,
    serialize_case,
    try_parse_case,
)
from emtbench.circuit import Resistor, Switch
from emtbench.scenario import (
    ApplyFault,
    Event,
    OpenBreaker,
    ScenarioError,
    SetDigitalOutput,
    event_schedule,
    expand_fault,
    prepare_run,
    resolve_selector,
    snap_to_step,
)

from conftest import FIXTURES

REFERENCE = (FIXTURES / "ag60km.case").read_text()


def ref_case():
    return parse_case(REFERENCE)


MINIMAL = """\
format = 1
name = mini

[sim]
dt = 52e-6
t_end = 0.01

[components]
source   S1 from=N1 to=gnd peak=10 freq=0 phase=0 r=1
resistor R1 from=N1 to=gnd r=5

[outputs]
v:N1
i:R1
"""


def test_parse_reference_case():
    case = ref_case()
    assert case.name == "ag60km"
    assert case.dt == pytest.approx(52e-6)
    assert case.t_end == pytest.approx(0.4)
    assert len(case.events) == 1
    act = case.events[0].action
    assert isinstance(act, ApplyFault)
    assert act.fault_type == "AG"
    assert act.rf == 9.0
    assert act.duration == 0.05
    assert len(case.circuit.branches) == 15  # 3 src + 3 cb + 6 line + 3 load
    assert case.breaker_groups["CB1"] == ["CB1.A", "CB1.B", "CB1.C"]
    assert case.relay is not None and case.relay.ioc_pickup == 2000.0
    assert case.sv_publish is not None
    assert len(case.outputs) == 14


def test_parse_minimal_no_events():
    case = parse_case(MINIMAL)
    assert case.events == []
    setup = prepare_run(case)
    assert setup.switch_commands == {}


def test_dangling_breaker_reference_diagnosed():
    bad = MINIMAL + "\n[events]\nopen at=0.005 breaker=CB9\n"
    case, diags = try_parse_case(bad)
    assert case is None
    assert any("CB9" in d.message for d in diags)
    assert any(d.kind == "dangling-reference" for d in diags)
    assert any(d.line > 0 for d in diags)


def test_syntax_error_carries_line():
    bad = MINIMAL.replace("resistor R1 from=N1 to=gnd r=5",
                          "resistor R1 from=N1 to=gnd")
    case, diags = try_parse_case(bad)
    assert case is None
    assert diags[0].line == 10
    assert diags[0].kind == "syntax"
    assert "r" in diags[0].message


def test_missing_format_header():
    with pytest.raises(CaseParseError):
        parse_case(MINIMAL.replace("format = 1\n", ""))


def test_roundtrip_reference_case():
    case = ref_case()
    text = serialize_case(case)
    again = parse_case(text)
    assert again == case
    # and a second generation is textually stable
    assert serialize_case(again) == text


def test_roundtrip_minimal():
    case = parse_case(MINIMAL)
    assert parse_case(serialize_case(case)) == case


# -- fault expansion ---------------------------------------------------------


def test_expand_ag_fault_one_pair():
    case = ref_case()
    ev = case.events[0]
    exp = expand_fault(ev, case, case.circuit.node_count + 1)
    assert len(exp.branches) == 2
    assert isinstance(exp.branches[0], Resistor)
    assert isinstance(exp.branches[1], Switch)
    assert exp.branches[0].r == 9.0
    assert exp.branches[1].mode == "zero_crossing_breaker"
    assert not exp.branches[1].closed0


def test_expand_abc_fault_three_pairs():
    case = ref_case()
    ev = Event(0.1, ApplyFault("BUSF", "ABC", 0.001, 0.05))
    exp = expand_fault(ev, case, case.circuit.node_count + 1)
    assert len(exp.branches) == 6
    assert sum(isinstance(b, Switch) for b in exp.branches) == 3


def test_expand_ab_fault_no_ground_path():
    case = ref_case()
    ev = Event(0.1, ApplyFault("BUSF", "AB", 1.0, 0.05))
    exp = expand_fault(ev, case, case.circuit.node_count + 1)
    assert len(exp.branches) == 2
    # no endpoint on ground
    for b in exp.branches:
        nodes = {b.from_node, b.to_node}
        assert 0 not in nodes or b.from_node != 0


def test_expand_unknown_bus():
    case = ref_case()
    ev = Event(0.1, ApplyFault("NOWHERE", "AG", 1.0, 0.05))
    with pytest.raises(ScenarioError):
        expand_fault(ev, case, 99)


def test_prepare_run_wires_fault_commands():
    case = ref_case()
    setup = prepare_run(case)
    steps = sorted(setup.switch_commands)
    close_step = snap_to_step(0.1, case.dt, case.n_steps)[0]
    open_step = snap_to_step(0.15, case.dt, case.n_steps)[0]
    assert steps == [close_step, open_step]
    assert setup.switch_commands[close_step][0].target == "closed"
    assert setup.switch_commands[open_step][0].target == "open"
    # expanded circuit gained resistor + switch + internal node
    assert len(setup.circuit.branches) == 17
    assert setup.circuit.node_count == case.circuit.node_count + 1
    # original case untouched
    assert len(case.circuit.branches) == 15


# -- scheduling ---------------------------------------------------------------


def test_snap_nearest_step():
    # 0.1 / 52e-6 = 1923.07... -> 1923
    step, moved = snap_to_step(0.1, 52e-6, 10**6)
    assert step == 1923
    assert moved


def test_snap_tie_rounds_half_up():
    dt = 1e-3
    step, _ = snap_to_step(2.5e-3, dt, 100)
    assert step == 3


def test_schedule_tie_order_and_warning():
    case = parse_case(MINIMAL.replace(
        "[outputs]",
        "[events]\nsetout at=0.005 bit=0 level=1\n"
        "setout at=0.005 bit=1 level=1\n\n[outputs]"))
    sched = event_schedule(case)
    assert [e.seq for e in sched.entries] == [0, 1]
    assert sched.entries[0].step_index == sched.entries[1].step_index


def test_event_near_end_clamped_with_warning():
    dt = 52e-6
    t_end = 0.01
    n = int(t_end / dt)
    at = t_end - dt / 3
    text = MINIMAL.replace(
        "[outputs]",
        f"[events]\nsetout at={at!r} bit=0 level=1\n\n[outputs]")
    case = parse_case(text)
    sched = event_schedule(case)
    assert sched.entries[0].step_index == n
    assert sched.warnings


def test_every_event_scheduled_exactly_once():
    events = "\n".join(
        f"setout at={k * 1e-3!r} bit={k % 8} level=1" for k in range(9))
    case = parse_case(MINIMAL.replace("[outputs]",
                                      f"[events]\n{events}\n\n[outputs]"))
    sched = event_schedule(case)
    assert len(sched.entries) == 9
    assert sorted(e.seq for e in sched.entries) == list(range(9))


# -- selectors ---------------------------------------------------------------


def test_selector_resolution():
    case = ref_case()
    kind, idx = resolve_selector(case, "v:BUS1.A")
    assert kind == "v" and idx == case.node_names["BUS1.A"]
    kind, idx = resolve_selector(case, "i:CB1.B")
    assert kind == "i"
    kind, idx = resolve_selector(case, "i:L60.A@to")
    assert kind == "ito"
    assert resolve_selector(case, "d:in.0") == ("din", 0)
    assert resolve_selector(case, "d:out.7") == ("dout", 7)


def test_selector_errors():
    case = ref_case()
    for bad in ("v:NOPE", "i:NOPE", "i:LOAD.A@to", "d:in.9", "x:FOO"):
        with pytest.raises(ScenarioError):
            resolve_selector(case, bad)


def test_fault_branch_selector_resolves_after_prepare():
    case = ref_case()
    setup = prepare_run(case)
    labels = [b.label for b in setup.circuit.branches]
    assert "FAULT.BUSF.A.sw" in labels
    assert ("i", labels.index("FAULT.BUSF.A.sw")) in [
        r for _, r in setup.outputs]


def test_event_outside_window_rejected():
    bad = MINIMAL.replace(
        "[outputs]",
        "[events]\nsetout at=0.5 bit=0 level=1\n\n[outputs]")
    case, diags = try_parse_case(bad)
    assert case is None


def test_runaway_case_rejected():
    bad = MINIMAL.replace("t_end = 0.01", "t_end = 1e6")
    case, diags = try_parse_case(bad)
    assert case is None
    assert any("exceeds" in d.message for d in diags)
