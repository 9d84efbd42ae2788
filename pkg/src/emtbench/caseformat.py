"""The native test-case text format.

Sectioned, line-oriented, human-editable; `format = 1` header required.
Sections: [sim], [components], [events], [digital_map], [analog_map],
[relay], [sv], [outputs]. Components are single-phase primitives plus
three-phase convenience macros (source3/breaker3/line3/load3) that expand
to .A/.B/.C phase elements at parse time. fixtures/ag60km.case is the
normative example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields, replace

from .circuit import (
    SWITCH_BREAKER,
    SWITCH_PLAIN,
    AcVoltageSource,
    BergeronLine,
    Capacitor,
    Circuit,
    Inductor,
    Resistor,
    SeriesRL,
    Switch,
)
from .ioports import AnalogChannelMap
from .relay import RelayConfig
from .scenario import (
    GROUND_NAMES,
    ApplyFault,
    CloseBreaker,
    Event,
    OpenBreaker,
    ScenarioError,
    SetDigitalOutput,
    DigitalInRule,
    DigitalOutRule,
    TestCase,
    prepare_run,
)
from .sv import CHANNELS as SV_CHANNELS
from .sv import SVConfig

FORMAT_VERSION = 1
PHASES = ("A", "B", "C")
PHASE_SHIFTS = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)

SECTIONS = ("sim", "components", "events", "digital_map", "analog_map",
            "relay", "sv", "outputs")


@dataclass
class Diagnostic:
    line: int
    kind: str          # syntax | unknown-component | dangling-reference |
    message: str       # invariant
    field: str = ""

    def __str__(self):
        where = f"line {self.line}" + (f", {self.field}" if self.field else "")
        return f"{where}: [{self.kind}] {self.message}"


class CaseParseError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__(
            "; ".join(str(d) for d in diagnostics[:5])
            + (f" (+{len(diagnostics) - 5} more)"
               if len(diagnostics) > 5 else ""))
        self.diagnostics = diagnostics


class _Nodes:
    def __init__(self):
        self.names: dict[str, int] = {}

    def id(self, name: str) -> int:
        if name in GROUND_NAMES:
            return 0
        if name not in self.names:
            self.names[name] = len(self.names) + 1
        return self.names[name]


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq:
            raise ValueError(f"expected key=value, got {tok!r}")
        out[key] = value
    return out


def _num(text: str) -> float:
    return float(text)


def _boolean(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_SWITCH_MODES = {"plain": SWITCH_PLAIN, "breaker": SWITCH_BREAKER}
_MODE_NAMES = {v: k for k, v in _SWITCH_MODES.items()}


def try_parse_case(text: str) -> tuple[TestCase | None, list[Diagnostic]]:
    """Parse and fully validate; returns (case, diagnostics). A case is
    returned only when there are no error diagnostics."""
    diags: list[Diagnostic] = []
    nodes = _Nodes()
    branches = []
    breaker_groups: dict[str, list[str]] = {}
    labels_seen: set[str] = set()
    events: list[Event] = []
    event_lines: list[int] = []
    analog_map: list[AnalogChannelMap] = []
    analog_lines: list[int] = []
    digital_in: list[DigitalInRule] = []
    digital_out: list[DigitalOutRule] = []
    dig_lines: list[int] = []
    outputs: list[str] = []
    output_lines: list[int] = []
    sim: dict[str, str] = {}
    relay_kv: dict[str, str] = {}
    sv_kv: dict[str, str] = {}
    name = "case"
    fmt_seen = False
    section = None

    def err(line_no, kind, message, field=""):
        diags.append(Diagnostic(line_no, kind, message, field))

    def add_branch(line_no, branch):
        if branch.label in labels_seen:
            err(line_no, "invariant", f"duplicate label {branch.label!r}")
        labels_seen.add(branch.label)
        branches.append(branch)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                err(line_no, "syntax", f"unknown section [{section}]")
                section = None
            continue
        if section is None:
            key, eq, value = (p.strip() for p in line.partition("="))
            if not eq:
                err(line_no, "syntax", "expected key = value before "
                                       "the first section")
                continue
            if key == "format":
                fmt_seen = True
                if value != str(FORMAT_VERSION):
                    err(line_no, "syntax",
                        f"unsupported format version {value!r}")
            elif key == "name":
                name = value
            else:
                err(line_no, "syntax", f"unknown header key {key!r}")
            continue

        if section in ("sim", "relay", "sv"):
            key, eq, value = (p.strip() for p in line.partition("="))
            if not eq:
                err(line_no, "syntax", f"[{section}] lines are key = value")
                continue
            {"sim": sim, "relay": relay_kv, "sv": sv_kv}[section][key] = value
            continue

        tokens = line.split()
        try:
            if section == "components":
                try:
                    _parse_component(tokens, nodes, add_branch,
                                     breaker_groups, line_no)
                except KeyError as exc:
                    raise ValueError(
                        f"missing parameter {exc.args[0]!r}") from None
            elif section == "events":
                events.append(_parse_event(tokens))
                event_lines.append(line_no)
            elif section == "digital_map":
                rule = _parse_digital_rule(tokens)
                (digital_in if isinstance(rule, DigitalInRule)
                 else digital_out).append(rule)
                dig_lines.append(line_no)
            elif section == "analog_map":
                analog_map.append(_parse_analog_row(tokens))
                analog_lines.append(line_no)
            elif section == "outputs":
                outputs.append(tokens[0])
                output_lines.append(line_no)
        except (ValueError, KeyError, IndexError) as exc:
            err(line_no, "syntax", str(exc))

    if not fmt_seen:
        err(1, "syntax", "missing 'format = 1' header")

    relay_cfg = None
    if relay_kv:
        try:
            relay_cfg = _relay_from_kv(relay_kv)
        except (ValueError, KeyError) as exc:
            err(0, "syntax", f"[relay]: {exc}")
    sv_cfg = None
    if sv_kv:
        try:
            sv_cfg = _sv_from_kv(sv_kv)
        except (ValueError, KeyError) as exc:
            err(0, "syntax", f"[sv]: {exc}")

    try:
        dt = _num(sim.get("dt", "52e-6"))
        t_end = _num(sim["t_end"])
    except KeyError:
        err(0, "invariant", "[sim] must set t_end")
        dt, t_end = 52e-6, 0.0
    except ValueError as exc:
        err(0, "syntax", f"[sim]: {exc}")
        dt, t_end = 52e-6, 0.0

    if diags:
        return None, diags

    circuit = Circuit(len(nodes.names), branches, name=name)
    case = TestCase(
        name=name, circuit=circuit, node_names=dict(nodes.names),
        t_end=t_end, dt=dt, breaker_groups=breaker_groups, events=events,
        analog_map=analog_map, digital_in=digital_in,
        digital_out=digital_out, relay=relay_cfg, sv_publish=sv_cfg,
        outputs=outputs)

    # Semantic validation with the best line attribution we can offer.
    try:
        case.validate()
    except ScenarioError as exc:
        _attribute(diags, str(exc), events, event_lines, outputs,
                   output_lines)
        return None, diags
    except Exception as exc:  # circuit invariants
        err(0, "invariant", str(exc))
        return None, diags
    try:
        setup = prepare_run(case)
    except ScenarioError as exc:
        _attribute(diags, str(exc), events, event_lines, outputs,
                   output_lines)
        return None, diags
    for warning in setup.warnings:
        pass  # snapping warnings surface at run time, not as diagnostics
    return case, diags


def _attribute(diags, message, events, event_lines, outputs, output_lines):
    """Best-effort line attribution for semantic errors."""
    line = 0
    kind = "dangling-reference" if "unknown" in message else "invariant"
    for ev, ln in zip(events, event_lines):
        target = getattr(ev.action, "breaker", None) or \
            getattr(ev.action, "bus", None)
        if target and f"{target!r}" in message:
            line = ln
            break
    if not line:
        for sel, ln in zip(outputs, output_lines):
            if f"{sel!r}" in message:
                line = ln
                break
    diags.append(Diagnostic(line, kind, message))


def parse_case(text: str) -> TestCase:
    """Parse or raise CaseParseError with located diagnostics."""
    case, diags = try_parse_case(text)
    if case is None:
        raise CaseParseError(diags)
    return case


def _parse_component(tokens, nodes, add_branch, breaker_groups, line_no):
    kind, label = tokens[0], tokens[1]
    kv = _kv(tokens[2:])

    def fid(key):
        return nodes.id(kv[key])

    if kind == "resistor":
        add_branch(line_no, Resistor(fid("from"), fid("to"),
                                     _num(kv["r"]), label=label))
    elif kind == "inductor":
        add_branch(line_no, Inductor(fid("from"), fid("to"),
                                     _num(kv["l"]), label=label))
    elif kind == "capacitor":
        add_branch(line_no, Capacitor(fid("from"), fid("to"),
                                      _num(kv["c"]), label=label))
    elif kind == "rl":
        add_branch(line_no, SeriesRL(fid("from"), fid("to"), _num(kv["r"]),
                                     _num(kv["l"]), label=label))
    elif kind == "source":
        phase = math.radians(_num(kv["phase_deg"])) if "phase_deg" in kv \
            else _num(kv.get("phase", "0"))
        add_branch(line_no, AcVoltageSource(
            fid("from"), fid("to"), peak=_num(kv["peak"]),
            freq=_num(kv["freq"]), phase=phase,
            source_r=_num(kv["r"]), label=label))
    elif kind == "switch":
        br = Switch(fid("from"), fid("to"),
                    closed0=_boolean(kv.get("closed", "1")),
                    mode=_SWITCH_MODES[kv.get("mode", "plain")], label=label)
        add_branch(line_no, br)
        group = kv.get("group")
        if group:
            breaker_groups.setdefault(group, []).append(label)
    elif kind == "line":
        add_branch(line_no, BergeronLine(
            fid("from"), fid("to"), zc=_num(kv["zc"]), tau=_num(kv["tau"]),
            r_total=_num(kv.get("r_total", "0")), label=label))
    elif kind == "source3":
        bus = kv["bus"]
        base_phase = math.radians(_num(kv.get("phase_a_deg", "0")))
        for ph, shift in zip(PHASES, PHASE_SHIFTS):
            add_branch(line_no, AcVoltageSource(
                nodes.id(f"{bus}.{ph}"), 0, peak=_num(kv["peak"]),
                freq=_num(kv["freq"]), phase=base_phase + shift,
                source_r=_num(kv["r"]), label=f"{label}.{ph}"))
    elif kind == "breaker3":
        closed = _boolean(kv.get("closed", "1"))
        group = []
        for ph in PHASES:
            lbl = f"{label}.{ph}"
            add_branch(line_no, Switch(
                nodes.id(f"{kv['from']}.{ph}"), nodes.id(f"{kv['to']}.{ph}"),
                closed0=closed, mode=SWITCH_BREAKER, label=lbl))
            group.append(lbl)
        breaker_groups[label] = group
    elif kind == "line3":
        for ph in PHASES:
            add_branch(line_no, BergeronLine(
                nodes.id(f"{kv['from']}.{ph}"), nodes.id(f"{kv['to']}.{ph}"),
                zc=_num(kv["zc"]), tau=_num(kv["tau"]),
                r_total=_num(kv.get("r_total", "0")), label=f"{label}.{ph}"))
    elif kind == "load3":
        for ph in PHASES:
            add_branch(line_no, Resistor(
                nodes.id(f"{kv['bus']}.{ph}"), 0, _num(kv["r"]),
                label=f"{label}.{ph}"))
    else:
        raise ValueError(f"unknown component kind {kind!r}")


def _parse_event(tokens) -> Event:
    kind = tokens[0]
    kv = _kv(tokens[1:])
    at = _num(kv["at"])
    if kind == "fault":
        return Event(at, ApplyFault(
            bus=kv["bus"], fault_type=kv["type"].upper(),
            rf=_num(kv["rf"]), duration=_num(kv["duration"])))
    if kind == "open":
        return Event(at, OpenBreaker(kv["breaker"]))
    if kind == "close":
        return Event(at, CloseBreaker(kv["breaker"]))
    if kind == "setout":
        return Event(at, SetDigitalOutput(int(kv["bit"]),
                                          int(kv["level"])))
    raise ValueError(f"unknown event kind {kind!r}")


def _parse_digital_rule(tokens):
    side = tokens[0]
    bit = int(tokens[1])
    action = tokens[2]
    target = tokens[3]
    if side == "in":
        return DigitalInRule(bit, action, target)
    if side == "out":
        return DigitalOutRule(bit, action, target)
    raise ValueError(f"digital_map rows start with in/out, got {side!r}")


def _parse_analog_row(tokens) -> AnalogChannelMap:
    channel = int(tokens[0])
    signal = tokens[1]
    kv = _kv(tokens[2:])
    return AnalogChannelMap(channel=channel, signal=signal,
                            full_scale=_num(kv["full_scale"]),
                            note=kv.get("note", ""))


_RELAY_FLOAT = ("f_nominal", "ioc_pickup", "idmt_pickup", "idmt_tms",
                "mho_zr_ohm", "mho_zr_deg", "mho_reach", "k0", "i_min",
                "trip_dropout")
_RELAY_INT = ("samples_per_cycle", "va_ch", "vb_ch", "vc_ch", "ia_ch",
              "ib_ch", "ic_ch", "trip_in_bit")


def _relay_from_kv(kv: dict[str, str]) -> RelayConfig:
    cfg = RelayConfig()
    for key, value in kv.items():
        if key == "source":
            cfg.source = value
        elif key in _RELAY_FLOAT:
            setattr(cfg, key, float(value))
        elif key in _RELAY_INT:
            setattr(cfg, key, int(value))
        elif key == "breaker_status_out_bit":
            cfg.breaker_status_out_bit = None if value == "none" \
                else int(value)
        else:
            raise KeyError(f"unknown relay key {key!r}")
    return cfg


def _sv_from_kv(kv: dict[str, str]) -> SVConfig:
    cfg = SVConfig()
    binds = {}
    for key, value in kv.items():
        if key in SV_CHANNELS:
            binds[key] = value
        elif key == "svid":
            cfg.sv_id = value
        elif key == "appid":
            cfg.app_id = int(value, 0)
        elif key == "dst_mac":
            cfg.dst_mac = value
        elif key == "src_mac":
            cfg.src_mac = value
        elif key == "samples_per_cycle":
            cfg.samples_per_cycle = int(value)
        elif key == "nominal_freq":
            cfg.nominal_freq = float(value)
        elif key == "current_scale":
            cfg.current_scale = float(value)
        elif key == "voltage_scale":
            cfg.voltage_scale = float(value)
        elif key == "conf_rev":
            cfg.conf_rev = int(value)
        elif key == "smp_synch":
            cfg.smp_synch = int(value)
        else:
            raise KeyError(f"unknown sv key {key!r}")
    cfg.channel_bind = binds
    return cfg


# -- serialization -----------------------------------------------------------


def serialize_case(case: TestCase) -> str:
    """Canonical text form; parse(serialize(case)) == case."""
    rev = {v: k for k, v in case.node_names.items()}
    rev[0] = "gnd"

    def nn(node: int) -> str:
        return rev[node]

    group_of = {}
    for group, labels in case.breaker_groups.items():
        for lbl in labels:
            group_of[lbl] = group

    lines = [f"format = {FORMAT_VERSION}", f"name = {case.name}", ""]
    lines += ["[sim]", f"dt = {case.dt!r}", f"t_end = {case.t_end!r}", ""]
    lines.append("[components]")
    for b in case.circuit.branches:
        if isinstance(b, Resistor):
            lines.append(f"resistor {b.label} from={nn(b.from_node)} "
                         f"to={nn(b.to_node)} r={b.r!r}")
        elif isinstance(b, Inductor):
            lines.append(f"inductor {b.label} from={nn(b.from_node)} "
                         f"to={nn(b.to_node)} l={b.l!r}")
        elif isinstance(b, Capacitor):
            lines.append(f"capacitor {b.label} from={nn(b.from_node)} "
                         f"to={nn(b.to_node)} c={b.c!r}")
        elif isinstance(b, SeriesRL):
            lines.append(f"rl {b.label} from={nn(b.from_node)} "
                         f"to={nn(b.to_node)} r={b.r!r} l={b.l!r}")
        elif isinstance(b, AcVoltageSource):
            lines.append(
                f"source {b.label} from={nn(b.from_node)} "
                f"to={nn(b.to_node)} peak={b.peak!r} freq={b.freq!r} "
                f"phase={b.phase!r} r={b.source_r!r}")
        elif isinstance(b, Switch):
            extra = f" group={group_of[b.label]}" \
                if b.label in group_of else ""
            lines.append(
                f"switch {b.label} from={nn(b.from_node)} "
                f"to={nn(b.to_node)} closed={int(b.closed0)} "
                f"mode={_MODE_NAMES[b.mode]}{extra}")
        elif isinstance(b, BergeronLine):
            lines.append(
                f"line {b.label} from={nn(b.from_node)} to={nn(b.to_node)} "
                f"zc={b.zc!r} tau={b.tau!r} r_total={b.r_total!r}")
    lines.append("")

    if case.events:
        lines.append("[events]")
        for ev in case.events:
            act = ev.action
            if isinstance(act, ApplyFault):
                lines.append(f"fault at={ev.at!r} bus={act.bus} "
                             f"type={act.fault_type} rf={act.rf!r} "
                             f"duration={act.duration!r}")
            elif isinstance(act, OpenBreaker):
                lines.append(f"open at={ev.at!r} breaker={act.breaker}")
            elif isinstance(act, CloseBreaker):
                lines.append(f"close at={ev.at!r} breaker={act.breaker}")
            else:
                lines.append(f"setout at={ev.at!r} bit={act.bit} "
                             f"level={act.level}")
        lines.append("")

    if case.digital_in or case.digital_out:
        lines.append("[digital_map]")
        for r in case.digital_in:
            lines.append(f"in {r.bit} {r.action} {r.target}")
        for r in case.digital_out:
            lines.append(f"out {r.bit} {r.source} {r.target}")
        lines.append("")

    if case.analog_map:
        lines.append("[analog_map]")
        for m in case.analog_map:
            note = f" note={m.note}" if m.note else ""
            lines.append(f"{m.channel} {m.signal} "
                         f"full_scale={m.full_scale!r}{note}")
        lines.append("")

    if case.relay is not None:
        cfg = case.relay
        lines.append("[relay]")
        lines.append(f"source = {cfg.source}")
        for key in _RELAY_INT:
            lines.append(f"{key} = {getattr(cfg, key)}")
        for key in _RELAY_FLOAT:
            lines.append(f"{key} = {getattr(cfg, key)!r}")
        bit = cfg.breaker_status_out_bit
        lines.append(f"breaker_status_out_bit = "
                     f"{'none' if bit is None else bit}")
        lines.append("")

    if case.sv_publish is not None:
        cfg = case.sv_publish
        lines.append("[sv]")
        lines.append(f"svid = {cfg.sv_id}")
        lines.append(f"appid = 0x{cfg.app_id:04x}")
        lines.append(f"dst_mac = {cfg.dst_mac}")
        lines.append(f"src_mac = {cfg.src_mac}")
        lines.append(f"samples_per_cycle = {cfg.samples_per_cycle}")
        lines.append(f"nominal_freq = {cfg.nominal_freq!r}")
        lines.append(f"current_scale = {cfg.current_scale!r}")
        lines.append(f"voltage_scale = {cfg.voltage_scale!r}")
        lines.append(f"conf_rev = {cfg.conf_rev}")
        lines.append(f"smp_synch = {cfg.smp_synch}")
        for ch in SV_CHANNELS:
            if ch in cfg.channel_bind:
                lines.append(f"{ch} = {cfg.channel_bind[ch]}")
        lines.append("")

    if case.outputs:
        lines.append("[outputs]")
        lines.extend(case.outputs)
        lines.append("")
    return "\n".join(lines)


def case_to_json_dict(case: TestCase) -> dict:
    """JSON-friendly export of the parsed model for the service API."""
    def branch_dict(b):
        d = {"kind": type(b).__name__, "label": b.label,
             "from_node": b.from_node, "to_node": b.to_node}
        for f in dc_fields(b):
            if f.name not in d and f.name != "label":
                d[f.name] = getattr(b, f.name)
        return d

    return {
        "name": case.name,
        "dt": case.dt,
        "t_end": case.t_end,
        "node_names": case.node_names,
        "branches": [branch_dict(b) for b in case.circuit.branches],
        "breaker_groups": case.breaker_groups,
        "events": [
            {"at": ev.at, "action": type(ev.action).__name__,
             **{f.name: getattr(ev.action, f.name)
                for f in dc_fields(ev.action)}}
            for ev in case.events
        ],
        "outputs": list(case.outputs),
        "analog_map": [
            {"channel": m.channel, "signal": m.signal,
             "full_scale": m.full_scale} for m in case.analog_map
        ],
        "relay": None if case.relay is None else vars(case.relay).copy(),
        "sv": None if case.sv_publish is None else {
            "sv_id": case.sv_publish.sv_id,
            "smp_rate": case.sv_publish.smp_rate,
            "channel_bind": dict(case.sv_publish.channel_bind),
        },
        "has_relay": case.relay is not None,
    }
