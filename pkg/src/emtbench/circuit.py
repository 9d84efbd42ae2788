"""Circuit description for the fixed-step nodal EMT solver.

A circuit is a list of two-terminal branches over integer node ids.
Node 0 is ground and is excluded from the system matrix. Three-phase
equipment is expressed as three independent single-phase branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class CircuitError(Exception):
    """Base class for circuit construction/validation failures."""


class FloatingNode(CircuitError):
    """A non-ground node has no branch attached."""


class NonPositiveParameter(CircuitError):
    """A physical parameter that must be > 0 (or >= 0) is not."""


class TauLessThanDt(CircuitError):
    """A travelling-wave line whose delay is shorter than the step."""


class UnknownBranch(CircuitError):
    """Branch id out of range."""


class NotASwitch(CircuitError):
    """A switch command addressed a non-switch branch."""


SWITCH_PLAIN = "plain"
SWITCH_BREAKER = "zero_crossing_breaker"


@dataclass(frozen=True)
class Resistor:
    from_node: int
    to_node: int
    r: float
    label: str = ""


@dataclass(frozen=True)
class Inductor:
    from_node: int
    to_node: int
    l: float
    label: str = ""


@dataclass(frozen=True)
class Capacitor:
    from_node: int
    to_node: int
    c: float
    label: str = ""


@dataclass(frozen=True)
class SeriesRL:
    from_node: int
    to_node: int
    r: float
    l: float
    label: str = ""


@dataclass(frozen=True)
class AcVoltageSource:
    """Thevenin source: ideal EMF behind source_r.

    e(t) = peak * cos(2*pi*freq*t + phase). freq = 0 gives a DC source
    of value peak*cos(phase). The reported branch current is the current
    delivered into from_node (out of the + terminal).
    """

    from_node: int
    to_node: int
    peak: float
    freq: float
    phase: float = 0.0
    source_r: float = 1.0
    label: str = ""


@dataclass(frozen=True)
class Switch:
    """Ideal-ish switch: closed = 1 mOhm, open = removed from the matrix.

    mode 'zero_crossing_breaker' delays opening until the first current
    sign change after the open command (circuit-breaker behaviour).
    """

    from_node: int
    to_node: int
    closed0: bool = True
    mode: str = SWITCH_PLAIN
    label: str = ""


@dataclass(frozen=True)
class BergeronLine:
    """Lossless travelling-wave line with lumped series resistance.

    zc: characteristic impedance [ohm]; tau: travel time [s];
    r_total: total series resistance, lumped half at each end of the
    internal lossless line.
    """

    from_node: int
    to_node: int
    zc: float
    tau: float
    r_total: float = 0.0
    label: str = ""


Branch = (
    Resistor
    | Inductor
    | Capacitor
    | SeriesRL
    | AcVoltageSource
    | Switch
    | BergeronLine
)


@dataclass
class Circuit:
    node_count: int
    branches: list[Branch] = field(default_factory=list)
    name: str = ""

    def branch_by_label(self, label: str) -> int:
        for j, b in enumerate(self.branches):
            if b.label == label:
                return j
        raise UnknownBranch(f"no branch labelled {label!r}")

    def validate(self, dt: float | None = None) -> None:
        """Check node references, parameter signs and line delays.

        Raises the first violation found; dt (when given) enables the
        tau >= dt check for travelling-wave lines.
        """
        if self.node_count < 1:
            raise CircuitError("node_count must be >= 1")
        touched = [False] * (self.node_count + 1)
        for j, b in enumerate(self.branches):
            where = f"branch {j} ({b.label or type(b).__name__})"
            for n in (b.from_node, b.to_node):
                if not 0 <= n <= self.node_count:
                    raise CircuitError(f"{where}: node {n} out of range")
                touched[n] = True
            if b.from_node == b.to_node:
                raise CircuitError(f"{where}: both ends on node {b.from_node}")
            _check_params(b, where)
            if isinstance(b, BergeronLine) and dt is not None and b.tau < dt:
                raise TauLessThanDt(
                    f"{where}: tau={b.tau:g}s is shorter than dt={dt:g}s"
                )
        for n in range(1, self.node_count + 1):
            if not touched[n]:
                raise FloatingNode(f"node {n} has no branch attached")


def _check_params(b: Branch, where: str) -> None:
    def positive(name: str, value: float) -> None:
        if not value > 0.0:
            raise NonPositiveParameter(f"{where}: {name}={value:g} must be > 0")

    if isinstance(b, Resistor):
        positive("r", b.r)
    elif isinstance(b, Inductor):
        positive("l", b.l)
    elif isinstance(b, Capacitor):
        positive("c", b.c)
    elif isinstance(b, SeriesRL):
        positive("r", b.r)
        positive("l", b.l)
    elif isinstance(b, AcVoltageSource):
        positive("peak", b.peak)
        positive("source_r", b.source_r)
        if b.freq < 0.0:
            raise NonPositiveParameter(f"{where}: freq={b.freq:g} must be >= 0")
    elif isinstance(b, Switch):
        if b.mode not in (SWITCH_PLAIN, SWITCH_BREAKER):
            raise CircuitError(f"{where}: unknown switch mode {b.mode!r}")
    elif isinstance(b, BergeronLine):
        positive("zc", b.zc)
        positive("tau", b.tau)
        if b.r_total < 0.0:
            raise NonPositiveParameter(
                f"{where}: r_total={b.r_total:g} must be >= 0"
            )
