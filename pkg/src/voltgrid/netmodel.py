"""Grid data model, native case format, and MATPOWER-style case import.

A case is immutable once loaded: every record is a frozen dataclass and the
container holds tuples. Mutating operations elsewhere in the package build a
modified copy via :func:`dataclasses.replace`.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace, asdict
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable


class CaseError(Exception):
    """Base error for case loading problems."""


class ParseError(CaseError):
    """Raised when a case file cannot be parsed; carries line/column."""

    def __init__(self, message: str, line: int | None = None,
                 column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}" + (
                f", column {column})" if column is not None else ")")
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(CaseError):
    """Raised when a parsed case violates a model invariant."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class BusType(Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    """Electrical node. gs/bs are fixed shunt MW/MVAr consumed/injected at
    1.0 p.u. voltage (bs > 0 is capacitive), distinct from switchable shunts.
    """
    id: int
    base_kv: float
    v_init: float = 1.0
    angle_init: float = 0.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Line or transformer. tap_ratio is 1.0 for plain lines."""
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    """Generating unit; p is the current MW dispatch (base case or as set
    by a scenario). One record per bus (parallel units are merged on import).
    """
    bus: int
    p: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_setpoint: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class Shunt:
    """Switchable shunt; q_nominal is MVAr injected at 1.0 p.u. voltage
    (positive = capacitive). Injection scales with the square of voltage.
    """
    bus: int
    q_nominal: float
    closed: bool = True


@dataclass(frozen=True)
class NetworkCase:
    """Static grid description. Buses are stored sorted by ascending id."""
    name: str
    base_mva: float
    slack_bus: int
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    shunts: tuple[Shunt, ...]

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in self.buses."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_types(self) -> tuple[BusType, ...]:
        """Derived per-bus classification: slack bus, PV (in-service
        generator present), PQ otherwise."""
        gen_buses = {g.bus for g in self.generators if g.in_service}
        out = []
        for b in self.buses:
            if b.id == self.slack_bus:
                out.append(BusType.SLACK)
            elif b.id in gen_buses:
                out.append(BusType.PV)
            else:
                out.append(BusType.PQ)
        return tuple(out)

    def generators_at(self, bus_id: int) -> list[int]:
        return [i for i, g in enumerate(self.generators) if g.bus == bus_id]

    @property
    def slack_gen_index(self) -> int | None:
        for i, g in enumerate(self.generators):
            if g.bus == self.slack_bus:
                return i
        return None

    def total_load_p(self) -> float:
        return sum(ld.p for ld in self.loads)

    def with_updates(self, *, branches=None, generators=None, loads=None,
                     shunts=None) -> "NetworkCase":
        """Copy with selected entity tuples replaced."""
        return replace(
            self,
            branches=self.branches if branches is None else tuple(branches),
            generators=self.generators if generators is None else tuple(generators),
            loads=self.loads if loads is None else tuple(loads),
            shunts=self.shunts if shunts is None else tuple(shunts),
        )


def validate(case: NetworkCase) -> list[str]:
    """Check every model invariant; returns one message per violation.

    Violations are values, not exceptions — loaders raise, callers that
    want a report call this directly.
    """
    v: list[str] = []
    seen: set[int] = set()
    for b in case.buses:
        if b.id in seen:
            v.append(f"bus {b.id}: duplicate bus id")
        seen.add(b.id)
        if b.base_kv <= 0:
            v.append(f"bus {b.id}: base_kv must be > 0")
        if not (0 < b.v_init < 2):
            v.append(f"bus {b.id}: v_init {b.v_init} outside (0, 2)")

    ids = {b.id for b in case.buses}
    if case.base_mva <= 0:
        v.append(f"case: base_mva must be > 0 (got {case.base_mva})")
    if case.slack_bus not in ids:
        v.append(f"case: slack bus {case.slack_bus} does not exist")

    slack_count = sum(1 for b in case.buses if b.id == case.slack_bus)
    if slack_count > 1:
        v.append(f"case: slack bus id {case.slack_bus} appears {slack_count} times")

    for i, br in enumerate(case.branches):
        if br.x == 0:
            v.append(f"branch {i} ({br.from_bus}-{br.to_bus}): x must be nonzero")
        if br.from_bus == br.to_bus:
            v.append(f"branch {i}: from_bus equals to_bus ({br.from_bus})")
        for end in (br.from_bus, br.to_bus):
            if end not in ids:
                v.append(f"branch {i}: endpoint bus {end} does not exist")

    gen_buses: set[int] = set()
    for i, g in enumerate(case.generators):
        if g.bus not in ids:
            v.append(f"generator {i}: bus {g.bus} does not exist")
        if g.p_min > g.p_max:
            v.append(f"generator {i} (bus {g.bus}): p_min > p_max")
        if g.q_min > g.q_max:
            v.append(f"generator {i} (bus {g.bus}): q_min > q_max")
        if g.bus in gen_buses:
            v.append(f"generator {i}: bus {g.bus} already has a generator "
                     "(parallel units must be merged)")
        gen_buses.add(g.bus)

    for i, ld in enumerate(case.loads):
        if ld.bus not in ids:
            v.append(f"load {i}: bus {ld.bus} does not exist")
        if ld.p < 0:
            v.append(f"load {i} (bus {ld.bus}): base-case p must be >= 0")

    for i, sh in enumerate(case.shunts):
        if sh.bus not in ids:
            v.append(f"shunt {i}: bus {sh.bus} does not exist")

    if case.slack_bus in ids and not _equipment_connected(case):
        v.append("case: in-service branch graph does not connect all buses "
                 "with attached equipment to the slack")
    return v


def _equipment_connected(case: NetworkCase) -> bool:
    """True if every bus carrying a generator/load/shunt is reachable from
    the slack over in-service branches."""
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.in_service and br.from_bus in adj and br.to_bus in adj:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    reached = {case.slack_bus}
    frontier = [case.slack_bus]
    while frontier:
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in reached:
                    reached.add(w)
                    nxt.append(w)
        frontier = nxt
    equipped = ({g.bus for g in case.generators} |
                {ld.bus for ld in case.loads} |
                {sh.bus for sh in case.shunts})
    return equipped <= reached


# ---------------------------------------------------------------------------
# Native format: one JSON document per case, arrays of records per entity.
# ---------------------------------------------------------------------------

_ENTITY_TYPES = {
    "buses": Bus,
    "branches": Branch,
    "generators": Generator,
    "loads": Load,
    "shunts": Shunt,
}


def load_case(path: str | Path, format: str = "native") -> NetworkCase:
    """Load and validate a case file.

    format "native" reads the JSON schema written by :func:`write_native`;
    "matpower" reads mpc.bus / mpc.gen / mpc.branch / mpc.baseMVA matrix
    blocks from MATPOWER-style .m text.
    """
    path = Path(path)
    text = path.read_text()
    if format == "native":
        case = _parse_native(text, default_name=path.stem)
    elif format == "matpower":
        case = parse_matpower(text, name=path.stem)
    else:
        raise ValueError(f"unknown case format: {format!r}")
    violations = validate(case)
    if violations:
        raise ValidationError(violations)
    return case


def _parse_native(text: str, default_name: str = "case") -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid case document: {exc.msg}",
                         line=exc.lineno, column=exc.colno) from exc
    if not isinstance(doc, dict):
        raise ParseError("case document must be a JSON object")
    missing = {"base_mva", "slack_bus", "buses", "branches",
               "generators", "loads"} - doc.keys()
    if missing:
        raise ParseError(f"case document missing keys: {sorted(missing)}")

    entities: dict[str, tuple] = {}
    for key, cls in _ENTITY_TYPES.items():
        records = doc.get(key, [])
        parsed = []
        for n, rec in enumerate(records):
            try:
                parsed.append(cls(**rec))
            except TypeError as exc:
                raise ParseError(f"{key}[{n}]: {exc}") from exc
        entities[key] = tuple(parsed)

    return NetworkCase(
        name=str(doc.get("name", default_name)),
        base_mva=float(doc["base_mva"]),
        slack_bus=int(doc["slack_bus"]),
        buses=tuple(sorted(entities["buses"], key=lambda b: b.id)),
        branches=entities["branches"],
        generators=entities["generators"],
        loads=entities["loads"],
        shunts=entities["shunts"],
    )


def write_native(case: NetworkCase, path: str | Path) -> None:
    """Serialize to the native JSON schema (stable key order, one record
    per entity per line block). load_case(write_native(c)) == c."""
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
        "loads": [asdict(ld) for ld in case.loads],
        "shunts": [asdict(s) for s in case.shunts],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# MATPOWER-style import
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;")


def parse_matpower(text: str, name: str = "case") -> NetworkCase:
    """Import the bus/gen/branch matrices of a MATPOWER-style case.

    Only the columns needed by the data model are read; the rest are
    ignored. Published cases sometimes carry base_kv = 0 — those are
    replaced with 1.0 (the per-unit solve never uses kV). Parallel
    generators on one bus are merged: limits and dispatch summed, set
    point taken from the first in-service unit.
    """
    text = _strip_matlab_comments(text)
    m = _SCALAR_RE.search(text)
    if not m:
        raise ParseError("mpc.baseMVA not found")
    base_mva = float(m.group(1))

    blocks = {name: body for name, body in _MATRIX_RE.findall(text)}
    for req in ("bus", "gen", "branch"):
        if req not in blocks:
            raise ParseError(f"mpc.{req} matrix not found")

    bus_rows = _parse_matrix(blocks["bus"], "bus", min_cols=13)
    gen_rows = _parse_matrix(blocks["gen"], "gen", min_cols=10)
    branch_rows = _parse_matrix(blocks["branch"], "branch", min_cols=11)

    buses, loads, slack_bus = [], [], None
    for row in bus_rows:
        bus_i, bus_type = int(row[0]), int(row[1])
        pd, qd, gs, bs = row[2], row[3], row[4], row[5]
        vm, va_deg, base_kv = row[7], row[8], row[9]
        if bus_type == 3:
            if slack_bus is not None:
                raise ParseError("multiple slack (type 3) buses in mpc.bus")
            slack_bus = bus_i
        buses.append(Bus(id=bus_i, base_kv=base_kv if base_kv > 0 else 1.0,
                         v_init=vm, angle_init=math.radians(va_deg),
                         gs=gs, bs=bs))
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(bus=bus_i, p=pd, q=qd))
    if slack_bus is None:
        raise ParseError("no slack (type 3) bus in mpc.bus")

    merged: dict[int, Generator] = {}
    for row in gen_rows:
        g = Generator(bus=int(row[0]), p=row[1], q_max=row[3], q_min=row[4],
                      v_setpoint=row[5], in_service=row[7] > 0,
                      p_max=row[8], p_min=row[9])
        prev = merged.get(g.bus)
        if prev is None:
            merged[g.bus] = g
        else:
            merged[g.bus] = Generator(
                bus=g.bus, p=prev.p + g.p,
                p_min=prev.p_min + g.p_min, p_max=prev.p_max + g.p_max,
                q_min=prev.q_min + g.q_min, q_max=prev.q_max + g.q_max,
                v_setpoint=prev.v_setpoint if prev.in_service else g.v_setpoint,
                in_service=prev.in_service or g.in_service)

    branches = []
    for row in branch_rows:
        tap = row[8]
        branches.append(Branch(
            from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3],
            b_charging=row[4], tap_ratio=tap if tap != 0.0 else 1.0,
            in_service=row[10] > 0))

    return NetworkCase(
        name=name, base_mva=base_mva, slack_bus=slack_bus,
        buses=tuple(sorted(buses, key=lambda b: b.id)),
        branches=tuple(branches),
        generators=tuple(merged[b] for b in sorted(merged)),
        loads=tuple(loads), shunts=())


def _strip_matlab_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, name: str, min_cols: int) -> list[list[float]]:
    rows = []
    for n, raw in enumerate(body.replace(";", "\n").splitlines()):
        raw = raw.strip()
        if not raw:
            continue
        try:
            row = [float(tok) for tok in raw.split()]
        except ValueError as exc:
            raise ParseError(f"mpc.{name} row {n}: {exc}") from exc
        if len(row) < min_cols:
            raise ParseError(
                f"mpc.{name} row {n}: expected >= {min_cols} columns, "
                f"got {len(row)}")
        rows.append(row)
    return rows


def case_fingerprint(case: NetworkCase) -> str:
    """Short stable hash of the full case contents, for report provenance."""
    import hashlib
    blob = json.dumps({
        "base_mva": case.base_mva, "slack_bus": case.slack_bus,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
        "loads": [asdict(ld) for ld in case.loads],
        "shunts": [asdict(s) for s in case.shunts],
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
