"""MATPOWER-style case parsing and the DC measurement model.

The parser reads the `mpc.baseMVA`, `mpc.bus` and `mpc.branch` blocks of a
MATPOWER ``.m`` file (generator and cost blocks are ignored: injections in
this lab come from the load model).  From a parsed case we assemble the dense
measurement Jacobian H of a fully metered DC system: one directed active-power
flow meter per branch, in case-file order, followed by one net-injection meter
per bus, in bus order.  The slack bus angle is fixed at zero and its column is
dropped, so H has shape (n_branch + n_bus) x (n_bus - 1) under the default
meter configuration.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import CaseParseError, CaseValidationError, ObservabilityError

GRID_JSON_VERSION = 1

BUS_PQ = "PQ"
BUS_PV = "PV"
BUS_SLACK = "slack"

_BUS_TYPE_CODES = {1: BUS_PQ, 2: BUS_PV, 3: BUS_SLACK}


@dataclass(frozen=True)
class RawBus:
    bus_id: int
    bus_type: str
    load: float  # active load, per-unit on the case base


@dataclass(frozen=True)
class RawBranch:
    from_bus: int
    to_bus: int
    reactance: float  # series reactance, per-unit, strictly positive


@dataclass(frozen=True)
class RawCase:
    """Validated case data: loads in per-unit, out-of-service branches dropped."""

    case_name: str
    base_mva: float
    buses: tuple[RawBus, ...]
    branches: tuple[RawBranch, ...]

    @property
    def slack_bus(self) -> int:
        return next(b.bus_id for b in self.buses if b.bus_type == BUS_SLACK)


@dataclass(frozen=True)
class MeterDescriptor:
    """One meter: either a directed branch flow or a bus net injection."""

    meter_id: int
    kind: str  # "branch_flow" | "bus_injection"
    from_bus: int | None = None
    to_bus: int | None = None
    bus: int | None = None

    def to_json(self) -> dict:
        if self.kind == "branch_flow":
            return {"id": self.meter_id, "kind": self.kind,
                    "from": self.from_bus, "to": self.to_bus}
        return {"id": self.meter_id, "kind": self.kind, "bus": self.bus}

    @staticmethod
    def from_json(obj: dict) -> "MeterDescriptor":
        if obj["kind"] == "branch_flow":
            return MeterDescriptor(obj["id"], "branch_flow",
                                   from_bus=obj["from"], to_bus=obj["to"])
        return MeterDescriptor(obj["id"], "bus_injection", bus=obj["bus"])


@dataclass(frozen=True)
class MeterConfig:
    """Meter placement. The default set (one flow meter per branch, one
    injection meter per bus) is the smallest fully observable configuration;
    reverse flow meters can be added for extra redundancy."""

    include_reverse_flows: bool = False


@dataclass
class GridModel:
    """DC measurement model: z = H x + e over non-slack bus angles.

    ``noise_sigma`` is None until calibrated from sample statistics; the
    estimation operations refuse to run without it.
    """

    case_name: str
    bus_ids: tuple[int, ...]
    slack_bus: int
    meters: tuple[MeterDescriptor, ...]
    h_matrix: np.ndarray  # (m, n_state) dense, per-unit
    base_loads: np.ndarray  # per bus, per-unit, bus order
    noise_sigma: np.ndarray | None = None
    # per-model factorization cache (estimation / state sampling); never serialized
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_state(self) -> int:
        return self.n_bus - 1

    @property
    def n_meter(self) -> int:
        return len(self.meters)

    @property
    def state_bus_ids(self) -> tuple[int, ...]:
        """Bus ids of the state variables (all buses except the slack, bus order)."""
        return tuple(b for b in self.bus_ids if b != self.slack_bus)

    def bus_index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def with_noise_sigma(self, sigma: np.ndarray) -> "GridModel":
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.n_meter,):
            raise CaseValidationError(
                f"noise_sigma must have length {self.n_meter}, got {sigma.shape}")
        if not np.all(sigma > 0):
            raise CaseValidationError("noise_sigma must be strictly positive")
        return replace(self, noise_sigma=sigma, cache={})


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_NAME_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _find_matrix_block(lines: list[str], name: str) -> list[tuple[int, str]]:
    """Return (1-based line number, content) pairs for the rows of ``mpc.<name> = [...]``."""
    open_re = re.compile(rf"mpc\.{name}\s*=\s*\[")
    start = None
    for i, line in enumerate(lines):
        if open_re.search(_strip_comment(line)):
            start = i
            break
    if start is None:
        raise CaseParseError(f"missing 'mpc.{name}' matrix block")
    rows: list[tuple[int, str]] = []
    for i in range(start, len(lines)):
        content = _strip_comment(lines[i])
        if i == start:
            content = open_re.split(content, maxsplit=1)[1]
        closed = "]" in content
        if closed:
            content = content.split("]", 1)[0]
        content = content.strip()
        if content:
            rows.append((i + 1, content))
        if closed:
            return rows
    raise CaseParseError(f"unterminated 'mpc.{name}' matrix block")


def _parse_rows(rows: list[tuple[int, str]], name: str, min_cols: int) -> list[tuple[int, list[float]]]:
    parsed = []
    for lineno, content in rows:
        for chunk in content.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                values = [float(tok) for tok in chunk.split()]
            except ValueError as exc:
                raise CaseParseError(
                    f"malformed {name} row at line {lineno}: {chunk!r}") from exc
            if len(values) < min_cols:
                raise CaseParseError(
                    f"{name} row at line {lineno} has {len(values)} columns, "
                    f"expected at least {min_cols}")
            parsed.append((lineno, values))
    return parsed


def parse_matpower_case(text: str, case_name: str | None = None) -> RawCase:
    """Parse MATPOWER case text into a validated :class:`RawCase`.

    Loads are converted from MW to per-unit on the case base; out-of-service
    branches are dropped; negative reactances are folded to their absolute
    value with a warning.
    """
    lines = text.splitlines()

    if case_name is None:
        m = _NAME_RE.search(text)
        case_name = m.group(1) if m else "case"

    base_match = re.search(r"mpc\.baseMVA\s*=\s*([^;\s]+)\s*;", text)
    if base_match is None:
        raise CaseParseError("missing 'mpc.baseMVA' assignment")
    try:
        base_mva = float(base_match.group(1))
    except ValueError as exc:
        raise CaseParseError(f"malformed baseMVA value {base_match.group(1)!r}") from exc
    if base_mva <= 0:
        raise CaseValidationError(f"baseMVA must be positive, got {base_mva}")

    bus_rows = _parse_rows(_find_matrix_block(lines, "bus"), "bus", min_cols=3)
    branch_rows = _parse_rows(_find_matrix_block(lines, "branch"), "branch", min_cols=4)

    buses = []
    seen_ids = set()
    for lineno, row in bus_rows:
        bus_id = int(row[0])
        code = int(row[1])
        if bus_id in seen_ids:
            raise CaseValidationError(f"duplicate bus id {bus_id} (line {lineno})")
        seen_ids.add(bus_id)
        if code not in _BUS_TYPE_CODES:
            raise CaseValidationError(
                f"unsupported bus type code {code} for bus {bus_id} (line {lineno})")
        buses.append(RawBus(bus_id, _BUS_TYPE_CODES[code], row[2] / base_mva))

    slack_ids = [b.bus_id for b in buses if b.bus_type == BUS_SLACK]
    if len(slack_ids) != 1:
        raise CaseValidationError(
            f"expected exactly one slack bus, found {len(slack_ids)}: {slack_ids}")

    branches = []
    for lineno, row in branch_rows:
        from_bus, to_bus = int(row[0]), int(row[1])
        x = row[3]
        in_service = True if len(row) <= 10 else row[10] != 0
        if not in_service:
            continue
        for endpoint in (from_bus, to_bus):
            if endpoint not in seen_ids:
                raise CaseValidationError(
                    f"branch {from_bus}-{to_bus} references unknown bus "
                    f"{endpoint} (line {lineno})")
        if x == 0:
            raise CaseValidationError(
                f"branch {from_bus}-{to_bus} has zero reactance (line {lineno})")
        if x < 0:
            warnings.warn(
                f"branch {from_bus}-{to_bus}: negative reactance {x}, using |x|",
                stacklevel=2)
            x = abs(x)
        branches.append(RawBranch(from_bus, to_bus, x))

    return RawCase(case_name, base_mva, tuple(buses), tuple(branches))


def format_matpower_case(raw: RawCase) -> str:
    """Serialize a RawCase back to parseable MATPOWER text (loads in MW)."""
    code = {BUS_PQ: 1, BUS_PV: 2, BUS_SLACK: 3}
    out = [f"function mpc = {raw.case_name}",
           "mpc.version = '2';",
           f"mpc.baseMVA = {raw.base_mva!r};",
           "mpc.bus = ["]
    for b in raw.buses:
        pd = b.load * raw.base_mva
        out.append(f"\t{b.bus_id}\t{code[b.bus_type]}\t{pd!r}\t0\t0\t0\t1\t1\t0\t0\t1\t1.06\t0.94;")
    out.append("];")
    out.append("mpc.branch = [")
    for br in raw.branches:
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t0\t{br.reactance!r}\t0\t0\t0\t0\t0\t0\t1\t-360\t360;")
    out.append("];")
    return "\n".join(out) + "\n"


def load_bundled_case(name: str) -> str:
    """Text of a case file shipped with the package (case14, case30, case118)."""
    fname = name if name.endswith(".m") else f"{name}.m"
    return resources.files("fdialab.cases").joinpath(fname).read_text()


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def _check_connected(raw: RawCase) -> None:
    """Every bus must reach the slack through in-service branches."""
    index = {b.bus_id: i for i, b in enumerate(raw.buses)}
    parent = list(range(len(raw.buses)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for br in raw.branches:
        ra, rb = find(index[br.from_bus]), find(index[br.to_bus])
        if ra != rb:
            parent[rb] = ra

    root = find(index[raw.slack_bus])
    orphans = [b.bus_id for b in raw.buses if find(index[b.bus_id]) != root]
    if orphans:
        raise ObservabilityError(
            f"buses disconnected from the slack: {orphans[:10]}"
            + ("..." if len(orphans) > 10 else ""))


def build_grid_model(raw: RawCase, meter_config: MeterConfig = MeterConfig()) -> GridModel:
    """Assemble the DC measurement Jacobian for the default meter set.

    Flow row for branch (i, j): +1/x at the state column of i, -1/x at the
    state column of j (the slack column is omitted).  Injection rows are the
    signed sums of the flow rows of incident branches, which makes each
    injection meter read the bus's net injection under z = H x.
    """
    _check_connected(raw)

    bus_ids = tuple(b.bus_id for b in raw.buses)
    slack = raw.slack_bus
    state_ids = [b for b in bus_ids if b != slack]
    state_col = {b: i for i, b in enumerate(state_ids)}
    n_state = len(state_ids)

    def flow_row(from_bus: int, to_bus: int, x: float) -> np.ndarray:
        row = np.zeros(n_state)
        if from_bus != slack:
            row[state_col[from_bus]] += 1.0 / x
        if to_bus != slack:
            row[state_col[to_bus]] -= 1.0 / x
        return row

    meters: list[MeterDescriptor] = []
    rows: list[np.ndarray] = []

    for br in raw.branches:
        meters.append(MeterDescriptor(len(meters), "branch_flow",
                                      from_bus=br.from_bus, to_bus=br.to_bus))
        rows.append(flow_row(br.from_bus, br.to_bus, br.reactance))
    if meter_config.include_reverse_flows:
        for br in raw.branches:
            meters.append(MeterDescriptor(len(meters), "branch_flow",
                                          from_bus=br.to_bus, to_bus=br.from_bus))
            rows.append(flow_row(br.to_bus, br.from_bus, br.reactance))

    incident: dict[int, np.ndarray] = {b: np.zeros(n_state) for b in bus_ids}
    for br in raw.branches:
        row = flow_row(br.from_bus, br.to_bus, br.reactance)
        incident[br.from_bus] += row
        incident[br.to_bus] -= row
    for b in bus_ids:
        meters.append(MeterDescriptor(len(meters), "bus_injection", bus=b))
        rows.append(incident[b])

    h = np.vstack(rows)
    base_loads = np.array([b.load for b in raw.buses])
    return GridModel(case_name=raw.case_name, bus_ids=bus_ids, slack_bus=slack,
                     meters=tuple(meters), h_matrix=h, base_loads=base_loads)


# ---------------------------------------------------------------------------
# grid.json
# ---------------------------------------------------------------------------

def grid_to_json(grid: GridModel) -> dict:
    return {
        "version": GRID_JSON_VERSION,
        "case_name": grid.case_name,
        "n_bus": grid.n_bus,
        "bus_ids": list(grid.bus_ids),
        "slack_bus": grid.slack_bus,
        "meters": [m.to_json() for m in grid.meters],
        "h_matrix": [list(row) for row in grid.h_matrix],
        "base_loads": list(grid.base_loads),
        "noise_sigma": None if grid.noise_sigma is None else list(grid.noise_sigma),
    }


def grid_from_json(obj: dict) -> GridModel:
    if obj.get("version") != GRID_JSON_VERSION:
        raise CaseValidationError(f"unsupported grid.json version {obj.get('version')!r}")
    sigma = obj.get("noise_sigma")
    return GridModel(
        case_name=obj["case_name"],
        bus_ids=tuple(obj["bus_ids"]),
        slack_bus=obj["slack_bus"],
        meters=tuple(MeterDescriptor.from_json(m) for m in obj["meters"]),
        h_matrix=np.array(obj["h_matrix"], dtype=float),
        base_loads=np.array(obj["base_loads"], dtype=float),
        noise_sigma=None if sigma is None else np.array(sigma, dtype=float),
    )


def save_grid(grid: GridModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(grid_to_json(grid), fh, indent=1)
        fh.write("\n")


def load_grid(path) -> GridModel:
    with open(path) as fh:
        return grid_from_json(json.load(fh))
