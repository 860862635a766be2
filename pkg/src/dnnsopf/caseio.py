"""MATPOWER case parsing, admittance assembly and variable bookkeeping.

All quantities are converted to per-unit on ``base_mva`` at parse time.
Generator cost coefficients are kept in MATPOWER units ($/h with power in
MW); :meth:`GenRecord.cost` performs the conversion.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SLACK, GENERATOR, LOAD = "slack", "generator", "load"
_BUS_TYPES = {1: LOAD, 2: GENERATOR, 3: SLACK}
_TYPE_CODES = {v: k for k, v in _BUS_TYPES.items()}

DATA_DIR = Path(__file__).parent / "data"


class CaseParseError(ValueError):
    """The case text is not a readable MATPOWER case."""


class CaseValidationError(ValueError):
    """The case parsed but violates a structural invariant."""


class SingularBranchError(ValueError):
    """A branch has zero series impedance."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    type: str
    p_d: float
    q_d: float
    g_sh: float
    b_sh: float
    v_min: float
    v_max: float


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    rate: float  # p.u.; inf when unlimited
    tap: float  # 0 means nominal ratio
    shift: float  # degrees


@dataclass(frozen=True)
class GenRecord:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c2: float
    c1: float
    c0: float

    def cost(self, p, base_mva):
        """Generation cost in $/h for output ``p`` in p.u."""
        mw = np.asarray(p) * base_mva
        return self.c2 * mw**2 + self.c1 * mw + self.c0

    def marginal_cost(self, p, base_mva):
        """d(cost)/dp with ``p`` in p.u., in $/h per p.u."""
        mw = np.asarray(p) * base_mva
        return (2.0 * self.c2 * mw + self.c1) * base_mva


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    generators: tuple[GenRecord, ...]
    name: str = ""

    def __post_init__(self):
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_position(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_position(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == SLACK)

    def nominal_loads(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.array([b.p_d for b in self.buses])
        q = np.array([b.q_d for b in self.buses])
        return p, q

    def to_json(self) -> str:
        def enc(v):
            return None if isinstance(v, float) and np.isinf(v) else v

        d = asdict(self)
        d["branches"] = [{k: enc(v) for k, v in br.items()} for br in d["branches"]]
        return json.dumps(d, indent=1)


@dataclass(frozen=True)
class AdmittanceMatrix:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


@dataclass(frozen=True)
class BranchAdmittances:
    """Per-branch two-port admittances and bus incidence (0-based)."""

    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray


@dataclass(frozen=True)
class VariableIndex:
    """Positions of the controllable, uncertain and state variables.

    ``gen_buses`` lists generator bus positions with the slack first; the
    dispatch vector is ``[v_set(gen_buses), p_g(gen_buses[1:])]``. The state
    vector is ``[v(all buses), theta(all buses except slack)]``.
    """

    n_bus: int
    slack: int
    gen_buses: np.ndarray
    gen_order: np.ndarray  # generator record index for each entry of gen_buses
    load_buses: np.ndarray
    angle_buses: np.ndarray
    x_lower: np.ndarray = field(repr=False)
    x_upper: np.ndarray = field(repr=False)

    @property
    def n_gen(self) -> int:
        return len(self.gen_buses)

    @property
    def dim_x(self) -> int:
        return 2 * self.n_gen - 1

    @property
    def dim_u(self) -> int:
        return 2 * self.n_bus - 1

    @property
    def dim_phi(self) -> int:
        return 2 * self.n_bus

    def theta_column(self) -> np.ndarray:
        """Column of each bus angle in u, -1 for the slack."""
        col = -np.ones(self.n_bus, dtype=int)
        col[self.angle_buses] = self.n_bus + np.arange(self.n_bus - 1)
        return col


# --------------------------------------------------------------------------
# parsing

_MATRIX_RE = r"mpc\.{name}\s*=\s*\[(.*?)\]\s*;?"


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _read_matrix(text: str, name: str) -> np.ndarray | None:
    m = re.search(_MATRIX_RE.format(name=name), text, flags=re.S)
    if m is None:
        return None
    rows = []
    for chunk in re.split(r"[;\n]", m.group(1)):
        vals = chunk.replace(",", " ").split()
        if vals:
            try:
                rows.append([float(v) for v in vals])
            except ValueError as exc:
                raise CaseParseError(f"non-numeric entry in {name} table: {chunk.strip()!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), np.nan)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse MATPOWER case text into a :class:`NetworkCase`."""
    clean = _strip_comments(text)
    m = re.search(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)", clean)
    if m is None:
        raise CaseParseError("missing baseMVA")
    base = float(m.group(1))
    if not base > 0:
        raise CaseValidationError("baseMVA must be positive")

    tables = {}
    for key, label in [("bus", "bus"), ("gen", "generator"), ("branch", "branch"), ("gencost", "gencost")]:
        mat = _read_matrix(clean, key)
        if mat is None:
            raise CaseParseError(f"missing {label} table")
        tables[key] = mat
    bus, gen, branch, gencost = tables["bus"], tables["gen"], tables["branch"], tables["gencost"]
    if bus.shape[1] < 13 or gen.shape[1] < 10 or branch.shape[1] < 11:
        raise CaseParseError("case tables have too few columns")
    if gencost.shape[0] < gen.shape[0]:
        raise CaseParseError("gencost table has fewer rows than the generator table")

    buses = []
    for row in bus:
        code = int(row[1])
        if code not in _BUS_TYPES:
            raise CaseValidationError(f"unsupported bus type {code} at bus {int(row[0])}")
        buses.append(
            BusRecord(
                id=int(row[0]),
                type=_BUS_TYPES[code],
                p_d=row[2] / base,
                q_d=row[3] / base,
                g_sh=row[4] / base,
                b_sh=row[5] / base,
                v_min=float(row[12]),
                v_max=float(row[11]),
            )
        )

    generators = []
    for row, cost in zip(gen, gencost):
        if row[7] <= 0:
            continue
        if int(cost[0]) != 2:
            raise CaseValidationError("only polynomial generator costs (model 2) are supported")
        n = int(cost[3])
        coeffs = cost[4 : 4 + n]
        if n > 3 or np.any(np.isnan(coeffs)):
            raise CaseValidationError(f"polynomial cost of degree {n - 1} is not supported")
        c2, c1, c0 = np.concatenate([np.zeros(3 - n), coeffs])
        generators.append(
            GenRecord(
                bus=int(row[0]),
                p_min=row[9] / base,
                p_max=row[8] / base,
                q_min=row[4] / base,
                q_max=row[3] / base,
                c2=float(c2),
                c1=float(c1),
                c0=float(c0),
            )
        )

    branches = []
    for row in branch:
        if row[10] <= 0:
            continue
        rate = row[5] / base
        rate = float(rate) if rate > 0 else np.inf  # 0 means unlimited
        branches.append(
            BranchRecord(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=float(row[2]),
                x=float(row[3]),
                b=float(row[4]),
                rate=rate,
                tap=float(row[8]),
                shift=float(row[9]),
            )
        )

    # a generator bus without an in-service unit behaves as a load bus
    gen_ids = {g.bus for g in generators}
    buses = [
        BusRecord(**{**asdict(b), "type": LOAD}) if b.type == GENERATOR and b.id not in gen_ids else b
        for b in buses
    ]
    buses = [
        BusRecord(**{**asdict(b), "type": GENERATOR}) if b.type == LOAD and b.id in gen_ids else b
        for b in buses
    ]
    return NetworkCase(base, tuple(buses), tuple(branches), tuple(generators), name=name)


def load_case(path: str | Path) -> NetworkCase:
    """Read a case from ``path``, or from a bundled fixture given its bare name."""
    p = Path(path)
    if not p.exists():
        bundled = DATA_DIR / (p.name if p.suffix == ".m" else p.name + ".m")
        if p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"case file not found: {path}")
    return parse_case(p.read_text(), name=p.stem)


def validate_case(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    slacks = [b.id for b in case.buses if b.type == SLACK]
    if len(slacks) != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {len(slacks)}")
    known = set(ids)
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseValidationError(f"branch refers to unknown bus {end}")
    seen = set()
    for g in case.generators:
        if g.bus not in known:
            raise CaseValidationError(f"generator refers to unknown bus {g.bus}")
        if g.bus in seen:
            raise CaseValidationError(f"more than one generator at bus {g.bus}")
        seen.add(g.bus)
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"inverted generator limits at bus {g.bus}")
    if slacks[0] not in seen:
        raise CaseValidationError("slack bus hosts no generator")
    for b in case.buses:
        if b.v_min > b.v_max:
            raise CaseValidationError(f"inverted voltage limits at bus {b.id}")
    if not case.base_mva > 0:
        raise CaseValidationError("baseMVA must be positive")


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_case(case: NetworkCase) -> str:
    """Write ``case`` back to MATPOWER syntax (the columns this package reads)."""
    base = case.base_mva
    out = [f"function mpc = {case.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "mpc.bus = ["]
    for b in case.buses:
        row = [b.id, _TYPE_CODES[b.type], b.p_d * base, b.q_d * base, b.g_sh * base, b.b_sh * base,
               1, 1.0, 0.0, 0.0, 1, b.v_max, b.v_min]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "mpc.gen = ["]
    for g in case.generators:
        row = [g.bus, 0.0, 0.0, g.q_max * base, g.q_min * base, 1.0, base, 1, g.p_max * base, g.p_min * base]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        rate = 0.0 if np.isinf(br.rate) else br.rate * base
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b, rate, rate, rate, br.tap, br.shift, 1, -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "mpc.gencost = ["]
    for g in case.generators:
        row = [2, 0, 0, 3, g.c2, g.c1, g.c0]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# network matrices

def branch_admittances(case: NetworkCase) -> BranchAdmittances:
    pos = case.bus_position()
    n = len(case.branches)
    f = np.empty(n, dtype=int)
    t = np.empty(n, dtype=int)
    yff, yft, ytf, ytt = (np.empty(n, dtype=complex) for _ in range(4))
    for i, br in enumerate(case.branches):
        if br.r == 0 and br.x == 0:
            raise SingularBranchError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        ys = 1.0 / complex(br.r, br.x)
        ratio = br.tap if br.tap != 0 else 1.0
        a = ratio * np.exp(1j * np.deg2rad(br.shift))
        y_tt = ys + 0.5j * br.b
        f[i], t[i] = pos[br.from_bus], pos[br.to_bus]
        yff[i] = y_tt / (a * np.conj(a))
        yft[i] = -ys / np.conj(a)
        ytf[i] = -ys / a
        ytt[i] = y_tt
    return BranchAdmittances(f, t, yff, yft, ytf, ytt)


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix with the standard pi branch model."""
    n = case.n_bus
    br = branch_admittances(case)
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (br.f, br.f), br.yff)
    np.add.at(Y, (br.f, br.t), br.yft)
    np.add.at(Y, (br.t, br.f), br.ytf)
    np.add.at(Y, (br.t, br.t), br.ytt)
    Y[np.diag_indices(n)] += np.array([complex(b.g_sh, b.b_sh) for b in case.buses])
    G, B = Y.real.copy(), Y.imag.copy()
    G.setflags(write=False)
    B.setflags(write=False)
    return AdmittanceMatrix(G, B)


def partition_variables(case: NetworkCase) -> VariableIndex:
    pos = case.bus_position()
    slack = case.slack_position
    gens = sorted(range(len(case.generators)), key=lambda k: (pos[case.generators[k].bus] != slack, pos[case.generators[k].bus]))
    gen_buses = np.array([pos[case.generators[k].bus] for k in gens], dtype=int)
    is_gen = np.zeros(case.n_bus, dtype=bool)
    is_gen[gen_buses] = True
    load_buses = np.flatnonzero(~is_gen)
    angle_buses = np.array([i for i in range(case.n_bus) if i != slack], dtype=int)

    v_lo = np.array([case.buses[i].v_min for i in gen_buses])
    v_hi = np.array([case.buses[i].v_max for i in gen_buses])
    p_lo = np.array([case.generators[k].p_min for k in gens[1:]])
    p_hi = np.array([case.generators[k].p_max for k in gens[1:]])
    return VariableIndex(
        n_bus=case.n_bus,
        slack=slack,
        gen_buses=gen_buses,
        gen_order=np.array(gens, dtype=int),
        load_buses=load_buses,
        angle_buses=angle_buses,
        x_lower=np.concatenate([v_lo, p_lo]),
        x_upper=np.concatenate([v_hi, p_hi]),
    )
