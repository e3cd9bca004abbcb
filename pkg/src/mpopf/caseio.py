"""Case files, random case generation, and run reports.

Case files are versioned JSON documents: a bus list (first entry is the
slack), per-line admittance blocks as nested [re, im] pairs, the slack
reference voltage, and one cost/bound record per bus-phase where ``null``
stands for an absent (infinite) bound.  Voltage bounds may be given squared
or as magnitudes, selected by an explicit flag; they are squared on ingest.
Units are volts for voltages, siemens for admittances, and watts / vars for
injection bounds.

Reports serialize to a canonical JSON form (sorted keys, fixed float
formatting) so identical runs produce identical bytes, or to a short text
summary headed by the two largest eigenvalues of the solved matrix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import importlib.resources
import json
import math
from typing import Any

import numpy as np

from .exactness import ConditionReport, RankCertificate
from .network import Line, MultiphaseNetwork, NetworkError
from .opf import CaseError, OpfCase
from .perturbation import PerturbationReport

SCHEMA_VERSION = 1
PROFILES = ("corollary-safe", "a3-safe", "adversarial")


class CaseFileError(ValueError):
    """Raised with a path-style location for schema violations."""


def _fail(path: str, message: str) -> None:
    raise CaseFileError(f"{path}: {message}")


def _get(doc: dict, key: str, kind, path: str):
    if key not in doc:
        _fail(f"{path}/{key}", "missing")
    val = doc[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        _fail(f"{path}/{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _complex_pair(val, path: str) -> complex:
    if not (isinstance(val, list) and len(val) == 2 and all(isinstance(x, (int, float)) for x in val)):
        _fail(path, "expected a [re, im] pair")
    return complex(float(val[0]), float(val[1]))


def _bound(val, path: str, side: str) -> float:
    if val is None:
        return -math.inf if side == "lo" else math.inf
    if not isinstance(val, (int, float)) or isinstance(val, bool) or not math.isfinite(val):
        _fail(path, "expected a finite number or null")
    return float(val)


def case_from_dict(doc: dict, path: str = "case") -> OpfCase:
    if not isinstance(doc, dict):
        _fail(path, "expected an object")
    version = _get(doc, "schema_version", int, path)
    if version != SCHEMA_VERSION:
        _fail(f"{path}/schema_version", f"unsupported version {version}")
    m = _get(doc, "phase_count", int, path)
    buses = _get(doc, "buses", list, path)
    if not buses or not all(isinstance(bn, str) for bn in buses):
        _fail(f"{path}/buses", "expected a non-empty list of bus names")
    n = len(buses)
    index = {bn: i for i, bn in enumerate(buses)}
    if len(index) != n:
        _fail(f"{path}/buses", "duplicate bus names")

    slack = _get(doc, "slack_voltage", list, path)
    if len(slack) != m:
        _fail(f"{path}/slack_voltage", f"expected {m} entries")
    v_ref = np.array([_complex_pair(v, f"{path}/slack_voltage/{i}") for i, v in enumerate(slack)])

    lines = []
    for li, entry in enumerate(_get(doc, "lines", list, path)):
        lp = f"{path}/lines/{li}"
        if not isinstance(entry, dict):
            _fail(lp, "expected an object")
        fr = _get(entry, "from", str, lp)
        to = _get(entry, "to", str, lp)
        for bn in (fr, to):
            if bn not in index:
                _fail(lp, f"undeclared bus {bn!r}")
        block = _get(entry, "admittance", list, lp)
        if len(block) != m or any(len(rw) != m for rw in block):
            _fail(f"{lp}/admittance", f"expected an {m}x{m} block")
        y = np.array(
            [[_complex_pair(block[r][c], f"{lp}/admittance/{r}/{c}") for c in range(m)] for r in range(m)]
        )
        j, k = index[fr], index[to]
        if j > k:
            j, k = k, j
            y = y  # block is attached to the unordered pair
        lines.append(Line(j, k, y))

    form = _get(doc, "voltage_bound_form", str, path)
    if form not in ("squared", "magnitude"):
        _fail(f"{path}/voltage_bound_form", "expected 'squared' or 'magnitude'")

    records = _get(doc, "bus_phase", dict, path)
    grids = {key: np.zeros((n, m)) for key in ("c_re", "c_im", "v_lo", "v_hi", "p_lo", "p_hi", "q_lo", "q_hi")}
    for bn in buses:
        bp = f"{path}/bus_phase/{bn}"
        if bn not in records:
            _fail(bp, "missing")
        recs = records[bn]
        if not isinstance(recs, list) or len(recs) != m:
            _fail(bp, f"expected {m} phase records")
        j = index[bn]
        for ph, rec in enumerate(recs):
            rp = f"{bp}/{ph}"
            if not isinstance(rec, dict):
                _fail(rp, "expected an object")
            grids["c_re"][j, ph] = _get(rec, "cost_re", float, rp)
            grids["c_im"][j, ph] = _get(rec, "cost_im", float, rp)
            v_lo = _get(rec, "v_lo", float, rp)
            v_hi = _get(rec, "v_hi", float, rp)
            if form == "magnitude":
                if v_lo < 0 or v_hi < 0:
                    _fail(rp, "magnitude-form voltage bounds must be nonnegative")
                v_lo, v_hi = v_lo ** 2, v_hi ** 2
            if v_lo > v_hi:
                _fail(rp, f"voltage bounds out of order ({v_lo} > {v_hi})")
            grids["v_lo"][j, ph] = v_lo
            grids["v_hi"][j, ph] = v_hi
            grids["p_lo"][j, ph] = _bound(rec.get("p_lo"), f"{rp}/p_lo", "lo")
            grids["p_hi"][j, ph] = _bound(rec.get("p_hi"), f"{rp}/p_hi", "hi")
            grids["q_lo"][j, ph] = _bound(rec.get("q_lo"), f"{rp}/q_lo", "lo")
            grids["q_hi"][j, ph] = _bound(rec.get("q_hi"), f"{rp}/q_hi", "hi")

    try:
        network = MultiphaseNetwork(n=n, m=m, lines=tuple(lines), names=tuple(buses))
        return OpfCase(network=network, v_ref=v_ref, **grids)
    except (NetworkError, CaseError) as exc:
        raise CaseFileError(f"{path}: {exc}") from exc


def parse_case(path: str) -> OpfCase:
    """Parse and fully validate a case file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CaseFileError(f"{path}: invalid JSON ({exc})") from exc
    return case_from_dict(doc, path="case")


def bundled_case_path(name: str = "eleven_bus") -> str:
    """Path of a case file shipped with the package.

    The eleven-bus, three-phase case mirrors a published illustrative
    feeder layout; its admittances are synthesized (the original data is
    not public), so only its qualitative behavior is meaningful: the
    condition verdict pattern, the nine active reactive caps, and the
    rank-1 certificate.
    """
    root = importlib.resources.files("mpopf").joinpath("data", f"{name}.json")
    with importlib.resources.as_file(root) as path:
        return str(path)


def load_bundled_case(name: str = "eleven_bus") -> OpfCase:
    return parse_case(bundled_case_path(name))


def _num(x: float) -> float | None:
    return None if math.isinf(x) else float(x)


def case_to_dict(case: OpfCase) -> dict:
    net = case.network
    m = net.m
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "phase_count": m,
        "buses": list(net.names),
        "slack_voltage": [[v.real, v.imag] for v in case.v_ref],
        "voltage_bound_form": "squared",
        "lines": [
            {
                "from": net.names[ln.j],
                "to": net.names[ln.k],
                "admittance": [[[ln.y[r, c].real, ln.y[r, c].imag] for c in range(m)] for r in range(m)],
            }
            for ln in net.lines
        ],
        "bus_phase": {
            net.names[j]: [
                {
                    "cost_re": float(case.c_re[j, ph]),
                    "cost_im": float(case.c_im[j, ph]),
                    "v_lo": float(case.v_lo[j, ph]),
                    "v_hi": float(case.v_hi[j, ph]),
                    "p_lo": _num(case.p_lo[j, ph]),
                    "p_hi": _num(case.p_hi[j, ph]),
                    "q_lo": _num(case.q_lo[j, ph]),
                    "q_hi": _num(case.q_hi[j, ph]),
                }
                for ph in range(m)
            ]
            for j in range(net.n)
        },
    }
    return doc


def canonical_json(doc: Any) -> str:
    """Machine-stable JSON: sorted keys, fixed float formatting at 17
    significant digits, no locale-dependent parts."""

    def render(obj) -> str:
        if obj is None:
            return "null"
        if obj is True:
            return "true"
        if obj is False:
            return "false"
        if isinstance(obj, str):
            return json.dumps(obj)
        if isinstance(obj, int):
            return str(obj)
        if isinstance(obj, float):
            if math.isnan(obj) or math.isinf(obj):
                raise ValueError("non-finite float in report")
            text = format(obj, ".17g")
            return text
        if isinstance(obj, (list, tuple)):
            return "[" + ",".join(render(x) for x in obj) + "]"
        if isinstance(obj, dict):
            items = sorted(obj.items())
            return "{" + ",".join(json.dumps(k) + ":" + render(v) for k, v in items) + "}"
        raise TypeError(f"cannot serialize {type(obj).__name__}")

    return render(doc)


def write_case(case: OpfCase, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(case_to_dict(case)))
        fh.write("\n")


def case_digest(case: OpfCase) -> str:
    return hashlib.sha256(canonical_json(case_to_dict(case)).encode()).hexdigest()


def generate_random_case(seed: int, n: int, m: int, profile: str = "corollary-safe") -> OpfCase:
    """Deterministic random case on a uniform random tree.

    Costs always sit on a maximal independent set of the tree.
    'corollary-safe' adds no injection bounds at all, so the primal-only
    condition check passes by construction; 'a3-safe' co-locates one-sided
    bounds with the costs, on the side the cost sign tolerates, so any
    activity pattern stays sign-aligned; 'adversarial' additionally makes a
    neighbor of a cost bus critical, breaking non-adjacency on purpose.
    """
    if n < 2 or m < 1:
        raise CaseError("need n >= 2 and m >= 1")
    if profile not in PROFILES:
        raise CaseError(f"unknown profile {profile!r}; choose from {PROFILES}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, n, m, PROFILES.index(profile))))

    # uniform random labelled tree decoded from a random generator sequence
    if n == 2:
        edges = [(0, 1)]
    else:
        prufer = [int(v) for v in rng.integers(0, n, size=n - 2)]
        degree = np.ones(n, dtype=int)
        for v in prufer:
            degree[v] += 1
        edges = []
        heap = [int(i) for i in range(n) if degree[i] == 1]
        heapq.heapify(heap)
        for v in prufer:
            leaf = heapq.heappop(heap)
            edges.append((min(leaf, v), max(leaf, v)))
            degree[leaf] -= 1
            degree[v] -= 1
            if degree[v] == 1:
                heapq.heappush(heap, v)
        last = [int(i) for i in range(n) if degree[i] == 1]
        edges.append((min(last), max(last)))

    def random_block() -> np.ndarray:
        for _ in range(100):
            base = rng.normal(size=(m, m)) - 1j * (2.0 + rng.random(size=(m, m)))
            y = base + np.diag(3.0 + rng.random(m) - 1j * (6.0 + rng.random(m)))
            sv = np.linalg.svd(y, compute_uv=False)
            if sv[-1] > 1e-6 * sv[0]:
                return y
        raise CaseError("failed to draw an invertible admittance block")

    lines = tuple(Line(j, k, random_block()) for j, k in sorted(edges))
    adjacency: list[set[int]] = [set() for _ in range(n)]
    for j, k in edges:
        adjacency[j].add(k)
        adjacency[k].add(j)

    # Costs go on one side of the tree's 2-coloring: an independent set that
    # is also a vertex cover.  Independence keeps the critical buses
    # non-adjacent; covering every edge makes the objective sensitive to
    # every cross-bus term of the lifted matrix, which keeps the optimum
    # generically unique.  (With an uncovered edge the solution matrix has a
    # free completion along it and an interior-point solver returns a
    # higher-rank center of the optimal face.)
    color = np.full(n, -1, dtype=int)
    color[0] = 0
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adjacency[u]:
            if color[v] < 0:
                color[v] = 1 - color[u]
                stack.append(v)
    side = int(rng.integers(0, 2))
    independent = sorted(int(j) for j in range(n) if color[j] == side)

    c_re = np.zeros((n, m))
    c_im = np.zeros((n, m))
    p_lo = np.full((n, m), -math.inf)
    p_hi = np.full((n, m), math.inf)
    q_lo = np.full((n, m), -math.inf)
    q_hi = np.full((n, m), math.inf)

    def put_cost(j: int) -> None:
        c_re[j] = rng.choice([-1.0, 1.0]) * (0.5 + rng.random(m))
        c_im[j] = rng.choice([-1.0, 1.0]) * (0.5 + rng.random(m))

    def put_bounds(j: int, align_with_cost: bool) -> None:
        # one bound per bus-phase: a phase with both its real and reactive
        # injection capped can end up with both caps active, freezing that
        # phase's objective contribution and leaving a flat optimal face
        for ph in range(m):
            level = 0.2 + 0.6 * rng.random()
            on_p = rng.random() < 0.5
            if align_with_cost:
                up = (c_re[j, ph] >= 0) if on_p else (c_im[j, ph] >= 0)
            else:
                up = rng.random() < 0.5
            if on_p:
                if up:
                    p_hi[j, ph] = level
                else:
                    p_lo[j, ph] = -level
            else:
                if up:
                    q_hi[j, ph] = level
                else:
                    q_lo[j, ph] = -level

    for j in independent:
        put_cost(j)
    if profile == "a3-safe":
        # bounds co-located with the costs, one-sided on the side the cost
        # sign tolerates, so any activity pattern stays sign-aligned
        for j in independent:
            put_bounds(j, align_with_cost=True)
    elif profile == "adversarial":
        # force two adjacent critical buses: pick an edge touching the
        # independent set and make its other endpoint critical too
        candidates = [e for e in edges if (e[0] in independent) != (e[1] in independent)]
        j, k = candidates[int(rng.integers(0, len(candidates)))]
        other = k if j in independent else j
        put_cost(other)
        put_bounds(other, align_with_cost=False)

    angles = -2j * np.pi * np.arange(m) / m
    v_ref = 1.05 * np.exp(angles)
    v_lo = np.full((n, m), 0.81)
    v_hi = np.full((n, m), 1.21)
    network = MultiphaseNetwork(n=n, m=m, lines=lines, names=tuple(str(i) for i in range(n)))
    return OpfCase(
        network=network,
        c_re=c_re, c_im=c_im,
        v_lo=v_lo, v_hi=v_hi,
        p_lo=p_lo, p_hi=p_hi, q_lo=q_lo, q_hi=q_hi,
        v_ref=v_ref,
    )


# ---------------------------------------------------------------------------
# run reports


def _verdict_entry(v) -> dict | None:
    if v is None:
        return None
    return {
        "verdict": "pass" if v.passed else "fail",
        "witnesses": [list(w) if isinstance(w, (tuple, list)) else w for w in v.witnesses],
        "note": v.note,
    }


def conditions_to_dict(report: ConditionReport) -> dict:
    return {
        "mode": report.mode,
        "a2_tree": _verdict_entry(report.a2_tree),
        "a3_non_adjacent": _verdict_entry(report.a3_non_adjacent),
        "a4_disjoint": _verdict_entry(report.a4_disjoint),
        "a5_sign_aligned": _verdict_entry(report.a5_sign_aligned),
        "corollary_primal": _verdict_entry(report.corollary_primal),
        "slater_margin": report.slater_margin,
    }


def rank_to_dict(cert: RankCertificate) -> dict:
    return {
        "eigenvalues": [float(x) for x in cert.eigenvalues],
        "ratio": cert.ratio,
        "verdict": "pass" if cert.passed else "fail",
    }


def perturbation_to_dict(report: PerturbationReport) -> dict:
    return {
        "base_objective": report.base_objective,
        "stability_onset": report.stability_onset,
        "note": report.note,
        "steps": [
            {
                "eps": st.eps,
                "status": st.status,
                "objective": st.objective,
                "rank_ratio": None if st.rank is None else st.rank.ratio,
                "rank": "not-run" if st.rank is None else ("pass" if st.rank.passed else "fail"),
                "signs": "not-run" if st.signs is None else ("pass" if st.signs.passed else "fail"),
                "g_invertible": "not-run"
                if st.g_invertibility is None
                else ("pass" if st.g_invertibility.passed else "fail"),
                "distance_to_base": st.distance_to_base,
                "active_match": st.active_match,
            }
            for st in report.steps
        ],
    }


def voltages_to_dict(V: np.ndarray) -> dict:
    mag = np.abs(V)
    ang = np.degrees(np.angle(V))
    return {
        "rectangular": [[float(v.real), float(v.imag)] for v in V],
        "magnitude": [float(x) for x in mag],
        "angle_deg": [float(x) for x in ang],
    }


@dataclasses.dataclass(frozen=True)
class RunReport:
    """Everything one command run produced, in JSON-native form."""

    command: str
    tool_version: str
    case_digest: str
    solver: dict | None = None
    objective: float | None = None
    rank: dict | None = None
    conditions: dict | None = None
    voltages: dict | None = None
    perturbation: dict | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def report_from_dict(doc: dict) -> RunReport:
    fields = {f.name for f in dataclasses.fields(RunReport)}
    unknown = set(doc) - fields
    if unknown:
        raise CaseFileError(f"report: unknown fields {sorted(unknown)}")
    return RunReport(**doc)


def solver_stats(solution) -> dict:
    return {
        "objective": solution.objective,
        "gap": solution.gap,
        "iterations": solution.iterations,
        "complementarity": solution.complementarity,
        "primal_infeasibility": solution.primal_infeasibility,
        "dual_infeasibility": solution.dual_infeasibility,
    }


def render_text(report: RunReport) -> str:
    lines = [f"mpopf {report.command} (version {report.tool_version})"]
    lines.append(f"case digest: {report.case_digest}")
    if report.error:
        lines.append(f"error: {report.error}")
    if report.rank is not None:
        ev = report.rank["eigenvalues"]
        head = f"{ev[0]:.4g}"
        second = f"{ev[1]:.3g}" if len(ev) > 1 else "n/a"
        lines.append(f"largest two eigenvalues: {head} and {second}")
        lines.append(f"rank-1 certificate: {report.rank['verdict']} (ratio {report.rank['ratio']:.3g})")
    if report.objective is not None:
        lines.append(f"objective: {report.objective:.12g}")
    if report.solver is not None:
        lines.append(
            "solver: gap {gap:.2e}, iterations {iterations}, complementarity {complementarity:.2e}".format(
                **report.solver
            )
        )
    if report.conditions is not None:
        cond = report.conditions
        mark = {"pass": "ok", "fail": "FAIL", "not-run": "not run"}
        parts = []
        for key, label in (
            ("a2_tree", "A2 tree"),
            ("a3_non_adjacent", "A3 non-adjacent"),
            ("a4_disjoint", "A4 disjoint"),
            ("a5_sign_aligned", "A5 sign-aligned"),
            ("corollary_primal", "primal-only corollary"),
        ):
            entry = cond.get(key)
            if entry is None:
                continue
            text = f"{label}: {mark[entry['verdict']]}"
            if entry["witnesses"]:
                text += f" (witnesses: {entry['witnesses']})"
            parts.append(text)
        lines.append("conditions [" + cond["mode"] + "]: " + "; ".join(parts))
        if cond.get("slater_margin") is not None:
            lines.append(f"slater margin: {cond['slater_margin']:.6g}")
    if report.voltages is not None:
        mags = report.voltages["magnitude"]
        lines.append(
            f"recovered voltages: {len(mags)} bus-phases, |V| in [{min(mags):.5g}, {max(mags):.5g}]"
        )
    if report.perturbation is not None:
        pert = report.perturbation
        ok = sum(1 for st in pert["steps"] if st["status"] == "ok")
        lines.append(
            f"perturbation sweep: {ok}/{len(pert['steps'])} solves converged, "
            f"stability onset {pert['stability_onset']}"
        )
        for st in pert["steps"]:
            lines.append(
                "  eps {eps:.3e}: {status}, rank {rank}, signs {signs}, edge-invertible {g_invertible}".format(**st)
            )
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, path: str, format: str = "json") -> None:
    """Serialize a report; JSON output is byte-stable for identical runs."""
    if format == "json":
        payload = canonical_json(report.to_dict()) + "\n"
    elif format == "text":
        payload = render_text(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload)


def parse_report(path: str) -> RunReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))
