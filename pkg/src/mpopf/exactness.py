"""Exactness certification for solved OPF relaxations.

Given a solved relaxation this module decides which injection bounds are
active, derives the critical bus sets, evaluates the non-adjacency and
sign-alignment conditions that guarantee a rank-1 optimum on trees,
certifies the rank of the solution, recovers the physical voltage profile,
and assembles and checks the dual slack matrix (positive semidefiniteness,
complementarity, block-invertibility on edges with zero blocks off-tree).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import sdp
from .network import (
    TopologyReport,
    all_bus_phases,
    assemble_bus_admittance,
    injection_matrices,
    injections_from_lifted,
)
from .opf import (
    OpfCase,
    build_cost,
    build_relaxation,
    make_bound_tag,
    make_slack_tag,
)

TOL_ACTIVE = 1e-6
TOL_RANK = 1e-6
TOL_GINV = 1e-7
TOL_SUPPORT = 1e-7


class AnalysisError(ValueError):
    """Base class for analysis failures."""


class DegenerateActivityError(AnalysisError):
    """Both bounds of one injection attained simultaneously."""


class ZeroMatrixError(AnalysisError):
    """Solution matrix has no positive leading eigenvalue."""


class RecoveryMismatchError(AnalysisError):
    """Voltage recovery could not be aligned with the slack reference."""


@dataclasses.dataclass(frozen=True)
class ActivityFlags:
    """Per bus-phase indicators of which injection bound is attained:
    +1 upper, -1 lower, 0 neither."""

    f_p: np.ndarray
    f_q: np.ndarray

    def __post_init__(self):
        for name in ("f_p", "f_q"):
            arr = np.asarray(getattr(self, name), dtype=int)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def active_buses(self) -> frozenset[int]:
        rows = np.nonzero(np.any((self.f_p != 0) | (self.f_q != 0), axis=1))[0]
        return frozenset(int(j) for j in rows)

    def none_active(self) -> bool:
        return not np.any(self.f_p) and not np.any(self.f_q)


def zero_flags(n: int, m: int) -> ActivityFlags:
    return ActivityFlags(np.zeros((n, m), dtype=int), np.zeros((n, m), dtype=int))


def detect_active_sets(W: np.ndarray, case: OpfCase, tol_act: float = TOL_ACTIVE) -> ActivityFlags:
    """Flag the injection bounds attained by a solved lifted matrix.

    Activity is judged relative to max(1, |bound|).  A bound can only be
    flagged if it is finite; simultaneous attainment of both sides is a
    degeneracy and raises instead of being silently resolved.
    """
    net = case.network
    Y = assemble_bus_admittance(net)
    p, q = injections_from_lifted(Y, W)
    p = p.reshape(net.n, net.m)
    q = q.reshape(net.n, net.m)
    f_p = np.zeros((net.n, net.m), dtype=int)
    f_q = np.zeros((net.n, net.m), dtype=int)
    for val, lo, hi, out, what in (
        (p, case.p_lo, case.p_hi, f_p, "real"),
        (q, case.q_lo, case.q_hi, f_q, "reactive"),
    ):
        hi_ok = np.isfinite(hi) & (np.abs(val - hi) <= tol_act * np.maximum(1.0, np.abs(hi)))
        lo_ok = np.isfinite(lo) & (np.abs(val - lo) <= tol_act * np.maximum(1.0, np.abs(lo)))
        clash = hi_ok & lo_ok
        if np.any(clash):
            j, ph = np.argwhere(clash)[0]
            raise DegenerateActivityError(
                f"{what} injection at bus {net.names[j]} phase {ph + 1} attains both bounds"
            )
        out[hi_ok] = 1
        out[lo_ok] = -1
    return ActivityFlags(f_p, f_q)


@dataclasses.dataclass(frozen=True)
class CriticalSets:
    """Bus sets steering the exactness conditions: buses carrying cost terms,
    buses with an active injection bound, and buses with any finite
    injection bound (the a-priori superset of the active set)."""

    objective: frozenset[int]
    active: frozenset[int]
    bounded: frozenset[int]


def critical_sets(case: OpfCase, flags: ActivityFlags | None = None) -> CriticalSets:
    n, m = case.network.n, case.network.m
    obj = frozenset(
        int(j) for j in range(n) if np.any(case.c_re[j] != 0.0) or np.any(case.c_im[j] != 0.0)
    )
    bounded = frozenset(
        int(j)
        for j in range(n)
        if np.any(np.isfinite(case.p_lo[j]))
        or np.any(np.isfinite(case.p_hi[j]))
        or np.any(np.isfinite(case.q_lo[j]))
        or np.any(np.isfinite(case.q_hi[j]))
    )
    active = flags.active_buses() if flags is not None else frozenset()
    return CriticalSets(objective=obj, active=active, bounded=bounded)


@dataclasses.dataclass(frozen=True)
class ConditionVerdict:
    passed: bool
    witnesses: tuple = ()
    note: str = ""


@dataclasses.dataclass(frozen=True)
class ConditionReport:
    """Verdicts of the tree / non-adjacency / disjointness / sign-alignment
    conditions.  In a-priori mode the constraint side uses the finite-bound
    superset and the report carries the primal-only corollary verdict; in
    a-posteriori mode it uses the observed active set."""

    mode: str
    a2_tree: ConditionVerdict
    a3_non_adjacent: ConditionVerdict | None = None
    a4_disjoint: ConditionVerdict | None = None
    a5_sign_aligned: ConditionVerdict | None = None
    corollary_primal: ConditionVerdict | None = None
    slater_margin: float | None = None

    def all_passed(self) -> bool:
        verdicts = [self.a2_tree, self.a3_non_adjacent, self.a4_disjoint,
                    self.a5_sign_aligned, self.corollary_primal]
        return all(v.passed for v in verdicts if v is not None)


def _tree_verdict(topology: TopologyReport) -> ConditionVerdict:
    if topology.is_tree:
        return ConditionVerdict(True)
    notes = []
    if not topology.connected:
        notes.append("graph is disconnected")
    if topology.has_cycle:
        notes.append("graph contains a cycle")
    return ConditionVerdict(False, note="; ".join(notes))


def _non_adjacency_verdict(critical: frozenset[int], topology: TopologyReport, names) -> ConditionVerdict:
    bad = []
    for a in sorted(critical):
        for b in topology.adjacency[a]:
            if b in critical and a < b:
                bad.append((names[a], names[b]))
    return ConditionVerdict(not bad, witnesses=tuple(bad))


def check_conditions(
    case: OpfCase,
    sets: CriticalSets,
    flags: ActivityFlags | None,
    topology: TopologyReport,
    mode: str = "aposteriori",
) -> ConditionReport:
    """Evaluate the exactness conditions; failures carry witnesses (offending
    bus pairs or bus-phase products) and are verdicts, not errors."""
    names = case.network.names
    a2 = _tree_verdict(topology)
    if mode == "apriori":
        union = sets.objective | sets.bounded
        adj = _non_adjacency_verdict(union, topology, names)
        inter = sorted(sets.objective & sets.bounded)
        disj = ConditionVerdict(not inter, witnesses=tuple(names[j] for j in inter))
        passed = adj.passed and disj.passed
        witnesses = adj.witnesses + disj.witnesses
        note = "" if passed else "objective/bounded buses adjacent or overlapping"
        return ConditionReport(
            mode=mode,
            a2_tree=a2,
            corollary_primal=ConditionVerdict(passed, witnesses=witnesses, note=note),
        )
    if mode != "aposteriori":
        raise AnalysisError(f"unknown condition mode {mode!r}")
    if flags is None:
        raise AnalysisError("a-posteriori condition check requires activity flags")

    critical = sets.objective | sets.active
    a3 = _non_adjacency_verdict(critical, topology, names)
    inter = sorted(sets.objective & sets.active)
    a4 = ConditionVerdict(not inter, witnesses=tuple(names[j] for j in inter))
    bad_align = []
    for j in inter:
        for ph in range(case.network.m):
            if case.c_re[j, ph] * flags.f_p[j, ph] < 0:
                bad_align.append((names[j], ph + 1, "real"))
            if case.c_im[j, ph] * flags.f_q[j, ph] < 0:
                bad_align.append((names[j], ph + 1, "reactive"))
    a5 = ConditionVerdict(not bad_align, witnesses=tuple(bad_align))
    return ConditionReport(mode=mode, a2_tree=a2, a3_non_adjacent=a3, a4_disjoint=a4, a5_sign_aligned=a5)


def slater_margin(case: OpfCase, tol: float = 1e-8) -> float:
    """Largest uniform tightening of every inequality that keeps the lifted
    feasible set nonempty; a strictly positive value certifies that a point
    with slack in every inequality exists.

    The margin rides as an extra nonnegative diagonal variable of the lifted
    matrix, so the reported value is never negative; no strict interior
    shows up as a zero margin, and an infeasible case propagates the solver
    failure.
    """
    base = build_relaxation(case)
    d = base.dim
    cons = []
    for c in base.constraints:
        A = np.zeros((d + 1, d + 1), dtype=complex)
        A[:d, :d] = c.matrix
        if c.sense == "<=":
            A[d, d] = 1.0
        elif c.sense == ">=":
            A[d, d] = -1.0
        cons.append(sdp.LinearTraceConstraint(A, c.sense, c.bound, c.tag))
    cost = np.zeros((d + 1, d + 1), dtype=complex)
    cost[d, d] = -1.0
    problem = sdp.SdpProblem(dim=d + 1, cost=cost, constraints=tuple(cons))
    sol = sdp.solve(problem, tol=tol)
    return float(-sol.objective)


@dataclasses.dataclass(frozen=True)
class RankCertificate:
    """Spectrum of the solved lifted matrix in decreasing order plus the
    second-to-first eigenvalue ratio it is judged by."""

    eigenvalues: np.ndarray
    ratio: float
    passed: bool
    leading_vector: np.ndarray

    @property
    def leading_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])


def certify_rank1(W: np.ndarray, tol_rank: float = TOL_RANK) -> RankCertificate:
    W = np.asarray(W, dtype=complex)
    lam, vecs = np.linalg.eigh(0.5 * (W + W.conj().T))
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vecs = vecs[:, order]
    if lam[0] <= 0.0:
        raise ZeroMatrixError("leading eigenvalue is not positive; solution matrix is numerically zero")
    ratio = float(lam[1] / lam[0]) if lam.shape[0] > 1 else 0.0
    return RankCertificate(
        eigenvalues=lam,
        ratio=ratio,
        passed=ratio <= tol_rank,
        leading_vector=vecs[:, 0],
    )


def recover_voltages(
    cert: RankCertificate,
    v_ref: np.ndarray,
    W: np.ndarray | None = None,
    tol: float = 1e-6,
) -> np.ndarray:
    """Scale the leading eigenvector and rotate its global phase so the
    slack block matches the reference voltage.

    The rotation maximizes the real inner product with the reference; a
    vanishing inner product leaves the phase undefined and raises.  When the
    solved matrix is supplied the rank-1 reconstruction is verified against
    it.
    """
    if not cert.passed:
        raise RecoveryMismatchError("rank certificate did not pass; voltages are not recoverable")
    v_ref = np.asarray(v_ref, dtype=complex)
    m = v_ref.shape[0]
    x = np.sqrt(cert.leading_eigenvalue) * cert.leading_vector
    c = complex(np.vdot(x[:m], v_ref))
    ref_norm = float(np.linalg.norm(v_ref))
    if abs(c) <= 1e-12 * max(1.0, ref_norm * float(np.linalg.norm(x[:m]))):
        raise RecoveryMismatchError("slack block is orthogonal to the reference; phase alignment undefined")
    V = np.exp(1j * np.angle(c)) * x
    dev = float(np.linalg.norm(V[:m] - v_ref))
    if dev > tol * (1.0 + ref_norm):
        raise RecoveryMismatchError(f"recovered slack voltage deviates from reference by {dev:.3e}")
    if W is not None:
        resid = float(np.max(np.abs(np.outer(V, V.conj()) - W)))
        if resid > 10.0 * max(cert.ratio, np.finfo(float).eps) * cert.leading_eigenvalue:
            raise RecoveryMismatchError(f"rank-1 reconstruction misses the solved matrix by {resid:.3e}")
    return V


@dataclasses.dataclass(frozen=True)
class DualMatrixBundle:
    """Dual slack matrix assembled from multipliers, cost, perturbation, and
    the slack-block multiplier, plus the pieces it was assembled from."""

    matrix: np.ndarray
    kappa: np.ndarray
    lam_hi: np.ndarray
    lam_lo: np.ndarray
    mu_hi: np.ndarray
    mu_lo: np.ndarray
    eta_hi: np.ndarray
    eta_lo: np.ndarray
    eps: float


def assemble_dual_matrix(
    case: OpfCase,
    duals: dict[str, float],
    eps: float = 0.0,
    C1: np.ndarray | None = None,
) -> DualMatrixBundle:
    """Rebuild the dual slack matrix from per-constraint multipliers.

    Voltage multipliers weight the selector matrices, injection multipliers
    the injection matrices (upper minus lower), the cost and the scaled
    perturbation enter directly, and the slack-block multiplier is
    reassembled from the slack-equality multipliers into a Hermitian block
    placed at the top-left corner.  Dropped (infinite) bounds contribute
    zero; a missing multiplier for an existing bound is an error.
    """
    net = case.network
    n, m, d = net.n, net.m, net.dim
    Y = assemble_bus_admittance(net)

    def need(tag: str) -> float:
        try:
            return float(duals[tag])
        except KeyError:
            raise AnalysisError(f"missing multiplier for constraint {tag!r}") from None

    lam_hi = np.zeros((n, m))
    lam_lo = np.zeros((n, m))
    mu_hi = np.zeros((n, m))
    mu_lo = np.zeros((n, m))
    eta_hi = np.zeros((n, m))
    eta_lo = np.zeros((n, m))
    A = np.array(build_cost(case), dtype=complex)
    if eps != 0.0:
        if C1 is None:
            raise AnalysisError("nonzero perturbation weight requires a perturbation matrix")
        A += eps * np.asarray(C1, dtype=complex)
    for idx in all_bus_phases(n, m):
        j, ph = idx.bus, idx.phase
        name = net.names[j]
        phi, psi, sel = injection_matrices(Y, idx, m)
        lh = need(make_bound_tag("v", "upper", name, ph))
        ll = need(make_bound_tag("v", "lower", name, ph))
        lam_hi[j, ph - 1], lam_lo[j, ph - 1] = lh, ll
        A += (lh - ll) * sel
        mh = need(make_bound_tag("p", "upper", name, ph)) if np.isfinite(case.p_hi[j, ph - 1]) else 0.0
        ml = need(make_bound_tag("p", "lower", name, ph)) if np.isfinite(case.p_lo[j, ph - 1]) else 0.0
        mu_hi[j, ph - 1], mu_lo[j, ph - 1] = mh, ml
        if mh or ml:
            A += (mh - ml) * phi
        eh = need(make_bound_tag("q", "upper", name, ph)) if np.isfinite(case.q_hi[j, ph - 1]) else 0.0
        el = need(make_bound_tag("q", "lower", name, ph)) if np.isfinite(case.q_lo[j, ph - 1]) else 0.0
        eta_hi[j, ph - 1], eta_lo[j, ph - 1] = eh, el
        if eh or el:
            A += (eh - el) * psi

    kappa = np.zeros((m, m), dtype=complex)
    for r in range(m):
        kappa[r, r] = need(make_slack_tag(r, r, "diag"))
    for r in range(m):
        for c in range(r + 1, m):
            re = need(make_slack_tag(r, c, "re"))
            im = need(make_slack_tag(r, c, "im"))
            kappa[r, c] = 0.5 * (re + 1j * im)
            kappa[c, r] = np.conj(kappa[r, c])
    A[:m, :m] += kappa
    A = 0.5 * (A + A.conj().T)
    return DualMatrixBundle(
        matrix=A, kappa=kappa,
        lam_hi=lam_hi, lam_lo=lam_lo, mu_hi=mu_hi, mu_lo=mu_lo,
        eta_hi=eta_hi, eta_lo=eta_lo, eps=eps,
    )


@dataclasses.dataclass(frozen=True)
class GInvertibilityReport:
    """Verdict of the edge-invertible / off-edge-zero block structure test."""

    passed: bool
    psd_ok: bool
    singular_edges: tuple
    nonzero_nonedges: tuple
    min_edge_singular_value: float
    max_nonedge_magnitude: float


def check_G_invertibility(
    X: np.ndarray,
    topology: TopologyReport,
    m: int,
    tol_inv: float = TOL_GINV,
) -> GInvertibilityReport:
    """A PSD matrix passes when every edge block is invertible (smallest
    singular value above tolerance) and every non-adjacent off-diagonal
    block vanishes.  Tolerances are relative to the spectral norm."""
    X = np.asarray(X, dtype=complex)
    n = X.shape[0] // m
    norm = float(np.linalg.norm(X, 2)) if X.size else 0.0
    scale = max(norm, np.finfo(float).tiny)
    psd_ok = bool(np.linalg.eigvalsh(0.5 * (X + X.conj().T)).min() >= -tol_inv * scale)
    singular_edges = []
    min_sv = np.inf
    nonzero_nonedges = []
    max_off = 0.0
    for a in range(n):
        for b in range(a + 1, n):
            blk = X[a * m:(a + 1) * m, b * m:(b + 1) * m]
            if topology.is_edge(a, b):
                sv = float(np.linalg.svd(blk, compute_uv=False)[-1])
                min_sv = min(min_sv, sv)
                if sv <= tol_inv * scale:
                    singular_edges.append((a, b))
            else:
                mag = float(np.max(np.abs(blk))) if blk.size else 0.0
                max_off = max(max_off, mag)
                if mag > tol_inv * scale:
                    nonzero_nonedges.append((a, b))
    return GInvertibilityReport(
        passed=psd_ok and not singular_edges and not nonzero_nonedges,
        psd_ok=psd_ok,
        singular_edges=tuple(singular_edges),
        nonzero_nonedges=tuple(nonzero_nonedges),
        min_edge_singular_value=float(min_sv) if min_sv != np.inf else np.inf,
        max_nonedge_magnitude=max_off,
    )


def support_and_connectivity(
    y: np.ndarray,
    m: int,
    topology: TopologyReport,
    tol_supp: float = TOL_SUPPORT,
) -> tuple[frozenset[int], bool]:
    """Bus support of a stacked per-bus vector and whether that support is
    connected in the graph (empty support counts as connected)."""
    y = np.asarray(y, dtype=complex)
    n = y.shape[0] // m
    norm = float(np.linalg.norm(y))
    support = frozenset(
        int(j) for j in range(n) if np.linalg.norm(y[j * m:(j + 1) * m]) > tol_supp * norm
    )
    if not support:
        return support, True
    start = next(iter(support))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in topology.adjacency[u]:
            if v in support and v not in seen:
                seen.add(v)
                stack.append(v)
    return support, seen == support


def minimal_support_null_vector(
    X: np.ndarray,
    m: int,
    tol_null: float = 1e-7,
    tol_supp: float = TOL_SUPPORT,
) -> np.ndarray | None:
    """Small-support vector in the numerical null space of a Hermitian
    matrix.

    Scans the orthonormal null basis and, over all pairs of basis vectors,
    the combinations cancelling one coordinate at a time, keeping the
    smallest bus support found.  This is a heuristic: the true minimizer
    over the whole null space may have smaller support.
    """
    X = np.asarray(X, dtype=complex)
    lam, vecs = np.linalg.eigh(0.5 * (X + X.conj().T))
    scale = max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    null = [vecs[:, i] for i in range(len(lam)) if abs(lam[i]) <= tol_null * scale]
    if not null:
        return None

    def bus_support_size(v: np.ndarray) -> int:
        n = v.shape[0] // m
        norm = float(np.linalg.norm(v))
        return sum(1 for j in range(n) if np.linalg.norm(v[j * m:(j + 1) * m]) > tol_supp * norm)

    best = min(null, key=bus_support_size)
    best_size = bus_support_size(best)
    for i in range(len(null)):
        for j in range(i + 1, len(null)):
            u, v = null[i], null[j]
            for coord in np.nonzero((np.abs(u) > 1e-9) & (np.abs(v) > 1e-9))[0]:
                w = u - (u[coord] / v[coord]) * v
                norm = float(np.linalg.norm(w))
                if norm < 1e-9:
                    continue
                w = w / norm
                size = bus_support_size(w)
                if size and size < best_size:
                    best, best_size = w, size
    return best
