"""Cost-perturbation machinery for exactness verification.

Builds the tree-sparse Hermitian perturbation matrix from the admittance
blocks and the critical-bus structure, then sweeps a decreasing sequence of
perturbation weights: each weighted problem is solved, its rank certified,
its multiplier signs checked against the unperturbed activity flags, and
its dual slack matrix tested for edge-block invertibility.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import sdp
from .exactness import (
    ActivityFlags,
    DualMatrixBundle,
    GInvertibilityReport,
    RankCertificate,
    assemble_dual_matrix,
    certify_rank1,
    check_G_invertibility,
    critical_sets,
    detect_active_sets,
)
from .network import assemble_bus_admittance, validate_tree
from .opf import OpfCase, build_relaxation

EPS_START = 1e-2
EPS_RATIO = 0.5
EPS_STEPS = 10


class A3ViolationError(ValueError):
    """Two adjacent critical buses; the perturbation construction is
    undefined there."""


def default_schedule(eps_start: float = EPS_START, ratio: float = EPS_RATIO, steps: int = EPS_STEPS) -> tuple[float, ...]:
    if eps_start <= 0 or not 0 < ratio < 1 or steps < 1:
        raise ValueError("schedule requires eps_start > 0, 0 < ratio < 1, steps >= 1")
    return tuple(eps_start * ratio ** i for i in range(steps))


@dataclasses.dataclass(frozen=True)
class PerturbationPlan:
    """Perturbation matrix plus the decreasing positive weight schedule."""

    C1: np.ndarray
    epsilons: tuple[float, ...]

    def __post_init__(self):
        C1 = np.asarray(self.C1, dtype=complex)
        C1.flags.writeable = False
        object.__setattr__(self, "C1", C1)
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be a decreasing sequence of positive reals")
        object.__setattr__(self, "epsilons", eps)


def build_C1(case: OpfCase, flags: ActivityFlags, Y: np.ndarray | None = None) -> np.ndarray:
    """Edge-sparse Hermitian perturbation matrix.

    Diagonal and non-edge blocks are zero.  An edge block copies the
    admittance block; rows (columns) belonging to a critical lower (upper)
    endpoint are rescaled by the complex activity direction of that
    endpoint's phase, or copied unchanged where cost and flags all vanish.
    Requires the critical buses to be non-adjacent.
    """
    net = case.network
    n, m = net.n, net.m
    if Y is None:
        Y = assemble_bus_admittance(net)
    sets = critical_sets(case, flags)
    critical = sets.objective | sets.active
    C1 = np.zeros((net.dim, net.dim), dtype=complex)
    for ln in net.lines:
        j, k = ln.j, ln.k
        if j in critical and k in critical:
            raise A3ViolationError(
                f"adjacent critical buses {net.names[j]} and {net.names[k]}"
            )
        Yjk = Y[j * m:(j + 1) * m, k * m:(k + 1) * m]
        Ykj = Y[k * m:(k + 1) * m, j * m:(j + 1) * m]
        block = np.array(Yjk)
        if j in critical:
            for ph in range(m):
                quiet = (
                    case.c_re[j, ph] == 0.0
                    and case.c_im[j, ph] == 0.0
                    and flags.f_p[j, ph] == 0
                    and flags.f_q[j, ph] == 0
                )
                if not quiet:
                    block[ph, :] = (flags.f_p[j, ph] + 1j * flags.f_q[j, ph]) * Yjk[ph, :]
        elif k in critical:
            for ph in range(m):
                quiet = (
                    case.c_re[k, ph] == 0.0
                    and case.c_im[k, ph] == 0.0
                    and flags.f_p[k, ph] == 0
                    and flags.f_q[k, ph] == 0
                )
                col = np.conj(Ykj[ph, :])
                if not quiet:
                    col = (flags.f_p[k, ph] - 1j * flags.f_q[k, ph]) * col
                block[:, ph] = col
        C1[j * m:(j + 1) * m, k * m:(k + 1) * m] = block
        C1[k * m:(k + 1) * m, j * m:(j + 1) * m] = block.conj().T
    return C1


@dataclasses.dataclass(frozen=True)
class SignConditionReport:
    """Verdicts of the four multiplier sign implications: inactive bounds
    must carry zero multipliers, active bounds a multiplier difference
    matching the activity direction."""

    zero_real: bool
    direction_real: bool
    zero_reactive: bool
    direction_reactive: bool
    witnesses: tuple = ()

    @property
    def passed(self) -> bool:
        return self.zero_real and self.direction_real and self.zero_reactive and self.direction_reactive


def check_multiplier_signs(
    flags: ActivityFlags,
    bundle: DualMatrixBundle,
    tol: float = 1e-6,
) -> SignConditionReport:
    """Check the perturbed problem's injection multipliers against the
    unperturbed activity flags."""
    mu_hi, mu_lo = bundle.mu_hi, bundle.mu_lo
    eta_hi, eta_lo = bundle.eta_hi, bundle.eta_lo
    scale = max(1.0, float(max(mu_hi.max(), mu_lo.max(), eta_hi.max(), eta_lo.max(), 0.0)))
    tol_abs = tol * scale
    witnesses = []
    results = {}
    for label, f, hi, lo in (
        ("real", flags.f_p, mu_hi, mu_lo),
        ("reactive", flags.f_q, eta_hi, eta_lo),
    ):
        inactive = f == 0
        zero_ok = bool(np.all(hi[inactive] <= tol_abs) and np.all(lo[inactive] <= tol_abs))
        if not zero_ok:
            bad = np.argwhere(inactive & ((hi > tol_abs) | (lo > tol_abs)))
            witnesses.extend((label, "zero", int(j), int(ph) + 1) for j, ph in bad)
        active = f != 0
        direction = f * (hi - lo)
        dir_ok = bool(np.all(direction[active] >= -tol_abs))
        if not dir_ok:
            bad = np.argwhere(active & (direction < -tol_abs))
            witnesses.extend((label, "direction", int(j), int(ph) + 1) for j, ph in bad)
        results[label] = (zero_ok, dir_ok)
    return SignConditionReport(
        zero_real=results["real"][0],
        direction_real=results["real"][1],
        zero_reactive=results["reactive"][0],
        direction_reactive=results["reactive"][1],
        witnesses=tuple(witnesses),
    )


@dataclasses.dataclass(frozen=True)
class PerturbationStep:
    """Outcome of one weighted solve."""

    eps: float
    status: str
    objective: float | None = None
    rank: RankCertificate | None = None
    signs: SignConditionReport | None = None
    g_invertibility: GInvertibilityReport | None = None
    distance_to_base: float | None = None
    active_match: bool | None = None

    @property
    def converged(self) -> bool:
        return self.status == "ok"


@dataclasses.dataclass(frozen=True)
class PerturbationReport:
    base_objective: float
    base_flags: ActivityFlags
    steps: tuple[PerturbationStep, ...]
    stability_onset: float | None
    note: str = ""


def solve_perturbed(case: OpfCase, C1: np.ndarray, eps: float, tol: float = sdp.DEFAULT_TOL) -> sdp.SdpSolution:
    """Solve the relaxation with the cost shifted by the weighted
    perturbation; at weight zero this is exactly the unperturbed problem."""
    base = build_relaxation(case)
    cost = base.cost + eps * np.asarray(C1, dtype=complex)
    cost = 0.5 * (cost + cost.conj().T)
    problem = sdp.SdpProblem(dim=base.dim, cost=cost, constraints=base.constraints)
    return sdp.solve(problem, tol=tol)


def run_perturbation_sweep(
    case: OpfCase,
    plan: PerturbationPlan,
    base_solution: sdp.SdpSolution | None = None,
    tol: float = sdp.DEFAULT_TOL,
    tol_rank: float = 1e-6,
) -> PerturbationReport:
    """Solve every weighted problem in the plan and collect certificates.

    Individual solver failures are recorded and the sweep continues.  When
    the multiplier tuple at some weight is non-unique the solver's returned
    tuple is used as-is; no search over alternative tuples is attempted.
    """
    topology = validate_tree(case.network)
    if base_solution is None:
        base_solution = solve_perturbed(case, plan.C1, 0.0, tol=tol)
    flags0 = detect_active_sets(base_solution.X, case)
    steps: list[PerturbationStep] = []
    for eps in plan.epsilons:
        try:
            sol = solve_perturbed(case, plan.C1, eps, tol=tol)
        except sdp.SdpError as exc:
            steps.append(PerturbationStep(eps=eps, status=f"solver-failure:{type(exc).__name__}"))
            continue
        cert = certify_rank1(sol.X, tol_rank=tol_rank)
        bundle = assemble_dual_matrix(case, sol.multipliers, eps=eps, C1=plan.C1)
        signs = check_multiplier_signs(flags0, bundle)
        ginv = check_G_invertibility(bundle.matrix, topology, case.network.m)
        distance = float(np.max(np.abs(sol.X - base_solution.X)))
        try:
            flags_eps = detect_active_sets(sol.X, case)
            match = bool(
                np.array_equal(flags_eps.f_p, flags0.f_p) and np.array_equal(flags_eps.f_q, flags0.f_q)
            )
        except Exception:
            match = False
        steps.append(
            PerturbationStep(
                eps=eps,
                status="ok",
                objective=sol.objective,
                rank=cert,
                signs=signs,
                g_invertibility=ginv,
                distance_to_base=distance,
                active_match=match,
            )
        )

    # stability onset: largest scheduled weight below which every solve
    # converged with the unperturbed active set
    onset: float | None = None
    for step in reversed(steps):  # smallest weight first
        if step.converged and step.active_match:
            onset = step.eps
        else:
            break
    return PerturbationReport(
        base_objective=base_solution.objective,
        base_flags=flags0,
        steps=tuple(steps),
        stability_onset=onset,
        note="multiplier tuples taken from the solver as returned",
    )
