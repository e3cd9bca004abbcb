"""Dense interior-point solver for small Hermitian semidefinite programs.

Problems are stated over a Hermitian matrix variable with linear trace
constraints (two senses of inequality plus equality).  The complex problem
is mapped onto its real symmetric embedding and solved with an infeasible
primal-dual path-following method using Nesterov-Todd scaling and a
Mehrotra-style predictor-corrector step.  Everything is dense; intended
problem dimensions are a few dozen, not thousands.

Multipliers are returned per constraint, keyed by the constraint tag, with
the sign convention that inequality multipliers are nonnegative and the
dual slack matrix equals cost plus the multiplier-weighted constraint
matrices (inequalities entering with the sign of their normalized
less-or-equal form).
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .network import require_hermitian

DEFAULT_TOL = 1e-8
MAX_ITERATIONS = 200
STEP_FRACTION = 0.98

SENSES = ("<=", ">=", "==")


class SdpError(Exception):
    """Base class for solver failures."""


class InfeasibleError(SdpError):
    """Primal problem judged infeasible (dual objective diverging)."""


class UnboundedError(SdpError):
    """Primal objective diverging to minus infinity."""


class MaxIterationsError(SdpError):
    """Iteration limit hit before reaching tolerance; carries best iterate."""

    def __init__(self, message: str, best: "SdpSolution"):
        super().__init__(message)
        self.best = best


class NumericalFailureError(SdpError):
    """Linear algebra breakdown (Schur complement not factorizable)."""


@dataclasses.dataclass(frozen=True)
class LinearTraceConstraint:
    """tr(matrix @ X) sense bound, with a provenance tag."""

    matrix: np.ndarray
    sense: str
    bound: float
    tag: str

    def __post_init__(self):
        mat = require_hermitian(self.matrix, what=f"constraint {self.tag!r} matrix")
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)
        if self.sense not in SENSES:
            raise ValueError(f"constraint {self.tag!r}: unknown sense {self.sense!r}")
        if not np.isfinite(self.bound):
            raise ValueError(f"constraint {self.tag!r}: bound must be finite")


@dataclasses.dataclass(frozen=True)
class SdpProblem:
    dim: int
    cost: np.ndarray
    constraints: tuple[LinearTraceConstraint, ...]

    def __post_init__(self):
        cost = require_hermitian(self.cost, what="cost matrix")
        if cost.shape != (self.dim, self.dim):
            raise ValueError(f"cost has shape {cost.shape}, expected {(self.dim, self.dim)}")
        cost.flags.writeable = False
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        tags = [c.tag for c in self.constraints]
        if len(set(tags)) != len(tags):
            raise ValueError("constraint tags must be unique")
        for c in self.constraints:
            if c.matrix.shape != (self.dim, self.dim):
                raise ValueError(f"constraint {c.tag!r} has dimension {c.matrix.shape[0]}, expected {self.dim}")


class IterateStats(NamedTuple):
    """One row of the solver trajectory."""

    mu: float
    primal_objective: float
    dual_objective: float
    primal_infeasibility: float
    dual_infeasibility: float
    duality_gap_certified: float  # gap corrected for infeasibility, = <X,Z> + <s,z> >= 0
    step_primal: float
    step_dual: float


@dataclasses.dataclass
class SdpSolution:
    X: np.ndarray
    multipliers: dict[str, float]
    objective: float
    gap: float
    complementarity: float
    primal_infeasibility: float
    dual_infeasibility: float
    iterations: int
    dual_slack: np.ndarray
    trajectory: tuple[IterateStats, ...]

    def multiplier(self, tag: str) -> float:
        return self.multipliers[tag]


def real_embedding(H: np.ndarray) -> np.ndarray:
    """Map a Hermitian d-by-d matrix onto its 2d-by-2d real symmetric
    embedding [[Re, -Im], [Im, Re]]; eigenvalues are duplicated and trace
    inner products pick up a factor of two."""
    H = require_hermitian(H, what="embedding input")
    re, im = H.real, H.imag
    return np.block([[re, -im], [im, re]])


def _unembed(Xr: np.ndarray, d: int) -> np.ndarray:
    """Recover the Hermitian matrix from a (possibly roughly structured)
    real embedding by averaging the symmetric blocks."""
    re = 0.5 * (Xr[:d, :d] + Xr[d:, d:])
    im = 0.5 * (Xr[d:, :d] - Xr[:d, d:])
    X = re + 1j * im
    return 0.5 * (X + X.conj().T)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _chol_with_jitter(A: np.ndarray, what: str) -> np.ndarray:
    """Lower Cholesky factor, adding an escalating diagonal jitter if the
    matrix has drifted marginally indefinite."""
    n = A.shape[0]
    scale = max(float(np.trace(A)) / n, 1e-300)
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-14 if jitter == 0.0 else jitter * 100.0
    raise NumericalFailureError(f"{what}: Cholesky factorization failed")


def _nt_scaling(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Nesterov-Todd scaling point W with W Z W = X."""
    L = _chol_with_jitter(X, "NT scaling (primal block)")
    S = _sym(L.T @ Z @ L)
    lam, U = np.linalg.eigh(S)
    lam = np.maximum(lam, 1e-300)
    G = (U * lam ** -0.5) @ U.T
    return _sym(L @ G @ L.T)


def _max_step_psd(M: np.ndarray, dM: np.ndarray) -> float:
    """sup alpha with M + alpha dM still PSD (M assumed PD)."""
    L = _chol_with_jitter(M, "step length")
    K = sla.solve_triangular(L, dM, lower=True)
    K = sla.solve_triangular(L, K.T, lower=True)
    lam_min = float(np.linalg.eigvalsh(_sym(K)).min())
    if lam_min >= 0.0:
        return np.inf
    return 1.0 / (-lam_min)


def _max_step_vec(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _is_pd(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def _backtrack_into_cone(M: np.ndarray, dM: np.ndarray, alpha: float) -> float:
    """Shrink alpha until M + alpha dM is strictly positive definite; guards
    against overshoot when the step-length estimate ran on a jittered
    factorization of a nearly singular iterate."""
    for _ in range(60):
        if alpha < 1e-14:
            return 0.0
        if _is_pd(M + alpha * dM):
            return alpha
        alpha *= 0.8
    return 0.0


def solve(
    problem: SdpProblem,
    tol: float = DEFAULT_TOL,
    max_iterations: int = MAX_ITERATIONS,
    step_fraction: float = STEP_FRACTION,
) -> SdpSolution:
    """Solve the SDP to the requested relative tolerance.

    Raises InfeasibleError / UnboundedError on diverging certificates,
    MaxIterationsError (with the best iterate attached) when the budget is
    exhausted, NumericalFailureError on linear-algebra breakdown.
    """
    d = problem.dim
    N = 2 * d
    p = len(problem.constraints)

    # Real embedding; bounds double to compensate the trace factor.
    # Inequalities are normalized to <= by sign flip.
    A = np.empty((p, N, N))
    b = np.empty(p)
    ineq = np.zeros(p, dtype=bool)
    row_scale = np.ones(p)
    for i, c in enumerate(problem.constraints):
        mat = real_embedding(c.matrix)
        if c.sense == ">=":
            mat, bi = -mat, -2.0 * c.bound
        else:
            bi = 2.0 * c.bound
        # normalize each row; evens out the Schur complement scales
        row_scale[i] = max(float(np.linalg.norm(mat)), 1e-12)
        A[i] = mat / row_scale[i]
        b[i] = bi / row_scale[i]
        ineq[i] = c.sense != "=="
    C = real_embedding(problem.cost)
    k = int(ineq.sum())
    ineq_idx = np.nonzero(ineq)[0]

    A_flat = A.reshape(p, N * N)

    norm_b = float(np.linalg.norm(b)) if p else 0.0
    norm_C = float(np.linalg.norm(C))
    norm_A = float(np.sqrt((A_flat ** 2).sum(axis=1)).max()) if p else 1.0

    # interior start, scaled to the data
    tau_p = max(10.0, np.sqrt(N) * (1.0 + norm_b) / (1.0 + norm_A))
    tau_d = max(10.0, (1.0 + norm_C + norm_A) / np.sqrt(N))
    X = tau_p * np.eye(N)
    s = tau_p * np.ones(k)
    y = np.zeros(p)
    Z = tau_d * np.eye(N)
    z = tau_d * np.ones(k)

    def operator(Xm: np.ndarray) -> np.ndarray:
        return A_flat @ Xm.reshape(-1) if p else np.zeros(0)

    def adjoint(v: np.ndarray) -> np.ndarray:
        return (v @ A_flat).reshape(N, N) if p else np.zeros((N, N))

    def current_metrics():
        rp = b - operator(X)
        if k:
            rp[ineq_idx] -= s
        Rd = C - adjoint(y) - Z
        rdz = (-y[ineq_idx] - z) if k else np.zeros(0)
        pobj = float(np.sum(C * X))
        dobj = float(b @ y)
        mu = (float(np.sum(X * Z)) + (float(s @ z) if k else 0.0)) / (N + k)
        pinf = float(np.linalg.norm(rp)) / (1.0 + norm_b)
        dinf = max(float(np.linalg.norm(Rd)), float(np.linalg.norm(rdz)) if k else 0.0) / (1.0 + norm_C)
        return rp, Rd, rdz, pobj, dobj, mu, pinf, dinf

    def package(pobj, dobj, mu, pinf, dinf, iters, history) -> SdpSolution:
        Xc = _unembed(X, d)
        Zc = _unembed(Z, d)
        # multiplier of the normalized (<=) form: nonnegative for inequalities,
        # signed for equalities; dual_slack_matrix reapplies the sense sign.
        # undo the row normalization
        mults: dict[str, float] = {}
        for i, c in enumerate(problem.constraints):
            mults[c.tag] = float(-y[i] / row_scale[i])
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        comp = float(np.real(np.trace(Zc @ Xc)))
        return SdpSolution(
            X=Xc,
            multipliers=mults,
            objective=0.5 * pobj,
            gap=gap,
            complementarity=comp,
            primal_infeasibility=pinf,
            dual_infeasibility=dinf,
            iterations=iters,
            dual_slack=Zc,
            trajectory=tuple(history),
        )

    history: list[IterateStats] = []
    merits: list[float] = []
    best: tuple[float, SdpSolution] | None = None
    diverge = 1e8 * (1.0 + norm_b + norm_C)

    for it in range(max_iterations):
        rp, Rd, rdz, pobj, dobj, mu, pinf, dinf = current_metrics()
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        cert_gap = float(np.sum(X * Z)) + (float(s @ z) if k else 0.0)
        history.append(IterateStats(mu, 0.5 * pobj, 0.5 * dobj, pinf, dinf, 0.5 * cert_gap, 0.0, 0.0))

        merit = max(gap, pinf, dinf)
        if best is None or merit < best[0]:
            best = (merit, package(pobj, dobj, mu, pinf, dinf, it, history))
        if gap <= tol and pinf <= tol and dinf <= tol:
            return package(pobj, dobj, mu, pinf, dinf, it, history)
        if dobj > diverge and dinf <= 1e-6:
            raise InfeasibleError(f"dual objective diverging ({dobj:.3e}); primal judged infeasible")
        if pobj < -diverge and pinf <= 1e-6:
            raise UnboundedError(f"primal objective diverging ({pobj:.3e})")

        W = _nt_scaling(X, Z)
        Lz = _chol_with_jitter(Z, "dual block inverse")
        Zinv = sla.cho_solve((Lz, True), np.eye(N))
        Zinv = _sym(Zinv)
        w2 = s / z if k else np.zeros(0)

        # Schur complement M = A (W x W) A^T + orthant diagonal
        AW = np.matmul(A, W)
        WAW = np.matmul(W[None, :, :], AW)
        M = A_flat @ WAW.reshape(p, N * N).T
        M = 0.5 * (M + M.T)
        if k:
            M[ineq_idx, ineq_idx] += w2
        scale_M = max(float(np.abs(np.diag(M)).max()), 1e-300) if p else 1.0
        ridge = 0.0
        cho = None
        for _ in range(10):
            try:
                cho = sla.cho_factor(M + ridge * np.eye(p), lower=True) if p else None
                break
            except np.linalg.LinAlgError:
                ridge = scale_M * 1e-14 if ridge == 0.0 else ridge * 100.0
        else:
            raise NumericalFailureError("Schur complement factorization failed")

        M_reg = M + ridge * np.eye(p) if p else M

        def schur_solve(rhs: np.ndarray) -> np.ndarray:
            # iterative refinement; the Schur system grows very
            # ill-conditioned near convergence on degenerate problems
            dy = sla.cho_solve(cho, rhs)
            scale = float(np.linalg.norm(rhs)) + 1e-300
            last = np.inf
            for _ in range(4):
                resid = rhs - M_reg @ dy
                rnorm = float(np.linalg.norm(resid))
                if rnorm < 1e-14 * scale or rnorm > 0.5 * last:
                    break
                dy = dy + sla.cho_solve(cho, resid)
                last = rnorm
            return dy

        def newton(Rc: np.ndarray, rc_o: np.ndarray):
            # eliminate dX, ds, dz in favor of dy, then back-substitute
            rhs = rp - operator(Rc) + operator(_sym(W @ Rd @ W))
            if k:
                rhs[ineq_idx] += -(rc_o) + w2 * rdz
            dy = schur_solve(rhs) if p else np.zeros(0)
            dZ = Rd - adjoint(dy)
            dz = (rdz - dy[ineq_idx]) if k else np.zeros(0)
            dX = _sym(Rc - W @ dZ @ W)
            ds = (rc_o - w2 * dz) if k else np.zeros(0)
            return dX, ds, dy, dZ, dz

        def step_lengths(dX, ds, dZ, dz):
            ap = min(_max_step_psd(X, dX), _max_step_vec(s, ds) if k else np.inf)
            ad = min(_max_step_psd(Z, dZ), _max_step_vec(z, dz) if k else np.inf)
            return min(1.0, step_fraction * ap), min(1.0, step_fraction * ad)

        # predictor (affine scaling)
        dXa, dsa, dya, dZa, dza = newton(-X, -s if k else np.zeros(0))
        apa, ada = step_lengths(dXa, dsa, dZa, dza)
        mu_aff = (
            float(np.sum((X + apa * dXa) * (Z + ada * dZa)))
            + (float((s + apa * dsa) @ (z + ada * dza)) if k else 0.0)
        ) / (N + k)
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3)
        # keep the barrier from racing ahead of feasibility: re-center when
        # the residuals dominate the complementarity level
        mu_rel = cert_gap / (1.0 + abs(pobj) + abs(dobj))
        if max(pinf, dinf) > mu_rel:
            sigma = max(sigma, 0.5)

        # corrector with second-order term; fall back to pure centering if
        # the corrected direction collapses the step
        corr = _sym(dXa @ Zinv @ dZa)
        Rc = sigma * mu * Zinv - X - corr
        rc_o = (sigma * mu / z - s - dsa * dza / z) if k else np.zeros(0)
        dX, ds, dy, dZ, dz = newton(Rc, rc_o)
        ap, ad = step_lengths(dX, ds, dZ, dz)
        if min(ap, ad) < 0.05 and min(ap, ad) < 0.5 * min(apa, ada):
            Rc = sigma * mu * Zinv - X
            rc_o = (sigma * mu / z - s) if k else np.zeros(0)
            dX, ds, dy, dZ, dz = newton(Rc, rc_o)
            ap, ad = step_lengths(dX, ds, dZ, dz)

        ap = _backtrack_into_cone(X, dX, ap)
        ad = _backtrack_into_cone(Z, dZ, ad)
        X = _sym(X + ap * dX)
        Z = _sym(Z + ad * dZ)
        y = y + ad * dy
        if k:
            s = s + ap * ds
            z = z + ad * dz
        history[-1] = history[-1]._replace(step_primal=ap, step_dual=ad)

        if ap < 1e-10 and ad < 1e-10:
            break
        # stall detection: stop once late iterations no longer improve the
        # merit over what the earlier ones already achieved
        merits.append(merit)
        if len(merits) > 45:
            prev_best = min(merits[:-25])
            recent_best = min(merits[-25:])
            if prev_best < 1e-3 and recent_best > 0.8 * prev_best:
                break

    rp, Rd, rdz, pobj, dobj, mu, pinf, dinf = current_metrics()
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    if gap <= tol and pinf <= tol and dinf <= tol:
        return package(pobj, dobj, mu, pinf, dinf, max_iterations, history)
    assert best is not None
    raise MaxIterationsError(
        f"no convergence in {max_iterations} iterations "
        f"(gap {gap:.2e}, primal {pinf:.2e}, dual {dinf:.2e})",
        best=best[1],
    )


def dual_slack_matrix(problem: SdpProblem, multipliers: dict[str, float]) -> np.ndarray:
    """Assemble cost plus multiplier-weighted constraint matrices, applying
    the sign of each constraint's normalized less-or-equal form."""
    Adual = np.array(problem.cost, dtype=complex)
    for c in problem.constraints:
        try:
            lam = multipliers[c.tag]
        except KeyError:
            raise KeyError(f"missing multiplier for constraint {c.tag!r}") from None
        sign = -1.0 if c.sense == ">=" else 1.0
        Adual = Adual + sign * lam * c.matrix
    return 0.5 * (Adual + Adual.conj().T)


def complementarity_residual(
    problem: SdpProblem, solution: SdpSolution, duals: dict[str, float] | None = None
) -> float:
    """tr of the assembled dual slack against the primal matrix; nonnegative
    up to tolerance at optimality since both factors are then PSD."""
    duals = solution.multipliers if duals is None else duals
    if solution.X.shape != (problem.dim, problem.dim):
        raise ValueError("solution does not match problem dimension")
    Adual = dual_slack_matrix(problem, duals)
    return float(np.real(np.trace(Adual @ solution.X)))
