"""Lifted semidefinite relaxation of the multiphase OPF problem.

An OPF case attaches linear injection costs, squared-voltage bands, and
(possibly one-sided or absent) injection bounds to a network, plus the
fixed slack-bus voltage.  The builder lifts it to a semidefinite program
over the voltage outer-product matrix: the rank-1 requirement is dropped,
bounds become trace inequalities against the per-bus-phase injection and
selector matrices, and the slack voltage block is pinned entry by entry
through real-valued trace equalities.
"""

from __future__ import annotations

import dataclasses
import re

import numpy as np

from .network import (
    MultiphaseNetwork,
    all_bus_phases,
    assemble_bus_admittance,
    injection_matrices,
)
from .sdp import LinearTraceConstraint, SdpProblem


class CaseError(ValueError):
    """Raised for inconsistent case data."""


def _as_grid(values, n: int, m: int, name: str, allow_inf: bool) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n, m):
        raise CaseError(f"{name} must have shape {(n, m)}, got {arr.shape}")
    if not allow_inf and not np.all(np.isfinite(arr)):
        raise CaseError(f"{name} must be finite")
    if np.any(np.isnan(arr)):
        raise CaseError(f"{name} contains NaN")
    arr.flags.writeable = False
    return arr


@dataclasses.dataclass(frozen=True)
class OpfCase:
    """Cost, bounds, and slack reference attached to a network.

    Voltage bounds are stored squared (volts squared) and must be positive
    and finite; injection bounds may be infinite on either side.
    """

    network: MultiphaseNetwork
    c_re: np.ndarray
    c_im: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray
    v_ref: np.ndarray

    def __post_init__(self):
        n, m = self.network.n, self.network.m
        object.__setattr__(self, "c_re", _as_grid(self.c_re, n, m, "c_re", False))
        object.__setattr__(self, "c_im", _as_grid(self.c_im, n, m, "c_im", False))
        object.__setattr__(self, "v_lo", _as_grid(self.v_lo, n, m, "v_lo", False))
        object.__setattr__(self, "v_hi", _as_grid(self.v_hi, n, m, "v_hi", False))
        object.__setattr__(self, "p_lo", _as_grid(self.p_lo, n, m, "p_lo", True))
        object.__setattr__(self, "p_hi", _as_grid(self.p_hi, n, m, "p_hi", True))
        object.__setattr__(self, "q_lo", _as_grid(self.q_lo, n, m, "q_lo", True))
        object.__setattr__(self, "q_hi", _as_grid(self.q_hi, n, m, "q_hi", True))
        v_ref = np.asarray(self.v_ref, dtype=complex)
        if v_ref.shape != (m,):
            raise CaseError(f"v_ref must have shape ({m},), got {v_ref.shape}")
        v_ref.flags.writeable = False
        object.__setattr__(self, "v_ref", v_ref)

        if np.any(self.v_lo <= 0) or np.any(self.v_hi <= 0):
            raise CaseError("voltage bounds must be positive")
        if np.any(self.v_lo > self.v_hi):
            raise CaseError("voltage bounds out of order (v_lo > v_hi)")
        for lo, hi, what in ((self.p_lo, self.p_hi, "p"), (self.q_lo, self.q_hi, "q")):
            both = np.isfinite(lo) & np.isfinite(hi)
            if np.any(lo[both] > hi[both]):
                raise CaseError(f"{what} bounds out of order where both finite")
        ref_sq = np.abs(self.v_ref) ** 2
        if np.any(ref_sq < self.v_lo[0] - 1e-9) or np.any(ref_sq > self.v_hi[0] + 1e-9):
            raise CaseError("slack reference voltage violates the slack voltage band")

    @property
    def dim(self) -> int:
        return self.network.dim


_TAG_RE = re.compile(r"^(v|p|q)-(upper|lower)\(([^,]+),(\d+)\)$")
_SLACK_TAG_RE = re.compile(r"^slack-eq\((\d+),(\d+),(diag|re|im)\)$")


def make_bound_tag(kind: str, side: str, bus_name: str, phase: int) -> str:
    return f"{kind}-{side}({bus_name},{phase})"


def parse_bound_tag(tag: str) -> tuple[str, str, str, int] | None:
    """(kind, side, bus name, phase) for a bound tag, None for other tags."""
    mt = _TAG_RE.match(tag)
    if not mt:
        return None
    return mt.group(1), mt.group(2), mt.group(3), int(mt.group(4))


def make_slack_tag(row: int, col: int, part: str) -> str:
    return f"slack-eq({row},{col},{part})"


def parse_slack_tag(tag: str) -> tuple[int, int, str] | None:
    mt = _SLACK_TAG_RE.match(tag)
    if not mt:
        return None
    return int(mt.group(1)), int(mt.group(2)), mt.group(3)


def build_cost(case: OpfCase) -> np.ndarray:
    """Cost matrix: the cost-weighted sum of per-bus-phase injection
    matrices; Hermitian, zero when all coefficients vanish."""
    net = case.network
    Y = assemble_bus_admittance(net)
    d = net.dim
    C0 = np.zeros((d, d), dtype=complex)
    for idx in all_bus_phases(net.n, net.m):
        cre = case.c_re[idx.bus, idx.phase - 1]
        cim = case.c_im[idx.bus, idx.phase - 1]
        if cre == 0.0 and cim == 0.0:
            continue
        phi, psi, _ = injection_matrices(Y, idx, net.m)
        C0 += cre * phi + cim * psi
    return 0.5 * (C0 + C0.conj().T)


def slack_equality_constraints(v_ref: np.ndarray, dim: int) -> list[LinearTraceConstraint]:
    """Pin the upper-left slack block of the lifted matrix to the outer
    product of the reference voltage: one equality per diagonal entry plus a
    real and an imaginary equality per off-diagonal pair."""
    v_ref = np.asarray(v_ref, dtype=complex)
    m = v_ref.shape[0]
    target = np.outer(v_ref, v_ref.conj())
    out: list[LinearTraceConstraint] = []
    for r in range(m):
        A = np.zeros((dim, dim), dtype=complex)
        A[r, r] = 1.0
        out.append(LinearTraceConstraint(A, "==", float(target[r, r].real), make_slack_tag(r, r, "diag")))
    for r in range(m):
        for c in range(r + 1, m):
            A = np.zeros((dim, dim), dtype=complex)
            A[r, c] = 0.5
            A[c, r] = 0.5
            out.append(LinearTraceConstraint(A, "==", float(target[r, c].real), make_slack_tag(r, c, "re")))
            A = np.zeros((dim, dim), dtype=complex)
            A[r, c] = 0.5j
            A[c, r] = -0.5j
            out.append(LinearTraceConstraint(A, "==", float(target[r, c].imag), make_slack_tag(r, c, "im")))
    return out


def build_relaxation(case: OpfCase) -> SdpProblem:
    """Assemble the relaxed problem: selector-trace voltage bands, finite
    injection bounds (infinite sides are dropped, producing one-sided or no
    constraints), and the slack-block equalities.  Every constraint carries
    a tag identifying its origin."""
    net = case.network
    Y = assemble_bus_admittance(net)
    d = net.dim
    cons: list[LinearTraceConstraint] = []
    for idx in all_bus_phases(net.n, net.m):
        j, ph = idx.bus, idx.phase
        name = net.names[j]
        phi, psi, sel = injection_matrices(Y, idx, net.m)
        cons.append(LinearTraceConstraint(sel, "<=", float(case.v_hi[j, ph - 1]), make_bound_tag("v", "upper", name, ph)))
        cons.append(LinearTraceConstraint(sel, ">=", float(case.v_lo[j, ph - 1]), make_bound_tag("v", "lower", name, ph)))
        if np.isfinite(case.p_hi[j, ph - 1]):
            cons.append(LinearTraceConstraint(phi, "<=", float(case.p_hi[j, ph - 1]), make_bound_tag("p", "upper", name, ph)))
        if np.isfinite(case.p_lo[j, ph - 1]):
            cons.append(LinearTraceConstraint(phi, ">=", float(case.p_lo[j, ph - 1]), make_bound_tag("p", "lower", name, ph)))
        if np.isfinite(case.q_hi[j, ph - 1]):
            cons.append(LinearTraceConstraint(psi, "<=", float(case.q_hi[j, ph - 1]), make_bound_tag("q", "upper", name, ph)))
        if np.isfinite(case.q_lo[j, ph - 1]):
            cons.append(LinearTraceConstraint(psi, ">=", float(case.q_lo[j, ph - 1]), make_bound_tag("q", "lower", name, ph)))
    cons.extend(slack_equality_constraints(case.v_ref, d))
    return SdpProblem(dim=d, cost=build_cost(case), constraints=tuple(cons))


def objective_of_voltages(case: OpfCase, V: np.ndarray) -> float:
    """Cost of a physical voltage profile: cost coefficients against the
    nodal injections it induces."""
    Y = assemble_bus_admittance(case.network)
    s = V * np.conj(Y @ V)
    m = case.network.m
    p = s.real.reshape(case.network.n, m)
    q = s.imag.reshape(case.network.n, m)
    return float(np.sum(case.c_re * p) + np.sum(case.c_im * q))


def voltages_feasible(case: OpfCase, V: np.ndarray, tol: float = 1e-9) -> bool:
    """Check a physical voltage profile against every case bound."""
    n, m = case.network.n, case.network.m
    Y = assemble_bus_admittance(case.network)
    s = V * np.conj(Y @ V)
    p = s.real.reshape(n, m)
    q = s.imag.reshape(n, m)
    v = (np.abs(V) ** 2).reshape(n, m)
    scale = 1.0 + np.abs(case.v_hi)
    ok = np.all(v <= case.v_hi + tol * scale) and np.all(v >= case.v_lo - tol * scale)
    for val, lo, hi in ((p, case.p_lo, case.p_hi), (q, case.q_lo, case.q_hi)):
        sc = 1.0 + np.where(np.isfinite(hi), np.abs(hi), 0.0)
        ok = ok and bool(np.all(val <= hi + tol * sc))
        sc = 1.0 + np.where(np.isfinite(lo), np.abs(lo), 0.0)
        ok = ok and bool(np.all(val >= lo - tol * sc))
    ref_dev = np.max(np.abs(V[: case.network.m] - case.v_ref))
    return bool(ok) and ref_dev <= tol * (1.0 + float(np.max(np.abs(case.v_ref))))
