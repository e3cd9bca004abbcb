"""Perturbation construction and sweep: block rules, Hermitian/sparsity
structure, multiplier sign conditions, and sweep behavior."""

import dataclasses

import numpy as np
import pytest

from mpopf import exactness, perturbation, sdp
from mpopf.exactness import ActivityFlags, detect_active_sets, zero_flags
from mpopf.network import assemble_bus_admittance
from mpopf.opf import build_relaxation
from mpopf.perturbation import (
    A3ViolationError,
    PerturbationPlan,
    build_C1,
    check_multiplier_signs,
    default_schedule,
    run_perturbation_sweep,
    solve_perturbed,
)

from conftest import INF, make_case, single_phase_network


def flags_with(n, m, fp=(), fq=()):
    f_p = np.zeros((n, m), dtype=int)
    f_q = np.zeros((n, m), dtype=int)
    for j, ph, v in fp:
        f_p[j, ph] = v
    for j, ph, v in fq:
        f_q[j, ph] = v
    return ActivityFlags(f_p, f_q)


class TestSchedule:
    def test_default_is_decreasing_geometric(self):
        eps = default_schedule()
        assert len(eps) == 10
        assert eps[0] == 1e-2
        assert all(abs(b / a - 0.5) < 1e-12 for a, b in zip(eps, eps[1:]))

    def test_plan_rejects_non_decreasing(self):
        with pytest.raises(ValueError):
            PerturbationPlan(C1=np.zeros((2, 2)), epsilons=(1e-3, 1e-3))
        with pytest.raises(ValueError):
            PerturbationPlan(C1=np.zeros((2, 2)), epsilons=(1e-3, -1e-4))


class TestBuildC1:
    def test_no_critical_buses_copies_admittance_blocks(self):
        net = single_phase_network({(0, 1): 2 - 5j, (1, 2): 1 - 4j}, n=3)
        case = make_case(net)
        Y = assemble_bus_admittance(net)
        C1 = build_C1(case, zero_flags(3, 1))
        for ln in net.lines:
            assert C1[ln.j, ln.k] == Y[ln.j, ln.k]
            assert C1[ln.k, ln.j] == np.conj(Y[ln.j, ln.k])
        assert np.all(np.diag(C1) == 0)

    def test_critical_row_scaling_rules(self):
        # bus 1 critical through flags alone; costs zero at that phase
        net = single_phase_network({(0, 1): 2 - 5j}, n=2)
        p_hi = np.full((2, 1), INF)
        p_hi[1] = 1.0
        q_lo = np.full((2, 1), -INF)
        q_lo[1] = -1.0
        case = make_case(net, p_hi=p_hi, q_lo=q_lo)
        Y = assemble_bus_admittance(net)

        C1 = build_C1(case, flags_with(2, 1, fp=[(1, 0, 1)]))
        assert C1[1, 0] == (1 + 0j) * Y[1, 0]  # bus 1 is the row side of block (1,0)? no: j<k order

        C1 = build_C1(case, flags_with(2, 1, fq=[(1, 0, -1)]))
        # k = 1 critical: column rule with conjugation and (f_p - i f_q)
        expected = (0 - 1j * (-1)) * np.conj(Y[1, 0])
        assert np.isclose(C1[0, 1], expected)

    def test_quiet_phase_keeps_plain_row(self):
        # critical bus with one quiet phase: that row is copied unscaled
        rng = np.random.default_rng(3)
        y = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)) + (3 - 6j) * np.eye(2)
        from mpopf.network import Line, MultiphaseNetwork

        net = MultiphaseNetwork(n=2, m=2, lines=(Line(0, 1, y),))
        c_re = np.zeros((2, 2))
        c_re[1, 0] = 1.0  # phase 1 costed, phase 2 quiet
        case = make_case(net, c_re=c_re)
        Y = assemble_bus_admittance(net)
        flags = zero_flags(2, 2)
        C1 = build_C1(case, flags)
        blk = C1[0:2, 2:4]
        Ykj = Y[2:4, 0:2]
        # k=1 critical: column phase 1 scaled by (0 - 0i) = 0, phase 2 plain
        assert np.allclose(blk[:, 0], 0.0)
        assert np.allclose(blk[:, 1], np.conj(Ykj[1, :]))

    def test_adjacent_critical_buses_raise(self):
        net = single_phase_network({(0, 1): 1 - 2j}, n=2)
        c_re = np.full((2, 1), 1.0)
        case = make_case(net, c_re=c_re)
        with pytest.raises(A3ViolationError):
            build_C1(case, zero_flags(2, 1))

    def test_hermitian_and_sparsity_exact(self, eleven_bus_case, eleven_bus_solution):
        case = eleven_bus_case
        flags = detect_active_sets(eleven_bus_solution.X, case)
        C1 = build_C1(case, flags)
        assert np.array_equal(C1, C1.conj().T)
        m = case.network.m
        edges = case.network.edge_set()
        for a in range(case.network.n):
            for b in range(case.network.n):
                blk = C1[a * m:(a + 1) * m, b * m:(b + 1) * m]
                if a == b or (min(a, b), max(a, b)) not in edges:
                    assert np.all(blk == 0)

    def test_eleven_bus_rule_replay(self, eleven_bus_case, eleven_bus_solution):
        """Independent reimplementation of the block rules on the solved
        case; the module must agree entry for entry."""
        case = eleven_bus_case
        net = case.network
        m = net.m
        flags = detect_active_sets(eleven_bus_solution.X, case)
        Y = assemble_bus_admittance(net)
        critical = set()
        for j in range(net.n):
            if np.any(case.c_re[j]) or np.any(case.c_im[j]) or np.any(flags.f_p[j]) or np.any(flags.f_q[j]):
                critical.add(j)
        expected = np.zeros((net.dim, net.dim), dtype=complex)
        for ln in net.lines:
            j, k = ln.j, ln.k
            Yjk = Y[j * m:(j + 1) * m, k * m:(k + 1) * m]
            Ykj = Y[k * m:(k + 1) * m, j * m:(j + 1) * m]
            blk = np.array(Yjk)
            if j in critical:
                for ph in range(m):
                    zero = (
                        case.c_re[j, ph] == 0 and case.c_im[j, ph] == 0
                        and flags.f_p[j, ph] == 0 and flags.f_q[j, ph] == 0
                    )
                    if not zero:
                        blk[ph, :] = (flags.f_p[j, ph] + 1j * flags.f_q[j, ph]) * Yjk[ph, :]
            elif k in critical:
                for ph in range(m):
                    zero = (
                        case.c_re[k, ph] == 0 and case.c_im[k, ph] == 0
                        and flags.f_p[k, ph] == 0 and flags.f_q[k, ph] == 0
                    )
                    col = np.conj(Ykj[ph, :])
                    if not zero:
                        col = (flags.f_p[k, ph] - 1j * flags.f_q[k, ph]) * col
                    blk[:, ph] = col
            expected[j * m:(j + 1) * m, k * m:(k + 1) * m] = blk
            expected[k * m:(k + 1) * m, j * m:(j + 1) * m] = blk.conj().T
        C1 = build_C1(case, flags)
        assert np.array_equal(C1, expected)
        # the nine active bus-phases carry costs, so their rows take the
        # scaled branch with factor (0 + 1i)
        names = net.names
        for nm in ("650", "671", "611"):
            j = names.index(nm)
            for ln in net.lines:
                if ln.j == j:
                    blk = C1[j * m:(j + 1) * m, ln.k * m:(ln.k + 1) * m]
                    Yjk = Y[j * m:(j + 1) * m, ln.k * m:(ln.k + 1) * m]
                    assert np.allclose(blk, 1j * Yjk)


class TestMultiplierSigns:
    def bundle_with(self, n, m, mu_hi=None, mu_lo=None, eta_hi=None, eta_lo=None):
        z = np.zeros((n, m))
        return exactness.DualMatrixBundle(
            matrix=np.zeros((n * m, n * m), dtype=complex),
            kappa=np.zeros((m, m), dtype=complex),
            lam_hi=z, lam_lo=z,
            mu_hi=z if mu_hi is None else mu_hi,
            mu_lo=z if mu_lo is None else mu_lo,
            eta_hi=z if eta_hi is None else eta_hi,
            eta_lo=z if eta_lo is None else eta_lo,
            eps=0.0,
        )

    def test_all_zero_passes(self):
        report = check_multiplier_signs(zero_flags(2, 1), self.bundle_with(2, 1))
        assert report.passed

    def test_aligned_direction_passes(self):
        mu_hi = np.zeros((2, 1))
        mu_hi[1] = 0.3
        report = check_multiplier_signs(
            flags_with(2, 1, fp=[(1, 0, 1)]), self.bundle_with(2, 1, mu_hi=mu_hi)
        )
        assert report.passed

    def test_opposed_direction_fails(self):
        mu_lo = np.zeros((2, 1))
        mu_lo[1] = 0.3
        report = check_multiplier_signs(
            flags_with(2, 1, fp=[(1, 0, 1)]), self.bundle_with(2, 1, mu_lo=mu_lo)
        )
        assert not report.passed
        assert not report.direction_real
        assert ("real", "direction", 1, 1) in report.witnesses

    def test_inactive_with_nonzero_multiplier_fails(self):
        eta_hi = np.zeros((2, 1))
        eta_hi[1] = 0.2
        report = check_multiplier_signs(zero_flags(2, 1), self.bundle_with(2, 1, eta_hi=eta_hi))
        assert not report.passed
        assert not report.zero_reactive


@pytest.fixture(scope="module")
def small_case():
    # cost on the leaf keeps the first edge away from critical buses, so the
    # perturbation matrix is nonzero and the sweep actually moves the optimum
    net = single_phase_network({(0, 1): 2 - 6j, (1, 2): 1.5 - 4j}, n=3)
    c_re = np.zeros((3, 1))
    c_im = np.zeros((3, 1))
    c_re[2] = 1.0
    c_im[2] = 0.5
    return make_case(net, c_re=c_re, c_im=c_im)


class TestSweep:

    def test_zero_weight_reproduces_unperturbed_solve(self, small_case):
        base = sdp.solve(build_relaxation(small_case))
        flags = detect_active_sets(base.X, small_case)
        C1 = build_C1(small_case, flags)
        again = solve_perturbed(small_case, C1, 0.0)
        assert again.objective == base.objective
        assert np.array_equal(again.X, base.X)

    def test_sweep_on_small_case(self, small_case):
        base = sdp.solve(build_relaxation(small_case))
        flags = detect_active_sets(base.X, small_case)
        C1 = build_C1(small_case, flags)
        plan = PerturbationPlan(C1=C1, epsilons=default_schedule(steps=4))
        report = run_perturbation_sweep(small_case, plan, base_solution=base)
        assert len(report.steps) == 4
        converged = [st for st in report.steps if st.converged]
        assert converged
        for st in converged:
            assert st.rank.passed
            assert st.signs.passed
            assert st.g_invertibility.passed
        # objective distance bounded by the weighted perturbation scale
        bound_scale = float(np.linalg.norm(C1)) * float(np.sum(small_case.v_hi))
        for st in converged:
            assert abs(st.objective - report.base_objective) <= st.eps * bound_scale + 1e-6
        # smallest weight keeps the unperturbed active set
        assert converged[-1].active_match
        assert report.stability_onset is not None
        # approach to the unperturbed solution
        if len(converged) >= 2:
            assert converged[-1].distance_to_base < converged[0].distance_to_base

    def test_solver_failures_are_recorded_not_raised(self, small_case, monkeypatch):
        base = sdp.solve(build_relaxation(small_case))
        flags = detect_active_sets(base.X, small_case)
        C1 = build_C1(small_case, flags)
        plan = PerturbationPlan(C1=C1, epsilons=(1e-2, 5e-3))
        calls = {"n": 0}
        real_solve = sdp.solve

        def flaky(problem, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                raise sdp.NumericalFailureError("synthetic failure")
            return real_solve(problem, **kw)

        monkeypatch.setattr(perturbation.sdp, "solve", flaky)
        report = run_perturbation_sweep(small_case, plan, base_solution=base)
        assert report.steps[0].status == "solver-failure:NumericalFailureError"
        assert report.steps[1].converged
