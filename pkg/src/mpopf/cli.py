"""Command-line surface.

Subcommands: ``solve`` (relax, solve, certify rank, recover voltages),
``check`` (a-priori primal-only conditions), ``certify`` (solve plus
a-posteriori conditions), ``perturb`` (perturbation sweep), ``gen``
(random case generation).  Exit codes: 0 solved and certified rank-1,
2 solved but not rank-1, 3 condition check failed, 4 solver failure,
5 input error.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__, caseio, exactness, perturbation, sdp
from .network import NetworkError, validate_tree
from .opf import CaseError, build_relaxation

EXIT_EXACT = 0
EXIT_NOT_RANK1 = 2
EXIT_CONDITIONS_FAILED = 3
EXIT_SOLVER_FAILURE = 4
EXIT_INPUT_ERROR = 5


def _emit(report: caseio.RunReport, args) -> None:
    if args.report:
        caseio.write_report(report, args.report, format=args.format)
    else:
        sys.stdout.write(
            caseio.render_text(report) if args.format == "text" else caseio.canonical_json(report.to_dict()) + "\n"
        )


def _solve_case(case, tol: float):
    problem = build_relaxation(case)
    return sdp.solve(problem, tol=tol)


def _cmd_solve(args) -> int:
    case = caseio.parse_case(args.case)
    digest = caseio.case_digest(case)
    try:
        sol = _solve_case(case, args.tol)
    except sdp.SdpError as exc:
        _emit(caseio.RunReport("solve", __version__, digest, error=str(exc)), args)
        return EXIT_SOLVER_FAILURE
    cert = exactness.certify_rank1(sol.X)
    voltages = None
    code = EXIT_NOT_RANK1
    if cert.passed:
        V = exactness.recover_voltages(cert, case.v_ref, W=sol.X)
        voltages = caseio.voltages_to_dict(V)
        code = EXIT_EXACT
    report = caseio.RunReport(
        "solve",
        __version__,
        digest,
        solver=caseio.solver_stats(sol),
        objective=sol.objective,
        rank=caseio.rank_to_dict(cert),
        voltages=voltages,
    )
    _emit(report, args)
    return code


def _cmd_check(args) -> int:
    case = caseio.parse_case(args.case)
    digest = caseio.case_digest(case)
    topology = validate_tree(case.network)
    sets = exactness.critical_sets(case)
    report = exactness.check_conditions(case, sets, None, topology, mode="apriori")
    try:
        margin = exactness.slater_margin(case, tol=args.tol)
    except sdp.SdpError as exc:
        _emit(caseio.RunReport("check", __version__, digest, error=str(exc)), args)
        return EXIT_SOLVER_FAILURE
    import dataclasses

    report = dataclasses.replace(report, slater_margin=margin)
    run = caseio.RunReport("check", __version__, digest, conditions=caseio.conditions_to_dict(report))
    _emit(run, args)
    ok = report.a2_tree.passed and report.corollary_primal.passed and margin > 0
    return EXIT_EXACT if ok else EXIT_CONDITIONS_FAILED


def _cmd_certify(args) -> int:
    case = caseio.parse_case(args.case)
    digest = caseio.case_digest(case)
    topology = validate_tree(case.network)
    try:
        sol = _solve_case(case, args.tol)
        margin = exactness.slater_margin(case, tol=args.tol)
    except sdp.SdpError as exc:
        _emit(caseio.RunReport("certify", __version__, digest, error=str(exc)), args)
        return EXIT_SOLVER_FAILURE
    flags = exactness.detect_active_sets(sol.X, case)
    sets = exactness.critical_sets(case, flags)
    conditions = exactness.check_conditions(case, sets, flags, topology, mode="aposteriori")
    import dataclasses

    conditions = dataclasses.replace(conditions, slater_margin=margin)
    cert = exactness.certify_rank1(sol.X)
    voltages = None
    if cert.passed:
        V = exactness.recover_voltages(cert, case.v_ref, W=sol.X)
        voltages = caseio.voltages_to_dict(V)
    report = caseio.RunReport(
        "certify",
        __version__,
        digest,
        solver=caseio.solver_stats(sol),
        objective=sol.objective,
        rank=caseio.rank_to_dict(cert),
        conditions=caseio.conditions_to_dict(conditions),
        voltages=voltages,
    )
    _emit(report, args)
    return EXIT_EXACT if cert.passed else EXIT_NOT_RANK1


def _cmd_perturb(args) -> int:
    case = caseio.parse_case(args.case)
    digest = caseio.case_digest(case)
    try:
        base = _solve_case(case, args.tol)
    except sdp.SdpError as exc:
        _emit(caseio.RunReport("perturb", __version__, digest, error=str(exc)), args)
        return EXIT_SOLVER_FAILURE
    flags = exactness.detect_active_sets(base.X, case)
    try:
        C1 = perturbation.build_C1(case, flags)
    except perturbation.A3ViolationError as exc:
        _emit(caseio.RunReport("perturb", __version__, digest, error=str(exc)), args)
        return EXIT_CONDITIONS_FAILED
    plan = perturbation.PerturbationPlan(
        C1=C1, epsilons=perturbation.default_schedule(args.eps0, args.ratio, args.steps)
    )
    sweep = perturbation.run_perturbation_sweep(case, plan, base_solution=base, tol=args.tol)
    cert = exactness.certify_rank1(base.X)
    report = caseio.RunReport(
        "perturb",
        __version__,
        digest,
        solver=caseio.solver_stats(base),
        objective=base.objective,
        rank=caseio.rank_to_dict(cert),
        perturbation=caseio.perturbation_to_dict(sweep),
    )
    _emit(report, args)
    converged = [st for st in sweep.steps if st.converged]
    if not converged:
        return EXIT_SOLVER_FAILURE
    return EXIT_EXACT if all(st.rank.passed for st in converged) else EXIT_NOT_RANK1


def _cmd_gen(args) -> int:
    case = caseio.generate_random_case(args.seed, args.n, args.m, args.profile)
    payload = caseio.canonical_json(caseio.case_to_dict(case)) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)
    return EXIT_EXACT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpopf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mpopf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("case", help="path to a case file")
        sp.add_argument("--tol", type=float, default=sdp.DEFAULT_TOL, help="solver tolerance")
        sp.add_argument("--report", default=None, help="write the report to this path")
        sp.add_argument("--format", choices=("json", "text"), default="text")

    common(sub.add_parser("solve", help="solve the relaxation and certify the rank"))
    common(sub.add_parser("check", help="a-priori primal-only exactness conditions"))
    common(sub.add_parser("certify", help="solve plus a-posteriori conditions"))
    pert = sub.add_parser("perturb", help="perturbation sweep")
    common(pert)
    pert.add_argument("--eps0", type=float, default=perturbation.EPS_START)
    pert.add_argument("--ratio", type=float, default=perturbation.EPS_RATIO)
    pert.add_argument("--steps", type=int, default=perturbation.EPS_STEPS)
    gen = sub.add_parser("gen", help="generate a random case")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=8)
    gen.add_argument("--m", type=int, default=3)
    gen.add_argument("--profile", choices=caseio.PROFILES, default="corollary-safe")
    gen.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "solve": _cmd_solve,
    "check": _cmd_check,
    "certify": _cmd_certify,
    "perturb": _cmd_perturb,
    "gen": _cmd_gen,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (caseio.CaseFileError, CaseError, NetworkError, FileNotFoundError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT_ERROR


def main() -> None:
    sys.exit(run())
