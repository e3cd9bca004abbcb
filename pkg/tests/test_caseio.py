"""Case files, random generation, and report serialization."""

import json
import math

import numpy as np
import pytest

from mpopf import caseio, exactness
from mpopf.caseio import (
    CaseFileError,
    RunReport,
    canonical_json,
    case_digest,
    case_from_dict,
    case_to_dict,
    generate_random_case,
    load_bundled_case,
    parse_case,
    parse_report,
    report_from_dict,
    write_case,
    write_report,
)
from mpopf.network import validate_tree

MINIMAL = {
    "schema_version": 1,
    "phase_count": 1,
    "buses": ["slack", "load"],
    "slack_voltage": [[1.0, 0.0]],
    "voltage_bound_form": "squared",
    "lines": [{"from": "slack", "to": "load", "admittance": [[[2.0, -4.0]]]}],
    "bus_phase": {
        "slack": [{"cost_re": 0.0, "cost_im": 0.0, "v_lo": 0.81, "v_hi": 1.21,
                   "p_lo": None, "p_hi": None, "q_lo": None, "q_hi": None}],
        "load": [{"cost_re": 1.0, "cost_im": 0.0, "v_lo": 0.81, "v_hi": 1.21,
                  "p_lo": -5.0, "p_hi": None, "q_lo": None, "q_hi": 2.0}],
    },
}


def clone(doc):
    return json.loads(json.dumps(doc))


class TestParseCase:
    def test_minimal_two_bus(self, tmp_path):
        path = tmp_path / "case.json"
        path.write_text(json.dumps(MINIMAL))
        case = parse_case(str(path))
        assert case.network.n == 2 and case.network.m == 1
        assert case.p_lo[1, 0] == -5.0
        assert case.p_hi[1, 0] == math.inf
        assert case.q_lo[1, 0] == -math.inf

    def test_bound_order_rejected_with_location(self):
        doc = clone(MINIMAL)
        doc["bus_phase"]["load"][0]["v_lo"] = 2.0
        with pytest.raises(CaseFileError, match=r"bus_phase/load/0"):
            case_from_dict(doc)

    def test_magnitude_form_squared_on_ingest(self):
        doc = clone(MINIMAL)
        doc["voltage_bound_form"] = "magnitude"
        for recs in doc["bus_phase"].values():
            recs[0]["v_lo"] = 0.9
            recs[0]["v_hi"] = 1.1
        case = case_from_dict(doc)
        assert np.allclose(case.v_lo, 0.81)
        assert np.allclose(case.v_hi, 1.21)

    def test_undeclared_bus_rejected(self):
        doc = clone(MINIMAL)
        doc["lines"][0]["to"] = "ghost"
        with pytest.raises(CaseFileError, match="ghost"):
            case_from_dict(doc)

    def test_unsupported_schema_version(self):
        doc = clone(MINIMAL)
        doc["schema_version"] = 99
        with pytest.raises(CaseFileError, match="version"):
            case_from_dict(doc)

    def test_singular_admittance_rejected(self):
        doc = clone(MINIMAL)
        doc["lines"][0]["admittance"] = [[[0.0, 0.0]]]
        with pytest.raises(CaseFileError, match="singular"):
            case_from_dict(doc)

    def test_malformed_complex_pair(self):
        doc = clone(MINIMAL)
        doc["slack_voltage"] = [[1.0]]
        with pytest.raises(CaseFileError, match="pair"):
            case_from_dict(doc)

    def test_non_tree_parses_with_later_check(self):
        # cycles are accepted at parse time; the tree condition is a verdict
        doc = clone(MINIMAL)
        doc["buses"] = ["a", "b", "c"]
        doc["slack_voltage"] = [[1.0, 0.0]]
        doc["lines"] = [
            {"from": "a", "to": "b", "admittance": [[[2.0, -4.0]]]},
            {"from": "b", "to": "c", "admittance": [[[2.0, -4.0]]]},
            {"from": "a", "to": "c", "admittance": [[[2.0, -4.0]]]},
        ]
        rec = {"cost_re": 0.0, "cost_im": 0.0, "v_lo": 0.81, "v_hi": 1.21,
               "p_lo": None, "p_hi": None, "q_lo": None, "q_hi": None}
        doc["bus_phase"] = {"a": [dict(rec)], "b": [dict(rec)], "c": [dict(rec)]}
        case = case_from_dict(doc)
        assert not validate_tree(case.network).is_tree


class TestRoundTrip:
    @pytest.mark.parametrize("seed", range(4))
    def test_generated_case_round_trip_identity(self, seed, tmp_path):
        case = generate_random_case(seed, n=5, m=2, profile="a3-safe")
        path = tmp_path / "case.json"
        write_case(case, str(path))
        again = parse_case(str(path))
        path2 = tmp_path / "case2.json"
        write_case(again, str(path2))
        assert path.read_bytes() == path2.read_bytes()
        assert case_digest(case) == case_digest(again)

    def test_bundled_case_round_trip(self, tmp_path):
        case = load_bundled_case()
        path = tmp_path / "copy.json"
        write_case(case, str(path))
        again = parse_case(str(path))
        assert case_digest(case) == case_digest(again)

    def test_bundled_case_matches_published_sets(self):
        case = load_bundled_case()
        names = case.network.names
        sets = exactness.critical_sets(case)
        assert {names[j] for j in sets.objective} == {"650", "633", "645", "671", "611", "652"}
        assert {names[j] for j in sets.bounded} == {"650", "633", "645", "671", "611"}


class TestGenerator:
    def test_determinism_identical_bytes(self):
        a = generate_random_case(7, n=6, m=2, profile="corollary-safe")
        b = generate_random_case(7, n=6, m=2, profile="corollary-safe")
        assert canonical_json(case_to_dict(a)) == canonical_json(case_to_dict(b))

    @pytest.mark.parametrize("seed", range(6))
    def test_corollary_safe_passes_apriori_check(self, seed):
        case = generate_random_case(seed, n=8, m=3, profile="corollary-safe")
        sets = exactness.critical_sets(case)
        report = exactness.check_conditions(case, sets, None, validate_tree(case.network), mode="apriori")
        assert report.a2_tree.passed and report.corollary_primal.passed

    @pytest.mark.parametrize("seed", range(6))
    def test_adversarial_fails_non_adjacency(self, seed):
        case = generate_random_case(seed, n=6, m=1, profile="adversarial")
        sets = exactness.critical_sets(case)
        flags = exactness.zero_flags(case.network.n, case.network.m)
        report = exactness.check_conditions(case, sets, flags, validate_tree(case.network))
        assert not report.a3_non_adjacent.passed
        assert report.a3_non_adjacent.witnesses

    @pytest.mark.parametrize("seed", range(6))
    def test_a3_safe_bounds_align_with_costs(self, seed):
        case = generate_random_case(seed, n=7, m=2, profile="a3-safe")
        finite_hi = np.isfinite(case.p_hi) & (case.c_re != 0)
        finite_lo = np.isfinite(case.p_lo) & (case.c_re != 0)
        assert np.all(case.c_re[finite_hi] >= 0)
        assert np.all(case.c_re[finite_lo] <= 0)
        finite_hi = np.isfinite(case.q_hi) & (case.c_im != 0)
        finite_lo = np.isfinite(case.q_lo) & (case.c_im != 0)
        assert np.all(case.c_im[finite_hi] >= 0)
        assert np.all(case.c_im[finite_lo] <= 0)

    def test_generated_tree_topology(self):
        for seed in range(8):
            case = generate_random_case(seed, n=9, m=1, profile="corollary-safe")
            assert validate_tree(case.network).is_tree

    def test_bad_profile_rejected(self):
        with pytest.raises(Exception, match="profile"):
            generate_random_case(0, n=4, m=1, profile="nonsense")

    def test_too_small_rejected(self):
        with pytest.raises(Exception):
            generate_random_case(0, n=1, m=1, profile="corollary-safe")


class TestReports:
    def make_report(self):
        return RunReport(
            command="solve",
            tool_version="0.1.0",
            case_digest="ab" * 32,
            solver={"objective": -1.25, "gap": 1e-9, "iterations": 17,
                    "complementarity": 3e-9, "primal_infeasibility": 1e-10,
                    "dual_infeasibility": 1e-12},
            objective=-1.25,
            rank={"eigenvalues": [36.9, 1.44e-10], "ratio": 3.9e-12, "verdict": "pass"},
            conditions=None,
            voltages=None,
            perturbation=None,
        )

    def test_round_trip_identity(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.json"
        write_report(report, str(path), format="json")
        assert parse_report(str(path)) == report

    def test_json_bytes_deterministic(self, tmp_path):
        report = self.make_report()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_report(report, str(p1), format="json")
        write_report(report, str(p2), format="json")
        assert p1.read_bytes() == p2.read_bytes()

    def test_not_run_perturbation_null_in_json_absent_in_text(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.json"
        write_report(report, str(path), format="json")
        doc = json.loads(path.read_text())
        assert doc["perturbation"] is None
        text_path = tmp_path / "report.txt"
        write_report(report, str(text_path), format="text")
        assert "perturbation" not in text_path.read_text()

    def test_text_headline_carries_top_two_eigenvalues(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.txt"
        write_report(report, str(path), format="text")
        text = path.read_text()
        assert "largest two eigenvalues" in text
        assert "36.9" in text

    def test_non_finite_numbers_rejected(self):
        with pytest.raises(ValueError):
            canonical_json({"x": math.inf})

    def test_unknown_fields_rejected(self):
        with pytest.raises(CaseFileError, match="unknown"):
            report_from_dict({"command": "solve", "bogus": 1})

    def test_float_formatting_round_trips_exactly(self):
        values = [1 / 3, 1e-300, 36.9, -1.4400000000000001e-10]
        rendered = canonical_json(values)
        assert json.loads(rendered) == values
