import pytest

from privgraph.planner import PlanStep, QueryError, plan
from privgraph.sexpr import parse_sexpr


class TestPlanSteps:
    def test_term(self):
        assert plan("(term friend:1)").kinds() == ["IndexAccess"]

    def test_term_sorted(self):
        assert plan("(term friend:1)", sort=True).kinds() == [
            "IndexAccess",
            "Sorting",
        ]

    def test_and(self):
        p = plan("(and friend:1 friend:2)")
        assert p.kinds() == ["IndexAccess", "SetOp"]
        assert p.steps[0].detail == "friend:1"

    def test_and_uses_frequency_metadata(self):
        p = plan("(and friend:1 friend:2)", lengths={"friend:1": 9, "friend:2": 2})
        assert p.steps[0].detail == "friend:2"

    def test_difference_negates(self):
        p = plan("(difference friend:1 friend:2)")
        assert p.kinds() == ["IndexAccess", "SetOp"]
        assert p.steps[1].detail.startswith("not ")

    def test_or_one_access_per_term(self):
        p = plan("(or friend:1 friend:2 friend:3)")
        assert p.kinds() == [
            "IndexAccess", "SetOp",
            "IndexAccess", "SetOp",
            "IndexAccess",
        ]

    def test_score_adds_arithmetic(self):
        p = plan("(term friend:1)", sort=True, score="(mul key key)")
        assert p.kinds() == ["IndexAccess", "Arithmetic", "Sorting"]

    def test_apply_two_rounds(self):
        p = plan("(apply friend: (term friend:1))", sort=True)
        # nested round is always ranked, then the instantiated outer round
        assert p.kinds() == [
            "IndexAccess", "Sorting",
            "IndexAccess", "SetOp",
            "Sorting",
        ]

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            PlanStep("Voodoo")

    def test_accepts_parsed_expression(self):
        expr = parse_sexpr("(and friend:1 friend:2)")
        assert plan(expr).kinds() == ["IndexAccess", "SetOp"]
