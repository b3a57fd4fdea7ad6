from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trace
from ltnppm.reallogic import atom_truth, atoms_of, to_fol
from ltnppm.rules import (
    Condition,
    RuleCompileError,
    RuleParseError,
    RuleSpec,
    build_kb,
    compile_rule,
    crisp_trace_compliance,
    format_rules,
    is_compliant,
    parse_rules,
    suggest_rules,
)
from oracles import scalar_truth


def test_parse_declare_rule():
    (spec,) = parse_rules("response(Rev, Exam)")
    assert (spec.category, spec.template, spec.args) == ("control_flow", "response", ("Rev", "Exam"))


def test_parse_if_then_rule():
    (spec,) = parse_rules("r9: if wait_time(Surg, ATB) > 2 and payload(age, case) > 60 on all then P")
    assert spec.id == "r9" and spec.category == "temporal"
    assert spec.expected_effect == "implies_positive"
    assert spec.conditions[0] == Condition("wait_time", ("Surg", "ATB"), ">", 2.0)


def test_typo_reports_line_number():
    with pytest.raises(RuleParseError) as exc:
        parse_rules("respnse(Rev, Exam)\nresponse(A, B)")
    assert exc.value.diagnostics[0][0] == 1
    assert "respnse" in str(exc.value)


def test_all_errors_are_collected():
    with pytest.raises(RuleParseError) as exc:
        parse_rules("bogus(A)\nresponse(A, B)\nif wait_time(A) > 2 then P\n")
    assert [n for n, _ in exc.value.diagnostics] == [1, 3]


def test_unknown_activity_is_rejected_when_vocabulary_given():
    with pytest.raises(RuleParseError, match="unknown activity"):
        parse_rules("response(Rev, Nope)", activities={"Rev", "Exam"})


def test_duplicate_ids_are_rejected():
    with pytest.raises(RuleParseError, match="duplicate"):
        parse_rules("a: existence(X)\na: existence(Y)")


def test_categorical_constant_only_with_payload_equality():
    (spec,) = parse_rules("if payload(ward, case) = ICU then P")
    assert spec.conditions[0].value == "ICU"
    with pytest.raises(RuleParseError):
        parse_rules("if wait_time(A, B) > soon then P")


GOLDEN = [
    ("response(Rev, Exam)", "∀l(HasAct(l, Rev) ∧ Next(l, Rev, Exam))"),
    (
        "if wait_time(Surg, ATB) > 2 and payload(age, case) > 60 on all then P",
        "∀l((WaitTime(l, Surg, ATB) > 2 ∧ Age(l) > 60) → P(l))",
    ),
    ("if wait_time(Surg, ATB) <= 2 on positive then not P", "∀l₊(WaitTime(l₊, Surg, ATB) ≤ 2 → ¬P(l₊))"),
    ("if payload(oxygen_sat, last) < 90 on positive then P", "∀l₊(Payload(l₊, oxygen_sat, last) < 90 → P(l₊))"),
    ("guarded_response(Rev, Exam)", "∀l(HasAct(l, Rev) → Next(l, Rev, Exam))"),
    ("not_coexistence(A, B)", "∀l(¬(HasAct(l, A) ∧ HasAct(l, B)))"),
]


@pytest.mark.parametrize("dsl, fol", GOLDEN)
def test_compiled_formula_matches_golden(dsl, fol):
    (spec,) = parse_rules(dsl)
    assert to_fol(compile_rule(spec).formula) == fol


def test_compile_rejects_if_then_without_conditions():
    with pytest.raises(RuleCompileError):
        compile_rule(RuleSpec("bad", "payload", "if_then", expected_effect="implies_positive"))


def test_compile_rejects_effect_without_predicate():
    with pytest.raises(RuleCompileError, match="never mentions P"):
        compile_rule(RuleSpec("bad", "control_flow", "existence", ("A",), expected_effect="implies_positive"))


def test_build_kb_sizes():
    assert len(build_kb([]).knowledge) == 0
    assert len(build_kb([]).data) == 2
    specs = parse_rules("\n".join(f"existence(A{i})" for i in range(5)))
    kb = build_kb(specs)
    assert len(kb.knowledge) == 5 and kb.spec("r3").args == ("A2",)


def test_pruned_must_be_subset():
    kb = build_kb(parse_rules("a: existence(X)\nb: existence(Y)"))
    assert [a.id for a in kb.with_pruned({"b"}).pruned] == ["b"]
    with pytest.raises(ValueError):
        replace(kb, knowledge=kb.knowledge[:1], pruned=kb.knowledge[1:])


activity = st.sampled_from(["A", "B", "Surg", "ATB"])
condition = st.one_of(
    st.builds(lambda a, b, op, v: Condition("wait_time", (a, b), op, float(v)),
              activity, activity, st.sampled_from([">", ">=", "<", "<="]), st.integers(0, 500)),
    st.builds(lambda att, agg, op, v: Condition("payload", (att, agg), op, float(v)),
              st.sampled_from(["age", "oxygen_sat"]), st.sampled_from(["case", "last", "mean"]),
              st.sampled_from([">", "<", "="]), st.integers(-50, 500)),
    st.builds(lambda a, v: Condition("occ_count", (a,), ">=", float(v)), activity, st.integers(0, 5)),
)
if_then = st.builds(
    lambda conds, scope, eff: RuleSpec("x", "", "if_then", (), tuple(conds), scope, eff),
    st.lists(condition, min_size=1, max_size=3), st.sampled_from(["all", "positive", "negative"]),
    st.sampled_from(["implies_positive", "implies_negative"]),
)
declare = st.builds(
    lambda t, a, b, scope: RuleSpec("x", "control_flow", t, (a, b), (), scope),
    st.sampled_from(["response", "chain_response", "precedence", "not_coexistence"]), activity, activity,
    st.sampled_from(["all", "positive", "negative"]),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(if_then, declare), min_size=1, max_size=5))
def test_format_then_parse_round_trips(specs):
    specs = [replace(s, id=f"k{i}") for i, s in enumerate(specs)]
    back = parse_rules(format_rules(specs))
    key = lambda s: (s.id, s.template, s.args, s.conditions, s.class_scope, s.expected_effect)
    assert [key(s) for s in back] == [key(s) for s in specs]
    assert format_rules(back) == format_rules(specs)


AGE_RULE = "r1: if payload(age, case) > 60 on all then P\n"


def test_compliance_fixture_counts():
    kb = build_kb(parse_rules(AGE_RULE))
    labels = [1, 1, 0, 1, 0, 1]
    traces = [make_trace(f"c{i}", [("A", 0), ("B", 1)], y, {"age": 70.0}) for i, y in enumerate(labels)]
    assert sum(is_compliant(t, kb) for t in traces) == 4


def test_rule_that_never_fires_is_not_compliant():
    kb = build_kb(parse_rules(AGE_RULE))
    young = make_trace("y", [("A", 0)], 0, {"age": 30.0})
    res = crisp_trace_compliance(young, kb)
    assert res.overall and not is_compliant(young, kb)


RULES = """\
a: response(Rev, Exam)
b: if wait_time(Surg, ATB) > 2 and payload(age, case) > 60 on all then P
c: if wait_time(Surg, ATB) <= 2 on positive then not P
d: if payload(oxygen_sat, last) < 90 on all then P
e: precedence(Reg, Surg)
"""


def test_crisp_compliance_matches_scalar_evaluator(hospital_traces):
    kb = build_kb(parse_rules(RULES))
    for trace in hospital_traces:
        res = crisp_trace_compliance(trace, kb)
        for ax in kb.knowledge:
            scope = ax.formula.domain
            if scope != "all" and (scope == "positive") != bool(trace.label):
                expected = True
            else:
                truths = {a: atom_truth(a, trace) for a in atoms_of(ax.formula)}
                expected = scalar_truth(ax.body, truths, float(trace.label)) == 1.0
            assert res.per_rule[ax.id] == expected, (trace.case_id, ax.id)


def test_crisp_compliance_examples(hospital_traces):
    kb = build_kb(parse_rules(RULES))
    c1, c2, c3, c4 = (crisp_trace_compliance(t, kb) for t in hospital_traces)
    assert c1.per_rule["b"] and c1.fired["b"]
    assert c2.per_rule["c"] and not c2.fired.get("c", False)
    assert c3.fired["d"] and c3.per_rule["d"]
    assert not c4.per_rule["a"]


def test_suggestions_find_certain_response():
    traces = [make_trace(f"c{i}", [("A", 0), ("B", 1), ("C", 2)]) for i in range(12)]
    found = {(s.template, s.args) for s in suggest_rules(traces)}
    assert ("chain_response", ("A", "B")) in found
    assert ("existence", ("A",)) in found
