import json
from fractions import Fraction

import pytest

from conftest import fixture_text
from flowcheck.dta import parse_dta
from flowcheck.model import ModelError
from flowcheck.product import ProductState as P
from flowcheck.product import build_product, extract_regions, reachable_closure

LABELS = ("inf", "rec", "pass")


def regions_for(constants, T):
    edges = [{"from": "q0", "label": "inf", "guard": f"c<={c}", "to": "q0"} for c in constants]
    doc = {"time_horizon": T, "states": ["q0", "q1"], "initial": "q0", "final": ["q1"], "edges": edges,
           "implicit_self_loops": False}
    return [(r.lo, r.hi) for r in extract_regions(parse_dta(json.dumps(doc)))]


def test_regions_running_example(sis_dta):
    assert [(r.lo, r.hi) for r in extract_regions(sis_dta)] == [(0, 5), (5, 20)]


def test_regions_edge_cases(caplog):
    assert regions_for([], 10) == [(0, 10)]
    assert regions_for([2, 2, 7], 10) == [(0, 2), (2, 7), (7, 10)]
    assert regions_for([3, 12], 10) == [(0, 3), (3, 10)]
    assert "never bind" in caplog.text


def test_state_space(sis, sis_dta):
    raw = build_product(sis.agent_class, sis_dta, "S", prune=False)
    assert len(raw.states) == 12
    pruned = build_product(sis.agent_class, sis_dta, "S")
    names = {str(p) for p in pruned.states}
    assert len(names) == 10
    assert "1:I:q1" not in names and "2:I:q1" not in names
    assert pruned.initial == P(1, "S", "q0")
    assert pruned.final == {p for p in pruned.states if p.q == "q2"}


def test_reset_transitions(sis_product):
    resets = {(t.source, t.target) for t in sis_product.resets}
    assert resets == {(P(1, "I", "q0"), P(1, "S", "q1")), (P(2, "I", "q0"), P(1, "S", "q1"))}
    assert all(t.label == "rec" for t in sis_product.resets)


def test_transition_shapes(sis_product):
    for t in sis_product.transitions:
        if t.reset:
            assert t.target.region == 1
        else:
            assert t.target.region == t.source.region
    seen = set()
    for t in sis_product.transitions:
        assert (t.source, t.label) not in seen
        seen.add((t.source, t.label))


def test_clock_events(sis_product):
    names = [e.name for e in sis_product.events]
    assert names == ["e_1^0", "e_1^1"]
    e0, e1 = sis_product.events
    assert e0.activation == frozenset(sis_product.region_states(1))
    assert e1.activation == {P(1, "S", "q1"), P(1, "S", "q2"), P(1, "I", "q2")}
    assert e0.duration == e1.duration == 5


def test_deterministic_successors(sis_product):
    for p in sis_product.states:
        nxt = sis_product.deterministic_successor(p)
        if p.region == 1:
            assert nxt == P(2, p.s, p.q)
        else:
            assert nxt is None


def test_reachable_closure(sis_product):
    tr = sis_product.transitions
    assert reachable_closure(tr, [P(1, "S", "q1")]) == {P(1, "S", "q1"), P(1, "I", "q2"), P(1, "S", "q2")}
    assert reachable_closure(tr, []) == set()
    region1 = set(sis_product.region_states(1))
    assert reachable_closure(tr, region1) == region1


def test_totality_failure_points_at_self_loops(sis):
    doc = json.loads(fixture_text("sis_property.json"))
    doc["implicit_self_loops"] = False
    dta = parse_dta(json.dumps(doc), LABELS)
    with pytest.raises(ModelError, match="implicit_self_loops"):
        build_product(sis.agent_class, dta, "S")


def test_dot_export(sis_product):
    dot = sis_product.to_dot()
    assert dot.startswith("digraph")
    assert dot.count(" color=red") == 2
    assert dot.count("style=dashed") == 5
    assert '"1:S:q2" [shape=doublecircle]' in dot


def test_three_regions(sis):
    doc = json.loads(fixture_text("sis_property.json"))
    doc["edges"] = [
        {"from": "q0", "label": "rec", "guard": "true", "reset": True, "to": "q1"},
        {"from": "q1", "label": "inf", "guard": "c<=2", "to": "q0"},
        {"from": "q1", "label": "inf", "guard": "c>2 & c<=4", "to": "q2"},
        {"from": "q1", "label": "inf", "guard": "c>4", "to": "q0"},
    ]
    dta = parse_dta(json.dumps(doc), LABELS)
    prod = build_product(sis.agent_class, dta, "S")
    assert prod.k == 2
    assert [e.name for e in prod.events][-1] == "e_2"
    assert prod.events[-1].duration == Fraction(2)
