import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixture_text
from flowcheck import expr as ex
from flowcheck.model import (
    ModelError,
    drift,
    eval_rate,
    model_to_json,
    parse_population_model,
    validate,
    with_population,
)


def sis_doc():
    return json.loads(fixture_text("sis.json"))


def codes(doc):
    with pytest.raises(ModelError) as info:
        parse_population_model(json.dumps(doc))
    return {d.code for d in info.value.diagnostics}


def test_sis_shape(sis):
    assert sis.states == ("S", "I")
    assert len(sis.agent_class.transitions) == 3
    assert [g.name for g in sis.transitions] == ["tau_r", "tau_i"]
    assert validate(sis) == []


def test_update_vectors_are_target_minus_source(sis):
    upd = {g.name: g.update for g in sis.transitions}
    assert upd["tau_r"] == (1, -1)
    assert upd["tau_i"] == (-1, 1)


def test_duplicate_label_rejected():
    doc = sis_doc()
    doc["class"]["transitions"][1]["label"] = "inf"
    assert "duplicate-label" in codes(doc)


def test_count_mismatch_rejected():
    doc = sis_doc()
    doc["initial"] = {"S": 900, "I": 50}
    assert "count-mismatch" in codes(doc)


def test_unresolved_label_rejected():
    doc = sis_doc()
    doc["global_transitions"][0]["sync"] = [{"label": "foo", "count": 1}]
    assert "unresolved-label" in codes(doc)


def test_unknown_parameter_and_state():
    doc = sis_doc()
    doc["global_transitions"][0]["rate"] = "k_zz * x_Q"
    assert {"unknown-parameter", "unknown-state"} <= codes(doc)


def test_syntax_error_has_location():
    with pytest.raises(ModelError, match="line 1"):
        parse_population_model('{"parameters": ')


def test_conservation_diagnostic(sis):
    bad = replace(sis, transitions=(replace(sis.transitions[0], update=(1, 0)),) + sis.transitions[1:])
    assert "conservation" in {d.code for d in validate(bad)}


def test_eval_rate_examples(sis):
    f_r, f_i = (g.rate for g in sis.transitions)
    params = {k: float(v) for k, v in sis.parameters.items()}
    assert eval_rate(f_i, {"S": 0.9, "I": 0.1}, params) == pytest.approx(0.108)
    assert eval_rate(f_r, {"S": 1.0, "I": 0.0}, params) == 0.0
    assert eval_rate(f_i, {"S": 0.0, "I": 1.0}, params) == 0.0


def test_eval_rate_errors():
    with pytest.raises(ex.ExprError):
        eval_rate(ex.parse_expr("1 / x_S"), {"S": 0.0}, {})
    with pytest.raises(ex.ExprError):
        eval_rate(ex.parse_expr("x_S - 1"), {"S": 0.5}, {})


def test_drift_examples(sis):
    assert drift(sis, [0.9, 0.1]) == pytest.approx([-0.008, 0.008], abs=1e-15)
    assert drift(sis, [1 / 1.2, 1 - 1 / 1.2]) == pytest.approx([0.0, 0.0], abs=1e-15)
    assert drift(sis, [1.0, 0.0]) == pytest.approx([0.0, 0.0], abs=0)


@given(st.floats(0, 1))
def test_drift_sums_to_zero(s):
    model = parse_population_model(fixture_text("sis.json"))
    assert abs(drift(model, [s, 1 - s]).sum()) < 1e-15


def test_round_trip(sis):
    again = parse_population_model(model_to_json(sis))
    assert again == sis


def test_label_rates_match_generator_entries(sis):
    lam = sis.label_rates(np.array([0.8, 0.2]))
    by = dict(zip(sis.agent_class.labels, lam))
    assert by["inf"] == pytest.approx(1.2 * 0.2)
    assert by["rec"] == pytest.approx(1.0)
    assert by["pass"] == pytest.approx(1.2 * 0.8)


def test_label_rates_zero_on_empty_source(sis):
    by = dict(zip(sis.agent_class.labels, sis.label_rates(np.array([1.0, 0.0]))))
    assert by["rec"] == 0.0 and by["inf"] == 0.0


@pytest.mark.parametrize("N", [1, 7, 250, 999, 5000])
def test_with_population_preserves_total(sis, N):
    m = with_population(sis, N)
    assert sum(m.initial.values()) == N == m.N
    assert validate(m) == []


def test_with_population_keeps_ratio(sis):
    assert with_population(sis, 250).initial == {"S": 225, "I": 25}
