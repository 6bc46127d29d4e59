import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motelab.routing import (HETEROGENEOUS, HOMOGENEOUS, EmptyBatchError, RegistryError, TaskEntry, TaskRegistry,
                             TokenRouteDecision, UnregisteredTaskError, default_registry, load_balancing_loss,
                             route_sequence, route_tokens)


def argmax_oracle(gate, hidden):
    out = []
    for row in hidden:
        logits = [sum(row[k] * gate[k][e] for k in range(len(row))) for e in range(len(gate[0]))]
        m = max(logits)
        exps = [np.exp(v - m) for v in logits]
        z = sum(exps)
        probs = [v / z for v in exps]
        best = 0
        for e in range(1, len(probs)):
            if probs[e] > probs[best]:
                best = e
        out.append(best)
    return out


def test_route_sequence_lookup():
    reg = default_registry()
    assert route_sequence(reg, "classification") == 2
    assert route_sequence(reg, "classification") == route_sequence(reg, "classification")
    assert sorted(route_sequence(reg, t) for t in reg) == [0, 1, 2, 3]
    with pytest.raises(UnregisteredTaskError):
        route_sequence(reg, "summarization")


def test_registry_defaults_follow_task_aware_rules():
    reg = default_registry()
    assert reg["search_query"].batching == HOMOGENEOUS
    assert reg["classification"].batching == HETEROGENEOUS
    assert reg["clustering"].temperature == 0.06
    assert reg["search_query"].temperature == reg["classification"].temperature == 0.03
    assert reg.instructions_for("retrieval") == ("search_query", "search_document")
    assert reg.instructions_for("clustering") == ("clustering", "clustering")
    static = reg.static()
    assert all(e.batching == HETEROGENEOUS and e.temperature == 0.03 for e in static.entries.values())
    assert [route_sequence(static, t) for t in static] == [route_sequence(reg, t) for t in reg]


def test_registry_validation():
    with pytest.raises(RegistryError):
        TaskRegistry({"a": TaskEntry("a: ", 0, HOMOGENEOUS, 0.03), "b": TaskEntry("b: ", 0, HOMOGENEOUS, 0.03)})
    with pytest.raises(RegistryError):
        TaskRegistry({"a": TaskEntry("a: ", 0, HOMOGENEOUS, 0.0)})
    with pytest.raises(RegistryError):
        TaskRegistry({"a": TaskEntry("a: ", 0, "sideways", 0.03)})
    with pytest.raises(RegistryError):
        TaskRegistry({"a": TaskEntry("a: ", 0, HOMOGENEOUS, 0.03)}, {"t": ("a", "zzz")})


def test_route_tokens_tie_and_saturation():
    hidden = np.random.default_rng(0).normal(size=(5, 3))
    d = route_tokens(np.zeros((3, 4)), hidden)
    assert np.array_equal(d.expert_index, np.zeros(5, dtype=int))
    np.testing.assert_allclose(d.gate_probabilities, 0.25)
    gate = np.zeros((3, 4))
    gate[:, 2] = 1000.0
    d = route_tokens(gate, np.abs(hidden) + 0.1)
    assert np.all(d.expert_index == 2)
    assert np.all(d.gate_probabilities[:, 2] > 1 - 1e-12)


def test_route_tokens_matches_argmax_oracle_on_random_instances():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        gate, hidden = rng.normal(size=(6, 4)), rng.normal(size=(16, 6))
        d = route_tokens(gate, hidden)
        assert list(d.expert_index) == argmax_oracle(gate.tolist(), hidden.tolist())
        np.testing.assert_allclose(d.gate_probabilities.sum(axis=1), 1.0, atol=1e-12)


def test_load_balancing_examples():
    E = 4
    uniform = TokenRouteDecision(np.arange(8) % E, np.full((8, E), 1 / E))
    assert load_balancing_loss(uniform) == pytest.approx(1.0, abs=1e-15)
    probs = np.zeros((6, E))
    probs[:, 1] = 1.0
    assert load_balancing_loss(TokenRouteDecision(np.ones(6, dtype=int), probs)) == pytest.approx(E)
    # fractions [.5,.5,0,0], mean probabilities [.4,.4,.1,.1]
    probs = np.array([[0.4, 0.4, 0.1, 0.1]] * 4)
    d = TokenRouteDecision(np.array([0, 0, 1, 1]), probs)
    assert load_balancing_loss(d) == pytest.approx(1.6, abs=1e-12)
    with pytest.raises(EmptyBatchError):
        load_balancing_loss(TokenRouteDecision(np.zeros(0, dtype=int), np.zeros((0, E))))


def test_load_balancing_can_dip_below_one_with_argmax_consistent_assignment():
    # Heavily loaded expert 1 holds only a narrow probability lead, while the
    # lone token on expert 0 is confident: E * sum f p = 2 * (1/3*0.6 + 2/3*0.4) = 14/15.
    probs = np.array([[0.9, 0.1], [0.45, 0.55], [0.45, 0.55]])
    d = TokenRouteDecision(np.argmax(probs, axis=1), probs)
    assert load_balancing_loss(d) == pytest.approx(14 / 15, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_load_balancing_at_least_one_when_probabilities_uniform_or_assignment_balanced(E, per, seed):
    rng = np.random.default_rng(seed)
    n = E * per
    # balanced assignment: f uniform, so the loss is sum(p) = 1 whatever the probabilities
    probs = rng.dirichlet(np.ones(E), size=n)
    d = TokenRouteDecision(np.arange(n) % E, probs)
    assert load_balancing_loss(d) == pytest.approx(1.0, abs=1e-12)
    # one-hot probabilities: f == p, and E * sum f^2 >= 1 by Cauchy-Schwarz
    idx = rng.integers(E, size=n)
    d = TokenRouteDecision(idx, np.eye(E)[idx])
    loss = load_balancing_loss(d)
    assert loss >= 1.0 - 1e-12
    if len(set(idx.tolist())) < E or np.bincount(idx, minlength=E).std() > 0:
        assert loss > 1.0
