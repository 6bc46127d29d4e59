import csv

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from motelab.analysis import (SIMILARITY_COLUMNS, WELCH_COLUMNS, DegenerateSampleError, SimilaritySample,
                              betainc_regularized, compare_similarity, emit_report, inter_task_similarity, t_cdf,
                              welch_one_sided)
from motelab.data import Vocabulary
from motelab.model import EncoderConfig, init_model, upcycle
from motelab.routing import default_registry

TASKS = ["search_query", "search_document", "classification", "clustering"]
GRID_T = [x / 2 for x in range(-20, 21)]
GRID_DF = [1, 2.5, 10, 100]


def t_cdf_quadrature(t, df):
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    if t <= 0:
        return float(mpmath.quad(pdf, [-mpmath.inf, t]))
    return float(1 - mpmath.quad(pdf, [t, mpmath.inf]))


@pytest.mark.parametrize("df", GRID_DF)
def test_t_cdf_matches_quadrature_on_grid(df):
    for t in GRID_T:
        assert abs(t_cdf(t, df) - t_cdf_quadrature(t, df)) < 1e-8, (t, df)


def test_t_cdf_special_values():
    assert t_cdf(0.0, 3.7) == 0.5
    assert t_cdf(float("inf"), 2) == 1.0 and t_cdf(float("-inf"), 2) == 0.0
    # Cauchy closed form
    for t in (-3.0, -0.2, 0.7, 5.0):
        assert t_cdf(t, 1) == pytest.approx(0.5 + np.arctan(t) / np.pi, abs=1e-13)
    with pytest.raises(ValueError):
        t_cdf(1.0, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(0.5, 500))
def test_t_cdf_symmetry_and_reference(t, df):
    assert abs(t_cdf(t, df) + t_cdf(-t, df) - 1.0) < 1e-12
    assert abs(t_cdf(t, df) - stats.t.cdf(t, df)) < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0.001, 0.999))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc

    assert abs(betainc_regularized(a, b, x) - betainc(a, b, x)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 50), st.floats(-5, 5), st.floats(0.01, 3))
def test_t_cdf_monotone_in_t(df, t, dt):
    assert t_cdf(t + dt, df) >= t_cdf(t, df)


def test_welch_examples():
    r = welch_one_sided([1, 2, 3], [2, 1, 3])
    assert r.t_statistic == 0.0 and r.p_value == 0.5
    x, y = [1.0, 2, 3, 4], [5.0, 6, 7, 8]
    r = welch_one_sided(x, y)
    # equal variances 5/3, n = m = 4: t = -4 / sqrt(5/6), df = 6
    assert r.t_statistic == pytest.approx(-4 / np.sqrt(5 / 6), abs=1e-12)
    assert r.degrees_of_freedom == pytest.approx(6.0, abs=1e-12)
    assert abs(r.p_value - t_cdf_quadrature(r.t_statistic, r.degrees_of_freedom)) < 1e-8
    assert welch_one_sided(y, x).p_value > 0.99
    with pytest.raises(DegenerateSampleError):
        welch_one_sided([1, 1], [2, 2])
    with pytest.raises(DegenerateSampleError):
        welch_one_sided([1], [2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=15), st.lists(st.floats(-10, 10), min_size=2, max_size=15))
def test_welch_matches_scipy_and_complements(x, y):
    if np.var(x) == 0 and np.var(y) == 0:
        return
    r = welch_one_sided(x, y)
    ref = stats.ttest_ind(x, y, equal_var=False, alternative="less")
    assert r.t_statistic == pytest.approx(ref.statistic, rel=1e-9, abs=1e-12)
    assert abs(r.p_value - ref.pvalue) < 1e-9
    assert 0.0 <= r.p_value <= 1.0 and r.degrees_of_freedom > 0
    assert abs(r.p_value + welch_one_sided(y, x).p_value - 1.0) < 1e-10


def small_models():
    vocab = Vocabulary([f"w{i}" for i in range(30)]).extend_for(default_registry())
    cfg = EncoderConfig(vocab_size=64, max_seq_len=16, hidden_dim=8, num_heads=2, num_layers=2, mlp_hidden_dim=16,
                        seed=9)
    return init_model(cfg, vocab=vocab), vocab


def test_similarity_of_identical_prefixes_is_one():
    dense, vocab = small_models()
    same = init_model(dense.config, default_registry().with_prefixes("clustering: "), vocab)
    samples = inter_task_similarity(same, ["classification", "clustering"], [(8, 9), (10, 11, 12)])
    assert [s.get("clustering", "classification") for s in samples] == [1.0, 1.0]


def test_similarity_counts_symmetry_and_upcycled_difference():
    dense, _ = small_models()
    rng = np.random.default_rng(0)
    seqs = [tuple(rng.integers(7, 37, size=4)) for _ in range(128)]
    base = inter_task_similarity(dense, TASKS, seqs)
    up = inter_task_similarity(upcycle(dense, 4), TASKS, seqs)
    assert len(up) == 128 and all(len(s.values) == 6 for s in up)
    for s, b in zip(up, base):
        for a, c in s.values:
            assert s.get(a, c) == s.get(c, a)
            assert -1.0 <= s.get(a, c) <= 1.0
            assert abs(s.get(a, c) - b.get(a, c)) < 1e-9
    with pytest.raises(ValueError):
        inter_task_similarity(dense, ["clustering"], seqs)
    with pytest.raises(ValueError):
        inter_task_similarity(dense, TASKS, seqs[:1])


def test_emit_report_formats(tmp_path):
    assert emit_report([], tmp_path / "e.csv").read_text() == ",".join(SIMILARITY_COLUMNS) + "\n"
    samples = [SimilaritySample(0, {("a", "b"): 0.1}), SimilaritySample(1, {("a", "b"): 1 / 3})]
    path = emit_report(samples, tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 3 and rows[2] == ["1", "a", "b", "0.33333333333333331"]
    first = path.read_bytes()
    assert emit_report(samples, tmp_path / "s.csv").read_bytes() == first

    other = [SimilaritySample(0, {("a", "b"): 0.5}), SimilaritySample(1, {("a", "b"): 0.7})]
    comp = compare_similarity(samples, other, "mote", "ic")
    rows = list(csv.reader(emit_report(comp, tmp_path / "w.csv").open()))
    assert tuple(rows[0]) == WELCH_COLUMNS and len(rows) == 2
    assert float(rows[1][-1]) == comp[0].result.p_value
