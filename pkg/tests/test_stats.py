from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from carecoord import stats as ss
from carecoord.datamodel import DataError, PatientRecord, map_phewas
from carecoord.synth import ConfounderSpec, SynthConfig, generate


def _p(pid, los=100.0, age=40, icd9=(), cpt=(), ins="a"):
    return PatientRecord(pid, age, los, False, frozenset(icd9), frozenset(cpt), ins)


def nb_draw(rng, mean, alpha, size):
    r = 1.0 / alpha
    return rng.negative_binomial(r, r / (r + mean), size)


def finite_difference_gradient(X, y, beta, alpha, h=1e-5):
    """Central differences of the log-likelihood in (beta, log alpha), mapped back to alpha."""
    def ll(theta):
        return ss.nb_loglik(y, np.exp(X @ theta[:-1]), np.exp(theta[-1]))
    theta = np.append(beta, np.log(alpha))
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (ll(theta + e) - ll(theta - e)) / (2 * h)
    g[-1] /= alpha
    return g


@pytest.fixture(scope="module")
def cohort():
    return generate(SynthConfig(seed=12), with_events=False)


@pytest.fixture(scope="module")
def cohort_design(cohort):
    return ss.build_design(cohort.patients, cohort.true_patient_group,
                           ss.DesignConfig(mapping=cohort.mapping))


# ---------------------------------------------------------------------------
# design

def test_design_column_count():
    rows = [_p(f"p{i}", ins="ab"[i % 2]) for i in range(9)]
    labels = {f"p{i}": 1 + i % 3 for i in range(9)}
    d = ss.build_design(rows, labels)
    assert d.X.shape == (9, 7)
    assert d.names[0] == "intercept"
    assert sum(n.startswith("group[") for n in d.names) == 2
    assert sum(n.startswith("insurance[") for n in d.names) == 1


def test_design_single_group():
    d = ss.build_design([_p("a"), _p("b")], {"a": 1, "b": 1})
    assert not any(n.startswith("group[") for n in d.names)
    assert d.group_columns == {}


def test_design_degenerate_group():
    with pytest.raises(DataError, match="degenerate group"):
        ss.build_design([_p("a"), _p("b"), _p("c")], {"a": 1, "b": 1, "c": 2})


def test_design_reference_is_largest_group(cohort_design):
    assert cohort_design.reference_group == 3
    assert set(cohort_design.group_columns) == {1, 2}


def test_design_column_means_match_recount(cohort, cohort_design):
    rows = [p for p in cohort.patients if p.patient_id in cohort.true_patient_group]
    x = dict(zip(cohort_design.names, cohort_design.X.mean(axis=0)))
    n = len(rows)
    assert x["age"] == pytest.approx(sum(p.age for p in rows) / n, rel=1e-13)
    assert x["phewas_count"] == pytest.approx(
        sum(len(map_phewas(p, cohort.mapping)) for p in rows) / n, rel=1e-13)
    assert x["cpt_count"] == pytest.approx(sum(len(p.cpt_codes) for p in rows) / n, rel=1e-13)
    groups = Counter(cohort.true_patient_group[p.patient_id] for p in rows)
    assert x["group[1]"] == pytest.approx(groups[1] / n, rel=1e-13)
    ins = Counter(p.insurance for p in rows)
    for name, v in x.items():
        if name.startswith("insurance["):
            assert v == pytest.approx(ins[name[len("insurance["):-1]] / n, rel=1e-13)
    assert cohort_design.response.tolist() == [round(p.los_hours) for p in rows]


# ---------------------------------------------------------------------------
# likelihood pieces

def test_rising_sums_match_special_functions():
    from scipy import special
    y = np.array([0, 1, 5, 40, 300])
    for r in (0.3, 2.5, 40.0):
        s0, s1, s2 = ss._rising_sums(y, r)
        assert np.allclose(s0, special.gammaln(y + r) - special.gammaln(r) - y * np.log(r), rtol=1e-11, atol=1e-11)
        assert np.allclose(s1, special.digamma(y + r) - special.digamma(r), rtol=1e-11, atol=1e-13)
        assert np.allclose(s2, special.polygamma(1, r) - special.polygamma(1, y + r), rtol=1e-10, atol=1e-13)


def test_loglik_matches_scipy_pmf():
    rng = np.random.default_rng(0)
    y = nb_draw(rng, 50.0, 0.3, 200)
    mu = rng.uniform(20, 80, 200)
    alpha = 0.3
    r = 1 / alpha
    want = sps.nbinom.logpmf(y, r, r / (r + mu)).sum()
    assert ss.nb_loglik(y, mu, alpha) == pytest.approx(want, rel=1e-12)


def test_poisson_limit():
    rng = np.random.default_rng(1)
    y = rng.poisson(158, 500)
    mu = np.full(500, 155.0)
    a, b = ss.nb_loglik(y, mu, 1e-8), ss.poisson_loglik(y, mu)
    assert abs(a - b) <= 1e-4 * abs(b)


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(300), rng.normal(size=300)])
    y = nb_draw(rng, np.exp(3 + 0.4 * X[:, 1]), 0.5, 300)
    beta, alpha = np.array([2.9, 0.35]), 0.6
    assert np.allclose(ss.nb_gradient(X, y, beta, alpha),
                       finite_difference_gradient(X, y, beta, alpha), rtol=1e-5, atol=1e-4)


# ---------------------------------------------------------------------------
# fit_nb

def test_constant_response():
    y = np.full(50, 7)
    f = ss.fit_nb((np.ones((50, 1)), y))
    assert f.coefficients[0] == pytest.approx(np.log(7), abs=1e-10)
    assert f.dispersion == ss.ALPHA_MIN
    assert f.converged


def test_poisson_data():
    rng = np.random.default_rng(13)
    y = rng.poisson(np.exp(2), 5000)
    f = ss.fit_nb((np.ones((5000, 1)), y))
    assert abs(f.coefficients[0] - 2) <= 3 * f.std_errors[0]
    assert f.dispersion <= 0.05


def test_recovers_dispersion():
    y = nb_draw(np.random.default_rng(14), 158, 0.4, 5588)
    f = ss.fit_nb((np.ones((5588, 1)), y))
    assert 0.3 <= f.dispersion <= 0.5
    assert f.converged


def test_fit_gradient_vanishes():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(2000), rng.integers(0, 2, 2000), rng.normal(size=2000)])
    y = nb_draw(rng, np.exp(X @ [5.0, -0.1, 0.05]), 0.4, 2000)
    f = ss.fit_nb((X, y))
    assert np.max(np.abs(ss.nb_gradient(X, y, f.coefficients, f.dispersion))) <= 1e-6
    assert np.max(np.abs(finite_difference_gradient(X, y, f.coefficients, f.dispersion))) <= 1e-3


def test_agrees_with_statsmodels():
    sm = pytest.importorskip("statsmodels.discrete.discrete_model")
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(1500), rng.integers(0, 2, 1500), rng.normal(size=1500)])
    y = nb_draw(rng, np.exp(X @ [4.0, 0.2, -0.1]), 0.3, 1500)
    f = ss.fit_nb((X, y))
    ref = sm.NegativeBinomial(y, X, loglike_method="nb2").fit(disp=0, maxiter=100, method="newton")
    assert np.allclose(f.coefficients, ref.params[:3], atol=1e-5)
    assert f.dispersion == pytest.approx(ref.params[3], rel=1e-4)
    assert np.allclose(f.std_errors, ref.bse[:3], rtol=1e-3)


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(5)
    x = rng.normal(size=40)
    X = np.column_stack([np.ones(40), x, 2 * x])
    with pytest.raises(ss.RankDeficiencyError) as err:
        ss.fit_nb((X, rng.poisson(5, 40)))
    assert err.value.columns == ("x2",)
    assert "x2" in str(err.value)


def test_negative_response_rejected():
    with pytest.raises(DataError):
        ss.fit_nb((np.ones((3, 1)), np.array([1, -1, 2])))


# ---------------------------------------------------------------------------
# pairwise tests

def _two_group_design(rng, means, sizes, alpha):
    rows, labels = [], {}
    for g, (m, n) in enumerate(zip(means, sizes), start=1):
        for i, y in enumerate(nb_draw(rng, m, alpha, n)):
            pid = f"g{g}-{i}"
            rows.append(_p(pid, los=float(y)))
            labels[pid] = g
    return ss.build_design(rows, labels, ss.DesignConfig(covariates=()))


def test_same_group_trivial(cohort_design):
    f = ss.fit_nb(cohort_design)
    t = ss.pairwise_los_test(cohort_design, f, 2, 2)
    assert (t.delta_hours, t.p_value) == (0.0, 1.0)


def test_contrast_antisymmetry(cohort_design):
    f = ss.fit_nb(cohort_design)
    for a, b in ((1, 2), (1, 3), (2, 3)):
        ab = ss.pairwise_los_test(cohort_design, f, a, b)
        ba = ss.pairwise_los_test(cohort_design, f, b, a)
        assert ab.delta_hours == pytest.approx(-ba.delta_hours, abs=1e-12)
        assert ab.p_value == ba.p_value
        assert ab.ci95[0] <= ab.delta_hours <= ab.ci95[1]


def test_unknown_group(cohort_design):
    with pytest.raises(DataError):
        ss.pairwise_los_test(cohort_design, ss.fit_nb(cohort_design), 1, 9)


def test_null_calibration():
    rng = np.random.default_rng(15)
    p = []
    for _ in range(200):
        d = _two_group_design(rng, (158, 158), (2000, 2000), 0.4)
        p.append(ss.pairwise_los_test(d, ss.fit_nb(d), 1, 2).p_value)
    rate = np.mean(np.array(p) < 0.05)
    assert 0.02 <= rate <= 0.10


@pytest.mark.slow
def test_power_at_reported_group_sizes():
    rng = np.random.default_rng(16)
    hits = 0
    for _ in range(50):
        d = _two_group_design(rng, (144, 158), (428, 1353), SynthConfig().los_dispersion)
        t = ss.pairwise_los_test(d, ss.fit_nb(d), 1, 2)
        hits += t.p_value < 0.05
        assert t.delta_hours < 0 or t.p_value > 0.05
    assert hits >= 40


def test_lr_matches_wald_for_reference_contrast():
    d = _two_group_design(np.random.default_rng(17), (140, 160), (800, 1200), 0.3)
    f = ss.fit_nb(d)
    t = ss.pairwise_los_test(d, f, 1, 2)
    j = d.group_columns[1]
    wald = (f.coefficients[j] / f.std_errors[j]) ** 2
    assert t.lr_statistic == pytest.approx(wald, rel=0.05)


# ---------------------------------------------------------------------------
# factor distributions

def test_factor_distribution_examples():
    rows = [_p("a", icd9=("X", "Y")), _p("b", icd9=("X", "Y")), _p("c", icd9=("Z",))]
    support, vecs = ss.factor_distribution(rows, {"a": 1, "b": 1, "c": 2}, "phewas")
    assert support == ["X", "Y", "Z"]
    assert vecs[1].tolist() == [0.5, 0.5, 0.0]
    assert vecs[2].tolist() == [0.0, 0.0, 1.0]


def test_factor_distribution_unknown():
    with pytest.raises(ValueError):
        ss.factor_distribution([_p("a")], {"a": 1}, "zodiac")


def test_factor_distribution_recount():
    cohort = generate(SynthConfig(group_sizes=(100, 150, 200), area_group_sizes=(3, 3, 3), seed=16),
                      with_events=False)
    labels = cohort.true_patient_group
    for factor in ss.FACTORS:
        support, vecs = ss.factor_distribution(cohort.patients, labels, factor, cohort.mapping)
        for g, vec in vecs.items():
            assert vec.sum() == pytest.approx(1.0, abs=1e-12)
            tally = Counter()
            for p in cohort.patients:
                if labels[p.patient_id] != g:
                    continue
                if factor == "phewas":
                    tally.update({cohort.mapping.entries[c] for c in p.icd9_codes})
                elif factor == "procedure":
                    tally.update(p.cpt_codes)
                elif factor == "insurance":
                    tally[p.insurance] += 1
                else:
                    tally[p.age] += 1
            total = sum(tally.values())
            assert np.allclose(vec, [tally[s] / total for s in support], rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# PCC

def test_pcc_examples():
    assert ss.pcc([1, 2, 3], [2, 4, 6]) == 1.0
    assert ss.pcc([1, 2, 3], [6, 4, 2]) == -1.0
    assert ss.pcc([1, -1, 1, -1], [1, 1, -1, -1]) == 0.0
    with pytest.raises(ValueError, match="zero variance"):
        ss.pcc([1, 1, 1], [1, 2, 3])


def test_pcc_direct_formula():
    rng = np.random.default_rng(17)
    x, y = rng.normal(size=1000), rng.normal(size=1000)
    n = 1000
    cov = (np.sum(x * y) - np.sum(x) * np.sum(y) / n) / (n - 1)
    want = cov / (np.std(x, ddof=1) * np.std(y, ddof=1))
    assert ss.pcc(x, y) == pytest.approx(want, abs=1e-12)


vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=30)


@given(vectors, st.randoms(use_true_random=False), st.floats(0.1, 100), st.floats(-100, 100))
def test_pcc_symmetric_bounded_affine_invariant(x, rnd, scale, shift):
    x = np.array(x)
    y = np.array([rnd.uniform(-1e3, 1e3) for _ in x])
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r = ss.pcc(x, y)
    assert ss.pcc(y, x) == pytest.approx(r, abs=1e-12)
    assert -1.0 <= r <= 1.0
    assert ss.pcc(scale * x + shift, y) == pytest.approx(r, abs=1e-12)
    assert ss.pcc(x, scale * y + shift) == pytest.approx(r, abs=1e-12)


def test_pcc_pvalue_examples():
    assert ss.pcc_pvalue(0.0, 10) == 1.0
    assert ss.pcc_pvalue(1.0, 10) == 0.0
    assert ss.pcc_pvalue(-1.0, 10) == 0.0
    with pytest.raises(ValueError):
        ss.pcc_pvalue(0.5, 2)


def test_pcc_pvalue_high_correlation_large_support():
    # The PheWAS support of a default synthetic cohort is on the order of 1,000 codes.
    cohort = generate(SynthConfig(seed=3), with_events=False)
    support, _ = ss.factor_distribution(cohort.patients, cohort.true_patient_group, "phewas",
                                        cohort.mapping)
    assert len(support) > 500
    assert ss.pcc_pvalue(0.9791, len(support)) < 1e-20


def test_pcc_pvalue_matches_scipy():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=40), rng.normal(size=40) + 0.3 * np.arange(40) / 40
    want = sps.pearsonr(x, y)
    assert ss.pcc_pvalue(ss.pcc(x, y), 40) == pytest.approx(want.pvalue, rel=1e-9)


# ---------------------------------------------------------------------------
# similarity report

def test_identical_generators_balanced():
    cohort = generate(SynthConfig(seed=19), with_events=False)
    res = ss.similarity_report(cohort.patients, cohort.true_patient_group, cohort.mapping)
    assert len(res) == 12
    for r in res:
        if r.factor in ("phewas", "procedure", "insurance"):
            assert r.pcc >= 0.97, r


def test_disjoint_codes_anti_balanced():
    spec_a = ConfounderSpec(n_icd9=200, n_phewas=80, n_cpt=100)
    cfg = SynthConfig(group_sizes=(300, 300), area_group_sizes=(3, 3), los_means=(150, 150),
                      group_confounders=(spec_a, spec_a), seed=20)
    cohort = generate(cfg, with_events=False)
    # Disjoint supports: rename group 2's codes into a separate vocabulary.
    rows = []
    for p in cohort.patients:
        if cohort.true_patient_group[p.patient_id] == 2:
            p = PatientRecord(p.patient_id, p.age, p.los_hours, p.died_in_service,
                              frozenset("Z" + c for c in p.icd9_codes),
                              frozenset("Z" + c for c in p.cpt_codes), p.insurance)
        rows.append(p)
    res = ss.similarity_report(rows, cohort.true_patient_group, None, ("phewas", "procedure"))
    assert all(r.pcc <= 0.0 for r in res)


def test_similarity_needs_two_groups():
    with pytest.raises(DataError):
        ss.similarity_report([_p("a"), _p("b")], {"a": 1, "b": 1})
