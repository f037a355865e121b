"""Length-of-stay regression and confounder balance statistics."""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special
from scipy import stats as sps

from .cocluster import CoClusterAssignment
from .datamodel import CodeMapping, DataError, PheWASTally, map_phewas

log = logging.getLogger(__name__)

ALPHA_MIN = 1e-8
ALPHA_MAX = 1e4
FACTORS = ("phewas", "procedure", "insurance", "age")


class RankDeficiencyError(DataError):
    def __init__(self, columns):
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = tuple(columns)


@dataclass
class DesignConfig:
    mapping: CodeMapping | None = None  # None: icd9_codes are already PheWAS codes
    covariates: tuple = ("age", "phewas_count", "cpt_count", "insurance")


@dataclass(frozen=True)
class DesignMatrix:
    response: np.ndarray
    X: np.ndarray
    names: tuple
    patient_ids: tuple
    groups: np.ndarray
    group_columns: dict   # group -> column index; the reference group is absent
    reference_group: object

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class NBRegressionFit:
    coefficients: np.ndarray
    dispersion: float
    loglik: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    names: tuple = ()

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def wald_ci(self, level: float = 0.95) -> np.ndarray:
        z = sps.norm.ppf(0.5 + level / 2)
        se = self.std_errors
        return np.column_stack([self.coefficients - z * se, self.coefficients + z * se])


@dataclass(frozen=True)
class PairwiseLOSTest:
    group_a: object
    group_b: object
    delta_hours: float
    p_value: float
    ci95: tuple
    lr_statistic: float = 0.0


@dataclass(frozen=True)
class SimilarityResult:
    factor: str
    group_a: object
    group_b: object
    pcc: float
    p_value: float
    n: int
    exact: bool = False


# ---------------------------------------------------------------------------
# design

def build_design(patients, assignment: CoClusterAssignment | dict, config: DesignConfig | None = None,
                 tally: PheWASTally | None = None) -> DesignMatrix:
    """Response is LOS rounded to whole hours; the largest group is the reference level."""
    config = config or DesignConfig()
    labels = assignment.patient_group if isinstance(assignment, CoClusterAssignment) else assignment
    rows = [p for p in patients if p.patient_id in labels]
    missing = [p.patient_id for p in patients if p.patient_id not in labels]
    if missing:
        log.info("%d patients without a group label left out of the design", len(missing))
    if not rows:
        raise DataError("no labelled patients")
    groups = [labels[p.patient_id] for p in rows]
    sizes = Counter(groups)
    small = [g for g, c in sizes.items() if c < 2]
    if small:
        raise DataError(f"degenerate group {small[0]!r}: fewer than 2 patients")
    order = sorted(sizes)
    reference = max(order, key=lambda g: (sizes[g], -order.index(g)))

    cols = [np.ones(len(rows))]
    names = ["intercept"]
    group_columns = {}
    for g in order:
        if g == reference:
            continue
        group_columns[g] = len(cols)
        cols.append(np.array([1.0 if x == g else 0.0 for x in groups]))
        names.append(f"group[{g}]")
    cov = config.covariates
    if "age" in cov:
        cols.append(np.array([float(p.age) for p in rows]))
        names.append("age")
    if "phewas_count" in cov:
        if config.mapping is None:
            counts = [len(p.icd9_codes) for p in rows]
        else:
            counts = [len(map_phewas(p, config.mapping, tally)) for p in rows]
        cols.append(np.array(counts, dtype=float))
        names.append("phewas_count")
    if "cpt_count" in cov:
        cols.append(np.array([len(p.cpt_codes) for p in rows], dtype=float))
        names.append("cpt_count")
    if "insurance" in cov:
        ins = Counter(p.insurance for p in rows)
        levels = sorted(ins)
        ref_ins = max(levels, key=lambda s: (ins[s], -levels.index(s)))
        for lvl in levels:
            if lvl != ref_ins:
                cols.append(np.array([1.0 if p.insurance == lvl else 0.0 for p in rows]))
                names.append(f"insurance[{lvl}]")
    y = np.rint([p.los_hours for p in rows]).astype(np.int64)
    return DesignMatrix(y, np.column_stack(cols), tuple(names), tuple(p.patient_id for p in rows),
                        np.array(groups), group_columns, reference)


def collinear_columns(X, names, rtol=1e-10):
    """Names of columns that lie in the span of the columns before them."""
    bad = []
    keep = []
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    for j in range(X.shape[1]):
        trial = keep + [j]
        s = np.linalg.svd(Xs[:, trial], compute_uv=False)
        if s[-1] <= rtol * s[0] * np.sqrt(X.shape[0]):
            bad.append(names[j])
        else:
            keep.append(j)
    return bad


# ---------------------------------------------------------------------------
# negative binomial (NB2, log link)

_SUM_LIMIT = 200_000


def _rising_sums(y, r):
    """Exact finite sums over j < y of log1p(j/r), 1/(r+j) and 1/(r+j)^2.

    These are lgamma(y+r)-lgamma(r)-y*log(r), digamma(y+r)-digamma(r) and
    trigamma(r)-trigamma(y+r) without the cancellation the special functions
    suffer once r is large.
    """
    yi = np.asarray(y).astype(np.int64)
    top = int(yi.max()) if yi.size else 0
    if top > _SUM_LIMIT or not np.array_equal(yi, y):
        s0 = special.gammaln(y + r) - special.gammaln(r) - y * np.log(r)
        s1 = special.digamma(y + r) - special.digamma(r)
        s2 = special.polygamma(1, r) - special.polygamma(1, y + r)
        return s0, s1, s2
    j = np.arange(top, dtype=np.float64)
    c0 = np.concatenate([[0.0], np.cumsum(np.log1p(j / r))])
    c1 = np.concatenate([[0.0], np.cumsum(1.0 / (r + j))])
    c2 = np.concatenate([[0.0], np.cumsum(1.0 / (r + j) ** 2)])
    return c0[yi], c1[yi], c2[yi]


def nb_loglik(y, mu, alpha) -> float:
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    r = 1.0 / alpha
    s0, _, _ = _rising_sums(y, r)
    ll = s0 + y * np.log(mu) - (r + y) * np.log1p(mu / r) - special.gammaln(y + 1)
    return float(ll.sum())


def poisson_loglik(y, mu) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float((y * np.log(mu) - mu - special.gammaln(y + 1)).sum())


def _dl_dr(y, mu, r):
    _, s1, s2 = _rising_sums(y, r)
    d1 = s1 - np.log1p(mu / r) + (mu - y) / (r + mu)
    d2 = -s2 + 1 / r - 1 / (r + mu) - (mu - y) / (r + mu) ** 2
    return d1, d2


def _score_alpha(y, mu, alpha):
    r = 1.0 / alpha
    d1, _ = _dl_dr(y, mu, r)
    return float(d1.sum()) * (-r * r)


def nb_gradient(X, y, beta, alpha):
    """Score of the NB2 log-likelihood in (beta, alpha)."""
    mu = np.exp(X @ beta)
    gb = X.T @ ((y - mu) / (1 + alpha * mu))
    return np.append(gb, _score_alpha(y, mu, alpha))


def _observed_information(X, y, beta, alpha):
    mu = np.exp(X @ beta)
    r = 1.0 / alpha
    d = 1 + alpha * mu
    hbb = X.T @ (X * (mu * (1 + alpha * y) / d ** 2)[:, None])
    hba = X.T @ ((y - mu) * mu / d ** 2)
    # d2l/dalpha2 via r = 1/alpha
    dr, d2r = _dl_dr(y, mu, r)
    haa = -(float(d2r.sum()) * r ** 4 + float(dr.sum()) * 2 * r ** 3)
    p = X.shape[1]
    info = np.empty((p + 1, p + 1))
    info[:p, :p] = hbb
    info[:p, p] = info[p, :p] = hba
    info[p, p] = haa
    return info


def _irls(X, y, beta, alpha, tol=1e-12, max_iter=100):
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        w = mu / (1 + alpha * mu)
        z = eta + (y - mu) / mu
        xw = X * w[:, None]
        new = np.linalg.solve(X.T @ xw, xw.T @ z)
        step = np.max(np.abs(new - beta))
        beta = new
        if step <= tol * (1 + np.max(np.abs(beta))):
            break
    return beta


def _best_alpha(y, mu):
    lo, hi = np.log(ALPHA_MIN), np.log(ALPHA_MAX)
    f = lambda t: _score_alpha(y, mu, np.exp(t))
    flo = f(lo)
    if flo <= 0:
        return ALPHA_MIN
    fhi = f(hi)
    if fhi >= 0:
        return ALPHA_MAX
    t = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.exp(t))


def fit_nb(design: DesignMatrix | tuple, tol: float = 1e-8, max_outer: int = 100) -> NBRegressionFit:
    """NB2 maximum likelihood: IRLS for beta at fixed alpha, 1-D search for alpha, alternated."""
    if isinstance(design, DesignMatrix):
        X, y, names = design.X, design.response, design.names
    else:
        X, y = design
        names = tuple(f"x{j}" for j in range(X.shape[1]))
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise DataError("response must be non-negative")
    bad = collinear_columns(X, names)
    if bad:
        raise RankDeficiencyError(bad)

    ybar = max(y.mean(), 1e-3)
    beta = np.linalg.lstsq(X, np.log(y + 0.5 * ybar / (ybar + 1) + 1e-3), rcond=None)[0]
    alpha = 0.1
    ll_old = -np.inf
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        beta = _irls(X, y, beta, alpha)
        alpha = _best_alpha(y, np.exp(X @ beta))
        beta = _irls(X, y, beta, alpha)
        ll = nb_loglik(y, np.exp(X @ beta), alpha)
        if abs(ll - ll_old) < tol:
            converged = np.isfinite(ll)
            break
        ll_old = ll
    mu = np.exp(X @ beta)
    ll = nb_loglik(y, mu, alpha)
    info = _observed_information(X, y, beta, alpha)
    p = X.shape[1]
    if ALPHA_MIN < alpha < ALPHA_MAX:
        try:
            cov = np.linalg.inv(info)[:p, :p]
        except np.linalg.LinAlgError:
            cov = np.linalg.inv(info[:p, :p])
    else:
        cov = np.linalg.inv(info[:p, :p])
    cov = (cov + cov.T) / 2
    return NBRegressionFit(beta, float(alpha), ll, cov, bool(converged), it, tuple(names))


# ---------------------------------------------------------------------------
# pairwise contrasts

def _constrained_X(design: DesignMatrix, a, b):
    """Design with the coefficients of groups a and b forced equal."""
    gc = design.group_columns
    X = design.X
    if a == design.reference_group or b == design.reference_group:
        other = b if a == design.reference_group else a
        return np.delete(X, gc[other], axis=1)
    ja, jb = gc[a], gc[b]
    X2 = X.copy()
    X2[:, ja] = X[:, ja] + X[:, jb]
    return np.delete(X2, jb, axis=1)


def _profile_vector(design: DesignMatrix, g):
    """Cohort-average covariate row with the group indicators set for ``g``."""
    x = design.X.mean(axis=0)
    for col in design.group_columns.values():
        x[col] = 0.0
    if g in design.group_columns:
        x[design.group_columns[g]] = 1.0
    return x


def pairwise_los_test(design: DesignMatrix, fit: NBRegressionFit, group_a, group_b) -> PairwiseLOSTest:
    """Likelihood-ratio contrast of two groups; delta is mean LOS of a minus b in hours."""
    present = set(design.group_columns) | {design.reference_group}
    for g in (group_a, group_b):
        if g not in present:
            raise DataError(f"group {g!r} not in design")
    if group_a == group_b:
        return PairwiseLOSTest(group_a, group_b, 0.0, 1.0, (0.0, 0.0), 0.0)
    xa = _profile_vector(design, group_a)
    xb = _profile_vector(design, group_b)
    mu_a = float(np.exp(xa @ fit.coefficients))
    mu_b = float(np.exp(xb @ fit.coefficients))
    delta = mu_a - mu_b
    grad = mu_a * xa - mu_b * xb
    se = float(np.sqrt(max(grad @ fit.covariance @ grad, 0.0)))
    z = sps.norm.ppf(0.975)

    restricted = fit_nb((_constrained_X(design, group_a, group_b), design.response))
    lr = max(2.0 * (fit.loglik - restricted.loglik), 0.0)
    p = float(sps.chi2.sf(lr, df=1))
    return PairwiseLOSTest(group_a, group_b, delta, p, (delta - z * se, delta + z * se), lr)


def all_pairwise_tests(design: DesignMatrix, fit: NBRegressionFit, groups=None) -> list:
    groups = sorted(set(design.groups.tolist())) if groups is None else groups
    return [pairwise_los_test(design, fit, a, b) for a, b in itertools.combinations(groups, 2)]


# ---------------------------------------------------------------------------
# confounder balance

def _patient_items(p, factor, mapping):
    if factor == "phewas":
        return map_phewas(p, mapping) if mapping is not None else p.icd9_codes
    if factor == "procedure":
        return p.cpt_codes
    if factor == "insurance":
        return (p.insurance,)
    raise ValueError(f"unknown factor {factor!r}")


def factor_distribution(patients, assignment, factor: str, mapping: CodeMapping | None = None):
    """Per-group relative frequency vectors over a shared support.

    Returns ``(support, {group: vector})``. Code factors use the union of codes
    seen in any group; ``age`` uses every integer year of the cohort's range.
    """
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}; expected one of {FACTORS}")
    labels = assignment.patient_group if isinstance(assignment, CoClusterAssignment) else assignment
    rows = [p for p in patients if p.patient_id in labels]
    groups = sorted({labels[p.patient_id] for p in rows})
    tallies = {g: Counter() for g in groups}
    if factor == "age":
        ages = [p.age for p in rows]
        support = list(range(min(ages), max(ages) + 1)) if ages else []
        for p in rows:
            tallies[labels[p.patient_id]][p.age] += 1
    else:
        for p in rows:
            tallies[labels[p.patient_id]].update(_patient_items(p, factor, mapping))
        support = sorted(set().union(*tallies.values())) if tallies else []
    out = {}
    for g in groups:
        counts = np.array([tallies[g][s] for s in support], dtype=np.float64)
        total = counts.sum()
        out[g] = counts / total if total > 0 else counts
    return support, out


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pcc needs two 1-D vectors of equal length")
    if x.size < 3:
        raise ValueError("pcc needs at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    # One square root of the product: exactly linear data then gives |r| == 1.
    r = float((dx @ dy) / np.sqrt(sxx * syy))
    return min(1.0, max(-1.0, r))


def pcc_pvalue(r: float, n: int) -> float:
    """Two-sided p-value for a sample correlation via the t transform (n-2 df).

    ``|r| == 1`` returns 0.0 exactly.
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    if abs(r) >= 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return float(min(1.0, 2 * sps.t.sf(abs(t), n - 2)))


def similarity_report(patients, assignment, mapping: CodeMapping | None = None,
                      factors=FACTORS) -> list:
    labels = assignment.patient_group if isinstance(assignment, CoClusterAssignment) else assignment
    groups = sorted({labels[p.patient_id] for p in patients if p.patient_id in labels})
    if len(groups) < 2:
        raise DataError("similarity report needs at least two groups")
    dists = {f: factor_distribution(patients, labels, f, mapping) for f in factors}
    results = []
    for a, b in itertools.combinations(groups, 2):
        for f in factors:
            support, vecs = dists[f]
            r = pcc(vecs[a], vecs[b])
            results.append(SimilarityResult(f, a, b, r, pcc_pvalue(r, len(support)), len(support),
                                            exact=abs(r) >= 1.0))
    return results
