"""Episode-level evaluation statistics.

Implements the comparison machinery used on cached-episode accuracies:
mean accuracy with a 95% confidence interval, per-dataset paired t-tests,
and the Friedman test with Nemenyi critical distances for rank diagrams.

The Student-t tail probability is computed from a regularized incomplete
beta function (continued-fraction form) and the chi-square tail from a
regularized incomplete gamma, so the package needs no statistics library;
the test suite checks both against direct numerical integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS = 3e-16
_FPMIN = 1e-300
_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_p_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t distribution."""
    if df <= 0:
        raise ValueError("df must be > 0")
    if not math.isfinite(t):
        return 0.0
    return betainc_reg(0.5 * df, 0.5, df / (df + t * t))


def _gamma_p_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function with df degrees of freedom."""
    return gammainc_q(0.5 * df, 0.5 * x)


def mean_ci95(accs) -> tuple:
    """Sample mean and normal-approximation 95% CI halfwidth.

    halfwidth = 1.96 * sample_std(ddof=1) / sqrt(n); requires n >= 2.
    """
    values = np.asarray(accs, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    half = 1.96 * values.std(ddof=1) / math.sqrt(values.size)
    return float(values.mean()), float(half)


@dataclass(frozen=True)
class PairedTResult:
    t: float
    p_two_sided: float
    degenerate: bool


def paired_t_test(a, b) -> PairedTResult:
    """Paired two-sided t-test on per-episode accuracies.

    Degenerate inputs, where the differences are constant to within
    floating-point noise, are flagged and reported as p = 1 when the mean
    difference is zero and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    scale = max(1.0, float(np.abs(d).max()))
    if sd <= 1e-12 * scale:
        if mean == 0.0:
            return PairedTResult(t=0.0, p_two_sided=1.0, degenerate=True)
        return PairedTResult(
            t=math.copysign(math.inf, mean), p_two_sided=0.0, degenerate=True
        )
    t = mean / (sd / math.sqrt(n))
    return PairedTResult(
        t=float(t), p_two_sided=student_t_p_two_sided(t, n - 1), degenerate=False
    )


def rank_rows_desc(matrix) -> np.ndarray:
    """Per-row ranks with rank 1 for the highest value; ties share the
    average of their positions."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D (episodes, methods) matrix")
    n, k = m.shape
    ranks = np.empty_like(m)
    for i in range(n):
        order = np.argsort(-m[i], kind="stable")
        vals = m[i, order]
        pos = 0
        while pos < k:
            end = pos
            while end + 1 < k and vals[end + 1] == vals[pos]:
                end += 1
            ranks[i, order[pos : end + 1]] = 0.5 * (pos + end) + 1.0
            pos = end + 1
    return ranks


#: Two-tailed critical values of the studentized range statistic divided by
#: sqrt(2), at alpha = 0.05, indexed by the number of methods compared.
#: Verified in the test suite against numerically integrated quantiles of
#: the range of independent standard normals.
NEMENYI_Q_05 = {
    2: 1.960,
    3: 2.343,
    4: 2.569,
    5: 2.728,
    6: 2.850,
    7: 2.949,
    8: 3.031,
    9: 3.102,
    10: 3.164,
}


def nemenyi_cd(n_methods: int, n_episodes: int, alpha: float = 0.05) -> float:
    """Critical mean-rank distance: q_alpha * sqrt(k (k + 1) / (6 N))."""
    if alpha != 0.05:
        raise ValueError("only alpha = 0.05 critical values are embedded")
    if n_methods not in NEMENYI_Q_05:
        raise ValueError(f"critical value table covers 2..10 methods, got {n_methods}")
    return NEMENYI_Q_05[n_methods] * math.sqrt(
        n_methods * (n_methods + 1) / (6.0 * n_episodes)
    )


@dataclass(frozen=True)
class FriedmanNemenyiResult:
    mean_ranks: np.ndarray
    friedman_stat: float
    p_value: float
    cd: float
    cliques: tuple


def friedman_nemenyi(acc_matrix, alpha: float = 0.05) -> FriedmanNemenyiResult:
    """Friedman test over an (episodes, methods) accuracy matrix plus the
    Nemenyi critical distance and rank cliques.

    The chi-square statistic uses k - 1 degrees of freedom; cliques are
    maximal groups of methods whose mean ranks all lie within the critical
    distance (method indices, only groups of two or more).
    """
    m = np.asarray(acc_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ValueError("need at least 2 episodes and 2 methods")
    n, k = m.shape
    ranks = rank_rows_desc(m)
    mean_ranks = ranks.mean(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * float(
        np.square(mean_ranks - (k + 1) / 2.0).sum()
    )
    p = chi2_sf(stat, k - 1)
    cd = nemenyi_cd(k, n, alpha)

    order = np.argsort(mean_ranks, kind="stable")
    sorted_ranks = mean_ranks[order]
    cliques = []
    prev_end = -1
    for i in range(k):
        end = i
        while end + 1 < k and sorted_ranks[end + 1] - sorted_ranks[i] <= cd:
            end += 1
        if end > i and end > prev_end:
            cliques.append(tuple(int(j) for j in order[i : end + 1]))
            prev_end = end
    return FriedmanNemenyiResult(
        mean_ranks=mean_ranks,
        friedman_stat=float(stat),
        p_value=float(p),
        cd=float(cd),
        cliques=tuple(cliques),
    )
