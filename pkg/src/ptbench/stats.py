"""Multi-seed significance testing: Welch's t, Bonferroni, Cohen's d, aggregation and power."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryStat:
    algorithm: str
    mean: float
    std: float
    n: int

    @property
    def testable(self) -> bool:
        return self.n >= 2 and math.isfinite(self.std)


@dataclass
class WelchResult:
    t: float
    df: float
    p_value: float
    degenerate: bool = False


@dataclass
class ComparisonRow:
    variant: str
    baseline: str
    mean: float
    std: float
    delta: float
    t_stat: float
    df: float
    p_value: float
    cohens_d: float
    significant: bool
    corrected_alpha: float


@dataclass
class RunResult:
    algorithm: str
    seed: int
    accuracy: float


# ------------------------------------------------------------------ special functions


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float, xc: float | None = None) -> float:
    """Regularised incomplete beta I_x(a, b).

    ``xc`` may carry 1 - x computed without cancellation (matters for x near 1).
    """
    if a <= 0 or b <= 0:
        raise StatsError("betainc needs a, b > 0")
    if xc is None:
        xc = 1.0 - x
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(xc)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isnan(t) or not df > 0:
        return float("nan")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


# ------------------------------------------------------------------ tests


def welch_t(a: SummaryStat, b: SummaryStat) -> WelchResult:
    """Welch's unequal-variance t-test of mean(a) - mean(b), two-sided."""
    if a.n < 2 or b.n < 2:
        raise StatsError(f"Welch test needs n >= 2 on both sides ({a.algorithm}: {a.n}, {b.algorithm}: {b.n})")
    va, vb = a.std**2 / a.n, b.std**2 / b.n
    se2 = va + vb
    diff = a.mean - b.mean
    if se2 == 0:
        if diff == 0:
            return WelchResult(0.0, float("nan"), 1.0, degenerate=True)
        return WelchResult(math.copysign(math.inf, diff), float("nan"), 0.0, degenerate=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.n - 1) + vb**2 / (b.n - 1))
    return WelchResult(t, df, t_two_sided_p(t, df))


def cohens_d(a: SummaryStat, b: SummaryStat) -> float:
    """(mean_a - mean_b) over the (n-1)-weighted pooled standard deviation."""
    if a.n + b.n <= 2:
        raise StatsError("pooled std needs n_a + n_b > 2")
    pooled = math.sqrt(((a.n - 1) * a.std**2 + (b.n - 1) * b.std**2) / (a.n + b.n - 2))
    diff = a.mean - b.mean
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff / pooled


def bonferroni(alpha: float, m: int) -> float:
    if m < 1:
        raise StatsError("number of comparisons must be >= 1")
    if not 0 < alpha < 1:
        raise StatsError("alpha must lie in (0, 1)")
    return alpha / m


def compare_variants(baseline: SummaryStat, variants: Sequence[SummaryStat], alpha: float = 0.05) -> list[ComparisonRow]:
    """Welch test and Cohen's d of each variant against the baseline, Bonferroni-corrected over the variants."""
    if not variants:
        return []
    ids = [v.algorithm for v in variants]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise StatsError(f"duplicate variant ids: {dup}")
    if baseline.algorithm in ids:
        raise StatsError(f"baseline {baseline.algorithm!r} also listed as a variant")
    corrected = bonferroni(alpha, len(variants))
    rows = []
    for v in variants:
        w = welch_t(v, baseline)
        rows.append(
            ComparisonRow(
                variant=v.algorithm,
                baseline=baseline.algorithm,
                mean=v.mean,
                std=v.std,
                delta=v.mean - baseline.mean,
                t_stat=w.t,
                df=w.df,
                p_value=w.p_value,
                cohens_d=cohens_d(v, baseline),
                significant=bool(w.p_value < corrected),
                corrected_alpha=corrected,
            )
        )
    rows.sort(key=lambda r: -r.delta)
    return rows


def aggregate(runs: Iterable[RunResult], ddof: int = 1) -> dict[str, SummaryStat]:
    """Mean, standard deviation and seed count per algorithm (single runs get std = nan)."""
    by_algo: dict[str, list[float]] = {}
    for r in runs:
        by_algo.setdefault(r.algorithm, []).append(float(r.accuracy))
    out = {}
    for algo in sorted(by_algo):
        vals = np.sort(np.array(by_algo[algo]))
        n = len(vals)
        std = float(np.std(vals, ddof=ddof)) if n > ddof else float("nan")
        out[algo] = SummaryStat(algo, float(np.mean(vals)), std, n)
    return out


def power_two_sample(d: float, n: int, alpha: float = 0.05) -> float:
    """Power of the two-sided equal-n two-sample t-test at standardised effect ``d``."""
    from scipy import stats as sps

    if n < 2:
        raise StatsError("power needs n >= 2 per group")
    df = 2 * n - 2
    crit = sps.t.ppf(1 - alpha / 2, df)
    if d == 0:
        return float(alpha)
    nc = d * math.sqrt(n / 2.0)
    return float(sps.nct.sf(crit, df, nc) + sps.nct.cdf(-crit, df, nc))


# ------------------------------------------------------------------ rounding reconstruction


def baseline_from_deltas(rows: Sequence[tuple[float, float]], decimals: int = 2) -> tuple[float, float]:
    """Interval for an unrounded baseline mean implied by rounded (mean, delta) pairs.

    Each published row gives ``mean - delta`` up to the rounding of both numbers;
    intersecting those intervals pins the baseline tighter than its own rounding.
    """
    half = 0.5 * 10.0**-decimals
    lo, hi = -math.inf, math.inf
    for mean, delta in rows:
        lo = max(lo, mean - delta - 2 * half)
        hi = min(hi, mean - delta + 2 * half)
    if lo > hi:
        raise StatsError("published deltas are mutually inconsistent")
    return lo, hi


# ------------------------------------------------------------------ I/O


def read_summary_csv(path: str | Path) -> list[SummaryStat]:
    with open(path, newline="") as fh:
        return [
            SummaryStat(r["algorithm"], float(r["mean"]), float(r["std"]), int(r["n"]))
            for r in csv.DictReader(fh)
        ]


def write_summary_csv(path: str | Path, stats: Iterable[SummaryStat]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "mean", "std", "n"])
        for s in stats:
            w.writerow([s.algorithm, s.mean, s.std, s.n])


def write_comparison_csv(path: str | Path, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="") as fh:
        fields = list(asdict(rows[0])) if rows else [f for f in ComparisonRow.__dataclass_fields__]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def format_comparison(baseline: SummaryStat, rows: Sequence[ComparisonRow], categories: dict | None = None) -> str:
    """Aligned text table: variant, category, mean, std, delta, p, d (significant rows marked)."""
    categories = categories or {}
    head = f"{'Variant':<12} {'Category':<24} {'Mean':>6} {'Std':>5} {'Delta':>7} {'p':>7} {'d':>6}"
    lines = [head, "-" * len(head)]

    def line(name, mean, std, delta, p, d):
        return f"{name:<12} {categories.get(name.rstrip('*'), ''):<24} {mean:>6.2f} {std:>5.2f} {delta:>7} {p:>7} {d:>6}"

    above = [r for r in rows if r.delta >= 0]
    below = [r for r in rows if r.delta < 0]
    for r in above:
        lines.append(line(r.variant + ("*" if r.significant else ""), r.mean, r.std, f"{r.delta:+.2f}", f"{r.p_value:.4f}", f"{r.cohens_d:.2f}"))
    lines.append(line(baseline.algorithm, baseline.mean, baseline.std, "--", "--", "--"))
    for r in below:
        lines.append(line(r.variant + ("*" if r.significant else ""), r.mean, r.std, f"{r.delta:+.2f}", f"{r.p_value:.4f}", f"{r.cohens_d:.2f}"))
    if rows:
        lines.append(f"* significant at Bonferroni-corrected alpha = {rows[0].corrected_alpha:.4f}")
    return "\n".join(lines)
