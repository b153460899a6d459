"""Significance tests: Poisson likelihood ratio for counts, one-sample K-S for continuous values.

Both tests compare a scan window against a reference distribution (a
``BaselineDist``) and report a signed decision at level ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, InsufficientDataError

HIGHER, LOWER, NONE = "higher", "lower", "none"
KS_TERM_TOL = 1e-12
COMPRESS_THRESHOLD = 10**6
COMPRESS_KNOTS = 1024


@dataclass(frozen=True)
class FeatureRef:
    """A feature resolved to its tensor slot: ``index`` counts within its kind."""

    name: str
    kind: str
    dist_hint: str
    index: int

    @property
    def test_kind(self) -> str:
        return "poisson" if self.dist_hint == "count" else "empirical"


def feature_refs(features) -> list[FeatureRef]:
    seen = {"temporal": 0, "spatial": 0, "spatiotemporal": 0}
    out = []
    for fi in features:
        out.append(FeatureRef(fi.name, fi.kind, fi.dist_hint, seen[fi.kind]))
        seen[fi.kind] += 1
    return out


def feature_map(sample, ref: FeatureRef) -> np.ndarray:
    """The sample's values for one feature: d x d for spatial kinds, length t_in for temporal.

    Spatiotemporal features are mean-flattened over the history axis.
    """
    if ref.kind == "spatial":
        return sample.x_spatial[..., ref.index].astype(np.float64)
    if ref.kind == "spatiotemporal":
        return sample.x_st[..., ref.index].astype(np.float64).mean(axis=0)
    return sample.x_temporal[:, ref.index].astype(np.float64)


def observations(sample, ref: FeatureRef, literal: bool = False) -> np.ndarray:
    values = feature_map(sample, ref)
    if ref.kind == "temporal" or literal:
        return values.ravel()
    return values[sample.mask]


@dataclass(frozen=True)
class BaselineDist:
    feature: str
    scope: str
    kind: str
    mean: float
    values: np.ndarray | None = None
    n_obs: int = 0

    @property
    def rate(self) -> float:
        return self.mean

    def __post_init__(self):
        if self.kind == "poisson" and not self.mean >= 0:
            raise DataError(f"{self.feature}: poisson rate must be >= 0")
        if self.kind == "empirical":
            if self.values is None or len(self.values) < 2:
                raise InsufficientDataError(f"{self.feature}: empirical baseline needs >= 2 values")


def exact_mean(values: np.ndarray) -> float:
    # correctly rounded sum, so the result does not depend on element order
    return math.fsum(values.tolist()) / values.size


def fit_baseline(values, feature: str, kind: str, scope: str,
                 compress_threshold: int = COMPRESS_THRESHOLD) -> BaselineDist:
    """Fit a baseline from raw observations (finite reals)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise InsufficientDataError(
            f"{feature}: need at least 2 observations for a {scope} baseline, got {values.size}")
    if kind == "poisson":
        if (values < 0).any():
            raise DataError(f"{feature}: negative value under poisson baseline")
        return BaselineDist(feature, scope, "poisson", exact_mean(values), n_obs=int(values.size))
    if kind != "empirical":
        raise DataError(f"unknown baseline kind {kind!r}")
    mean = exact_mean(values)
    ordered = np.sort(values)
    if ordered.size > compress_threshold:
        ordered = np.quantile(ordered, np.linspace(0.0, 1.0, COMPRESS_KNOTS))
    return BaselineDist(feature, scope, "empirical", mean, ordered, n_obs=int(values.size))


def fit_global_baseline(train: Iterable, feature: FeatureRef, kind: str | None = None,
                        literal: bool = False,
                        compress_threshold: int = COMPRESS_THRESHOLD) -> BaselineDist:
    kind = kind or feature.test_kind
    chunks = [observations(s, feature, literal) for s in train]
    values = np.concatenate(chunks) if chunks else np.empty(0)
    return fit_baseline(values, feature.name, kind, "global", compress_threshold)


def fit_local_baseline(sample, feature: FeatureRef, kind: str | None = None,
                       literal: bool = False) -> BaselineDist:
    kind = kind or feature.test_kind
    return fit_baseline(observations(sample, feature, literal), feature.name, kind, "local")


@dataclass(frozen=True, slots=True)
class TestOutcome:
    significant: bool
    direction: str
    statistic: float
    p_value: float


def chi2_1_sf(statistic: float) -> float:
    """Survival function of chi-squared with one degree of freedom."""
    if statistic <= 0:
        return 1.0
    return math.erfc(math.sqrt(statistic / 2.0))


def poisson_outcome(c: float, b: float, alpha: float) -> TestOutcome:
    """Decision for observed count ``c`` against expected count ``b``."""
    if b <= 0:
        if c > 0:
            return TestOutcome(True, HIGHER, math.inf, 0.0)
        return TestOutcome(False, NONE, 0.0, 1.0)
    if c == b:
        return TestOutcome(False, NONE, 0.0, 1.0)
    llr = b if c == 0 else c * math.log(c / b) - (c - b)
    stat = max(2.0 * llr, 0.0)
    p = chi2_1_sf(stat)
    direction = HIGHER if c > b else LOWER
    return TestOutcome(p < alpha, direction, stat, p)


def poisson_lrt(c: float, k: int, baseline: BaselineDist, alpha: float = 0.05) -> TestOutcome:
    """Poisson likelihood-ratio test of a window holding ``c`` events over ``k`` cells."""
    if k < 1:
        raise DataError("poisson_lrt needs at least one cell")
    if baseline.kind != "poisson":
        raise DataError(f"poisson_lrt needs a poisson baseline, got {baseline.kind}")
    return poisson_outcome(float(c), baseline.mean * k, alpha)


def kolmogorov_sf(n: int, d: float) -> float:
    """Asymptotic P(D_n > d) = 2 sum_k (-1)^(k-1) exp(-2 k^2 n d^2)."""
    if d <= 0:
        return 1.0
    lam = n * d * d
    if lam < 1e-6:
        # alternating series is useless here; the dual theta form gives 1 - K(x) = 1
        x = math.sqrt(lam)
        cdf = math.sqrt(2 * math.pi) / x * sum(
            math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam)) for k in range(1, 6))
        return min(max(1.0 - cdf, 0.0), 1.0)
    total, k = 0.0, 1
    while True:
        term = math.exp(-2.0 * k * k * lam)
        total += term if k % 2 else -term
        if term < KS_TERM_TOL:
            break
        k += 1
    return min(max(2.0 * total, 0.0), 1.0)


def ks_statistic(window_sorted: np.ndarray, baseline_sorted: np.ndarray) -> float:
    """Max ECDF gap with F(y) = #(baseline <= y) / M, both inputs ascending."""
    n = window_sorted.size
    F = np.searchsorted(baseline_sorted, window_sorted, side="right") / baseline_sorted.size
    i = np.arange(1, n + 1)
    return float(max(np.max(F - (i - 1) / n), np.max(i / n - F)))


def ks_test(window: Sequence[float], baseline: BaselineDist, alpha: float = 0.05) -> TestOutcome:
    values = np.sort(np.asarray(window, dtype=np.float64).ravel())
    if values.size == 0:
        raise DataError("ks_test needs a non-empty window")
    if baseline.kind != "empirical":
        raise DataError(f"ks_test needs an empirical baseline, got {baseline.kind}")
    D = ks_statistic(values, baseline.values)
    p = kolmogorov_sf(values.size, D)
    mu = exact_mean(values)
    if mu > baseline.mean:
        direction = HIGHER
    elif mu < baseline.mean:
        direction = LOWER
    else:
        direction = NONE
    return TestOutcome(p < alpha and direction != NONE, direction, D, p)


def run_test(kind: str, window_values: np.ndarray, baseline: BaselineDist, alpha: float) -> TestOutcome:
    """Dispatch on baseline kind. Poisson uses the window sum and cell count."""
    if kind == "poisson":
        return poisson_lrt(math.fsum(np.ravel(window_values)), int(np.size(window_values)), baseline, alpha)
    return ks_test(window_values, baseline, alpha)
