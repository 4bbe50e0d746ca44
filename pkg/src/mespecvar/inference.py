"""Granger edges, group comparisons and connectivity graphs from fitted models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .exceptions import DataError, NumericalError
from .mixed import MixedVarFit, fixed_effect_inference

DEFAULT_ALPHA = 1e-6
DEFAULT_QUANTILE = 0.8


@dataclass(frozen=True)
class EdgeTest:
    band: str | None
    group: int
    source: str
    target: str
    lag: int
    estimate: float
    se: float
    t: float
    df: float
    p_raw: float
    p_adjusted: float
    significant: bool
    magnitude_pass: bool

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.source, self.target, self.lag)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ConnectivityGraph:
    band: str | None
    group: int
    nodes: tuple[str, ...]
    edges: list[EdgeTest] = field(default_factory=list)

    def edge_keys(self) -> set[tuple[str, str, int]]:
        return {e.key for e in self.edges}


@dataclass
class GroupDifferenceGraph:
    band: str | None
    nodes: tuple[str, ...]
    unique_to_1: list[tuple[str, str, int]]
    unique_to_2: list[tuple[str, str, int]]


def bonferroni(p_values: Sequence[float], alpha: float = 0.05):
    """Bonferroni-adjusted p-values and rejection decisions."""
    p = np.asarray(p_values, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    adjusted = np.minimum(1.0, p * p.size)
    return adjusted < alpha, adjusted


def _fits_by_target(fits) -> dict[str, MixedVarFit]:
    if isinstance(fits, Mapping):
        fits = list(fits.values())
    fits = list(fits)
    if not fits:
        raise DataError("no fits supplied")
    names = fits[0].channel_names
    by_target = {f.target: f for f in fits}
    missing = [c for c in names if c not in by_target]
    if missing:
        raise DataError(f"missing fits for target channels {missing}")
    bands = {f.band for f in fits}
    if len(bands) > 1:
        raise DataError(f"fits from several bands mixed: {sorted(map(str, bands))}")
    return {c: by_target[c] for c in names}


def granger_edges(fits, alpha: float = DEFAULT_ALPHA,
                  magnitude_quantile: float = DEFAULT_QUANTILE,
                  self_loops: bool = False):
    """Edge tests for one band and the per-group connectivity graphs.

    An edge r' -> r at lag k exists in group g when its Satterthwaite p-value
    is below ``alpha`` and its |estimate| exceeds the ``magnitude_quantile``
    quantile of all |estimates| of that band and group. Autoregressive
    (r' == r) coefficients enter the quantile pool and the edge table but are
    drawn only with ``self_loops=True``.
    """
    if not 0 <= magnitude_quantile < 1:
        raise ValueError("magnitude_quantile must lie in [0, 1)")
    by_target = _fits_by_target(fits)
    names = tuple(next(iter(by_target.values())).channel_names)
    band = next(iter(by_target.values())).band
    raw = []
    for target, fit in by_target.items():
        for test in fixed_effect_inference(fit):
            g, source, lag = test.label
            raw.append((g, source, target, lag, test))
    _, adjusted = bonferroni([r[-1].p for r in raw])
    groups = sorted({r[0] for r in raw})
    thresholds = {}
    for g in groups:
        mags = np.array([abs(r[-1].estimate) for r in raw if r[0] == g])
        thresholds[g] = float(np.quantile(mags, magnitude_quantile))
    edges = []
    for (g, source, target, lag, test), p_adj in zip(raw, adjusted):
        edges.append(EdgeTest(
            band=band, group=int(g), source=source, target=target, lag=int(lag),
            estimate=test.estimate, se=test.se, t=test.t, df=test.df,
            p_raw=test.p, p_adjusted=float(max(p_adj, test.p)),
            significant=bool(test.p < alpha),
            magnitude_pass=bool(abs(test.estimate) > thresholds[g])))
    graphs = {}
    for g in groups:
        members = [e for e in edges if e.group == g and e.significant and e.magnitude_pass
                   and (self_loops or e.source != e.target)]
        graphs[g] = ConnectivityGraph(band, g, names, members)
    return edges, graphs


def diff_graphs(g1: ConnectivityGraph, g2: ConnectivityGraph) -> GroupDifferenceGraph:
    if g1.band != g2.band or tuple(g1.nodes) != tuple(g2.nodes):
        raise DataError("graphs differ in band or node set")
    k1, k2 = g1.edge_keys(), g2.edge_keys()
    return GroupDifferenceGraph(g1.band, tuple(g1.nodes),
                                sorted(k1 - k2), sorted(k2 - k1))


@dataclass(frozen=True)
class WelchResult:
    source: str
    target: str
    lag: int
    diff: float
    se_diff: float
    t: float
    df: float
    p: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def welch_df(v1: float, v2: float, df1: float, df2: float) -> float:
    """Welch-Satterthwaite combination of two variance estimates."""
    denom = v1 ** 2 / df1 + v2 ** 2 / df2
    return float((v1 + v2) ** 2 / denom) if denom > 0 else float("inf")


def welch_group_difference(fit: MixedVarFit, source: str, lag: int = 1,
                           tests=None) -> WelchResult:
    """Compare the group-1 and group-2 coefficient of ``source`` at ``lag``."""
    i1 = fit.index((1, source, lag))
    i2 = fit.index((2, source, lag))
    if tests is None:
        tests = fixed_effect_inference(fit)
    v1, v2 = fit.beta_cov[i1, i1], fit.beta_cov[i2, i2]
    cov = fit.beta_cov[i1, i2]
    var = v1 + v2 - 2.0 * cov
    if not var > 0:
        raise NumericalError(f"degenerate variance for group difference of {source}")
    diff = float(fit.beta[i1] - fit.beta[i2])
    se = float(np.sqrt(var))
    df = welch_df(v1, v2, tests[i1].df, tests[i2].df)
    t = diff / se
    p = float(2 * (stats.t.sf(abs(t), df) if np.isfinite(df) else stats.norm.sf(abs(t))))
    return WelchResult(source, fit.target, int(lag), diff, se, float(t), df, p)


def welch_table(fits, alpha: float = 0.05):
    """Welch comparison of every coefficient pair of a band, Bonferroni-corrected."""
    by_target = _fits_by_target(fits)
    rows = []
    for fit in by_target.values():
        tests = fixed_effect_inference(fit)
        for lag in range(1, fit.lag_order + 1):
            for source in fit.channel_names:
                rows.append(welch_group_difference(fit, source, lag, tests))
    reject, adjusted = bonferroni([r.p for r in rows], alpha)
    return rows, adjusted, reject


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p: float


def lrt_edge(full_fit: MixedVarFit, reduced_fit: MixedVarFit,
             tol: float = 1e-6) -> LRTResult:
    """Likelihood-ratio test of nested ML fits."""
    if full_fit.method != "ML" or reduced_fit.method != "ML":
        raise ValueError("likelihood-ratio tests need ML fits")
    full, red = set(full_fit.labels), set(reduced_fit.labels)
    if not red <= full:
        raise ValueError("reduced model is not nested in the full model")
    df = len(full) - len(red)
    stat = reduced_fit.deviance - full_fit.deviance
    if stat < -tol:
        raise NumericalError(
            f"negative LRT statistic {stat:.3g}: the full-model optimisation "
            "failed; refit with more starts")
    stat = max(stat, 0.0)
    p = 1.0 if df == 0 else float(stats.chi2.sf(stat, df))
    return LRTResult(float(stat), df, p)


@dataclass
class Heatmaps:
    """Random-effect SD matrices (rows = target, columns = source) of one band."""

    band: str | None
    channel_names: tuple[str, ...]
    lag: int
    tau: dict[int, np.ndarray]
    boundary: dict[int, np.ndarray]

    @property
    def difference(self) -> np.ndarray:
        return np.abs(self.tau[1] - self.tau[2])


def random_sd_heatmaps(fits_by_band: Mapping[str, object], lag: int = 1) -> dict[str, Heatmaps]:
    out = {}
    for band, fits in fits_by_band.items():
        by_target = _fits_by_target(fits)
        names = tuple(next(iter(by_target.values())).channel_names)
        R = len(names)
        G = next(iter(by_target.values())).tau.shape[0]
        tau = {g: np.zeros((R, R)) for g in range(1, G + 1)}
        for r, target in enumerate(names):
            fit = by_target[target]
            if lag > fit.lag_order:
                raise ValueError(f"lag {lag} exceeds fitted order {fit.lag_order}")
            for g in range(G):
                tau[g + 1][r] = fit.tau[g, (lag - 1) * R:lag * R]
        boundary = {g: m == 0 for g, m in tau.items()}
        out[band] = Heatmaps(band, names, lag, tau, boundary)
    return out
