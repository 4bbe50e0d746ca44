"""Single-subject VAR estimation, LASSO+refit (LASSLE) and lag selection."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numba
import numpy as np

from .data import MultiChannelSeries, StudyDataset
from .exceptions import ConvergenceError, DataError, NumericalError

CRITERIA = ("aic", "bic", "hq")


@dataclass
class VarFit:
    """Least-squares (or LASSLE) VAR(p) fit without intercept.

    ``coefs[k - 1]`` is the R x R lag-k matrix; row r holds the equation of
    channel r. ``n_params`` counts freely estimated coefficients.
    """

    lag_order: int
    coefs: np.ndarray
    sigma: np.ndarray
    residual_variances: np.ndarray
    t_effective: int
    n_params: int
    residuals: np.ndarray = field(repr=False)
    method: str = "ols"
    lambdas: np.ndarray | None = None

    @property
    def n_channels(self) -> int:
        return self.coefs.shape[1]


def lag_design(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Response ``Y[p:]`` and regressors ``[Y(t-1) .. Y(t-p)]`` (lag-major)."""
    x = np.asarray(x, dtype=float)
    t = x.shape[0]
    if p < 1:
        raise DataError("lag order must be >= 1")
    if t <= p:
        raise DataError(f"series of length {t} too short for lag {p}")
    lags = [x[p - k:t - k] for k in range(1, p + 1)]
    return x[p:], np.hstack(lags)


def _coef_blocks(b: np.ndarray, r: int, p: int) -> np.ndarray:
    # b: (R*p, R) regression coefficients, column per equation
    return np.stack([b[(k * r):((k + 1) * r)].T for k in range(p)])


def _check_size(t: int, r: int, p: int):
    if t <= r * p + 1:
        raise DataError(f"need T > R*p + 1 = {r * p + 1}, got T = {t}")


def _finish(y, x, b, p, n_params, method, lambdas=None) -> VarFit:
    r = y.shape[1]
    resid = y - x @ b
    t_eff = y.shape[0]
    sigma = resid.T @ resid / t_eff
    return VarFit(p, _coef_blocks(b, r, p), sigma, np.diag(sigma).copy(), t_eff,
                  int(n_params), resid, method, lambdas)


def fit_var_ols(series: MultiChannelSeries | np.ndarray, p: int) -> VarFit:
    x = series.samples if isinstance(series, MultiChannelSeries) else np.asarray(series, float)
    t, r = x.shape
    _check_size(t, r, p)
    y, xl = lag_design(x, p)
    if np.linalg.matrix_rank(xl) < xl.shape[1]:
        raise NumericalError("regressor matrix is rank deficient (collinear channels)")
    b, *_ = np.linalg.lstsq(xl, y, rcond=None)
    return _finish(y, xl, b, p, b.size, "ols")


# -------------------------------------------------------------------- LASSO

@numba.njit(cache=True)
def _cd_lasso(gram, xty, lam, beta, tol, max_iter):
    # minimises 0.5 b'Gb - b'c + lam |b|_1 with unit-diagonal G
    q = beta.shape[0]
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(q):
            rho = xty[j]
            for k in range(q):
                if k != j:
                    rho -= gram[j, k] * beta[k]
            if rho > lam:
                new = (rho - lam) / gram[j, j]
            elif rho < -lam:
                new = (rho + lam) / gram[j, j]
            else:
                new = 0.0
            d = abs(new - beta[j])
            if d > max_delta:
                max_delta = d
            beta[j] = new
        if max_delta < tol:
            return it + 1
    return -1


def lasso_cd(x: np.ndarray, y: np.ndarray, lam: float, tol: float = 1e-7,
             max_iter: int = 10000, beta0: np.ndarray | None = None) -> np.ndarray:
    """LASSO on RMS-standardised columns; returns original-scale coefficients.

    Minimises ``||y - X b||^2 / (2T) + lam * ||D b||_1`` where ``D`` holds the
    column RMS values, i.e. the penalty acts on standardised coefficients.
    """
    t = x.shape[0]
    scale = np.sqrt((x ** 2).mean(axis=0))
    if np.any(scale == 0):
        raise DataError("constant-zero regressor column")
    xs = x / scale
    gram = xs.T @ xs / t
    xty = xs.T @ y / t
    beta = np.zeros(x.shape[1]) if beta0 is None else beta0 * scale
    beta = np.ascontiguousarray(beta, dtype=float)
    n_it = _cd_lasso(gram, xty, float(lam), beta, tol, max_iter)
    if n_it < 0:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_iter} iterations")
    return beta / scale


def lambda_max(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty at which every standardised coefficient is zero."""
    scale = np.sqrt((x ** 2).mean(axis=0))
    return float(np.max(np.abs((x / scale).T @ y)) / x.shape[0])


def _refit(x, y, support):
    b = np.zeros(x.shape[1])
    if support.any():
        b[support], *_ = np.linalg.lstsq(x[:, support], y, rcond=None)
    return b


def _lambda_grid(lmax, n=40, ratio=1e-3):
    return lmax * np.logspace(0, np.log10(ratio), n)


def cv_lambda(x: np.ndarray, y: np.ndarray, n_folds: int = 5,
              n_lambdas: int = 40, tol: float = 1e-7,
              max_iter: int = 10000, one_se: bool = True) -> float:
    """Penalty chosen by blocked cross-validation of the LASSO+refit fit.

    Folds are contiguous row blocks so serially dependent samples stay
    together. With ``one_se`` the largest penalty whose mean fold error is
    within one standard error of the minimum is returned; otherwise the
    minimiser itself.
    """
    t = x.shape[0]
    grid = _lambda_grid(lambda_max(x, y), n_lambdas)
    bounds = np.linspace(0, t, n_folds + 1).astype(int)
    err = np.zeros((n_folds, len(grid)))
    for f in range(n_folds):
        test = np.zeros(t, bool)
        test[bounds[f]:bounds[f + 1]] = True
        xtr, ytr, xte, yte = x[~test], y[~test], x[test], y[test]
        beta = np.zeros(x.shape[1])
        for i, lam in enumerate(grid):
            beta = lasso_cd(xtr, ytr, lam, tol, max_iter, beta0=beta)
            b = _refit(xtr, ytr, beta != 0)
            err[f, i] = np.mean((yte - xte @ b) ** 2)
    mean = err.mean(axis=0)
    best = int(np.argmin(mean))
    if one_se:
        limit = mean[best] + err[:, best].std(ddof=1) / np.sqrt(n_folds)
        best = int(np.flatnonzero(mean <= limit)[0])
    return float(grid[best])


def fit_var_lassle(series: MultiChannelSeries | np.ndarray, p: int,
                   lam: float | None = None, tol: float = 1e-7,
                   max_iter: int = 10000, n_folds: int = 5) -> VarFit:
    """Per-equation LASSO support selection followed by a least-squares refit.

    ``lam=None`` selects the penalty per equation by blocked cross-validation.
    """
    x = series.samples if isinstance(series, MultiChannelSeries) else np.asarray(series, float)
    t, r = x.shape
    _check_size(t, r, p)
    if lam is not None and lam < 0:
        raise ValueError("lambda must be nonnegative")
    y, xl = lag_design(x, p)
    b = np.zeros((xl.shape[1], r))
    lams = np.zeros(r)
    for eq in range(r):
        lam_eq = cv_lambda(xl, y[:, eq], n_folds, tol=tol, max_iter=max_iter) if lam is None else lam
        lams[eq] = lam_eq
        if lam_eq == 0:
            support = np.ones(xl.shape[1], bool)
        else:
            support = lasso_cd(xl, y[:, eq], lam_eq, tol, max_iter) != 0
        b[:, eq] = _refit(xl, y[:, eq], support)
    return _finish(y, xl, b, p, np.count_nonzero(b), "lassle", lams)


# ----------------------------------------------------- information criteria

def information_criteria(fit: VarFit) -> dict[str, float]:
    sign, logdet = np.linalg.slogdet(fit.sigma)
    if sign <= 0 or not np.isfinite(logdet):
        raise NumericalError("residual covariance is singular")
    t, k = fit.t_effective, fit.n_params
    return {
        "aic": logdet + 2.0 * k / t,
        "bic": logdet + k * np.log(t) / t,
        "hq": logdet + 2.0 * k * np.log(np.log(t)) / t,
    }


@dataclass
class LagSelectionReport:
    """IC tables (rows p = 1..p_max) and per-subject selections."""

    p_max: int
    criterion: str
    subject_ids: list[str]
    tables: dict[str, dict[str, np.ndarray]]
    selected: dict[str, dict[str, int]]
    errors: dict[str, str]

    @property
    def modal_selection(self) -> int | None:
        picks = [self.selected[s][self.criterion] for s in self.subject_ids
                 if s in self.selected]
        if not picks:
            return None
        counts = Counter(picks)
        top = max(counts.values())
        return min(p for p, c in counts.items() if c == top)

    def rows(self):
        """(subject, criterion, p, value) tuples in a fixed order."""
        for sid in self.subject_ids:
            if sid not in self.tables:
                continue
            for crit in CRITERIA:
                for i, v in enumerate(self.tables[sid][crit]):
                    yield sid, crit, i + 1, float(v)


def ic_table(x: np.ndarray, p_max: int, method: str = "ols") -> dict[str, np.ndarray]:
    """IC values for p = 1..p_max, all fitted on the common window T - p_max."""
    x = np.asarray(x, float)
    table = {c: np.zeros(p_max) for c in CRITERIA}
    for p in range(1, p_max + 1):
        window = x[p_max - p:]
        fit = fit_var_ols(window, p) if method == "ols" else fit_var_lassle(window, p)
        for c, v in information_criteria(fit).items():
            table[c][p - 1] = v
    return table


def select_lag(dataset: StudyDataset, p_max: int, criterion: str = "bic",
               method: str = "ols") -> LagSelectionReport:
    criterion = criterion.lower()
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    if method not in ("ols", "lassle"):
        raise ValueError("method must be 'ols' or 'lassle'")
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    tables, selected, errors = {}, {}, {}
    ids = [s.subject_id for s in dataset.subjects]
    for s in dataset.subjects:
        try:
            table = ic_table(s.series.samples, p_max, method)
        except (DataError, NumericalError) as exc:
            errors[s.subject_id] = str(exc)
            continue
        tables[s.subject_id] = table
        selected[s.subject_id] = {c: int(np.argmin(table[c])) + 1 for c in CRITERIA}
    return LagSelectionReport(p_max, criterion, ids, tables, selected, errors)


# --------------------------------------------------------------- stability

def companion_matrix(coeffs) -> np.ndarray:
    mats = [np.atleast_2d(np.asarray(c, dtype=float)) for c in coeffs]
    if not mats:
        raise ValueError("need at least one coefficient matrix")
    r = mats[0].shape[0]
    for m in mats:
        if m.shape != (r, r):
            raise ValueError(
                f"coefficient matrices must all be {r} x {r}, got {m.shape}")
    p = len(mats)
    comp = np.zeros((r * p, r * p))
    comp[:r] = np.hstack(mats)
    if p > 1:
        comp[r:, :-r] = np.eye(r * (p - 1))
    return comp


def companion_spectral_radius(coeffs) -> float:
    """Spectral radius of the VAR companion matrix (< 1 iff causal)."""
    return float(np.max(np.abs(np.linalg.eigvals(companion_matrix(coeffs)))))


def is_causal(coeffs) -> bool:
    return companion_spectral_radius(coeffs) < 1.0
