"""REML/ML estimation of the group-indicator VAR with random slopes.

For one target channel r the stacked regression is

    y_i(t) = sum_k sum_r' [Phi_{g(i),k}(r, r') + b_{i,k}(r')] Y_{i,r'}(t - k) + e_i(t)

with fixed effects Phi_{g,k}(r, .) per group, independent random slopes
b_{i,k}(r') ~ N(0, tau_{g(i),k,r'}^2) and e ~ N(0, sigma^2). The variance
ratios theta = tau / sigma are the only free parameters of the profiled
deviance; beta and sigma^2 are solved in closed form.

Every subject contributes only through the cross-products of its lagged
regressors (A_i = S_i'S_i, c_i = S_i'y_i, y_i'y_i), so the cost of one
deviance evaluation does not depend on the series length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, sparse

from .data import StudyDataset
from .exceptions import ConvergenceError, DataError, NumericalError
from .var import lag_design

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
RELEASE_GRID = np.logspace(-3, 1, 25)


# ------------------------------------------------------------------- design

@dataclass
class MixedDesign:
    """Stacked design for one (band, target channel) regression.

    Rows are ordered by (subject, time). ``regressors`` holds the lagged values
    of all channels, lag-major: column ``(k - 1) * R + r'`` is Y_r'(t - k). The
    fixed design X and random design Z are views on the same regressors; see
    :attr:`X` and :attr:`Z`.
    """

    y: np.ndarray
    regressors: np.ndarray
    subject_ids: tuple[str, ...]
    subject_groups: np.ndarray
    row_offsets: np.ndarray
    n_groups: int
    lag_order: int
    channel_names: tuple[str, ...]
    target: int
    kept: np.ndarray = None
    A: np.ndarray = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)
    yy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = self.regressors.shape[1]
        if self.kept is None:
            self.kept = np.ones((self.n_groups, q), dtype=bool)
        self.kept = np.asarray(self.kept, dtype=bool)
        n = len(self.subject_ids)
        self.A = np.empty((n, q, q))
        self.c = np.empty((n, q))
        self.yy = np.empty(n)
        for i in range(n):
            rows = slice(self.row_offsets[i], self.row_offsets[i + 1])
            s, y = self.regressors[rows], self.y[rows]
            self.A[i] = s.T @ s
            self.c[i] = s.T @ y
            self.yy[i] = y @ y

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def q(self) -> int:
        """Regressors per subject (R * p)."""
        return self.regressors.shape[1]

    @property
    def n_fixed(self) -> int:
        return int(self.kept.sum())

    @property
    def group_index(self) -> np.ndarray:
        """0-based group of every subject."""
        return self.subject_groups - 1

    def column_label(self, g: int, j: int) -> tuple[int, str, int]:
        """(group, source channel, lag) of regressor ``j`` in group ``g`` (1-based)."""
        r = len(self.channel_names)
        return (g, self.channel_names[j % r], j // r + 1)

    @property
    def all_labels(self) -> list[tuple[int, str, int]]:
        return [self.column_label(g + 1, j)
                for g in range(self.n_groups) for j in range(self.q)]

    @property
    def fixed_labels(self) -> list[tuple[int, str, int]]:
        return [lab for lab, k in zip(self.all_labels, self.kept.ravel()) if k]

    def row_groups(self) -> np.ndarray:
        counts = np.diff(self.row_offsets)
        return np.repeat(self.subject_groups, counts)

    @property
    def X(self) -> np.ndarray:
        """Dense N x n_fixed fixed-effect design."""
        full = np.zeros((self.n_obs, self.n_groups * self.q))
        rg = self.row_groups()
        for g in range(self.n_groups):
            rows = rg == g + 1
            full[rows, g * self.q:(g + 1) * self.q] = self.regressors[rows]
        return full[:, self.kept.ravel()]

    @property
    def Z(self) -> sparse.csr_matrix:
        """Sparse N x (n_subjects * q) block-diagonal random design."""
        blocks = [self.regressors[self.row_offsets[i]:self.row_offsets[i + 1]]
                  for i in range(self.n_subjects)]
        return sparse.block_diag(blocks, format="csr")

    def label_index(self, label) -> int:
        return self.all_labels.index(tuple(label))

    def exclude(self, labels: Iterable) -> "MixedDesign":
        """Copy of the design with the named fixed columns removed."""
        kept = self.kept.copy().ravel()
        all_labels = self.all_labels
        for lab in labels:
            lab = tuple(lab)
            if lab not in all_labels:
                raise KeyError(f"unknown fixed-effect column {lab}")
            kept[all_labels.index(lab)] = False
        new = object.__new__(MixedDesign)
        new.__dict__.update(self.__dict__)
        new.kept = kept.reshape(self.kept.shape)
        return new

    def permuted(self, order: Sequence[int]) -> "MixedDesign":
        """Same data with subjects reordered."""
        pieces_y, pieces_s, offsets = [], [], [0]
        for i in order:
            rows = slice(self.row_offsets[i], self.row_offsets[i + 1])
            pieces_y.append(self.y[rows])
            pieces_s.append(self.regressors[rows])
            offsets.append(offsets[-1] + rows.stop - rows.start)
        return MixedDesign(np.concatenate(pieces_y), np.vstack(pieces_s),
                           tuple(self.subject_ids[i] for i in order),
                           self.subject_groups[list(order)], np.array(offsets),
                           self.n_groups, self.lag_order, self.channel_names,
                           self.target, self.kept.copy())


def design_from_arrays(series: Sequence[np.ndarray], groups: Sequence[int],
                       target: int, p: int, n_groups: int = 2,
                       channel_names: Sequence[str] | None = None,
                       subject_ids: Sequence[str] | None = None) -> MixedDesign:
    """Build a design from raw T_i x R arrays and 1-based group labels."""
    if len(series) != len(groups):
        raise DataError("one group label per subject required")
    if not series:
        raise DataError("no subjects")
    r = np.asarray(series[0]).shape[1]
    if not 0 <= target < r:
        raise DataError(f"target channel {target} out of range for R = {r}")
    groups = np.asarray(groups, dtype=int)
    for g in range(1, n_groups + 1):
        if not np.any(groups == g):
            raise DataError(f"group {g} has no subjects")
    if np.any((groups < 1) | (groups > n_groups)):
        raise DataError(f"group labels must lie in 1..{n_groups}")
    ys, ss, offsets = [], [], [0]
    for i, x in enumerate(series):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != r:
            raise DataError(f"subject {i}: expected T x {r} samples, got {x.shape}")
        if x.shape[0] <= r * p + 1:
            raise DataError(
                f"subject {i}: need T > R*p + 1 = {r * p + 1}, got {x.shape[0]}")
        y, s = lag_design(x, p)
        ys.append(y[:, target])
        ss.append(s)
        offsets.append(offsets[-1] + y.shape[0])
    names = tuple(channel_names) if channel_names is not None else tuple(
        f"ch{j + 1}" for j in range(r))
    ids = tuple(subject_ids) if subject_ids is not None else tuple(
        f"s{i + 1}" for i in range(len(series)))
    return MixedDesign(np.concatenate(ys), np.vstack(ss), ids, groups,
                       np.array(offsets), n_groups, p, names, target)


def build_design(dataset: StudyDataset, target_channel: int | str, p: int,
                 n_groups: int = 2) -> MixedDesign:
    if isinstance(target_channel, str):
        if target_channel not in dataset.channel_names:
            raise DataError(f"unknown channel {target_channel!r}")
        target_channel = dataset.channel_names.index(target_channel)
    return design_from_arrays(
        [s.series.samples for s in dataset.subjects],
        [s.group_index for s in dataset.subjects],
        target_channel, p, n_groups, dataset.channel_names,
        [s.subject_id for s in dataset.subjects])


# -------------------------------------------------------- profiled deviance

@dataclass
class _Profile:
    theta: np.ndarray
    logdet_v: float
    logdet_c: float
    rss: float
    n_obs: int
    n_fixed: int
    beta: list            # per group, kept coefficients
    c_inv: np.ndarray     # (G, q, q) inverse of X'V^-1 X blocks, zero-padded
    W: np.ndarray = None
    w: np.ndarray = None
    Minv: np.ndarray = None
    lam: np.ndarray = None

    def deviance(self, reml: bool) -> float:
        if reml:
            dof = self.n_obs - self.n_fixed
            return (self.logdet_v + self.logdet_c
                    + dof * (1.0 + LOG_2PI + np.log(self.rss / dof)))
        n = self.n_obs
        return self.logdet_v + n * (1.0 + LOG_2PI + np.log(self.rss / n))

    def beta_full(self) -> np.ndarray:
        """(G, q) coefficients with zeros in excluded columns."""
        return np.stack(self._full)


def _as_theta(design: MixedDesign, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = np.full((design.n_groups, design.q), float(theta))
    theta = theta.reshape(design.n_groups, design.q)
    if np.any(theta < 0) or not np.all(np.isfinite(theta)):
        raise ValueError("theta entries must be finite and nonnegative")
    return theta


def _profile(design: MixedDesign, theta: np.ndarray, keep_blocks: bool = False) -> _Profile:
    gidx = design.group_index
    lam = theta[gidx]
    A = design.A
    q = design.q
    B = A * lam[:, None, :]
    M = lam[:, :, None] * B
    M[:, np.arange(q), np.arange(q)] += 1.0
    try:
        chol = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NumericalError("random-effect system is not positive definite") from None
    logdet_v = 2.0 * float(np.log(np.diagonal(chol, axis1=1, axis2=2)).sum())
    Minv = np.linalg.inv(M)
    BM = B @ Minv
    W = A - BM @ B.transpose(0, 2, 1)
    lc = lam * design.c
    w = design.c - np.einsum("iab,ib->ia", BM, lc)
    s = design.yy - np.einsum("ia,iab,ib->i", lc, Minv, lc)

    G = design.n_groups
    c_inv = np.zeros((G, q, q))
    betas, full = [], []
    logdet_c = 0.0
    fit_ss = 0.0
    for g in range(G):
        members = gidx == g
        Cg = W[members].sum(axis=0)
        wg = w[members].sum(axis=0)
        k = design.kept[g]
        bfull = np.zeros(q)
        if k.any():
            Ck = Cg[np.ix_(k, k)]
            try:
                L = np.linalg.cholesky(Ck)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"fixed-effect block of group {g + 1} is singular") from None
            logdet_c += 2.0 * float(np.log(np.diag(L)).sum())
            inv = np.linalg.inv(Ck)
            inv = 0.5 * (inv + inv.T)
            c_inv[g][np.ix_(k, k)] = inv
            bk = inv @ wg[k]
            bfull[k] = bk
            fit_ss += float(wg[k] @ bk)
            betas.append(bk)
        else:
            betas.append(np.zeros(0))
        full.append(bfull)
    rss = float(s.sum()) - fit_ss
    if not rss > 0:
        raise NumericalError("nonpositive residual sum of squares")
    prof = _Profile(theta, logdet_v, logdet_c, rss, design.n_obs, design.n_fixed,
                    betas, c_inv)
    prof._full = full
    if keep_blocks:
        prof.W, prof.w, prof.Minv, prof.lam = W, w, Minv, lam
    return prof


def _dev_and_grad_d(design: MixedDesign, prof: _Profile, reml: bool,
                    sigma2: float | None = None):
    """Per-(group, column) derivative pieces wrt the variance ratio d = theta^2.

    Returns ``(trace_terms, quad_terms)`` such that the derivative of the
    profiled deviance is ``trace - quad * dof / rss`` and that of the
    non-profiled deviance at ``sigma2`` is ``trace - quad / sigma2``.
    """
    gidx = design.group_index
    W = prof.W
    bfull = np.stack(prof._full)[gidx]
    v = prof.w - np.einsum("iab,ib->ia", W, bfull)
    tr = np.einsum("ijj->ij", W).copy()
    if reml:
        K = prof.c_inv[gidx]
        tr -= np.einsum("ija,iab,ijb->ij", W, K, W)
    G, q = design.n_groups, design.q
    trace = np.zeros((G, q))
    quad = np.zeros((G, q))
    np.add.at(trace, gidx, tr)
    np.add.at(quad, gidx, v ** 2)
    return trace, quad


def _grad_d(design: MixedDesign, theta, reml: bool) -> np.ndarray:
    """Flattened derivative of the profiled deviance wrt d = theta^2."""
    theta = _as_theta(design, np.maximum(theta, 0.0))
    prof = _profile(design, theta, keep_blocks=True)
    dof = prof.n_obs - prof.n_fixed if reml else prof.n_obs
    trace, quad = _dev_and_grad_d(design, prof, reml)
    return (trace - quad * dof / prof.rss).ravel()


def profiled_deviance(design: MixedDesign, theta, mode: str = "REML") -> float:
    """-2 x profiled (restricted) log-likelihood at variance ratios ``theta``."""
    reml = _is_reml(mode)
    return _profile(design, _as_theta(design, theta)).deviance(reml)


def profiled_deviance_gradient(design: MixedDesign, theta, mode: str = "REML") -> np.ndarray:
    """Analytic gradient of :func:`profiled_deviance` wrt theta, shape (G, q)."""
    reml = _is_reml(mode)
    theta = _as_theta(design, theta)
    prof = _profile(design, theta, keep_blocks=True)
    dof = prof.n_obs - prof.n_fixed if reml else prof.n_obs
    trace, quad = _dev_and_grad_d(design, prof, reml)
    return 2.0 * theta * (trace - quad * dof / prof.rss)


def _is_reml(mode) -> bool:
    mode = str(mode).upper()
    if mode not in ("REML", "ML"):
        raise ValueError("mode must be 'REML' or 'ML'")
    return mode == "REML"


def full_deviance(design: MixedDesign, tau, sigma: float, mode: str = "REML") -> float:
    """Deviance as a function of the random-slope SDs and residual SD."""
    reml = _is_reml(mode)
    tau = np.asarray(tau, dtype=float).reshape(design.n_groups, design.q)
    prof = _profile(design, tau / sigma)
    return _full_dev(prof, sigma ** 2, reml)


def _full_dev(prof: _Profile, s2: float, reml: bool) -> float:
    dof = prof.n_obs - prof.n_fixed if reml else prof.n_obs
    dev = prof.logdet_v + dof * (np.log(s2) + LOG_2PI) + prof.rss / s2
    return dev + prof.logdet_c if reml else dev


def _full_grad(design: MixedDesign, tau: np.ndarray, sigma: float,
               free: np.ndarray) -> np.ndarray:
    """Gradient of the REML deviance wrt (tau[free], sigma)."""
    theta = tau / sigma
    prof = _profile(design, theta, keep_blocks=True)
    s2 = sigma ** 2
    trace, quad = _dev_and_grad_d(design, prof, True)
    dtheta = 2.0 * theta * (trace - quad / s2)
    dof = prof.n_obs - prof.n_fixed
    dsigma = 2.0 * dof / sigma - 2.0 * prof.rss / sigma ** 3 - float(
        np.sum(dtheta * theta)) / sigma
    return np.append((dtheta / sigma)[free], dsigma)


# --------------------------------------------------------------------- fit

@dataclass
class OptimizerConfig:
    """Settings for :func:`fit_reml` / :func:`fit_ml`.

    ``method`` is ``"lbfgsb"`` (bounded quasi-Newton on the analytic
    gradient) or ``"nelder-mead"`` (bounded simplex, derivative free).
    """

    method: str = "lbfgsb"
    starts: tuple[float, ...] = (0.1, 1.0)
    maxfun_per_dim: int = 5000
    ftol: float = 1e-8
    xtol: float = 1e-6
    gtol: float = 1e-6
    boundary_tol: float = 1e-4
    grad_tol: float = 1e-3
    fd_step: float = 1e-4
    random_effects: bool = True
    inference: bool = True


@dataclass
class MixedVarFit:
    """Result of one (band, target channel) mixed-model fit."""

    labels: list
    beta: np.ndarray
    beta_cov: np.ndarray
    tau: np.ndarray
    sigma: float
    theta: np.ndarray
    blups: np.ndarray
    subject_ids: list
    deviance: float
    method: str
    n_obs: int
    convergence: dict
    channel_names: list
    target: str
    lag_order: int
    band: str | None = None
    kept: np.ndarray | None = None
    vc_labels: list | None = None
    vc_information: np.ndarray | None = None
    se2_jacobian: np.ndarray | None = None

    @property
    def reml_deviance(self) -> float | None:
        return self.deviance if self.method == "REML" else None

    @property
    def ml_deviance(self) -> float | None:
        return self.deviance if self.method == "ML" else None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov), 0, None))

    @property
    def boundary(self) -> np.ndarray:
        """(G, q) mask of variance components estimated at exactly zero."""
        return self.tau == 0

    def coef(self, label) -> float:
        return float(self.beta[self.labels.index(tuple(label))])

    def index(self, label) -> int:
        return self.labels.index(tuple(label))

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "band": self.band,
            "target": self.target,
            "channel_names": list(self.channel_names),
            "lag_order": self.lag_order,
            "method": self.method,
            "n_obs": self.n_obs,
            "labels": [list(lab) for lab in self.labels],
            "beta": arr(self.beta),
            "se": arr(self.se),
            "beta_cov": arr(self.beta_cov),
            "tau": arr(self.tau),
            "theta": arr(self.theta),
            "sigma": float(self.sigma),
            "deviance": float(self.deviance),
            "subject_ids": list(self.subject_ids),
            "blups": arr(self.blups),
            "kept": arr(self.kept),
            "vc_labels": None if self.vc_labels is None else [list(v) for v in self.vc_labels],
            "vc_information": arr(self.vc_information),
            "se2_jacobian": arr(self.se2_jacobian),
            "convergence": self.convergence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedVarFit":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)
        return cls(
            labels=[tuple(lab) for lab in d["labels"]],
            beta=arr(d["beta"]), beta_cov=arr(d["beta_cov"]), tau=arr(d["tau"]),
            sigma=float(d["sigma"]), theta=arr(d["theta"]), blups=arr(d["blups"]),
            subject_ids=list(d["subject_ids"]), deviance=float(d["deviance"]),
            method=d["method"], n_obs=int(d["n_obs"]), convergence=d["convergence"],
            channel_names=list(d["channel_names"]), target=d["target"],
            lag_order=int(d["lag_order"]), band=d.get("band"),
            kept=None if d.get("kept") is None else np.asarray(d["kept"], dtype=bool),
            vc_labels=None if d.get("vc_labels") is None else [tuple(v) for v in d["vc_labels"]],
            vc_information=arr(d.get("vc_information")),
            se2_jacobian=arr(d.get("se2_jacobian")),
        )


def _optimize(design: MixedDesign, reml: bool, config: OptimizerConfig):
    G, q = design.n_groups, design.q
    dim = G * q
    maxfun = config.maxfun_per_dim * dim
    mode = "REML" if reml else "ML"
    bounds = [(0.0, None)] * dim

    def fun(t):
        return profiled_deviance(design, t, mode)

    def fun_grad(t):
        theta = _as_theta(design, np.maximum(t, 0.0))
        prof = _profile(design, theta, keep_blocks=True)
        dof = prof.n_obs - prof.n_fixed if reml else prof.n_obs
        trace, quad = _dev_and_grad_d(design, prof, reml)
        g = 2.0 * theta * (trace - quad * dof / prof.rss)
        return prof.deviance(reml), g.ravel()

    def lbfgsb(x0):
        return optimize.minimize(
            fun_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxfun": maxfun, "maxiter": maxfun, "ftol": 1e-14,
                     "gtol": config.gtol, "maxls": 50})

    def release(res):
        # d(dev)/d(theta) vanishes at theta = 0, so a component pinned at the
        # bound is released whenever the deviance falls in d = theta^2
        for _ in range(dim):
            at_zero = res.x < config.boundary_tol
            if not at_zero.any():
                break
            slope = _grad_d(design, np.where(at_zero, 0.0, res.x), reml)
            free = at_zero & (slope < 0)
            if not free.any():
                break
            # restart from the best point of a log scan along the released axes
            x1 = np.where(at_zero, 0.0, res.x)
            scan = []
            for t in RELEASE_GRID:
                xt = x1.copy()
                xt[free] = t
                scan.append(fun(xt))
            x1[free] = RELEASE_GRID[int(np.argmin(scan))]
            again = lbfgsb(x1)
            again.nfev += res.nfev + len(RELEASE_GRID)
            if not again.fun < res.fun - 1e-12:
                res.nfev = again.nfev
                break
            res = again
        return res

    results = []
    for start in config.starts:
        x0 = np.full(dim, float(start))
        if config.method == "lbfgsb":
            res = lbfgsb(x0)
        elif config.method == "nelder-mead":
            res = optimize.minimize(
                fun, x0, method="Nelder-Mead", bounds=bounds,
                options={"maxfev": maxfun, "xatol": config.xtol,
                         "fatol": config.ftol, "adaptive": dim > 4})
            # restart from the optimum until the simplex stops improving
            for _ in range(5):
                again = optimize.minimize(
                    fun, res.x, method="Nelder-Mead", bounds=bounds,
                    options={"maxfev": maxfun, "xatol": config.xtol,
                             "fatol": config.ftol, "adaptive": dim > 4})
                again.nfev += res.nfev
                improved = res.fun - again.fun > config.ftol
                res = again
                if not improved:
                    break
        else:
            raise ValueError(f"unknown optimizer method {config.method!r}")
        results.append(res)
    start_devs = [float(r.fun) for r in results]
    best = min(results, key=lambda r: r.fun)
    if config.method == "lbfgsb":
        best = release(best)
    nfev = int(sum(r.nfev for r in results if r is not best)) + int(best.nfev)
    return best, start_devs, nfev, maxfun


def _fit(design: MixedDesign, reml: bool, config: OptimizerConfig,
         band: str | None) -> MixedVarFit:
    G, q = design.n_groups, design.q
    mode = "REML" if reml else "ML"
    if design.n_fixed >= design.n_obs:
        raise DataError("more fixed effects than observations")
    conv = {}
    if config.random_effects:
        best, start_devs, nfev, maxfun = _optimize(design, reml, config)
        theta = np.maximum(best.x, 0.0).reshape(G, q)
        dev = profiled_deviance(design, theta, mode)
        # snap near-zero ratios onto the boundary when that costs nothing
        small = (theta > 0) & (theta < config.boundary_tol)
        if small.any():
            snapped = np.where(small, 0.0, theta)
            dev0 = profiled_deviance(design, snapped, mode)
            if dev0 <= dev + 1e-7:
                theta, dev = snapped, dev0
        grad = profiled_deviance_gradient(design, theta, mode)
        gnorm = float(np.linalg.norm(grad))
        scaled = gnorm / max(1.0, abs(dev))
        converged = bool(best.success) or scaled <= config.grad_tol
        if not converged:
            if nfev >= maxfun:
                raise ConvergenceError(
                    f"{mode} optimisation did not converge in {maxfun} evaluations "
                    f"(scaled gradient norm {scaled:.3g})")
            log.warning("%s fit for target %s: %s (scaled gradient %.3g)",
                        mode, design.channel_names[design.target], best.message, scaled)
        conv = {
            "converged": converged,
            "optimizer": config.method,
            "message": str(best.message),
            "n_evaluations": nfev,
            "start_deviances": start_devs,
            "gradient_norm": gnorm,
            "scaled_gradient_norm": scaled,
        }
    else:
        theta = np.zeros((G, q))
        dev = profiled_deviance(design, theta, mode)
        conv = {"converged": True, "optimizer": "none", "message": "random effects disabled",
                "n_evaluations": 1, "start_deviances": [], "gradient_norm": 0.0,
                "scaled_gradient_norm": 0.0}

    prof = _profile(design, theta, keep_blocks=True)
    dof = prof.n_obs - prof.n_fixed if reml else prof.n_obs
    sigma2 = prof.rss / dof
    sigma = float(np.sqrt(sigma2))
    tau = theta * sigma
    boundary = [list(design.column_label(g + 1, j)) for g in range(G) for j in range(q)
                if tau[g, j] == 0]
    conv["boundary"] = boundary
    conv["warning"] = "boundary" if boundary and config.random_effects else None

    kept = design.kept.ravel()
    cov = (sigma2 * prof.c_inv).reshape(G, q, q)
    full_cov = np.zeros((G * q, G * q))
    for g in range(G):
        full_cov[g * q:(g + 1) * q, g * q:(g + 1) * q] = cov[g]
    beta_cov = full_cov[np.ix_(kept, kept)]
    beta = np.concatenate(prof.beta)

    bfull = np.stack(prof._full)[design.group_index]
    resid_c = design.c - np.einsum("iab,ib->ia", design.A, bfull)
    blups = prof.lam * np.einsum("iab,ib->ia", prof.Minv, prof.lam * resid_c)

    fit = MixedVarFit(
        labels=design.fixed_labels, beta=beta, beta_cov=beta_cov, tau=tau,
        sigma=sigma, theta=theta, blups=blups, subject_ids=list(design.subject_ids),
        deviance=float(dev), method=mode, n_obs=design.n_obs, convergence=conv,
        channel_names=list(design.channel_names),
        target=design.channel_names[design.target], lag_order=design.lag_order,
        band=band, kept=design.kept.copy())
    if reml and config.inference:
        _attach_vc_information(design, fit, config.fd_step)
    return fit


def _richardson(f, x, h):
    """Central difference of ``f`` along a step vector, Richardson-extrapolated."""
    d1 = (f(x + h) - f(x - h)) / 2.0
    d2 = (f(x + h / 2) - f(x - h / 2))
    return (4.0 * d2 - d1) / 3.0


def _attach_vc_information(design: MixedDesign, fit: MixedVarFit, step: float):
    """Covariance of (tau, sigma) estimates and Jacobian of the squared SEs.

    The Hessian of the REML deviance is differentiated numerically from its
    analytic gradient; both it and the SE Jacobian use central differences
    with relative step ``step`` and one Richardson extrapolation.
    """
    G, q = design.n_groups, design.q
    free = fit.tau > 0
    x0 = np.append(fit.tau[free], fit.sigma)
    m = x0.size
    steps = step * np.abs(x0)

    def unpack(x):
        tau = np.zeros((G, q))
        tau[free] = x[:-1]
        return tau, x[-1]

    def grad(x):
        tau, sigma = unpack(x)
        return _full_grad(design, tau, sigma, free)

    def se2(x):
        tau, sigma = unpack(x)
        prof = _profile(design, tau / sigma)
        return sigma ** 2 * np.diagonal(prof.c_inv, axis1=1, axis2=2).ravel()[design.kept.ravel()]

    H = np.empty((m, m))
    J = np.empty((fit.beta.size, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = steps[j]
        H[:, j] = _richardson(grad, x0, e) / steps[j]
        J[:, j] = _richardson(se2, x0, e) / steps[j]
    H = 0.5 * (H + H.T)
    try:
        info = 2.0 * np.linalg.inv(H)
        ok = bool(np.all(np.linalg.eigvalsh(H) > 0))
    except np.linalg.LinAlgError:
        info, ok = 2.0 * np.linalg.pinv(H), False
    fit.vc_labels = [("tau",) + tuple(design.column_label(g + 1, j))
                     for g in range(G) for j in range(q) if free[g, j]] + [("sigma",)]
    fit.vc_information = info
    fit.se2_jacobian = J
    fit.convergence["hessian_positive_definite"] = ok


def fit_reml(design: MixedDesign, config: OptimizerConfig | None = None,
             band: str | None = None) -> MixedVarFit:
    """REML fit of variance ratios, then GLS fixed effects and BLUPs."""
    return _fit(design, True, config or OptimizerConfig(), band)


def fit_ml(design: MixedDesign, config: OptimizerConfig | None = None,
           band: str | None = None) -> MixedVarFit:
    config = replace(config or OptimizerConfig(), inference=False)
    return _fit(design, False, config, band)


def fit_ml_nested(design: MixedDesign, excluded_fixed_columns: Iterable,
                  config: OptimizerConfig | None = None,
                  band: str | None = None) -> tuple[MixedVarFit, MixedVarFit]:
    """ML fits of the full design and of the design without the named columns.

    Returns ``(full, reduced)``; REML deviances are not comparable across
    different fixed-effect structures, hence ML.
    """
    excluded = [tuple(lab) for lab in excluded_fixed_columns]
    reduced_design = design.exclude(excluded)
    full = fit_ml(design, config, band)
    if not excluded:
        return full, full
    reduced = fit_ml(reduced_design, config, band)
    reduced.convergence["excluded"] = [list(lab) for lab in excluded]
    return full, reduced


# --------------------------------------------------------------- inference

@dataclass(frozen=True)
class CoefficientTest:
    label: tuple
    estimate: float
    se: float
    t: float
    df: float
    p: float
    normal_approximation: bool


def fixed_effect_inference(fit: MixedVarFit) -> list[CoefficientTest]:
    """Satterthwaite t-tests for every fixed effect of a REML fit."""
    from scipy import stats

    if fit.vc_information is None or fit.se2_jacobian is None:
        raise ValueError("fit carries no variance-component information; "
                         "refit with inference enabled")
    se2 = np.diag(fit.beta_cov)
    J = fit.se2_jacobian
    var_se2 = np.einsum("ia,ab,ib->i", J, fit.vc_information, J)
    out = []
    for i, label in enumerate(fit.labels):
        se = float(np.sqrt(se2[i])) if se2[i] > 0 else 0.0
        est = float(fit.beta[i])
        if se == 0:
            raise NumericalError(f"zero standard error for {label}")
        t = est / se
        df = 2.0 * se2[i] ** 2 / var_se2[i] if var_se2[i] > 0 else np.nan
        if np.isfinite(df) and df > 0:
            p = float(2.0 * stats.t.sf(abs(t), df))
            normal = False
        else:
            p = float(2.0 * stats.norm.sf(abs(t)))
            df, normal = float("inf"), True
        out.append(CoefficientTest(tuple(label), est, se, float(t), float(df), p, normal))
    return out
