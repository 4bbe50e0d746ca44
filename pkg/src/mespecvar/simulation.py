"""Monte Carlo consistency study for the mixed-effects VAR estimator.

Populations of subjects are drawn from a VAR(p_gen) whose coefficient
matrices are the group matrices plus subject-specific Gaussian deviations; a
lag-``p_fit`` mixed model is fitted to every target channel and the group-1
lag-1 fixed effects and random-effect SDs are compared with the truth.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .data import MultiChannelSeries, SubjectRecord
from .exceptions import DataError, NumericalError, SimulationError
from .mixed import OptimizerConfig, design_from_arrays, fit_reml
from .var import companion_spectral_radius

log = logging.getLogger(__name__)

MAX_RESAMPLES = 100


@dataclass
class SimulationConfig:
    seed: int
    n_channels: int = 10
    n_subjects: int = 10
    p_gen: int = 2
    p_fit: int = 1
    phi: list | None = None
    random_sd: list = field(default_factory=lambda: [0.05, 0.05])
    noise_sd: float = 1.0
    time_points: list = field(default_factory=lambda: [200, 500, 700])
    n_replicates: int = 200
    target_radius: float = 0.8
    sparsity: float = 0.7
    lag_decay: float = 0.5
    burn_in: int = 500
    sampling_rate_hz: float = 128.0

    def __post_init__(self):
        if self.seed is None or isinstance(self.seed, bool) or int(self.seed) != self.seed:
            raise DataError("simulation seed is mandatory and must be an integer")
        self.seed = int(self.seed)
        if self.n_channels < 1 or self.n_subjects < 1 or self.n_replicates < 1:
            raise DataError("n_channels, n_subjects and n_replicates must be positive")
        if self.p_gen < 1 or self.p_fit < 1:
            raise DataError("lag orders must be positive")
        if not 0 < self.target_radius < 1:
            raise DataError("target_radius must lie in (0, 1)")
        if len(self.random_sd) != self.p_gen:
            raise DataError(f"random_sd needs one entry per generator lag ({self.p_gen})")
        if not self.time_points or min(self.time_points) <= self.n_channels * self.p_fit + 1:
            raise DataError("every time-point regime must exceed R * p_fit + 1")
        if self.phi is not None:
            phi = [np.asarray(m, float) for m in self.phi]
            if len(phi) != self.p_gen or any(m.shape != (self.n_channels,) * 2 for m in phi):
                raise DataError("phi must hold p_gen matrices of shape R x R")
            if companion_spectral_radius(phi) >= 1:
                raise DataError("generator matrices are not causal")

    @classmethod
    def from_dict(cls, doc: dict) -> "SimulationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown simulation config keys: {sorted(unknown)}")
        if "seed" not in doc:
            raise DataError("simulation config must set 'seed'")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "SimulationConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.phi is not None:
            d["phi"] = [np.asarray(m, float).tolist() for m in self.phi]
        d["random_sd"] = [np.asarray(s, float).tolist() for s in self.random_sd]
        return d

    def generator(self) -> list[np.ndarray]:
        if self.phi is not None:
            return [np.asarray(m, float) for m in self.phi]
        rng = np.random.default_rng([self.seed, 0])
        return default_generator_matrices(self.n_channels, self.target_radius, rng,
                                          n_lags=self.p_gen, sparsity=self.sparsity,
                                          lag_decay=self.lag_decay)

    def random_sd_matrix(self, lag: int) -> np.ndarray:
        s = np.asarray(self.random_sd[lag - 1], float)
        return np.broadcast_to(s, (self.n_channels, self.n_channels)).copy()


def default_generator_matrices(R: int, target_radius: float, rng,
                               n_lags: int = 2, sparsity: float = 0.7,
                               lag_decay: float = 0.5, tol: float = 1e-9):
    """Random sparse VAR matrices rescaled to a given companion radius.

    Entries of lag k are N(0, lag_decay^(2(k-1))); a ``sparsity`` fraction of
    the off-diagonal entries of each matrix is zeroed and all matrices are
    multiplied by a common factor found by bisection.
    """
    if not 0 < target_radius < 1:
        raise ValueError("target_radius must lie in (0, 1)")
    off = ~np.eye(R, dtype=bool)
    mats = []
    for k in range(n_lags):
        m = rng.standard_normal((R, R)) * lag_decay ** k
        idx = np.flatnonzero(off)
        drop = rng.choice(idx, size=int(round(sparsity * idx.size)), replace=False)
        m.flat[drop] = 0.0
        mats.append(m)

    def radius(s):
        return companion_spectral_radius([s * m for m in mats])

    lo, hi = 0.0, 1.0
    while radius(hi) < target_radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rho = radius(mid)
        if abs(rho - target_radius) < tol:
            break
        if rho < target_radius:
            lo = mid
        else:
            hi = mid
    return [mid * m for m in mats]


def simulate_var(coefs, n_samples: int, rng, noise_sd: float = 1.0,
                 burn_in: int = 500) -> np.ndarray:
    """VAR recursion from zero initial values; the first ``burn_in`` samples are dropped.

    Innovations of the retained samples are drawn first and the burn-in
    innovations after them, backwards in time, so a longer burn-in only
    prepends earlier history.
    """
    coefs = [np.asarray(c, float) for c in coefs]
    R = coefs[0].shape[0]
    p = len(coefs)
    total = n_samples + burn_in
    kept = rng.standard_normal((n_samples, R))
    # burn-in innovations are drawn backwards in time from the retained segment
    burn = rng.standard_normal((burn_in, R))[::-1]
    noise = np.vstack([burn, kept]) * noise_sd
    x = np.zeros((total + p, R))
    stacked = np.hstack(coefs)
    for t in range(total):
        past = x[t:t + p][::-1].ravel()
        x[t + p] = stacked @ past + noise[t]
    return x[p + burn_in:]


def draw_subject_coefs(config: SimulationConfig, phi, rng) -> list[np.ndarray]:
    for _ in range(MAX_RESAMPLES):
        coefs = [phi[k] + rng.standard_normal(phi[k].shape) * config.random_sd_matrix(k + 1)
                 for k in range(config.p_gen)]
        if companion_spectral_radius(coefs) < 1:
            return coefs
    raise SimulationError(
        f"no causal subject draw in {MAX_RESAMPLES} attempts; reduce random_sd")


def generate_subject(config: SimulationConfig, group: int, rng, subject_id: str = "sim",
                     n_samples: int | None = None, phi=None) -> SubjectRecord:
    """One simulated subject: group matrices plus random deviations."""
    phi = config.generator() if phi is None else phi
    n_samples = max(config.time_points) if n_samples is None else n_samples
    coefs = draw_subject_coefs(config, phi, rng)
    x = simulate_var(coefs, n_samples, rng, config.noise_sd, config.burn_in)
    names = tuple(f"ch{j + 1}" for j in range(config.n_channels))
    return SubjectRecord(subject_id, group,
                         MultiChannelSeries(x, names, config.sampling_rate_hz))


def subject_rng(seed: int, rep: int, index: int) -> np.random.Generator:
    """Independent stream of subject ``index`` in replicate ``rep``."""
    return np.random.default_rng([seed, rep + 1, index])


def _population(config, phi, rep, n_samples):
    subjects = []
    for g in (1, 2):
        for i in range(config.n_subjects):
            rng = subject_rng(config.seed, rep, len(subjects))
            subjects.append(generate_subject(config, g, rng, f"g{g}s{i + 1:02d}",
                                             n_samples, phi))
    return subjects


def _replicate(config: SimulationConfig, phi, rep: int):
    """Fit every regime of one replicate; regimes share the same draws."""
    population = _population(config, phi, rep, max(config.time_points))
    groups = [s.group_index for s in population]
    R = config.n_channels
    opt = OptimizerConfig(inference=False)
    out = []
    for T in config.time_points:
        arrays = [s.series.samples[:T] for s in population]
        phi_hat = np.empty((R, R))
        tau_hat = np.empty((R, R))
        try:
            for r in range(R):
                fit = fit_reml(design_from_arrays(arrays, groups, r, config.p_fit), opt)
                phi_hat[r] = fit.beta[:R]
                tau_hat[r] = fit.tau[0, :R]
        except NumericalError as exc:
            log.debug("replicate %d, T=%d failed: %s", rep, T, exc)
            out.append(None)
            continue
        out.append((phi_hat, tau_hat))
    return out


@dataclass
class ErrorSummary:
    bias: np.ndarray
    mse: np.ndarray
    sd: np.ndarray

    @classmethod
    def from_estimates(cls, est: np.ndarray, truth: np.ndarray) -> "ErrorSummary":
        mean = est.mean(axis=0)
        return cls(mean - truth, ((est - truth) ** 2).mean(axis=0), est.std(axis=0))

    def means(self) -> dict:
        return {"mean_abs_bias": float(np.abs(self.bias).mean()),
                "mean_mse": float(self.mse.mean()),
                "mean_sd": float(self.sd.mean())}

    def to_dict(self) -> dict:
        return {"bias": self.bias.tolist(), "mse": self.mse.tolist(),
                "sd": self.sd.tolist(), **self.means()}


@dataclass
class RegimeResult:
    n_samples: int
    n_replicates: int
    n_failed: int
    phi: ErrorSummary
    tau: ErrorSummary


@dataclass
class SimulationReport:
    config: SimulationConfig
    phi_true: np.ndarray
    tau_true: np.ndarray
    regimes: list[RegimeResult]

    @property
    def replicate_count(self) -> int:
        return self.config.n_replicates

    @property
    def failure_count(self) -> int:
        return sum(r.n_failed for r in self.regimes)

    def trend(self, which: str = "phi") -> dict[str, list[float]]:
        keys = ("mean_abs_bias", "mean_mse", "mean_sd")
        rows = [getattr(r, which).means() for r in self.regimes]
        return {k: [row[k] for row in rows] for k in keys}

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "phi_true": self.phi_true.tolist(),
            "tau_true": self.tau_true.tolist(),
            "regimes": [{"n_samples": r.n_samples, "n_replicates": r.n_replicates,
                         "n_failed": r.n_failed, "phi": r.phi.to_dict(),
                         "tau": r.tau.to_dict()} for r in self.regimes],
        }


def run_replicates(config: SimulationConfig, threads: int = 1) -> SimulationReport:
    """Run the study; output is independent of ``threads``."""
    phi = config.generator()
    job = partial(_replicate, config, phi)
    reps = range(config.n_replicates)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, reps, chunksize=max(1, config.n_replicates // (4 * threads))))
    else:
        results = [job(i) for i in reps]
    phi_true = phi[0]
    tau_true = config.random_sd_matrix(1)
    regimes = []
    for k, T in enumerate(config.time_points):
        ok = [res[k] for res in results if res[k] is not None]
        failed = config.n_replicates - len(ok)
        if failed > 0.1 * config.n_replicates:
            raise SimulationError(
                f"{failed} of {config.n_replicates} replicates failed at T={T}")
        phis = np.stack([o[0] for o in ok])
        taus = np.stack([o[1] for o in ok])
        regimes.append(RegimeResult(int(T), len(ok), failed,
                                    ErrorSummary.from_estimates(phis, phi_true),
                                    ErrorSummary.from_estimates(taus, tau_true)))
    return SimulationReport(config, phi_true, tau_true, regimes)
