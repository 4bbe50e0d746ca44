import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mespecvar.data import MultiChannelSeries, StudyDataset, SubjectRecord  # noqa: E402


def make_series(x, fs=128.0, names=None):
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    names = names or tuple(f"ch{j + 1}" for j in range(x.shape[1]))
    return MultiChannelSeries(x, tuple(names), fs)


def make_dataset(arrays, groups, fs=128.0, names=None):
    subjects = tuple(SubjectRecord(f"s{i + 1:03d}", g, make_series(a, fs, names))
                     for i, (a, g) in enumerate(zip(arrays, groups)))
    return StudyDataset(subjects, subjects[0].series.channel_names, fs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def two_group_arrays(rng, phi1, phi2, n_per_group, t, tau=0.0, burn=300):
    """Series for two groups with group matrices ``phi1``/``phi2`` (lists of lags)."""
    from oracles import simulate_var

    arrays, groups = [], []
    for g, phi in ((1, phi1), (2, phi2)):
        for _ in range(n_per_group):
            coefs = [m + tau * rng.standard_normal(m.shape) for m in phi]
            arrays.append(simulate_var(coefs, t, rng, burn=burn))
            groups.append(g)
    return arrays, groups


def fit_all_targets(arrays, groups, p=1, band="test", config=None):
    from mespecvar.mixed import design_from_arrays, fit_reml

    r = arrays[0].shape[1]
    return [fit_reml(design_from_arrays(arrays, groups, j, p), config, band=band)
            for j in range(r)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
