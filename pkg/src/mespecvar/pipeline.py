"""Band preparation and the (band x target channel) fitting work pool."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .data import BandDefinition, StudyDataset, preprocess, standardize
from .exceptions import DataError, MeSpecVarError
from .filtering import DEFAULT_ORDER, decompose_bands
from .mixed import MixedVarFit, OptimizerConfig, build_design, fit_reml

log = logging.getLogger(__name__)


def prepare_bands(dataset: StudyDataset, bands: Sequence[BandDefinition] | None = None,
                  band_label: str = "broadband", outlier_k: float | None = 4.0,
                  clean: bool = True, order: int = DEFAULT_ORDER) -> dict[str, StudyDataset]:
    """Clean every subject, optionally decompose into bands, z-score each band.

    Without ``bands`` the cleaned data is returned under ``band_label``.
    """
    if clean:
        dataset = dataset.map_series(lambda s: preprocess(s, outlier_k))
    if not bands:
        return {band_label: dataset}
    for b in bands:
        b.validate(dataset.sampling_rate_hz)
    per_subject = [decompose_bands(s.series, bands, order) for s in dataset.subjects]
    out = {}
    for b in bands:
        subjects = []
        for s, comps in zip(dataset.subjects, per_subject):
            series = comps[b.name]
            subjects.append(type(s)(s.subject_id, s.group_index,
                                    standardize(series) if clean else series))
        out[b.name] = StudyDataset(tuple(subjects), dataset.channel_names,
                                   dataset.sampling_rate_hz)
    return out


@dataclass
class FitOutcome:
    band: str
    channel: str
    fit: MixedVarFit | None
    error: str | None = None


_WORKER_DATA: dict = {}


def _init_worker(band_data):
    _WORKER_DATA.clear()
    _WORKER_DATA.update(band_data)


def _fit_job(job) -> FitOutcome:
    band, channel, p, config = job
    dataset = _WORKER_DATA[band]
    try:
        design = build_design(dataset, channel, p)
        fit = fit_reml(design, config, band=band)
        return FitOutcome(band, channel, fit)
    except MeSpecVarError as exc:
        return FitOutcome(band, channel, None, f"{type(exc).__name__}: {exc}")


def fit_bands(band_data: dict[str, StudyDataset], p: int = 1,
              config: OptimizerConfig | None = None, threads: int = 1) -> list[FitOutcome]:
    """Fit every (band, target channel) model; output order is fixed."""
    config = config or OptimizerConfig()
    if p < 1:
        raise DataError("lag order must be >= 1")
    for band, ds in band_data.items():
        counts = ds.group_counts()
        if counts[1] == 0 or counts[2] == 0:
            raise DataError(f"band {band}: both groups need at least one subject")
    jobs = [(band, ch, p, config) for band, ds in band_data.items()
            for ch in ds.channel_names]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(band_data,)) as pool:
            return list(pool.map(_fit_job, jobs))
    _init_worker(band_data)
    try:
        return [_fit_job(j) for j in jobs]
    finally:
        _WORKER_DATA.clear()
