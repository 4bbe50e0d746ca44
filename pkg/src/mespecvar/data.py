"""Domain types, manifest/CSV ingestion and per-channel preprocessing.

A study is described by a JSON manifest::

    {"sampling_rate_hz": 128,
     "channels": ["Fz", "Cz"],
     "subjects": [{"id": "s01", "group": 1, "csv": "s01.csv"}, ...]}

Each subject CSV has a header row with the channel names (in manifest order)
followed by one comma-separated sample per row.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (ChannelMismatchError, DataError,
                         DegenerateChannelError, ManifestError)

MAD_SCALE = 1.4826
DEFAULT_OUTLIER_K = 4.0


@dataclass(frozen=True)
class MultiChannelSeries:
    """T x R sample matrix with channel names and sampling rate."""

    samples: np.ndarray
    channel_names: tuple[str, ...]
    sampling_rate_hz: float

    def __post_init__(self):
        x = np.array(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataError("samples must be a T x R matrix")
        names = tuple(str(c) for c in self.channel_names)
        if x.shape[0] < 2 or x.shape[1] < 1:
            raise DataError(f"need T >= 2 and R >= 1, got shape {x.shape}")
        if len(names) != x.shape[1]:
            raise DataError(
                f"{len(names)} channel names for {x.shape[1]} columns")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate channel names in {names}")
        if not (np.isfinite(self.sampling_rate_hz) and self.sampling_rate_hz > 0):
            raise DataError("sampling rate must be positive")
        bad = np.argwhere(~np.isfinite(x))
        if bad.size:
            row, col = bad[0]
            raise DataError(
                f"non-finite sample in channel {names[col]!r} at row {row}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "MultiChannelSeries":
        return MultiChannelSeries(samples, self.channel_names, self.sampling_rate_hz)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    group_index: int
    series: MultiChannelSeries

    def __post_init__(self):
        if self.group_index not in (1, 2):
            raise DataError(
                f"subject {self.subject_id!r}: group must be 1 or 2, "
                f"got {self.group_index!r}")


@dataclass(frozen=True)
class StudyDataset:
    subjects: tuple[SubjectRecord, ...]
    channel_names: tuple[str, ...]
    sampling_rate_hz: float

    def __post_init__(self):
        subjects = tuple(self.subjects)
        names = tuple(self.channel_names)
        if not subjects:
            raise DataError("dataset has no subjects")
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids")
        for s in subjects:
            if s.series.channel_names != names:
                raise ChannelMismatchError(
                    f"subject {s.subject_id!r} channels {s.series.channel_names} "
                    f"differ from dataset channels {names}")
            if s.series.sampling_rate_hz != float(self.sampling_rate_hz):
                raise DataError(
                    f"subject {s.subject_id!r} sampling rate differs")
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def group_counts(self) -> dict[int, int]:
        counts = {1: 0, 2: 0}
        for s in self.subjects:
            counts[s.group_index] += 1
        return counts

    def map_series(self, func) -> "StudyDataset":
        """Apply ``func`` to every subject's series, keeping labels."""
        subjects = tuple(SubjectRecord(s.subject_id, s.group_index, func(s.series))
                         for s in self.subjects)
        return StudyDataset(subjects, self.channel_names, self.sampling_rate_hz)


@dataclass(frozen=True)
class BandDefinition:
    name: str
    low_hz: float
    high_hz: float

    def __post_init__(self):
        if not (0 < self.low_hz < self.high_hz):
            raise DataError(
                f"band {self.name!r}: need 0 < low < high, "
                f"got ({self.low_hz}, {self.high_hz})")

    def validate(self, sampling_rate_hz: float) -> None:
        nyquist = sampling_rate_hz / 2.0
        if self.high_hz >= nyquist:
            raise DataError(
                f"band {self.name!r}: upper edge {self.high_hz} Hz is not below "
                f"the Nyquist frequency {nyquist} Hz")

    @property
    def center_hz(self) -> float:
        return float(np.sqrt(self.low_hz * self.high_hz))


DEFAULT_BANDS = (
    BandDefinition("delta", 0.5, 4.0),
    BandDefinition("theta", 4.0, 8.0),
    BandDefinition("alpha", 8.0, 12.0),
    BandDefinition("beta", 12.0, 30.0),
    BandDefinition("gamma", 30.0, 50.0),
)


def default_band(name: str) -> BandDefinition:
    for b in DEFAULT_BANDS:
        if b.name == name:
            return b
    raise DataError(
        f"unknown band {name!r}; known: {[b.name for b in DEFAULT_BANDS]}")


# ---------------------------------------------------------------- ingestion

def _require(cond, msg):
    if not cond:
        raise ManifestError(msg)


def read_subject_csv(path, channel_names: Sequence[str], subject_id: str = "?",
                     sampling_rate_hz: float = 1.0) -> MultiChannelSeries:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"subject {subject_id!r}: CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"subject {subject_id!r}: empty CSV {path}") from None
        if header != list(channel_names):
            missing = [c for c in channel_names if c not in header]
            raise ChannelMismatchError(
                f"subject {subject_id!r}: CSV header {header} does not match "
                f"manifest channels {list(channel_names)}"
                + (f" (missing {missing})" if missing else ""))
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"subject {subject_id!r}: {path}:{lineno} has {len(row)} "
                    f"fields, expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(
                    f"subject {subject_id!r}: {path}:{lineno}: {exc}") from None
    x = np.array(rows, dtype=float).reshape(-1, len(header))
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        r, c = bad[0]
        raise DataError(
            f"subject {subject_id!r}: non-finite value in channel "
            f"{header[c]!r} at data row {r + 1}")
    return MultiChannelSeries(x, tuple(header), sampling_rate_hz)


def format_float(x: float) -> str:
    """Shortest round-trip decimal representation."""
    return repr(float(x))


def write_series_csv(path, series: MultiChannelSeries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(series.channel_names)]
    for row in series.samples:
        lines.append(",".join(format_float(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def parse_manifest(doc: dict) -> dict:
    _require(isinstance(doc, dict), "manifest must be a JSON object")
    for key in ("sampling_rate_hz", "channels", "subjects"):
        _require(key in doc, f"manifest missing required key {key!r}")
    fs = doc["sampling_rate_hz"]
    _require(isinstance(fs, (int, float)) and not isinstance(fs, bool) and fs > 0,
             "sampling_rate_hz must be a positive number")
    channels = doc["channels"]
    _require(isinstance(channels, list) and channels
             and all(isinstance(c, str) for c in channels),
             "channels must be a non-empty list of strings")
    _require(len(set(channels)) == len(channels), "channel names must be unique")
    subjects = doc["subjects"]
    _require(isinstance(subjects, list) and subjects,
             "subjects must be a non-empty list")
    for i, s in enumerate(subjects):
        _require(isinstance(s, dict), f"subjects[{i}] must be an object")
        for key in ("id", "group", "csv"):
            _require(key in s, f"subjects[{i}] missing key {key!r}")
        _require(isinstance(s["id"], str), f"subjects[{i}].id must be a string")
        _require(s["group"] in (1, 2) and not isinstance(s["group"], bool),
                 f"subjects[{i}].group must be 1 or 2")
        _require(isinstance(s["csv"], str), f"subjects[{i}].csv must be a path string")
    if "band" in doc:
        _require(isinstance(doc["band"], str), "band must be a string")
    return doc


def load_manifest(path) -> StudyDataset:
    """Load and validate a manifest and every subject CSV it references."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    parse_manifest(doc)
    base = path.parent
    channels = tuple(doc["channels"])
    fs = float(doc["sampling_rate_hz"])
    subjects = []
    for s in doc["subjects"]:
        series = read_subject_csv(base / s["csv"], channels, s["id"], fs)
        subjects.append(SubjectRecord(s["id"], int(s["group"]), series))
    return StudyDataset(tuple(subjects), channels, fs)


def manifest_band(path) -> str | None:
    """Band label recorded in a derived (filtered) manifest, if any."""
    doc = json.loads(Path(path).read_text())
    return doc.get("band")


def save_manifest(dataset: StudyDataset, path, csv_dir: str | None = None,
                  band: str | None = None,
                  csv_names: Iterable[str] | None = None) -> Path:
    """Write ``dataset`` as a manifest plus one CSV per subject.

    CSV paths are stored relative to the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    names = list(csv_names) if csv_names is not None else None
    entries = []
    for i, s in enumerate(dataset.subjects):
        if names is not None:
            rel = names[i]
        else:
            rel = os.path.join(csv_dir, f"{s.subject_id}.csv") if csv_dir else f"{s.subject_id}.csv"
        write_series_csv(base / rel, s.series)
        entries.append({"id": s.subject_id, "group": s.group_index, "csv": rel})
    doc = {"sampling_rate_hz": dataset.sampling_rate_hz,
           "channels": list(dataset.channel_names),
           "subjects": entries}
    if band is not None:
        doc["band"] = band
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------ preprocessing

def standardize(series: MultiChannelSeries) -> MultiChannelSeries:
    """Z-score every channel (sample SD with denominator T - 1)."""
    x = series.samples
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    for j, s in enumerate(sd):
        if not s > 0:
            raise DegenerateChannelError(series.channel_names[j])
    z = (x - mean) / sd
    # second pass removes the O(eps) residual mean/scale left by the first
    z = (z - z.mean(axis=0)) / z.std(axis=0, ddof=1)
    return series.with_samples(z)


def replace_outliers(series: MultiChannelSeries,
                     k: float = DEFAULT_OUTLIER_K) -> MultiChannelSeries:
    """Clip samples further than ``k`` scaled MADs from the channel median."""
    if not k > 0:
        raise ValueError("k must be positive")
    x = series.samples
    med = np.median(x, axis=0)
    mad = np.median(np.abs(x - med), axis=0)
    for j, m in enumerate(mad):
        if not m > 0:
            raise DegenerateChannelError(series.channel_names[j],
                                         "median absolute deviation is zero")
    half = k * MAD_SCALE * mad
    lo, hi = med - half, med + half
    out = np.where(x > hi, hi, np.where(x < lo, lo, x))
    return series.with_samples(out)


def preprocess(series: MultiChannelSeries,
               outlier_k: float | None = DEFAULT_OUTLIER_K) -> MultiChannelSeries:
    """Outlier clipping (if ``outlier_k``) followed by z-scoring."""
    if outlier_k is not None:
        series = replace_outliers(series, outlier_k)
    return standardize(series)
