"""Butterworth band-pass design and zero-phase band decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from .data import DEFAULT_BANDS, BandDefinition, MultiChannelSeries
from .exceptions import DataError

DEFAULT_ORDER = 3


@dataclass(frozen=True)
class FilterCoefficients:
    """Digital band-pass filter.

    ``numerator``/``denominator`` hold the transfer-function polynomials in
    powers of z^-1 (``denominator[0] == 1``); ``sos`` is the equivalent
    second-order-section cascade actually used for filtering.
    """

    numerator: np.ndarray
    denominator: np.ndarray
    sos: np.ndarray
    order: int
    band: BandDefinition
    sampling_rate_hz: float

    @property
    def length(self) -> int:
        return max(len(self.numerator), len(self.denominator))

    @property
    def padlen(self) -> int:
        return 3 * (self.length - 1)

    def poles(self) -> np.ndarray:
        return np.roots(self.denominator)

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response H(e^{j w}) at the given frequencies."""
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.sampling_rate_hz
        _, h = signal.sosfreqz(self.sos, worN=w)
        return h


def design_bandpass(order: int, band: BandDefinition,
                    fs_hz: float) -> FilterCoefficients:
    """Butterworth band-pass of analog prototype order ``order``.

    The digital filter has order ``2 * order``; both band edges are
    pre-warped so they sit exactly at -3 dB.
    """
    if int(order) != order or order < 1:
        raise DataError(f"filter order must be a positive integer, got {order}")
    if not fs_hz > 0:
        raise DataError("sampling rate must be positive")
    band.validate(fs_hz)
    sos = signal.butter(int(order), [band.low_hz, band.high_hz], btype="bandpass",
                        fs=fs_hz, output="sos")
    b, a = signal.sos2tf(sos)
    b, a = b / a[0], a / a[0]
    return FilterCoefficients(b, a, sos, int(order), band, float(fs_hz))


def filtfilt(coeffs: FilterCoefficients,
             series: MultiChannelSeries) -> MultiChannelSeries:
    """Forward-backward filtering with odd-reflection edge padding."""
    padlen = coeffs.padlen
    if series.n_samples <= padlen:
        raise DataError(
            f"series of {series.n_samples} samples is too short for edge "
            f"padding of {padlen} samples")
    y = signal.sosfiltfilt(coeffs.sos, series.samples, axis=0,
                           padtype="odd", padlen=padlen)
    return series.with_samples(y)


def decompose_bands(series: MultiChannelSeries,
                    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
                    order: int = DEFAULT_ORDER) -> dict[str, MultiChannelSeries]:
    """Filter ``series`` independently into each band (keys in band order)."""
    names = [b.name for b in bands]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate band names {names}")
    out = {}
    for band in bands:
        coeffs = design_bandpass(order, band, series.sampling_rate_hz)
        out[band.name] = filtfilt(coeffs, series)
    return out
