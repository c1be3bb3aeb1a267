"""Two-channel spectrogram image encoding of sway traces.

A 12100-sample trace is split into 110 non-overlapping rectangular windows
of 110 samples; each window's discrete Fourier transform (direct matrix
evaluation, all 110 bins retained) fills one image row. Channel 0 holds the
DFT modulus, channel 1 the phase in (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputFormatError

WINDOW = 110
N_WINDOWS = 110
TRACE_LEN = WINDOW * N_WINDOWS
N_CHANNELS = 2

_dft_matrix = None
_idft_matrix = None


def _dft():
    global _dft_matrix, _idft_matrix
    if _dft_matrix is None:
        k = np.arange(WINDOW)
        phase = -2j * np.pi * np.outer(k, k) / WINDOW
        _dft_matrix = np.exp(phase)
        _idft_matrix = np.exp(-phase) / WINDOW
    return _dft_matrix, _idft_matrix


def encode(trace: np.ndarray, pad: bool = False) -> np.ndarray:
    """Spectrogram image (N_WINDOWS, WINDOW, 2) of a sway trace.

    Rows are time windows, columns frequency bins (conjugate-symmetric
    upper half included). Traces shorter than TRACE_LEN are rejected
    unless pad=True, which zero-pads; longer traces are always rejected.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 1:
        raise InputFormatError("trace must be one-dimensional")
    if trace.shape[0] != TRACE_LEN:
        if pad and trace.shape[0] < TRACE_LEN:
            trace = np.concatenate([trace, np.zeros(TRACE_LEN - trace.shape[0])])
        else:
            raise InputFormatError(
                f"trace has {trace.shape[0]} samples; expected {TRACE_LEN}"
            )
    dft, _ = _dft()
    windows = trace.reshape(N_WINDOWS, WINDOW)
    spectra = windows @ dft.T
    modulus = np.abs(spectra)
    phase = np.angle(spectra)
    phase[modulus == 0] = 0.0
    return np.stack([modulus, phase], axis=-1)


def decode(image: np.ndarray) -> np.ndarray:
    """Inverse of encode: per-window inverse DFT, windows concatenated."""
    image = np.asarray(image)
    if image.shape != (N_WINDOWS, WINDOW, N_CHANNELS):
        raise InputFormatError(f"image shape {image.shape} != "
                               f"({N_WINDOWS}, {WINDOW}, {N_CHANNELS})")
    _, idft = _dft()
    spectra = image[:, :, 0] * np.exp(1j * image[:, :, 1])
    windows = (spectra @ idft.T).real
    return windows.reshape(TRACE_LEN)


@dataclass(frozen=True)
class InputStats:
    """Channel-wise normalization statistics for spectrogram images."""

    mean: tuple
    std: tuple
    log_modulus: bool = False

    def to_dict(self):
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "log_modulus": self.log_modulus,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]), bool(d["log_modulus"]))

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0), (1.0, 1.0), False)


def compute_input_stats(images, log_modulus: bool = False) -> InputStats:
    """Channel means/stds over a stack of images (training half only).

    With log_modulus, statistics are taken after log1p on channel 0, and
    input_normalize applies the same transform.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != N_CHANNELS:
        raise InputFormatError("expected images shaped (n, rows, cols, 2)")
    work = images.copy() if log_modulus else images
    if log_modulus:
        work[..., 0] = np.log1p(work[..., 0])
    mean = work.mean(axis=(0, 1, 2))
    std = work.std(axis=(0, 1, 2))
    if np.any(std <= 0):
        raise ConfigError("degenerate image statistics: zero channel std")
    return InputStats(tuple(mean.tolist()), tuple(std.tolist()), log_modulus)


def input_normalize(image: np.ndarray, stats: InputStats) -> np.ndarray:
    """Channel-wise z-scoring with (training) statistics."""
    out = np.array(image, dtype=np.float64, copy=True)
    if stats.log_modulus:
        out[..., 0] = np.log1p(out[..., 0])
    for c in range(N_CHANNELS):
        if stats.std[c] <= 0:
            raise ConfigError("degenerate channel std in input stats")
        out[..., c] = (out[..., c] - stats.mean[c]) / stats.std[c]
    return out


CHANNEL_NAMES = ("modulus", "phase")


def save_image_csv(path_prefix, image) -> list:
    """Export one spectrogram image as a CSV per channel for inspection.

    Writes <prefix>_modulus.csv and <prefix>_phase.csv, rows = time
    windows, columns = frequency bins. Returns the written paths.
    """
    image = np.asarray(image)
    if image.shape != (N_WINDOWS, WINDOW, N_CHANNELS):
        raise InputFormatError(f"image shape {image.shape} != "
                               f"({N_WINDOWS}, {WINDOW}, {N_CHANNELS})")
    paths = []
    for c, name in enumerate(CHANNEL_NAMES):
        path = f"{path_prefix}_{name}.csv"
        np.savetxt(path, image[:, :, c], delimiter=",", fmt="%.9g")
        paths.append(path)
    return paths
