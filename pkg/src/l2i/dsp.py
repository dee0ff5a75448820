"""Waveform I/O, STFT analysis/synthesis, log-magnitude and log-mel features.

Framing rule (``center=True``): the signal is zero-padded by ``fft_size // 2``
on both sides and frames start every ``hop`` samples, giving

    T = 1 + (n + 2 * (fft_size // 2) - fft_size) // hop

frames (``1 + n // hop`` for even ``fft_size``). Without centering the signal
is zero-padded at the end to at least one full frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, FormatError, IoError, ShapeError

HTK_MEL_FACTOR = 2595.0
HTK_MEL_BREAK = 700.0


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 512
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if not 0 < self.hop <= self.fft_size // 2 or self.fft_size % self.hop:
            raise ConfigError("Hann COLA needs hop = fft_size / k for an integer k >= 2")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if self.center:
            return 1 + (n_samples + 2 * (self.fft_size // 2) - self.fft_size) // self.hop
        return 1 + max(0, math.ceil((n_samples - self.fft_size) / self.hop))

    def bin_frequencies(self, sample_rate: float) -> np.ndarray:
        return np.arange(self.n_bins) * sample_rate / self.fft_size


@dataclass
class ComplexSpectrogram:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError("real and imaginary parts differ in shape")

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexSpectrogram":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    @property
    def shape(self):
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float | None = None  # None means Nyquist
    log_floor: float = 1e-6


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (sums to a constant at hop n/2)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


# -- WAV I/O -----------------------------------------------------------------

def load_wav(path) -> AudioSignal:
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (ValueError, EOFError, KeyError) as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype}")
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise FormatError(f"{path}: {x.shape[1]} channels, expected mono or stereo")
        x = x.mean(axis=1)
    return AudioSignal(x, int(sr))


def save_wav(signal: AudioSignal, path) -> None:
    if not np.all(np.isfinite(signal.samples)):
        raise FormatError("cannot write non-finite samples")
    try:
        wavfile.write(path, int(signal.sample_rate), signal.samples.astype(np.float32))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# -- STFT ----------------------------------------------------------------------

def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n = x.size
    t = cfg.n_frames(n)
    if cfg.center:
        pad = cfg.fft_size // 2
        total = (t - 1) * cfg.hop + cfg.fft_size
        xp = np.zeros(total)
        m = min(n, total - pad)
        xp[pad:pad + m] = x[:m]
    else:
        total = (t - 1) * cfg.hop + cfg.fft_size
        xp = np.zeros(total)
        xp[:n] = x
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(t)[:, None]
    return xp[idx]


def stft(signal: AudioSignal, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Complex STFT of shape ``(fft_size // 2 + 1, T)``."""
    if signal.samples.size < 1:
        raise ShapeError("signal must contain at least one sample")
    frames = _frame(signal.samples, cfg) * hann(cfg.fft_size)
    spec = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram.from_complex(spec)


def istft(spec: ComplexSpectrogram, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Weighted overlap-add inverse normalised by the summed squared window."""
    z = spec.complex()
    if z.shape[0] != cfg.n_bins:
        raise ShapeError(f"expected {cfg.n_bins} bins, got {z.shape[0]}")
    t = z.shape[1]
    win = hann(cfg.fft_size)
    frames = np.fft.irfft(z.T, n=cfg.fft_size, axis=1) * win
    total = (t - 1) * cfg.hop + cfg.fft_size
    y = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(t):
        s = i * cfg.hop
        y[s:s + cfg.fft_size] += frames[i]
        wsum[s:s + cfg.fft_size] += win ** 2
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    start = cfg.fft_size // 2 if cfg.center else 0
    out = y[start:start + out_len]
    if out.size < out_len:
        out = np.concatenate([out, np.zeros(out_len - out.size)])
    return out


def log_magnitude(spec: ComplexSpectrogram) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(X, P)`` with ``X = log(1 + |S|)`` and ``P = angle(S)`` in (-pi, pi]."""
    mag = spec.magnitude()
    phase = np.arctan2(spec.imag, spec.real)
    phase[phase <= -np.pi] += 2.0 * np.pi
    return np.log1p(mag), phase


def magnitude_from_log(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.expm1(x), 0.0)


def inv(x: np.ndarray, phase: np.ndarray, cfg: StftConfig, out_len: int,
        sample_rate: int = 16000) -> AudioSignal:
    """Invert a log-magnitude spectrogram using a given phase."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != phase.shape:
        raise ShapeError(f"log-magnitude {x.shape} and phase {phase.shape} differ")
    mag = magnitude_from_log(x)
    spec = ComplexSpectrogram(mag * np.cos(phase), mag * np.sin(phase))
    return AudioSignal(istft(spec, cfg, out_len), sample_rate)


# -- mel features ----------------------------------------------------------------

def hz_to_mel(f):
    return HTK_MEL_FACTOR * np.log10(1.0 + np.asarray(f, dtype=np.float64) / HTK_MEL_BREAK)


def mel_to_hz(m):
    return HTK_MEL_BREAK * (10.0 ** (np.asarray(m, dtype=np.float64) / HTK_MEL_FACTOR) - 1.0)


def mel_filterbank(cfg: MelConfig, sample_rate: float, stft_cfg: StftConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape ``(n_mels, n_bins)``.

    A filter too narrow to contain any bin gets unit weight on the bin
    nearest its centre, so every row has a positive sum.
    """
    nyq = sample_rate / 2.0
    f_max = nyq if cfg.f_max is None else cfg.f_max
    if f_max > nyq + 1e-9:
        raise ConfigError(f"f_max {f_max} exceeds Nyquist {nyq}")
    if not 0 <= cfg.f_min < f_max:
        raise ConfigError("need 0 <= f_min < f_max")
    if cfg.n_mels > stft_cfg.n_bins:
        raise ConfigError("n_mels exceeds the number of STFT bins")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2))
    freqs = stft_cfg.bin_frequencies(sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    for m in np.flatnonzero(fb.sum(axis=1) <= 0):
        fb[m, np.argmin(np.abs(freqs - edges[m + 1]))] = 1.0
    return fb


def log_mel(spec: ComplexSpectrogram, cfg: MelConfig, sample_rate: float,
            stft_cfg: StftConfig | None = None) -> np.ndarray:
    if stft_cfg is None:
        stft_cfg = StftConfig(fft_size=2 * (spec.shape[0] - 1), hop=(spec.shape[0] - 1))
    fb = mel_filterbank(cfg, sample_rate, stft_cfg)
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(cfg.log_floor + fb @ power)


def band_energy_fraction(signal: AudioSignal, band: tuple[float, float],
                         cfg: StftConfig = StftConfig()) -> float:
    """Fraction of STFT power falling in bins with frequency inside ``band``."""
    power = stft(signal, cfg).magnitude() ** 2
    freqs = cfg.bin_frequencies(signal.sample_rate)
    inside = (freqs >= band[0]) & (freqs <= band[1])
    total = power.sum()
    if total <= 0:
        return 0.0
    return float(power[inside].sum() / total)
