"""Signal processing: STFT analysis/synthesis, mel filterbank, log compression,
segment slicing and WAV I/O.

Everything here is a pure function of its arguments. Arrays are float64 unless
stated otherwise.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .errors import DataError

SAMPLE_RATE = 16000
WIN_LENGTH = 640  # 40 ms, one video frame at 25 fps
HOP_LENGTH = 160  # 10 ms, 75% overlap
N_FREQ = WIN_LENGTH // 2 + 1
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5
SEGMENT_FRAMES = 20  # spectrogram columns per 200 ms segment


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(
                f"sample rate {self.sample_rate} Hz is not supported; expected {SAMPLE_RATE} Hz"
            )
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT split into magnitude and phase, both ``(N_FREQ, T)``."""

    magnitude: np.ndarray
    phase: np.ndarray
    hop: int = HOP_LENGTH
    win: int = WIN_LENGTH

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise DataError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} differ"
            )
        if self.magnitude.ndim != 2 or self.magnitude.shape[0] != self.win // 2 + 1:
            raise DataError(
                f"expected {self.win // 2 + 1} frequency rows, got shape {self.magnitude.shape}"
            )
        if np.any(self.magnitude < 0):
            raise DataError("magnitude must be nonnegative")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class MelFilterbank:
    forward: np.ndarray  # (N_MELS, N_FREQ)
    pinv: np.ndarray  # (N_FREQ, N_MELS)
    fmin: float = FMIN
    fmax: float = FMAX

    @property
    def n_mels(self) -> int:
        return self.forward.shape[0]


def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window (COLA at hop = length / 4)."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def n_stft_frames(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return n_samples // hop + 1


def compute_stft(w: Waveform, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> Spectrogram:
    x = w.samples
    if len(x) < win:
        raise DataError(f"signal has {len(x)} samples, shorter than one window ({win})")
    pad = win // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = sliding_window_view(xp, win)[::hop]
    spec = np.fft.rfft(frames * hann_window(win), axis=1).T
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    return Spectrogram(np.abs(spec), phase, hop=hop, win=win)


def invert_stft(s: Spectrogram) -> Waveform:
    """Overlap-add synthesis normalised by the summed squared window.

    The result has ``(T - 1) * hop`` samples, i.e. the centre padding added by
    :func:`compute_stft` is removed.
    """
    win, hop = s.win, s.hop
    n_frames = s.n_frames
    window = hann_window(win)
    frames = np.fft.irfft(s.complex(), n=win, axis=0).T * window
    total = (n_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window**2
    for t in range(n_frames):
        out[t * hop : t * hop + win] += frames[t]
        norm[t * hop : t * hop + win] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    pad = win // 2
    return Waveform(out[pad : total - pad])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def build_mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = WIN_LENGTH,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> MelFilterbank:
    """Triangular filters with unit peaks, centres evenly spaced in mel."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    forward = np.maximum(0.0, np.minimum(rising, falling))
    pinv = np.linalg.pinv(forward)
    forward.setflags(write=False)
    pinv.setflags(write=False)
    return MelFilterbank(forward, pinv, fmin, fmax)


def to_log_mel(s: Spectrogram, fb: MelFilterbank | None = None) -> np.ndarray:
    fb = fb or build_mel_filterbank()
    return np.log(fb.forward @ s.magnitude + LOG_FLOOR)


def from_log_mel(m: np.ndarray, fb: MelFilterbank | None = None) -> np.ndarray:
    fb = fb or build_mel_filterbank()
    mag = fb.pinv @ (np.exp(np.asarray(m, dtype=np.float64)) - LOG_FLOOR)
    return np.maximum(mag, 0.0)


def slice_segments(m: np.ndarray, width: int = SEGMENT_FRAMES) -> list[np.ndarray]:
    """Cut a ``(n_mels, T)`` matrix into consecutive ``width``-column blocks.

    Trailing columns that do not fill a whole block are dropped.
    """
    n = m.shape[1] // width
    if n == 0:
        raise DataError(f"need at least {width} columns to form a segment, got {m.shape[1]}")
    return [m[:, k * width : (k + 1) * width] for k in range(n)]


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample encoding {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), w.sample_rate, pcm)
