"""Synthetic audio-visual corpus for tests and desk-scale experiments.

Each speaker has a fundamental frequency and a small inventory of vowels,
each vowel being a set of formant peaks below 2 kHz. An utterance is a
sequence of syllables aligned to 40 ms video frames. The waveform is a
harmonic series shaped by the current vowel's envelope, and each video frame
renders that envelope as horizontal stripes: stripe ``g`` is as bright as the
envelope at ``(g + 0.5) * 125`` Hz. The picture therefore determines the
target's spectral envelope, while the audio alone cannot tell two utterances
of the same speaker apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, dsp
from .dsp import Waveform

FRAME_SIZE = 128
N_STRIPES = 16
STRIPE_HZ = 125.0
MAX_HARMONIC_HZ = 2000.0
FORMANT_BW = 90.0


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    f0: float
    vowels: tuple  # tuple of formant-frequency tuples

    def envelope(self, vowel: int, freqs) -> np.ndarray:
        freqs = np.asarray(freqs, dtype=np.float64)
        peaks = np.asarray(self.vowels[vowel])[:, None]
        return np.exp(-0.5 * ((freqs[None, :] - peaks) / FORMANT_BW) ** 2).sum(axis=0)


@dataclass
class Utterance:
    speaker: Speaker
    vowels: np.ndarray  # (F,) int, -1 for silence
    amplitude: np.ndarray  # (F,) in [0, 1]
    waveform: Waveform
    frames: np.ndarray  # (F, 128, 128) uint8


def make_speakers(n: int, rng, n_vowels: int = 4, f0_range=(95.0, 250.0)) -> list[Speaker]:
    """Speakers with well separated pitch and random vowel formants."""
    lo, hi = f0_range
    f0s = np.geomspace(lo, hi, n) * rng.uniform(0.97, 1.03, n)
    out = []
    for i, f0 in enumerate(f0s):
        vowels = []
        for _ in range(n_vowels):
            f1 = rng.uniform(280, 800)
            f2 = rng.uniform(max(f1 + 350, 900), 1850)
            vowels.append((round(f1, 1), round(f2, 1)))
        out.append(Speaker(f"spk{i:02d}", round(float(f0), 2), tuple(vowels)))
    return out


def syllable_track(n_frames: int, n_vowels: int, rng):
    """Per-frame vowel ids (-1 = silence) and amplitudes."""
    vowels = np.full(n_frames, -1)
    amp = np.zeros(n_frames)
    f = 0
    while f < n_frames:
        length = int(rng.integers(2, 5))
        if rng.random() >= 0.2:
            vowels[f : f + length] = rng.integers(n_vowels)
            amp[f : f + length] = rng.uniform(0.4, 1.0)
        f += length
    return vowels, amp


def _per_sample(track, n_samples):
    """Frame-rate track to sample rate, with 10 ms linear crossfades."""
    hold = np.repeat(track, data.SAMPLES_PER_FRAME)[:n_samples]
    ramp = np.hanning(2 * dsp.HOP_LENGTH + 1)
    ramp /= ramp.sum()
    return np.convolve(np.pad(hold, dsp.HOP_LENGTH, mode="edge"), ramp, mode="valid")


def synthesize(speaker: Speaker, vowels, amplitude, rng) -> Waveform:
    """Harmonic speech-like waveform following the syllable track."""
    n = len(vowels) * data.SAMPLES_PER_FRAME
    t = np.arange(n) / dsp.SAMPLE_RATE
    vibrato = 1 + 0.015 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi))
    phase0 = np.cumsum(2 * np.pi * speaker.f0 * vibrato / dsp.SAMPLE_RATE)
    harmonics = np.arange(1, int(MAX_HARMONIC_HZ // (speaker.f0 * 1.02)) + 1)
    offsets = rng.uniform(0, 2 * np.pi, len(harmonics))
    carriers = np.sin(harmonics[:, None] * phase0[None, :] + offsets[:, None])
    amp = _per_sample(amplitude, n)
    out = np.zeros(n)
    for v in range(len(speaker.vowels)):
        gate = _per_sample((vowels == v).astype(float), n)
        if not gate.any():
            continue
        weights = speaker.envelope(v, harmonics * speaker.f0)
        out += gate * (weights @ carriers)
    out *= amp
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return Waveform(out)


def render_frames(speaker: Speaker, vowels, amplitude, rng, noise: float = 2.0) -> np.ndarray:
    """One 128x128 frame per syllable-track entry, envelope drawn as stripes."""
    freqs = (np.arange(N_STRIPES) + 0.5) * STRIPE_HZ
    peak = max(speaker.envelope(v, freqs).max() for v in range(len(speaker.vowels)))
    rows = FRAME_SIZE // N_STRIPES
    frames = np.empty((len(vowels), FRAME_SIZE, FRAME_SIZE))
    for f, (v, a) in enumerate(zip(vowels, amplitude)):
        level = a * speaker.envelope(v, freqs) / peak if v >= 0 else np.zeros(N_STRIPES)
        frames[f] = np.repeat(40.0 + 190.0 * level, rows)[:, None]
    frames += rng.normal(0.0, noise, frames.shape)
    return np.clip(np.round(frames), 0, 255).astype(np.uint8)


def make_utterance(speaker: Speaker, n_frames: int, rng) -> Utterance:
    vowels, amp = syllable_track(n_frames, len(speaker.vowels), rng)
    if not (vowels >= 0).any():
        vowels[: min(3, n_frames)] = 0
        amp[: min(3, n_frames)] = 0.8
    wav = synthesize(speaker, vowels, amp, rng)
    return Utterance(speaker, vowels, amp, wav, render_frames(speaker, vowels, amp, rng))


def ambient_noise(n_samples: int, rng) -> Waveform:
    """Hum, band-limited hiss and sporadic clicks."""
    t = np.arange(n_samples) / dsp.SAMPLE_RATE
    hum_f = rng.uniform(50, 120)
    hum = sum(np.sin(2 * np.pi * k * hum_f * t + rng.uniform(0, 6.3)) / k for k in range(1, 6))
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, 1 / dsp.SAMPLE_RATE)
    centre = rng.uniform(300, 3000)
    spec *= np.exp(-0.5 * ((freqs - centre) / rng.uniform(200, 1200)) ** 2)
    hiss = np.fft.irfft(spec, n_samples)
    hiss /= np.std(hiss) + 1e-12
    clicks = np.zeros(n_samples)
    where = rng.integers(0, n_samples, max(1, n_samples // 4000))
    clicks[where] = rng.choice([-1.0, 1.0], len(where)) * 3
    clicks = np.convolve(clicks, np.exp(-np.arange(200) / 30.0), mode="same")
    out = 0.4 * hum / 2 + 0.4 * hiss + 0.2 * clicks
    return Waveform(0.3 * out / np.max(np.abs(out)))


def write_corpus(
    out_dir,
    speakers,
    clips_per_speaker: int,
    n_frames: int,
    seed: int = 0,
    manifest_name: str = "manifest.json",
) -> Path:
    """Write WAV and LVF1 files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for spk in speakers:
        for c in range(clips_per_speaker):
            utt = make_utterance(spk, n_frames, rng)
            clip_id = f"{spk.speaker_id}_{c:03d}"
            wav, frames = out_dir / f"{clip_id}.wav", out_dir / f"{clip_id}.lvf"
            dsp.write_wav(wav, utt.waveform)
            data.write_frames(frames, utt.frames)
            entries.append(data.ClipEntry(spk.speaker_id, clip_id, wav, frames, n_frames))
    path = out_dir / manifest_name
    data.write_manifest(path, entries)
    return path


def write_noise_dir(out_dir, interferers, n_speech: int, n_ambient: int, n_frames: int, seed: int = 0) -> Path:
    """Noise directory with ``speech_other/`` and ``ambient/`` WAV files."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    (out_dir / "speech_other").mkdir(parents=True, exist_ok=True)
    (out_dir / "ambient").mkdir(parents=True, exist_ok=True)
    for i in range(n_speech):
        spk = interferers[i % len(interferers)]
        dsp.write_wav(out_dir / "speech_other" / f"{i:03d}.wav", make_utterance(spk, n_frames, rng).waveform)
    for i in range(n_ambient):
        n = n_frames * data.SAMPLES_PER_FRAME
        dsp.write_wav(out_dir / "ambient" / f"{i:03d}.wav", ambient_noise(n, rng))
    return out_dir


def random_samples(n: int, rng, dtype=np.float32):
    """Unstructured (video, noisy, clean) arrays shaped like network batches."""
    video = rng.standard_normal((n, 5, 128, 128)).astype(dtype)
    noisy = rng.normal(-2.0, 1.5, (n, 80, 20)).astype(dtype)
    clean = rng.normal(-2.0, 1.5, (n, 80, 20)).astype(dtype)
    return video, noisy, clean


def toy_samples(n: int, seed: int = 0):
    """``n`` aligned training segments built in memory (no files).

    Each segment comes from its own one-segment utterance mixed at 0 dB with
    ambient noise; video is normalised with statistics of these frames.
    """
    rng = np.random.default_rng(seed)
    speakers = make_speakers(max(2, min(n, 4)), rng)
    mixes = []
    for i in range(n):
        utt = make_utterance(speakers[i % len(speakers)], data.FRAMES_PER_SEGMENT, rng)
        noise = ambient_noise(len(utt.waveform), rng)
        mixes.append((utt.frames, utt.waveform, data.mix_at_snr(utt.waveform, noise, 0.0)))
    stats = data.video_norm_from_frames(m[0] for m in mixes)
    samples = []
    for i, (frames, clean, noisy) in enumerate(mixes):
        samples += data.align_segments(frames, clean, noisy, "ambient", stats, f"toy{i}")
    return data.SampleSet.from_samples(samples), stats
