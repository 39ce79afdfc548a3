"""Segment-wise enhancement of a (frames, noisy waveform) pair."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import data, dsp
from .dsp import Spectrogram, Waveform
from .errors import DataError, WeightsError

log = logging.getLogger(__name__)


@dataclass
class Enhanced:
    waveform: Waveform
    log_mel: np.ndarray  # (80, 20K)
    n_segments: int
    dropped_seconds: float


def prepare_inputs(net, frames, noisy: Waveform):
    """Cut inputs into network-ready batches.

    Returns ``(video, audio, spectrogram, K)`` where ``video`` is None for an
    audio-only network.
    """
    k = data.segment_count(len(frames), len(noisy))
    if k == 0:
        raise DataError(
            f"input too short: {len(frames)} frames and {len(noisy)} samples; "
            f"need >= {data.FRAMES_PER_SEGMENT} frames and >= {data.SAMPLES_PER_SEGMENT} samples"
        )
    spec = dsp.compute_stft(noisy)
    mel = dsp.to_log_mel(spec)[:, : k * dsp.SEGMENT_FRAMES]
    audio = mel.reshape(dsp.N_MELS, k, dsp.SEGMENT_FRAMES).transpose(1, 0, 2)
    video = None
    if net is not None and net.cfg.audio_visual:
        if net.video_mean is None:
            raise WeightsError("weights carry no video normalisation statistics")
        frames = np.asarray(frames)
        if frames.shape[1:] != (128, 128):
            raise DataError(f"frames must be 128x128, got {frames.shape[1:]}")
        stats = data.NormalizationStats(net.video_mean, net.video_std)
        clip = frames[: k * data.FRAMES_PER_SEGMENT]
        video = data.normalize_video(clip, stats).reshape(k, data.FRAMES_PER_SEGMENT, 128, 128)
    return video, audio, spec, k


def reconstruct(log_mel, phase) -> Waveform:
    """Pseudo-inverse mel magnitudes combined with the given phase."""
    mag = dsp.from_log_mel(log_mel)
    return dsp.invert_stft(Spectrogram(mag, phase[:, : mag.shape[1]]))


def enhance(net, frames, noisy: Waveform, batch_size: int = 16) -> Enhanced:
    """Enhance ``noisy`` one 200 ms segment at a time and resynthesise.

    The output spans ``20K - 1`` STFT hops, ``K`` being the number of whole
    segments covered by both streams; anything beyond is dropped and reported.
    """
    video, audio, spec, k = prepare_inputs(net, frames, noisy)
    out = np.empty_like(audio, dtype=np.float64)
    for s in range(0, k, batch_size):
        v = video[s : s + batch_size] if video is not None else None
        out[s : s + batch_size] = net.forward(v, audio[s : s + batch_size], train=False)
    if not np.isfinite(out).all():
        raise DataError("network produced non-finite output")
    log_mel = out.transpose(1, 0, 2).reshape(dsp.N_MELS, k * dsp.SEGMENT_FRAMES)
    wav = reconstruct(log_mel, spec.phase)
    dropped = (len(noisy) - k * data.SAMPLES_PER_SEGMENT) / dsp.SAMPLE_RATE
    if dropped > 0:
        log.info("enhanced %d segments; %.3f s of trailing input dropped", k, dropped)
    return Enhanced(wav, log_mel, k, dropped)


def passthrough(noisy: Waveform) -> Waveform:
    """The pipeline with the network replaced by the identity."""
    _, audio, spec, k = prepare_inputs(None, np.zeros((len(noisy) // data.SAMPLES_PER_FRAME, 1, 1)), noisy)
    log_mel = audio.transpose(1, 0, 2).reshape(dsp.N_MELS, k * dsp.SEGMENT_FRAMES)
    return reconstruct(log_mel, spec.phase)
