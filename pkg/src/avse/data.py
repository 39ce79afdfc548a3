"""Training data synthesis: SNR-controlled mixing, same-speaker ("self")
mixtures, video normalisation and alignment of 5-frame video segments with
20-column spectrogram segments.

At 25 fps and 16 kHz one video frame spans 640 samples, i.e. four STFT hops,
so segment ``k`` covers frames ``[5k, 5k + 5)``, spectrogram columns
``[20k, 20k + 20)`` and samples ``[3200k, 3200k + 3200)``.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import Waveform
from .errors import DataError
from .serialize import ArchiveError, read_archive, write_archive

log = logging.getLogger(__name__)

FPS = 25
SAMPLES_PER_FRAME = dsp.SAMPLE_RATE // FPS  # 640
FRAMES_PER_SEGMENT = 5
SAMPLES_PER_SEGMENT = SAMPLES_PER_FRAME * FRAMES_PER_SEGMENT  # 3200
STD_FLOOR = 1e-6

NOISE_KINDS = ("speech_other", "ambient", "speech_self")
FRAMES_MAGIC = b"LVF1"
DATASET_MAGIC = b"AVSD"


@dataclass(frozen=True)
class ClipEntry:
    speaker_id: str
    clip_id: str
    wav: Path
    frames: Path
    frame_count: int


@dataclass(frozen=True)
class NormalizationStats:
    mean_frame: np.ndarray  # (128, 128)
    std: float

    def __post_init__(self):
        if not np.isfinite(self.std) or self.std < STD_FLOOR:
            raise DataError(
                f"video standard deviation {self.std:.3g} is degenerate (< {STD_FLOOR}); "
                "are all training frames identical?"
            )


@dataclass
class MixtureSample:
    video: np.ndarray  # (5, 128, 128) float32, normalised
    noisy: np.ndarray  # (80, 20) log-mel
    clean_target: np.ndarray  # (80, 20) log-mel
    noisy_phase: np.ndarray  # (321, 20)
    noise_kind: str
    clip_id: str = ""
    segment: int = 0


@dataclass
class Mixture:
    """A whole clip mixed with noise, before segmentation."""

    clip: ClipEntry
    frames: np.ndarray  # (F, H, W) uint8
    clean: Waveform
    noisy: Waveform
    noise_kind: str
    noise_source: str = ""
    meta: dict = field(default_factory=dict)


# -- file formats -----------------------------------------------------------


def load_manifest(path) -> list[ClipEntry]:
    """Read a JSON list of ``{speaker_id, clip_id, wav, frames, frame_count}``.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    entries = []
    seen = set()
    for i, item in enumerate(raw):
        try:
            entry = ClipEntry(
                speaker_id=str(item["speaker_id"]),
                clip_id=str(item["clip_id"]),
                wav=(path.parent / item["wav"]).resolve(),
                frames=(path.parent / item["frames"]).resolve(),
                frame_count=int(item["frame_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: entry {i} is malformed ({exc!r})") from exc
        if entry.clip_id in seen:
            raise DataError(f"{path}: duplicate clip_id {entry.clip_id!r}")
        seen.add(entry.clip_id)
        entries.append(entry)
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    rows = []
    for e in entries:
        rows.append(
            {
                "speaker_id": e.speaker_id,
                "clip_id": e.clip_id,
                "wav": _relative(e.wav, path.parent),
                "frames": _relative(e.frames, path.parent),
                "frame_count": e.frame_count,
            }
        )
    path.write_text(json.dumps(rows, indent=1) + "\n")


def _relative(p, base):
    try:
        return str(Path(p).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(p)


def write_frames(path, frames) -> None:
    """Write ``(F, H, W)`` uint8 frames in the LVF1 format."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 3:
        raise ValueError("frames must be a (F, H, W) uint8 array")
    header = FRAMES_MAGIC + struct.pack("<III", *frames.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(frames).tobytes())


def read_frames(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: frames file not found") from None
    if len(data) < 16 or data[:4] != FRAMES_MAGIC:
        raise DataError(f"{path}: not an LVF1 frames file")
    count, height, width = struct.unpack("<III", data[4:16])
    expected = count * height * width
    if len(data) - 16 != expected:
        raise DataError(f"{path}: expected {expected} pixel bytes, found {len(data) - 16}")
    return np.frombuffer(data, np.uint8, offset=16).reshape(count, height, width).copy()


def load_clip(entry: ClipEntry):
    """Return ``(frames, waveform)`` for a manifest entry, validated."""
    frames = read_frames(entry.frames)
    if frames.shape[0] != entry.frame_count:
        raise DataError(
            f"{entry.frames}: {frames.shape[0]} frames, manifest says {entry.frame_count}"
        )
    if frames.shape[1:] != (128, 128):
        raise DataError(f"{entry.frames}: frames must be 128x128, got {frames.shape[1:]}")
    try:
        wav = dsp.read_wav(entry.wav)
    except FileNotFoundError:
        raise DataError(f"{entry.wav}: audio file not found") from None
    if len(wav) < entry.frame_count * SAMPLES_PER_FRAME:
        log.warning(
            "%s: audio covers %.3f s but video has %d frames; trailing frames are unused",
            entry.clip_id,
            wav.duration,
            entry.frame_count,
        )
    return frames, wav


# -- mixing -----------------------------------------------------------------


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def noise_gain(speech, noise, snr_db) -> float:
    """Scale for ``noise`` so that ``speech`` over the scaled noise has ``snr_db``."""
    p_noise = power(noise)
    if p_noise <= 0:
        raise DataError("noise is silent; cannot mix at a finite SNR")
    return float(np.sqrt(power(speech) / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float, rng=None) -> Waveform:
    """``speech + gain * noise`` with the gain chosen for the requested SNR.

    Longer noise is cropped to the speech length at a uniformly random offset
    (offset 0 when ``rng`` is None).
    """
    n = len(speech)
    if len(noise) < n:
        raise DataError(f"noise has {len(noise)} samples, speech needs {n}")
    offset = 0
    if len(noise) > n and rng is not None:
        offset = int(rng.integers(0, len(noise) - n + 1))
    segment = noise.samples[offset : offset + n]
    gain = noise_gain(speech.samples, segment, snr_db)
    return Waveform(speech.samples + gain * segment)


def cover(noise: Waveform, n: int) -> Waveform:
    """Loop ``noise`` until it has at least ``n`` samples."""
    if len(noise) >= n:
        return noise
    return Waveform(np.resize(noise.samples, n))


def make_self_mixture(clips, rng, snr_db=0.0):
    """Mix one utterance of a speaker with another utterance of the same speaker.

    ``clips`` are that speaker's waveforms. Returns ``(clean, noisy, (i, j))``
    where clip ``i`` is the target and ``j != i`` the interference.
    """
    n = len(clips)
    if n < 2:
        raise DataError("self mixtures need at least two clips of the speaker")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    j += j >= i
    clean = clips[i]
    noisy = mix_at_snr(clean, cover(clips[j], len(clean)), snr_db, rng)
    return clean, noisy, (i, j)


# -- video normalisation ----------------------------------------------------


def video_norm_from_frames(frame_arrays) -> NormalizationStats:
    """Mean frame and scalar std of the mean-centred pixels over all frames."""
    frame_arrays = list(frame_arrays)
    total = sum(f.shape[0] for f in frame_arrays)
    if total == 0:
        raise DataError("no frames to compute normalisation statistics from")
    mean = sum(f.astype(np.float64).sum(axis=0) for f in frame_arrays) / total
    sq = sum(((f.astype(np.float64) - mean) ** 2).sum() for f in frame_arrays)
    std = float(np.sqrt(sq / (total * mean.size)))
    return NormalizationStats(mean, std)


def compute_video_norm(manifest) -> NormalizationStats:
    """Statistics over every frame of a (training) manifest."""
    return video_norm_from_frames(read_frames(e.frames) for e in manifest)


def normalize_video(seg, stats: NormalizationStats) -> np.ndarray:
    return ((np.asarray(seg, dtype=np.float64) - stats.mean_frame) / stats.std).astype(np.float32)


# -- alignment --------------------------------------------------------------


def segment_count(n_frames: int, n_samples: int) -> int:
    n_cols = dsp.n_stft_frames(n_samples) if n_samples >= dsp.WIN_LENGTH else 0
    return min(n_frames // FRAMES_PER_SEGMENT, n_cols // dsp.SEGMENT_FRAMES)


def align_segments(
    frames,
    clean: Waveform,
    noisy: Waveform,
    noise_kind: str = "ambient",
    stats: NormalizationStats | None = None,
    clip_id: str = "",
    fb=None,
) -> list[MixtureSample]:
    """Cut a mixed clip into aligned (video, noisy, clean, phase) segments."""
    if len(clean) != len(noisy):
        raise DataError("clean and noisy waveforms differ in length")
    k = segment_count(len(frames), len(noisy))
    if k == 0:
        raise DataError(f"clip {clip_id!r} is too short for a single 200 ms segment")
    fb = fb or dsp.build_mel_filterbank()
    noisy_spec = dsp.compute_stft(noisy)
    noisy_mel = dsp.to_log_mel(noisy_spec, fb)
    clean_mel = dsp.to_log_mel(dsp.compute_stft(clean), fb)
    width = dsp.SEGMENT_FRAMES
    out = []
    for s in range(k):
        cols = slice(s * width, (s + 1) * width)
        video = frames[s * FRAMES_PER_SEGMENT : (s + 1) * FRAMES_PER_SEGMENT]
        video = normalize_video(video, stats) if stats else np.asarray(video, np.float32)
        out.append(
            MixtureSample(
                video=video,
                noisy=noisy_mel[:, cols].astype(np.float32),
                clean_target=clean_mel[:, cols].astype(np.float32),
                noisy_phase=noisy_spec.phase[:, cols].astype(np.float32),
                noise_kind=noise_kind,
                clip_id=clip_id,
                segment=s,
            )
        )
    return out


# -- dataset construction ---------------------------------------------------


def _speakers(manifest):
    groups = defaultdict(list)
    for idx, e in enumerate(manifest):
        groups[e.speaker_id].append(idx)
    return groups


def build_mixtures(
    manifest,
    noise_sources=None,
    self_fraction=1 / 3,
    snr_db=0.0,
    seed=0,
) -> list[Mixture]:
    """Mix every clip of ``manifest`` with one noise draw.

    ``noise_sources`` maps ``"speech_other"`` and ``"ambient"`` to lists of
    waveforms. When no other-speaker speech is supplied, clips of the other
    speakers in the manifest are used instead. Each clip has its own random
    stream split from ``seed``, so the result does not depend on processing
    order.
    """
    manifest = list(manifest)
    if not manifest:
        raise DataError("manifest is empty")
    if not 0 <= self_fraction <= 1:
        raise DataError(f"self_fraction must be within [0, 1], got {self_fraction}")
    speakers = _speakers(manifest)
    if self_fraction > 0:
        lonely = sorted(s for s, idx in speakers.items() if len(idx) < 2)
        if lonely:
            raise DataError(f"self mixtures need >= 2 clips per speaker; {lonely} have one")

    clips = [load_clip(e) for e in manifest]
    noise_sources = dict(noise_sources or {})
    pools = {
        "speech_other": [(f"speech_other:{i}", w) for i, w in enumerate(noise_sources.get("speech_other", []))],
        "ambient": [(f"ambient:{i}", w) for i, w in enumerate(noise_sources.get("ambient", []))],
    }
    use_manifest_speech = not pools["speech_other"]
    available = [
        k
        for k in ("speech_other", "ambient")
        if pools[k] or (k == "speech_other" and use_manifest_speech and len(speakers) > 1)
    ]
    if self_fraction < 1 and not available:
        raise DataError("no noise sources available for non-self mixtures")

    streams = np.random.SeedSequence(seed).spawn(len(manifest))
    mixtures = []
    for idx, (entry, (frames, clean)) in enumerate(zip(manifest, clips)):
        rng = np.random.default_rng(streams[idx])
        if rng.random() < self_fraction:
            kind = "speech_self"
            others = [j for j in speakers[entry.speaker_id] if j != idx]
            j = others[int(rng.integers(len(others)))]
            source, noise = manifest[j].clip_id, clips[j][1]
        else:
            kind = available[int(rng.integers(len(available)))]
            if kind == "speech_other" and use_manifest_speech:
                others = [j for j, e in enumerate(manifest) if e.speaker_id != entry.speaker_id]
                j = others[int(rng.integers(len(others)))]
                source, noise = manifest[j].clip_id, clips[j][1]
            else:
                source, noise = pools[kind][int(rng.integers(len(pools[kind])))]
        noisy = mix_at_snr(clean, cover(noise, len(clean)), snr_db, rng)
        mixtures.append(Mixture(entry, frames, clean, noisy, kind, source))
    return mixtures


def split_clips(entries, val_fraction, seed):
    """Deterministic clip-level train/validation split of manifest indices.

    A positive fraction that rounds to zero still holds out one clip when
    there are at least three.
    """
    n = len(entries)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n_val == 0 and n >= 3:
        n_val = 1
    order = np.random.default_rng([seed, 1]).permutation(n)
    val = set(order[:n_val].tolist())
    return [i for i in range(n) if i not in val], sorted(val)


def build_dataset(
    manifest,
    noise_sources=None,
    self_fraction=1 / 3,
    snr_db=0.0,
    seed=0,
    stats: NormalizationStats | None = None,
) -> list[MixtureSample]:
    mixtures = build_mixtures(manifest, noise_sources, self_fraction, snr_db, seed)
    return samples_from_mixtures(mixtures, stats)


def samples_from_mixtures(mixtures, stats=None) -> list[MixtureSample]:
    fb = dsp.build_mel_filterbank()
    samples = []
    for m in mixtures:
        samples += align_segments(
            m.frames, m.clean, m.noisy, m.noise_kind, stats, m.clip.clip_id, fb
        )
    return samples


# -- stacked storage --------------------------------------------------------


@dataclass
class SampleSet:
    """Column-wise stack of :class:`MixtureSample` for batched training."""

    video: np.ndarray  # (N, 5, 128, 128)
    noisy: np.ndarray  # (N, 80, 20)
    clean: np.ndarray  # (N, 80, 20)
    phase: np.ndarray  # (N, 321, 20)
    kinds: list
    clip_ids: list
    segments: list

    def __len__(self):
        return len(self.noisy)

    @classmethod
    def from_samples(cls, samples) -> "SampleSet":
        if not samples:
            raise DataError("no samples")
        return cls(
            video=np.stack([s.video for s in samples]).astype(np.float32),
            noisy=np.stack([s.noisy for s in samples]).astype(np.float32),
            clean=np.stack([s.clean_target for s in samples]).astype(np.float32),
            phase=np.stack([s.noisy_phase for s in samples]).astype(np.float32),
            kinds=[s.noise_kind for s in samples],
            clip_ids=[s.clip_id for s in samples],
            segments=[int(s.segment) for s in samples],
        )

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(
            self.video[idx],
            self.noisy[idx],
            self.clean[idx],
            self.phase[idx],
            [self.kinds[i] for i in idx],
            [self.clip_ids[i] for i in idx],
            [self.segments[i] for i in idx],
        )

    def kind_counts(self) -> dict:
        return {k: self.kinds.count(k) for k in NOISE_KINDS}

    def save(self, path, meta=None) -> None:
        m = {"kinds": self.kinds, "clip_ids": self.clip_ids, "segments": self.segments}
        m.update(meta or {})
        tensors = {"video": self.video, "noisy": self.noisy, "clean": self.clean, "phase": self.phase}
        write_archive(path, DATASET_MAGIC, tensors, m)

    @classmethod
    def load(cls, path) -> "SampleSet":
        try:
            _, meta, t = read_archive(path, DATASET_MAGIC)
        except FileNotFoundError:
            raise DataError(f"{path}: dataset file not found") from None
        except ArchiveError:
            raise
        return cls(
            t["video"], t["noisy"], t["clean"], t["phase"],
            meta["kinds"], meta["clip_ids"], meta["segments"],
        )
