"""Objective scores and their aggregation by noise kind."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp, pipeline
from .data import NOISE_KINDS, segment_count
from .dsp import Waveform
from .errors import DataError

SNR_CAP_DB = 100.0
LSD_EPS = 1e-8
KIND_LABELS = {"speech_other": "speech(other)", "ambient": "ambient", "speech_self": "speech(self)"}


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def _match_length(clean, estimate):
    if len(estimate) != len(clean):
        warnings.warn(
            f"estimate has {len(estimate)} samples, reference {len(clean)}; "
            "truncating or zero-padding the estimate",
            stacklevel=3,
        )
        out = np.zeros(len(clean))
        n = min(len(clean), len(estimate))
        out[:n] = estimate[:n]
        return out
    return estimate


def snr_db(clean, estimate) -> float:
    """``10 log10(sum c^2 / sum (c - e)^2)``, capped at +100 dB."""
    c = _samples(clean)
    e = _match_length(c, _samples(estimate))
    signal = float(np.sum(c * c))
    if signal == 0:
        raise DataError("reference signal is all zeros; SNR is undefined")
    residual = float(np.sum((c - e) ** 2))
    if residual == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal / residual))


def log_spectral_distance(clean, estimate, eps: float = LSD_EPS) -> float:
    """Frame-averaged RMS difference of dB magnitude spectra."""
    c = _samples(clean)
    e = _match_length(c, _samples(estimate))
    if len(c) < dsp.WIN_LENGTH:
        raise DataError(f"signal shorter than one {dsp.WIN_LENGTH}-sample window")
    a = dsp.compute_stft(Waveform(c)).magnitude
    b = dsp.compute_stft(Waveform(e)).magnitude
    diff = 20 * np.log10(a + eps) - 20 * np.log10(b + eps)
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=0))))


@dataclass
class EvalItem:
    clip_id: str
    noise_kind: str
    frames: np.ndarray
    clean: Waveform
    noisy: Waveform


@dataclass
class SampleScore:
    clip_id: str
    noise_kind: str
    snr: float
    lsd: float


@dataclass
class EvalReport:
    label: str
    scores: list = field(default_factory=list)

    def __len__(self):
        return len(self.scores)

    def by_kind(self) -> dict:
        groups = {k: [] for k in NOISE_KINDS}
        for s in self.scores:
            groups.setdefault(s.noise_kind, []).append(s)
        return groups

    def summary(self) -> dict:
        out = {}
        for kind, group in self.by_kind().items():
            if group:
                out[kind] = {
                    "count": len(group),
                    "snr_db": float(np.mean([s.snr for s in group])),
                    "lsd_db": float(np.mean([s.lsd for s in group])),
                }
        out["all"] = {
            "count": len(self.scores),
            "snr_db": float(np.mean([s.snr for s in self.scores])),
            "lsd_db": float(np.mean([s.lsd for s in self.scores])),
        }
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "samples": [asdict(s) for s in self.scores],
            "summary": self.summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def format_table(reports) -> str:
    """Fixed-width table: one row per report, SNR and LSD per noise kind."""
    kinds = [k for k in NOISE_KINDS if any(r.by_kind()[k] for r in reports)]
    col = 15
    width = 22
    top = " " * width + "SNR (dB)".center(col * len(kinds)) + "| " + "LSD (dB)".center(col * len(kinds))
    head = "Noise type:".ljust(width)
    head += "".join(KIND_LABELS[k].rjust(col) for k in kinds) + "| "
    head += "".join(KIND_LABELS[k].rjust(col) for k in kinds)
    lines = [top, head, "-" * len(head)]
    for r in reports:
        s = r.summary()
        row = r.label.ljust(width)
        row += "".join(f"{s[k]['snr_db']:>{col}.2f}" for k in kinds) + "| "
        row += "".join(f"{s[k]['lsd_db']:>{col}.2f}" for k in kinds)
        lines.append(row)
    counts = ", ".join(f"{k}={len(reports[0].by_kind()[k])}" for k in kinds) if reports else ""
    lines.append(f"samples: {counts}")
    return "\n".join(lines) + "\n"


def score(item: EvalItem, estimate: Waveform) -> SampleScore:
    """Score ``estimate`` against the clean reference over the estimate's span."""
    n = len(estimate)
    clean = Waveform(item.clean.samples[:n])
    return SampleScore(item.clip_id, item.noise_kind, snr_db(clean, estimate), log_spectral_distance(clean, estimate))


def evaluate(net, items, label=None) -> EvalReport:
    """Score ``net`` on ``items``; ``net=None`` scores the noisy input itself.

    Both rows are measured over the span the pipeline reconstructs, so they
    are directly comparable.
    """
    items = list(items)
    if not items:
        raise DataError("empty test set")
    report = EvalReport(label or ("Noisy" if net is None else "Enhanced"))
    for item in items:
        if net is None:
            k = segment_count(len(item.frames), len(item.noisy))
            if k == 0:
                raise DataError(f"{item.clip_id}: too short for one segment")
            n = (k * dsp.SEGMENT_FRAMES - 1) * dsp.HOP_LENGTH
            estimate = Waveform(item.noisy.samples[:n])
        else:
            estimate = pipeline.enhance(net, item.frames, item.noisy).waveform
        report.scores.append(score(item, estimate))
    return report


def items_from_mixtures(mixtures) -> list[EvalItem]:
    return [EvalItem(m.clip.clip_id, m.noise_kind, m.frames, m.clean, m.noisy) for m in mixtures]
