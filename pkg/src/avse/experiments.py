"""Desk-scale experiment: does training on same-speaker mixtures teach the
audio-visual model to rely on the video?

One target speaker is synthesised together with a few interfering speakers
and ambient noise. Three models are trained on the same clips:

* audio-visual with self mixtures in the training data,
* audio-visual without self mixtures,
* audio-only without self mixtures (self mixtures are ill-posed without video),

and each is scored on held-out mixtures of the target with itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, dsp, metrics, synthetic, training
from .model import Network, NetworkConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelfMixtureSetup:
    train_clips: int = 40
    test_clips: int = 12
    frames: int = 25
    interferers: int = 3
    noise_files: int = 8
    self_fraction: float = 1 / 3
    val_fraction: float = 0.15
    epochs: int = 60
    batch_size: int = 16
    width_divisor: int = 8
    snr_db: float = 0.0
    seed: int = 0


@dataclass
class SelfMixtureResult:
    reports: dict  # label -> EvalReport on held-out speech_self mixtures
    histories: dict = field(default_factory=dict)

    def mean_snr(self, label) -> float:
        return self.reports[label].summary()["speech_self"]["snr_db"]

    def table(self) -> str:
        return metrics.format_table(list(self.reports.values()))


MODELS = (
    ("Audio-only", "audio_only", 0.0),
    ("AV without self", "audio_visual", 0.0),
    ("AV with self", "audio_visual", None),
)


def _sets(mixtures, setup):
    train_idx, val_idx = data.split_clips(mixtures, setup.val_fraction, setup.seed)
    stats = data.video_norm_from_frames(mixtures[i].frames for i in train_idx)
    train = data.SampleSet.from_samples(data.samples_from_mixtures([mixtures[i] for i in train_idx], stats))
    val = data.SampleSet.from_samples(data.samples_from_mixtures([mixtures[i] for i in val_idx], stats))
    return train, val, stats


def run_self_mixture_experiment(workdir, setup: SelfMixtureSetup | None = None) -> SelfMixtureResult:
    setup = setup or SelfMixtureSetup()
    workdir = Path(workdir)
    rng = np.random.default_rng(setup.seed)
    speakers = synthetic.make_speakers(1 + setup.interferers, rng)
    target, others = speakers[0], speakers[1:]
    train_manifest = synthetic.write_corpus(workdir / "train", [target], setup.train_clips, setup.frames, setup.seed + 1)
    test_manifest = synthetic.write_corpus(workdir / "test", [target], setup.test_clips, setup.frames, setup.seed + 2)
    noise_dir = synthetic.write_noise_dir(
        workdir / "noise", others, setup.noise_files, setup.noise_files, setup.frames, setup.seed + 3
    )
    noise = {k: [dsp.read_wav(p) for p in sorted((noise_dir / k).glob("*.wav"))] for k in ("speech_other", "ambient")}
    manifest = data.load_manifest(train_manifest)

    test = data.build_mixtures(data.load_manifest(test_manifest), {}, 1.0, setup.snr_db, setup.seed + 4)
    items = metrics.items_from_mixtures(test)
    result = SelfMixtureResult({"Noisy": metrics.evaluate(None, items)})

    for label, mode, fraction in MODELS:
        fraction = setup.self_fraction if fraction is None else fraction
        mixtures = data.build_mixtures(manifest, noise, fraction, setup.snr_db, setup.seed + 5)
        train, val, stats = _sets(mixtures, setup)
        net = Network(NetworkConfig(mode=mode, width_divisor=setup.width_divisor, seed=setup.seed))
        net.set_video_norm(stats.mean_frame, stats.std)
        cfg = training.TrainConfig(batch_size=setup.batch_size, max_epochs=setup.epochs, seed=setup.seed)
        log.info("training %s on %d segments (%s)", label, len(train), train.kind_counts())
        fit = training.fit(net, train, val, cfg)
        result.histories[label] = fit.history
        result.reports[label] = metrics.evaluate(net, items, label)
        log.info("%s: speech_self SNR %.2f dB", label, result.mean_snr(label))
    return result
