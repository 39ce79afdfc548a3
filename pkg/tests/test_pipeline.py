import numpy as np
import pytest

from avse import data, dsp, pipeline, synthetic
from avse.dsp import Waveform
from avse.errors import DataError, WeightsError
from avse.model import Network, NetworkConfig


@pytest.fixture(scope="module")
def clip():
    rng = np.random.default_rng(0)
    utt = synthetic.make_utterance(synthetic.make_speakers(1, rng)[0], 25, rng)
    noisy = data.mix_at_snr(utt.waveform, synthetic.ambient_noise(16000, rng), 0.0, rng)
    return utt.frames, noisy


@pytest.fixture(scope="module")
def net():
    n = Network(NetworkConfig(width_divisor=32))
    n.set_video_norm(np.full((128, 128), 90.0), 40.0)
    return n


class TestEnhance:
    def test_duration(self, net, clip):
        out = pipeline.enhance(net, *clip)
        assert out.n_segments == 5
        assert abs(len(out.waveform) - 16000) <= dsp.HOP_LENGTH
        assert len(out.waveform) == (100 - 1) * 160
        assert out.waveform.sample_rate == 16000 and out.dropped_seconds == 0

    def test_repeatable(self, net, clip):
        a = pipeline.enhance(net, *clip).waveform.samples
        b = pipeline.enhance(net, *clip).waveform.samples
        np.testing.assert_array_equal(a, b)

    def test_segments_match_single_forward(self, net, clip):
        frames, noisy = clip
        out = pipeline.enhance(net, frames, noisy, batch_size=2)
        stats = data.NormalizationStats(net.video_mean, net.video_std)
        mel = dsp.to_log_mel(dsp.compute_stft(noisy))
        seg = net.forward(data.normalize_video(frames[10:15], stats), mel[:, 40:60])
        np.testing.assert_allclose(out.log_mel[:, 40:60], seg[0], rtol=1e-4, atol=1e-4)

    def test_uses_noisy_phase(self, clip):
        _, noisy = clip
        # with an exact magnitude the output is the input, phase included
        spec = dsp.compute_stft(noisy)
        out = dsp.invert_stft(dsp.Spectrogram(spec.magnitude, spec.phase))
        np.testing.assert_allclose(out.samples, noisy.samples[: len(out)], atol=1e-9)

    def test_drops_remainder(self, net, clip):
        frames, noisy = clip
        out = pipeline.enhance(net, frames[:23], noisy)
        assert out.n_segments == 4
        assert out.dropped_seconds == pytest.approx(0.2)

    def test_too_short(self, net, clip):
        frames, noisy = clip
        with pytest.raises(DataError, match="too short"):
            pipeline.enhance(net, frames[:4], noisy)
        with pytest.raises(DataError, match="too short"):
            pipeline.enhance(net, frames, Waveform(noisy.samples[:3000]))

    def test_missing_stats(self, clip):
        with pytest.raises(WeightsError):
            pipeline.enhance(Network(NetworkConfig(width_divisor=32)), *clip)

    def test_audio_only(self, clip):
        net = Network(NetworkConfig(mode="audio_only", width_divisor=32))
        assert pipeline.enhance(net, *clip).n_segments == 5


class TestPassthrough:
    def test_close_to_input(self, clip):
        _, noisy = clip
        out = pipeline.passthrough(noisy)
        ref = noisy.samples[: len(out)]
        snr = 10 * np.log10(np.sum(ref**2) / np.sum((ref - out.samples) ** 2))
        assert np.isfinite(snr) and snr > 3
