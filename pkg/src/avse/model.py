"""Audio-visual encoder-decoder and its audio-only ablation.

Layer table (filters, kernel, stride):

* video tower: six stride-1 "same" convolutions with 128, 128, 256, 256, 512,
  512 filters and kernels 5, 5, 3, 3, 3, 3; each followed by batchnorm,
  leaky ReLU, 2x2 max pooling and dropout. 5x128x128 -> 512x2x2 = 2048.
* audio tower: convolutions (64, 5, 2x2), (64, 4, 1x1), (128, 4, 2x2),
  (128, 2, 2x1), (128, 2, 2x1); each followed by batchnorm and leaky ReLU.
  1x80x20 -> 128x5x5 = 3200.
* fused block: dense 5248 -> 1312 -> 1312 -> 3200, each with batchnorm and
  leaky ReLU, reshaped to 128x5x5.
* decoder: transposed convolutions undoing the audio tower back to 1x80x20;
  the last one is linear.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DataError, WeightsError
from .serialize import ArchiveError, fingerprint, read_archive, write_archive

VIDEO_FRAMES = 5
FRAME_SIZE = 128
N_MELS = 80
SEGMENT_FRAMES = 20

VIDEO_ENCODER = ((128, 5), (128, 5), (256, 3), (256, 3), (512, 3), (512, 3))
AUDIO_ENCODER = (
    (64, (5, 5), (2, 2)),
    (64, (4, 4), (1, 1)),
    (128, (4, 4), (2, 2)),
    (128, (2, 2), (2, 1)),
    (128, (2, 2), (2, 1)),
)
FC_SIZES = (1312, 1312)
DEFAULT_DECODER = (
    (128, (2, 2), (2, 1)),
    (128, (2, 2), (2, 1)),
    (64, (4, 4), (2, 2)),
    (64, (4, 4), (1, 1)),
    (1, (5, 5), (2, 2)),
)

MODES = ("audio_visual", "audio_only")
WEIGHTS_MAGIC = b"AVSW"


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = "audio_visual"
    leaky_slope: float = 0.2
    dropout_rate: float = 0.25
    decoder_spec: tuple = DEFAULT_DECODER
    seed: int = 0
    # Divides every filter count and hidden width; 1 is the published network.
    width_divisor: int = 1

    def __post_init__(self):
        spec = tuple(
            (int(f), tuple(int(k) for k in _pair(kern)), tuple(int(s) for s in _pair(st)))
            for f, kern, st in self.decoder_spec
        )
        object.__setattr__(self, "decoder_spec", spec)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be nonnegative")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if not spec or spec[-1][0] != 1:
            raise ConfigError("decoder must end in a single-channel layer")

    @property
    def audio_visual(self) -> bool:
        return self.mode == "audio_visual"

    def width(self, n: int) -> int:
        return max(1, math.ceil(n / self.width_divisor))

    def architecture(self) -> dict:
        """Fields that determine the parameter layout and forward behaviour."""
        d = asdict(self)
        d.pop("seed")
        d["decoder_spec"] = [[f, list(k), list(s)] for f, k, s in self.decoder_spec]
        return d

    def fingerprint(self) -> bytes:
        return fingerprint(self.architecture())

    def to_dict(self) -> dict:
        d = self.architecture()
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        d = dict(d)
        if "decoder_spec" in d:
            d["decoder_spec"] = tuple(tuple(x) for x in d["decoder_spec"])
        return cls(**d)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _video_tower(cfg, rng, dropout_rng, dtype):
    layers = []
    c = VIDEO_FRAMES
    for filters, k in VIDEO_ENCODER:
        f = cfg.width(filters)
        layers += [
            nn.Conv2D(c, f, k, 1, rng=rng, dtype=dtype),
            nn.BatchNorm(f, dtype=dtype),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.MaxPool2(),
            nn.Dropout(cfg.dropout_rate, rng=dropout_rng),
        ]
        c = f
    layers.append(nn.Flatten())
    return nn.Sequential(layers)


def _audio_tower(cfg, rng, dtype):
    layers = []
    c = 1
    for filters, k, s in AUDIO_ENCODER:
        f = cfg.width(filters)
        layers += [
            nn.Conv2D(c, f, k, s, rng=rng, dtype=dtype),
            nn.BatchNorm(f, dtype=dtype),
            nn.LeakyReLU(cfg.leaky_slope),
        ]
        c = f
    layers.append(nn.Flatten())
    return nn.Sequential(layers)


def _dense_block(sizes, slope, rng, dtype):
    layers = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        layers += [
            nn.Dense(d_in, d_out, rng=rng, dtype=dtype),
            nn.BatchNorm(d_out, dtype=dtype),
            nn.LeakyReLU(slope),
        ]
    return nn.Sequential(layers)


def _decoder(cfg, in_shape, rng, dtype):
    layers = [nn.Reshape(in_shape)]
    c = in_shape[0]
    spec = cfg.decoder_spec
    for i, (filters, k, s) in enumerate(spec):
        last = i == len(spec) - 1
        f = filters if last else cfg.width(filters)
        layers.append(nn.Conv2DTranspose(c, f, k, s, rng=rng, dtype=dtype))
        if not last:
            layers += [nn.BatchNorm(f, dtype=dtype), nn.LeakyReLU(cfg.leaky_slope)]
        c = f
    return nn.Sequential(layers)


class Network:
    """The encoder-decoder. Inputs are batched:

    * ``video``: ``(N, 5, 128, 128)`` normalised frames (audio-visual mode only)
    * ``audio``: ``(N, 80, 20)`` log-mel segments

    and :meth:`forward` returns ``(N, 80, 20)``.
    """

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        init_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        self.dropout_rng = np.random.default_rng(drop_seq)

        self.video = _video_tower(cfg, rng, self.dropout_rng, dtype) if cfg.audio_visual else None
        self.audio = _audio_tower(cfg, rng, dtype)

        audio_shape = nn.Sequential(self.audio.layers[:-1]).output_shape(
            (1, N_MELS, SEGMENT_FRAMES)
        )
        self.audio_embedding = int(np.prod(audio_shape))
        self.video_embedding = (
            self.video.output_shape((VIDEO_FRAMES, FRAME_SIZE, FRAME_SIZE))[0] if self.video else 0
        )
        self.fused_embedding = self.video_embedding + self.audio_embedding
        sizes = (self.fused_embedding,) + tuple(cfg.width(n) for n in FC_SIZES)
        sizes += (self.audio_embedding,)
        self.fc = _dense_block(sizes, cfg.leaky_slope, rng, dtype)
        self.decoder = _decoder(cfg, audio_shape, rng, dtype)

        out = self.decoder.output_shape((self.audio_embedding,))
        if tuple(out) != (1, N_MELS, SEGMENT_FRAMES):
            raise ConfigError(f"decoder produces {out}, expected (1, {N_MELS}, {SEGMENT_FRAMES})")
        if cfg.width_divisor == 1:
            expected = (2048 if cfg.audio_visual else 0, 3200)
            got = (self.video_embedding, self.audio_embedding)
            if got != expected:
                raise ConfigError(f"embedding widths {got} differ from {expected}")

        self.video_mean: np.ndarray | None = None
        self.video_std: float | None = None

    # -- parameters ---------------------------------------------------------

    def towers(self):
        parts = [("video", self.video)] if self.video is not None else []
        return parts + [("audio", self.audio), ("fc", self.fc), ("decoder", self.decoder)]

    def layers(self):
        for prefix, seq in self.towers():
            for name, layer in seq.named_layers(prefix + "."):
                yield name, layer

    def named_params(self):
        for name, layer in self.layers():
            for k, v in layer.params.items():
                yield f"{name}.{k}", layer, k

    def parameters(self):
        return [layer.params[k] for _, layer, k in self.named_params()]

    def gradients(self):
        return [layer.grads[k] for _, layer, k in self.named_params()]

    def set_parameters(self, values):
        for (_, layer, k), v in zip(self.named_params(), values):
            layer.params[k] = v

    def state_dict(self) -> dict:
        """Ordered name -> array for every parameter and buffer."""
        state = {}
        for name, layer in self.layers():
            for k, v in layer.params.items():
                state[f"{name}.{k}"] = v
            for k, v in layer.buffers.items():
                state[f"{name}.{k}"] = v
        if self.video_mean is not None:
            state["norm.mean_frame"] = np.asarray(self.video_mean, np.float64)
            state["norm.std"] = np.asarray([self.video_std], np.float64)
        return state

    def load_state_dict(self, state: dict):
        expected = {}
        for name, layer in self.layers():
            for store in (layer.params, layer.buffers):
                for k, v in store.items():
                    expected[f"{name}.{k}"] = (store, k, v.shape)
        extra = set(state) - set(expected) - {"norm.mean_frame", "norm.std"}
        missing = set(expected) - set(state)
        if extra or missing:
            raise WeightsError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for key, (store, k, shape) in expected.items():
            arr = np.asarray(state[key])
            if arr.shape != shape:
                raise WeightsError(f"{key}: shape {arr.shape}, expected {shape}")
        for key, (store, k, _) in expected.items():
            store[k] = np.array(state[key], dtype=self.dtype)
        if "norm.mean_frame" in state:
            self.set_video_norm(state["norm.mean_frame"], float(state["norm.std"][0]))

    def set_video_norm(self, mean_frame, std):
        self.video_mean = np.asarray(mean_frame, dtype=np.float64)
        self.video_std = float(std)

    def astype(self, dtype):
        for _, seq in self.towers():
            seq.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- computation --------------------------------------------------------

    def _check_inputs(self, video, audio):
        if self.cfg.audio_visual and video is None:
            raise DataError("audio-visual network requires video input")
        if not self.cfg.audio_visual and video is not None:
            raise DataError("audio-only network does not accept video input")
        audio = np.asarray(audio, dtype=self.dtype)
        if audio.ndim == 2:
            audio = audio[None]
        if audio.shape[1:] != (N_MELS, SEGMENT_FRAMES):
            raise DataError(f"audio segments must be (N, 80, 20), got {audio.shape}")
        if video is not None:
            video = np.asarray(video, dtype=self.dtype)
            if video.ndim == 3:
                video = video[None]
            if video.shape[1:] != (VIDEO_FRAMES, FRAME_SIZE, FRAME_SIZE):
                raise DataError(f"video segments must be (N, 5, 128, 128), got {video.shape}")
            if video.shape[0] != audio.shape[0]:
                raise DataError("video and audio batch sizes differ")
        return video, audio

    def encode(self, video, audio, train=False):
        video, audio = self._check_inputs(video, audio)
        parts = []
        if self.video is not None:
            parts.append(self.video.forward(video, train))
        parts.append(self.audio.forward(audio[:, None], train))
        return np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]

    def forward(self, video, audio, train=False):
        z = self.encode(video, audio, train)
        h = self.fc.forward(z, train)
        return self.decoder.forward(h, train)[:, 0]

    __call__ = forward

    def backward(self, dout, input_grads=True):
        """Backpropagate ``dout`` (N, 80, 20).

        Parameter gradients are left in each layer's ``grads``. Returns the
        ``(video, audio)`` input gradients, or ``(None, None)`` when
        ``input_grads`` is false (cheaper, as used in training).
        """
        first = [seq.layers[0] for _, seq in self.towers()[:-2]]
        for layer in first:
            layer.input_grad = input_grads
        try:
            dh = self.decoder.backward(np.asarray(dout, dtype=self.dtype)[:, None])
            dz = self.fc.backward(dh)
            dvideo = None
            if self.video is not None:
                dvideo = self.video.backward(np.ascontiguousarray(dz[:, : self.video_embedding]))
                dz = dz[:, self.video_embedding :]
            daudio = self.audio.backward(np.ascontiguousarray(dz))
        finally:
            for layer in first:
                layer.input_grad = True
        if not input_grads:
            return None, None
        return dvideo, daudio[:, 0]


def build_network(cfg: NetworkConfig | None = None, dtype=np.float32) -> Network:
    return Network(cfg or NetworkConfig(), dtype)


def save_weights(net: Network, path, extra_meta=None) -> None:
    meta = {"config": net.cfg.to_dict(), "kind": "weights"}
    if extra_meta:
        meta.update(extra_meta)
    write_archive(path, WEIGHTS_MAGIC, net.state_dict(), meta, net.cfg.fingerprint())


def load_weights(path, cfg: NetworkConfig | None = None) -> Network:
    """Rebuild a network from ``path``.

    When ``cfg`` is given its architecture fingerprint must match the file;
    otherwise the configuration stored in the file is used.
    """
    path = Path(path)
    try:
        fp, meta, tensors = read_archive(path, WEIGHTS_MAGIC)
    except ArchiveError as exc:
        raise WeightsError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise WeightsError(f"{path}: no such weights file") from exc
    stored = NetworkConfig.from_dict(meta["config"])
    if stored.fingerprint() != fp:
        raise WeightsError(f"{path}: stored config does not match its fingerprint")
    if cfg is not None and cfg.fingerprint() != fp:
        raise WeightsError(
            f"{path}: architecture fingerprint mismatch "
            f"(file mode={stored.mode!r}, requested mode={cfg.mode!r})"
        )
    dtype = tensors["audio.0.w"].dtype if "audio.0.w" in tensors else np.float32
    net = Network(cfg or stored, dtype=dtype)
    net.load_state_dict(tensors)
    return net
