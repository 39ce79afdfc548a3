"""Cross-check the numpy engine against an independent torch replica.

The replica is built layer by layer from the numpy network's own weights and
trained with torch's Adam; in float64 the loss sequences and the final
parameters must agree to rounding. Skipped when torch is not installed.
"""

import numpy as np
import pytest

from avse import nn, training
from avse.model import Network, NetworkConfig
from avse.nn.functional import same_padding

torch = pytest.importorskip("torch")
TF = torch.nn.functional


def _conv(layer, x, w, b):
    (kh, kw), (sh, sw) = layer.params["w"].shape[2:], layer.stride
    _, pt, pb = same_padding(x.shape[2], kh, sh)
    _, pl, pr = same_padding(x.shape[3], kw, sw)
    return TF.conv2d(TF.pad(x, (pl, pr, pt, pb)), w, b, stride=(sh, sw))


def _conv_transpose(layer, x, w, b):
    (kh, kw), (sh, sw) = layer.params["w"].shape[2:], layer.stride
    oh, ow = x.shape[2] * sh, x.shape[3] * sw
    _, pt, _ = same_padding(oh, kh, sh)
    _, pl, _ = same_padding(ow, kw, sw)
    full = TF.conv_transpose2d(x, w, None, stride=(sh, sw))
    return full[:, :, pt : pt + oh, pl : pl + ow] + b.view(1, -1, 1, 1)


class Replica:
    def __init__(self, net):
        self.net = net
        self.params = {}
        for _, seq in net.towers():
            for layer in seq.layers:
                if layer.params:
                    keys = ("w", "b") if "w" in layer.params else ("gamma", "beta")
                    self.params[id(layer)] = [torch.tensor(layer.params[k], requires_grad=True) for k in keys]

    def tensors(self):
        return [t for pair in self.params.values() for t in pair]

    def run(self, seq, x):
        for layer in seq.layers:
            p = self.params.get(id(layer))
            if isinstance(layer, nn.Conv2D):
                x = _conv(layer, x, *p)
            elif isinstance(layer, nn.Conv2DTranspose):
                x = _conv_transpose(layer, x, *p)
            elif isinstance(layer, nn.Dense):
                x = TF.linear(x, *p)
            elif isinstance(layer, nn.BatchNorm):
                x = TF.batch_norm(x, None, None, *p, training=True, eps=layer.eps)
            elif isinstance(layer, nn.LeakyReLU):
                x = TF.leaky_relu(x, layer.slope)
            elif isinstance(layer, nn.MaxPool2):
                x = TF.max_pool2d(x, 2)
            elif isinstance(layer, nn.Flatten):
                x = x.reshape(x.shape[0], -1)
            elif isinstance(layer, nn.Reshape):
                x = x.reshape((x.shape[0],) + tuple(layer.shape))
            elif not isinstance(layer, nn.Dropout):
                raise TypeError(type(layer))
        return x

    def forward(self, video, audio):
        parts = [self.run(self.net.audio, audio[:, None])]
        if self.net.video is not None:
            parts.insert(0, self.run(self.net.video, video))
        return self.run(self.net.decoder, self.run(self.net.fc, torch.cat(parts, 1)))[:, 0]


@pytest.mark.parametrize("mode", ["audio_visual", "audio_only"])
def test_training_matches_torch(mode):
    net = Network(NetworkConfig(mode=mode, width_divisor=32, dropout_rate=0.0, seed=2), dtype=np.float64)
    replica = Replica(net)
    rng = np.random.default_rng(7)
    video, audio, clean = rng.standard_normal((4, 5, 128, 128)), rng.standard_normal((4, 80, 20)), rng.standard_normal((4, 80, 20))
    tv, ta, ty = (torch.tensor(a) for a in (video, audio, clean))
    opt = torch.optim.Adam(replica.tensors(), lr=5e-4, betas=(0.9, 0.999), eps=1e-8)
    adam = training.AdamState.for_params(net.parameters(), 5e-4)
    for _ in range(4):
        loss_t = ((replica.forward(tv, ta) - ty) ** 2).mean()
        opt.zero_grad()
        loss_t.backward()
        opt.step()
        pred = net.forward(video if mode == "audio_visual" else None, audio, train=True)
        loss_n = nn.mse_loss(pred, clean)
        net.backward(nn.mse_loss_grad(pred, clean), input_grads=False)
        training.adam_step(net.parameters(), net.gradients(), adam)
        assert loss_n == pytest.approx(loss_t.item(), rel=1e-10)
    for ours, theirs in zip(net.parameters(), replica.tensors()):
        np.testing.assert_allclose(ours, theirs.detach().numpy(), rtol=1e-7, atol=1e-10)
