"""Central finite-difference gradient verification (float64)."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x, h=1e-6, indices=None):
    """Central differences of scalar ``f()`` with respect to array ``x``, in place.

    ``f`` takes no arguments and must read ``x`` by reference. Only the flat
    ``indices`` are perturbed when given; other entries of the result are NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=1e-8):
    """Max over entries of ``|a - n| / max(|a| + |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def sample_indices(size, count, rng):
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, count, replace=False))


def check_layer(layer, x, rng, train=True, h=1e-6, max_entries=40, reset=None):
    """Compare ``layer.backward`` with central differences of ``<layer(x), probe>``.

    Returns a dict mapping ``"input"`` and each parameter name to the maximum
    relative error over the checked entries. ``reset`` is called before every
    forward pass (e.g. to re-seed a dropout mask).
    """
    reset = reset or (lambda: None)
    reset()
    y = layer.forward(x, train)
    probe = rng.standard_normal(y.shape)

    def objective():
        reset()
        return float(np.sum(layer.forward(x, train) * probe))

    reset()
    layer.forward(x, train)
    dx = layer.backward(probe)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    errors = {}
    idx = sample_indices(x.size, max_entries, rng)
    num = numeric_grad(objective, x, h, idx)
    errors["input"] = relative_error(dx.reshape(-1)[idx], num.reshape(-1)[idx])
    for name, p in layer.params.items():
        idx = sample_indices(p.size, max_entries, rng)
        num = numeric_grad(objective, p, h, idx)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], num.reshape(-1)[idx])
    return errors


def check_network(net, video, audio, rng, train=True, h=1e-6, max_entries=6, floor_ratio=1e-5):
    """Gradient check of a whole :class:`avse.model.Network` in float64.

    The dropout generator is rewound before every forward pass so that each
    evaluation sees the same masks. Returns ``{name: error}`` for the inputs
    and every parameter tensor.

    Finite differences of the full objective carry an absolute noise of
    roughly 1e-8, so the relative-error denominator is floored at
    ``floor_ratio`` times the largest analytic gradient. Without the floor,
    parameters whose true gradient is zero (biases feeding batchnorm) would
    compare noise with noise.
    """
    state = net.dropout_rng.bit_generator.state

    def run():
        net.dropout_rng.bit_generator.state = state
        return net.forward(video, audio, train)

    probe = rng.standard_normal(run().shape)

    def objective():
        return float(np.sum(run() * probe))

    run()
    dvideo, daudio = net.backward(probe)
    grads = {name: layer.grads[k].copy() for name, layer, k in net.named_params()}
    scale = max(float(np.abs(g).max()) for g in grads.values())
    floor = max(1e-8, floor_ratio * scale)
    errors = {}
    inputs = [("input.audio", audio, daudio)]
    if video is not None:
        inputs.insert(0, ("input.video", video, dvideo))
    for name, x, g in inputs:
        idx = sample_indices(x.size, max_entries, rng)
        num = numeric_grad(objective, x, h, idx)
        errors[name] = relative_error(g.reshape(-1)[idx], num.reshape(-1)[idx], floor)
    for name, layer, k in net.named_params():
        p = layer.params[k]
        idx = sample_indices(p.size, max_entries, rng)
        num = numeric_grad(objective, p, h, idx)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], num.reshape(-1)[idx], floor)
    return errors
