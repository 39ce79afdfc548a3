"""Adam, the plateau learning-rate schedule and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import Network, NetworkConfig
from .nn.functional import mse_loss, mse_loss_grad
from .serialize import read_archive, write_archive

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVSC"
CHECKPOINT_NAME = "checkpoint.bin"


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=5e-4, **kw) -> "AdamState":
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update, applied in place.

    Returns ``(params, state)``. A non-finite gradient aborts before any
    parameter is touched.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer moments differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            name = names[i] if names else f"#{i}"
            raise ValueError(f"parameter {name}: shape {p.shape}, gradient {g.shape}, moment {m.shape}")
        if not np.isfinite(g).all():
            name = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- plateau schedule -------------------------------------------------------


@dataclass(frozen=True)
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    patience: int = 5
    factor: float = 0.5

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0 < self.factor < 1:
            raise ConfigError("lr factor must lie in (0, 1)")


def lr_schedule_update(history, state: PlateauState) -> PlateauState:
    """Account for the newest validation loss, ``history[-1]``.

    An epoch improves only if its loss is strictly below the best so far.
    After ``patience`` consecutive non-improving epochs the rate is scaled by
    ``factor`` and the counter restarts.
    """
    loss = float(history[-1])
    if loss < state.best:
        return replace(state, best=loss, bad_epochs=0)
    bad = state.bad_epochs + 1
    if bad >= state.patience:
        return replace(state, lr=state.lr * state.factor, bad_epochs=0)
    return replace(state, bad_epochs=bad)


def lr_trace(losses, lr=5e-4, patience=5, factor=0.5) -> list[float]:
    """Learning rate in force after each epoch of ``losses``."""
    state = PlateauState(lr, patience=patience, factor=factor)
    out = []
    for i in range(len(losses)):
        state = lr_schedule_update(losses[: i + 1], state)
        out.append(state.lr)
    return out


# -- epoch loop -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 5e-4
    plateau_patience: int = 5
    lr_factor: float = 0.5
    batch_size: int = 16
    max_epochs: int = 50
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be at least 1")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalisation)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float  # rate in force after this epoch's schedule update
    seconds: float = field(default=0.0, compare=False)


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_loss: float

    @property
    def train_losses(self):
        return [r.train_loss for r in self.history]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.history]

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss,lr"]
        rows += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}" for r in self.history]
        return "\n".join(rows) + "\n"


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch.

    A trailing batch of one sample is folded into the previous batch, since
    batch statistics are undefined for a single sample.
    """
    if n < 2:
        raise DataError("training needs at least two samples")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _inputs(net: Network, data, idx):
    video = data.video[idx] if net.cfg.audio_visual else None
    return video, data.noisy[idx], data.clean[idx]


def evaluate_loss(net: Network, data, batch_size: int = 32) -> float:
    """Inference-mode MSE over a whole sample set."""
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        video, noisy, clean = _inputs(net, data, idx)
        pred = net.forward(video, noisy, train=False)
        total += mse_loss(pred, clean) * len(idx)
        count += len(idx)
    return total / count


def _train_epoch(net: Network, data, cfg: TrainConfig, adam: AdamState, epoch: int) -> float:
    params = net.parameters()
    names = [n for n, _, _ in net.named_params()]
    losses, weights = [], []
    for b, idx in enumerate(epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch)):
        video, noisy, clean = _inputs(net, data, idx)
        pred = net.forward(video, noisy, train=True)
        loss = mse_loss(pred, clean)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
        net.backward(mse_loss_grad(pred, clean), input_grads=False)
        adam_step(params, net.gradients(), adam, names)
        losses.append(loss)
        weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def fit(net: Network, train, val=None, cfg: TrainConfig | None = None, callback=None, resume=True) -> FitResult:
    """Train ``net`` in place and leave it holding the best-validation weights.

    ``train`` and ``val`` expose ``video``, ``noisy`` and ``clean`` arrays
    (see :class:`avse.data.SampleSet`). Without ``val`` the training loss
    drives the schedule and checkpoint selection. ``callback(record)`` runs
    after every epoch; returning True ends training.

    With a ``checkpoint_dir`` the full training state is saved after every
    epoch, and an existing checkpoint is resumed from when ``resume`` is set.
    """
    cfg = cfg or TrainConfig()
    if len(train) == 0 or (val is not None and len(val) == 0):
        raise DataError("training and validation sets must be non-empty")
    adam = AdamState.for_params(net.parameters(), cfg.initial_lr)
    sched = PlateauState(cfg.initial_lr, patience=cfg.plateau_patience, factor=cfg.lr_factor)
    history: list[EpochRecord] = []
    best_state = None
    best_epoch = 0
    start = 1

    ckpt = Path(cfg.checkpoint_dir) / CHECKPOINT_NAME if cfg.checkpoint_dir else None
    if ckpt is not None and resume and ckpt.exists():
        start, adam, sched, history, best_state, best_epoch = load_checkpoint(ckpt, net, cfg)
        log.info("resuming from %s at epoch %d", ckpt, start)

    for epoch in range(start, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        adam.lr = sched.lr
        train_loss = _train_epoch(net, train, cfg, adam, epoch)
        val_loss = evaluate_loss(net, val) if val is not None else train_loss
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < sched.best:
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
            best_epoch = epoch
        sched = lr_schedule_update([r.val_loss for r in history] + [val_loss], sched)
        record = EpochRecord(epoch, train_loss, val_loss, sched.lr, time.perf_counter() - t0)
        history.append(record)
        log.info(
            "epoch %d: train %.6g val %.6g lr %.3g (%.1fs)",
            epoch, train_loss, val_loss, sched.lr, record.seconds,
        )
        if ckpt is not None:
            save_checkpoint(ckpt, net, cfg, epoch, adam, sched, history, best_state, best_epoch)
        if callback is not None and callback(record):
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    best = history[best_epoch - 1].val_loss if best_epoch else math.inf
    return FitResult(history, best_epoch, best)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, net, cfg, epoch, adam, sched, history, best_state, best_epoch):
    tensors = dict(net.state_dict())
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        tensors[f"adam.m.{i}"] = m
        tensors[f"adam.v.{i}"] = v
    if best_state is not None:
        tensors.update({f"best.{k}": v for k, v in best_state.items()})
    meta = {
        "kind": "checkpoint",
        "epoch": epoch,
        "network": net.cfg.to_dict(),
        "train": asdict(cfg) | {"checkpoint_dir": None},
        "adam": {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
        "schedule": asdict(sched),
        # wall-clock times are left out so checkpoints are reproducible
        "history": [[r.epoch, r.train_loss, r.val_loss, r.lr] for r in history],
        "best_epoch": best_epoch,
        "dropout_rng": net.dropout_rng.bit_generator.state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(path).with_suffix(".tmp")
    write_archive(tmp, CHECKPOINT_MAGIC, tensors, meta, net.cfg.fingerprint())
    tmp.replace(path)


def load_checkpoint(path, net, cfg):
    fp, meta, tensors = read_archive(path, CHECKPOINT_MAGIC)
    if fp != net.cfg.fingerprint():
        raise ConfigError(f"{path}: checkpoint was written for a different architecture")
    saved = dict(meta["train"])
    mine = asdict(cfg) | {"checkpoint_dir": None, "max_epochs": saved["max_epochs"]}
    if saved != mine:
        raise ConfigError(f"{path}: checkpoint was written with different training options")
    state = {k: v for k, v in tensors.items() if not k.startswith(("adam.", "best."))}
    net.load_state_dict(state)
    net.dropout_rng.bit_generator.state = meta["dropout_rng"]
    n = len(net.parameters())
    adam = AdamState(
        **meta["adam"],
        m=[tensors[f"adam.m.{i}"].copy() for i in range(n)],
        v=[tensors[f"adam.v.{i}"].copy() for i in range(n)],
    )
    best = {k[5:]: v.copy() for k, v in tensors.items() if k.startswith("best.")} or None
    history = [EpochRecord(*r) for r in meta["history"]]
    sched = PlateauState(**meta["schedule"])
    return meta["epoch"] + 1, adam, sched, history, best, meta["best_epoch"]


def build_trainer_network(net_cfg: NetworkConfig, stats=None, dtype=np.float32) -> Network:
    """Fresh network carrying the dataset's video normalisation."""
    net = Network(net_cfg, dtype)
    if stats is not None:
        net.set_video_norm(stats.mean_frame, stats.std)
    return net
