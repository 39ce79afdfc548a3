"""Command-line interface: ``prepare``, ``train``, ``enhance``, ``evaluate``
and ``synth`` (a synthetic demo corpus).

Options come from one JSON config file; command-line flags override it.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, dsp, metrics, pipeline, synthetic, training
from .errors import AvseError, ConfigError, DataError
from .model import NetworkConfig, load_weights, save_weights
from .serialize import canonical_json, read_archive, write_archive

log = logging.getLogger("avse")

NORM_MAGIC = b"AVSN"
DEFAULTS = {
    "seed": 0,
    "network": {"mode": "audio_visual", "leaky_slope": 0.2, "dropout_rate": 0.25, "width_divisor": 1},
    "data": {"self_fraction": 1 / 3, "snr_db": 0.0, "val_fraction": 0.1},
    "train": {"initial_lr": 5e-4, "plateau_patience": 5, "lr_factor": 0.5, "batch_size": 16, "max_epochs": 50},
}


# -- configuration ----------------------------------------------------------


def _merge(base, over, where="config"):
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown option {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _merge(cfg, user)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = cfg
        for p in parents:
            node = node[p]
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    d = cfg["data"]
    if not 0 <= d["self_fraction"] <= 1:
        raise ConfigError("data.self_fraction must lie in [0, 1]")
    if not 0 <= d["val_fraction"] < 1:
        raise ConfigError("data.val_fraction must lie in [0, 1)")
    if not math.isfinite(d["snr_db"]):
        raise ConfigError("data.snr_db must be finite")
    network_config(cfg)
    train_config(cfg)


def network_config(cfg) -> NetworkConfig:
    return NetworkConfig.from_dict({**cfg["network"], "seed": cfg["seed"]})


def train_config(cfg, checkpoint_dir=None) -> training.TrainConfig:
    return training.TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], "checkpoint_dir": checkpoint_dir})


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(path, command, cfg, inputs=None, extra=None):
    """Record what produced an output. Paths and times are left out on
    purpose so that reruns produce identical files."""
    record = {
        "command": command,
        "artifact_version": __version__,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": inputs or {},
    }
    record.update(extra or {})
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: {what} not found")
    return path


# -- prepare ----------------------------------------------------------------


def load_noise_dir(noise_dir) -> dict:
    """``speech_other/*.wav`` and ``ambient/*.wav`` under ``noise_dir``."""
    sources = {}
    if noise_dir is None:
        return sources
    root = _require(noise_dir, "noise directory")
    for kind in ("speech_other", "ambient"):
        files = sorted((root / kind).glob("*.wav"))
        if files:
            sources[kind] = [dsp.read_wav(f) for f in files]
    if not sources:
        raise DataError(f"{root}: no speech_other/*.wav or ambient/*.wav files")
    return sources


def save_norm(path, stats: data.NormalizationStats):
    write_archive(path, NORM_MAGIC, {"mean_frame": stats.mean_frame, "std": np.array([stats.std])})


def load_norm(path) -> data.NormalizationStats:
    _, _, t = read_archive(_require(path, "normalisation file"), NORM_MAGIC)
    return data.NormalizationStats(t["mean_frame"], float(t["std"][0]))


def cmd_prepare(args, cfg):
    manifest = data.load_manifest(args.manifest)
    if not manifest:
        raise DataError(f"{args.manifest}: manifest is empty")
    noise = load_noise_dir(args.noise_dir)
    d = cfg["data"]
    mixtures = data.build_mixtures(manifest, noise, d["self_fraction"], d["snr_db"], cfg["seed"])
    train_idx, val_idx = data.split_clips(manifest, d["val_fraction"], cfg["seed"])
    stats = data.video_norm_from_frames(mixtures[i].frames for i in train_idx)
    train_set = data.SampleSet.from_samples(data.samples_from_mixtures([mixtures[i] for i in train_idx], stats))
    val_set = None
    if val_idx:
        val_set = data.SampleSet.from_samples(data.samples_from_mixtures([mixtures[i] for i in val_idx], stats))

    # everything is computed before the first write, so failures leave no partial output
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set.save(out / "train.bin")
    if val_set is not None:
        val_set.save(out / "val.bin")
    elif (out / "val.bin").exists():
        (out / "val.bin").unlink()
    save_norm(out / "norm.bin", stats)
    summary = {
        "clips": {"train": [manifest[i].clip_id for i in train_idx], "val": [manifest[i].clip_id for i in val_idx]},
        "mixtures": [
            {"clip_id": m.clip.clip_id, "noise_kind": m.noise_kind, "noise_source": m.noise_source} for m in mixtures
        ],
        "segments": {"train": train_set.kind_counts(), "val": val_set.kind_counts() if val_set else {}},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    inputs = {"manifest": file_digest(args.manifest)}
    write_provenance(out / "provenance.json", "prepare", cfg, inputs)
    print(f"prepared {len(train_set)} training and {len(val_set) if val_set else 0} validation segments in {out}")
    return 0


# -- train ------------------------------------------------------------------


def cmd_train(args, cfg):
    src = _require(args.data, "prepared dataset directory")
    train_set = data.SampleSet.load(_require(src / "train.bin", "training set"))
    val_set = data.SampleSet.load(src / "val.bin") if (src / "val.bin").exists() else None
    stats = load_norm(src / "norm.bin")
    expected = (5, 128, 128), (80, 20)
    for name, ds in (("train", train_set), ("val", val_set)):
        if ds is not None and (ds.video.shape[1:], ds.noisy.shape[1:]) != expected:
            raise DataError(f"{name} set shapes {ds.video.shape[1:]}, {ds.noisy.shape[1:]} do not fit the network")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = None if args.no_checkpoint else str(out / "checkpoints")
    net = training.build_trainer_network(network_config(cfg), stats)
    result = training.fit(net, train_set, val_set, train_config(cfg, ckpt), resume=args.resume)
    save_weights(net, out / "weights.bin", {"best_epoch": result.best_epoch})
    (out / "history.csv").write_text(result.to_csv())
    inputs = {name: file_digest(src / name) for name in ("train.bin", "val.bin", "norm.bin") if (src / name).exists()}
    write_provenance(
        out / "provenance.json", "train", cfg, inputs,
        {"best_epoch": result.best_epoch, "best_loss": result.best_loss, "epochs_run": len(result.history)},
    )
    print(f"trained {len(result.history)} epochs; best validation loss {result.best_loss:.6g} at epoch {result.best_epoch}")
    return 0


# -- enhance ----------------------------------------------------------------


def cmd_enhance(args, cfg):
    net = load_weights(_require(args.weights, "weights file"))
    frames = data.read_frames(args.frames)
    noisy = dsp.read_wav(_require(args.wav, "audio file"))
    result = pipeline.enhance(net, frames, noisy)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out, result.waveform)
    inputs = {"weights": file_digest(args.weights), "frames": file_digest(args.frames), "wav": file_digest(args.wav)}
    extra = {"segments": result.n_segments, "dropped_seconds": result.dropped_seconds, "network": net.cfg.to_dict()}
    write_provenance(out.with_name(out.stem + ".provenance.json"), "enhance", cfg, inputs, extra)
    msg = f"wrote {out} ({result.waveform.duration:.3f} s, {result.n_segments} segments"
    if result.dropped_seconds > 0:
        msg += f"; {result.dropped_seconds:.3f} s of trailing input dropped"
    print(msg + ")")
    return 0


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args, cfg):
    manifest = data.load_manifest(args.manifest)
    if not manifest:
        raise DataError(f"{args.manifest}: test manifest is empty")
    noise = load_noise_dir(args.noise_dir)
    d = cfg["data"]
    items = metrics.items_from_mixtures(
        data.build_mixtures(manifest, noise, d["self_fraction"], d["snr_db"], cfg["seed"])
    )
    reports = [metrics.evaluate(None, items)]
    inputs = {"manifest": file_digest(args.manifest)}
    if args.weights is not None:
        net = load_weights(_require(args.weights, "weights file"))
        label = "Audio-only" if net.cfg.mode == "audio_only" else "Audio-visual"
        reports.append(metrics.evaluate(net, items, label))
        inputs["weights"] = file_digest(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {r.label: r.to_dict() for r in reports}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    table = metrics.format_table(reports)
    (out / "report.txt").write_text(table)
    write_provenance(out / "provenance.json", "evaluate", cfg, inputs)
    print(table, end="")
    return 0


# -- synth ------------------------------------------------------------------


def cmd_synth(args, cfg):
    rng = np.random.default_rng(cfg["seed"])
    speakers = synthetic.make_speakers(args.speakers + args.interferers, rng)
    targets, others = speakers[: args.speakers], speakers[args.speakers :]
    out = Path(args.out)
    synthetic.write_corpus(out / "train", targets, args.clips, args.frames, seed=cfg["seed"] + 1)
    synthetic.write_corpus(out / "test", targets, max(2, args.clips // 4), args.frames, seed=cfg["seed"] + 2)
    interferers = others or targets
    synthetic.write_noise_dir(out / "noise", interferers, args.noise_files, args.noise_files, args.frames, cfg["seed"] + 3)
    write_provenance(out / "provenance.json", "synth", cfg, extra={"speakers": [s.speaker_id for s in speakers]})
    print(f"wrote synthetic corpus to {out}")
    return 0


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avse", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed")

    def data_flags(sp):
        sp.add_argument("--self-fraction", type=float, dest="self_fraction")
        sp.add_argument("--snr-db", type=float, dest="snr_db")
        sp.add_argument("--noise-dir", help="directory with speech_other/ and ambient/ WAV files")

    sp = sub.add_parser("prepare", help="mix clips with noise and write training segments")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--val-fraction", type=float, dest="val_fraction")
    data_flags(sp)
    common(sp)

    sp = sub.add_parser("train", help="train a network on a prepared dataset")
    sp.add_argument("--data", required=True, help="output directory of 'prepare'")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("audio_visual", "audio_only"))
    sp.add_argument("--epochs", type=int, dest="max_epochs")
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float, dest="initial_lr")
    sp.add_argument("--no-checkpoint", action="store_true", help="do not write per-epoch checkpoints")
    sp.add_argument("--no-resume", dest="resume", action="store_false", help="ignore an existing checkpoint")
    common(sp)

    sp = sub.add_parser("enhance", help="enhance one (frames, noisy wav) pair")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--frames", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("evaluate", help="score noisy and enhanced audio on a test manifest")
    sp.add_argument("--weights", help="omit to report only the noisy baseline")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    data_flags(sp)
    common(sp)

    sp = sub.add_parser("synth", help="write a synthetic demo corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=1)
    sp.add_argument("--interferers", type=int, default=3)
    sp.add_argument("--clips", type=int, default=12)
    sp.add_argument("--frames", type=int, default=50)
    sp.add_argument("--noise-files", type=int, default=6, dest="noise_files")
    common(sp)
    return p


_OVERRIDES = {
    "self_fraction": "data.self_fraction",
    "snr_db": "data.snr_db",
    "val_fraction": "data.val_fraction",
    "mode": "network.mode",
    "max_epochs": "train.max_epochs",
    "batch_size": "train.batch_size",
    "initial_lr": "train.initial_lr",
    "seed": "seed",
}

COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    started = time.perf_counter()
    try:
        overrides = {dotted: getattr(args, name, None) for name, dotted in _OVERRIDES.items()}
        cfg = load_config(args.config, overrides)
        code = COMMANDS[args.command](args, cfg)
    except AvseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
