"""Run management: model/dataset builders, the training loop, checkpoints,
and the append-only metrics log. A run directory holds ``config.resolved``,
``metrics.csv``, ``ckpt/latest`` and ``ckpt/polyak``, and ``grids/``.
"""

from __future__ import annotations

import csv
import json
import os
import time

import numpy as np

from . import data as data_mod
from .autodiff import NumericError, load_tensor, save_tensor
from .config import ConfigError, format_config, parse_config_text, resolve
from .model import VLAE, FreeBitsState, GrayscaleLocalARDecoder, UnconditionalAR
from .optim import make_optimizer

__all__ = [
    "build_model", "build_dataset", "build_state",
    "save_checkpoint", "load_checkpoint", "load_model",
    "run_training",
]

METRICS_COLUMNS = ["step", "recon_nats", "kl_nats", "elbo_nats", "gamma",
                   "grad_norm", "wallclock_s"]


def build_model(cfg: dict):
    shape = _image_shape(cfg)
    kind = cfg["model.decoder"]
    if kind == "unconditional":
        return UnconditionalAR(shape, n_layers=cfg["model.decoder_layers"],
                               filters=cfg["model.decoder_filters"],
                               ksize=cfg["model.decoder_ksize"],
                               seed=cfg["run.seed"])
    if kind == "vh-stack":
        dec_kwargs = {"n_vertical": cfg["model.vh_vertical"],
                      "n_horizontal": cfg["model.vh_horizontal"],
                      "filters": cfg["model.decoder_filters"],
                      "cond_channels": cfg["model.cond_channels"]}
    elif kind == "factorized":
        dec_kwargs = {}
    else:
        dec_kwargs = {"n_layers": cfg["model.decoder_layers"],
                      "filters": cfg["model.decoder_filters"],
                      "ksize": cfg["model.decoder_ksize"],
                      "cond_channels": cfg["model.cond_channels"],
                      "tied": cfg["model.decoder_tied"],
                      "residual": cfg["model.decoder_residual"]}
    return VLAE(shape, cfg["model.latent_dim"], decoder_kind=kind,
                flow_steps=cfg["model.flow_steps"],
                flow_mode=cfg["model.flow_mode"],
                flow_hidden=(cfg["model.flow_hidden"],),
                encoder_hidden=cfg["model.encoder_hidden"],
                seed=cfg["run.seed"], decoder_kwargs=dec_kwargs)


def _image_shape(cfg: dict) -> tuple:
    if cfg["data.kind"] in ("idx", "dataset-dir"):
        images = _raw_images(cfg)
        batched = images[:, None] if images.ndim == 3 else images
        return tuple(batched.shape[1:])
    return (1, cfg["data.height"], cfg["data.width"])


def _raw_images(cfg: dict) -> np.ndarray:
    kind = cfg["data.kind"]
    if kind == "idx":
        if not cfg["data.path"]:
            raise ConfigError("data.path: required for data.kind = idx")
        images = data_mod.load_idx(cfg["data.path"])
    elif kind == "dataset-dir":
        images = data_mod.load_dataset(cfg["data.path"]).images
    elif kind == "synth-texture":
        spec = data_mod.SynthSpec("local-texture", cfg["data.height"], cfg["data.width"],
                                  copy_prob=cfg["data.copy_prob"], seed=cfg["data.seed"])
        images = data_mod.synth(spec, cfg["data.n"]).images
    elif kind == "synth-shapes":
        spec = data_mod.SynthSpec("long-range-shapes", cfg["data.height"], cfg["data.width"],
                                  n_shapes=cfg["data.n_shapes"], noise=cfg["data.noise"],
                                  seed=cfg["data.seed"])
        images = data_mod.synth(spec, cfg["data.n"]).images
    else:
        raise ConfigError(f"data.kind: unknown kind {kind!r}")
    if cfg["data.limit"]:
        images = images[: cfg["data.limit"]]
    return images


def build_dataset(cfg: dict) -> data_mod.Dataset:
    """Base dataset before per-epoch dynamic binarization."""
    images = _raw_images(cfg)
    mode = cfg["data.binarization"]
    if mode == "none":
        return data_mod.Dataset(images)
    if mode == "static":
        return data_mod.binarize(images, "static")
    # dynamic: keep intensities; the training loop re-draws each epoch
    ds = data_mod.Dataset(images, binarization="dynamic")
    return ds


def build_state(cfg: dict) -> FreeBitsState:
    return FreeBitsState(mode=cfg["objective.mode"], lam=cfg["objective.lam"],
                         gamma=cfg["objective.gamma"],
                         threshold=cfg["objective.threshold"],
                         step_factor=cfg["objective.step_factor"],
                         update_every=cfg["objective.update_every"])


# ---------------------------------------------------------------------------
# checkpoints


def _blob_name(name: str) -> str:
    return name.replace("#", "_") + ".ndt"


def _save_blobs(directory, blobs: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, arr in blobs.items():
        save_tensor(os.path.join(directory, _blob_name(name)), np.asarray(arr, dtype=np.float64))


def _load_blobs(directory, names) -> dict:
    return {name: load_tensor(os.path.join(directory, _blob_name(name)))
            for name in names}


def save_checkpoint(directory, model, optimizer, state: FreeBitsState, rng,
                    step: int, cfg: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    _save_blobs(os.path.join(directory, "params"), model.state_arrays())
    _save_blobs(os.path.join(directory, "polyak"), model.state_arrays(polyak=True))
    if optimizer is not None:
        _save_blobs(os.path.join(directory, "opt"), optimizer.state_arrays())
    manifest = {
        "step": step,
        "config": cfg,
        "controller": {"mode": state.mode, "lam": state.lam, "gamma": state.gamma,
                       "threshold": state.threshold, "step_factor": state.step_factor,
                       "update_every": state.update_every,
                       "ema_kl": state.ema_kl, "ema_steps": state.ema_steps,
                       "gamma_history": state.gamma_history},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "has_optimizer": optimizer is not None,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_model(directory, polyak=False):
    """Rebuild a model from a checkpoint directory; returns (model, cfg, manifest)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = resolve(overrides=manifest["config"])
    model = build_model(cfg)
    names = [name for name, _ in model.named_parameters()]
    params = _load_blobs(os.path.join(directory, "params"), names)
    shadows = _load_blobs(os.path.join(directory, "polyak"), names)
    model.load_state_arrays(params, shadows)
    if polyak:
        model.use_polyak()
    return model, cfg, manifest


def load_checkpoint(directory, model, optimizer, state: FreeBitsState):
    """Restore full training state in place; returns (step, rng)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    names = [name for name, _ in model.named_parameters()]
    params = _load_blobs(os.path.join(directory, "params"), names)
    shadows = _load_blobs(os.path.join(directory, "polyak"), names)
    model.load_state_arrays(params, shadows)
    if optimizer is not None and manifest["has_optimizer"]:
        keys = ["t"] + [f"m{i}" for i in range(len(optimizer.params))] \
            + [f"v{i}" for i in range(len(optimizer.params))]
        optimizer.load_state_arrays(_load_blobs(os.path.join(directory, "opt"), keys))
    ctl = manifest["controller"]
    state.mode = ctl["mode"]
    state.lam = ctl["lam"]
    state.gamma = ctl["gamma"]
    state.threshold = ctl["threshold"]
    state.step_factor = ctl["step_factor"]
    state.update_every = ctl["update_every"]
    state.ema_kl = ctl["ema_kl"]
    state.ema_steps = ctl["ema_steps"]
    state.gamma_history = [tuple(g) for g in ctl["gamma_history"]]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = manifest["rng_state"]
    return manifest["step"], rng


# ---------------------------------------------------------------------------
# training loop


def run_training(cfg: dict, out_dir, resume=False, log=print) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "grids"), exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(format_config(cfg))

    base = build_dataset(cfg)
    model = build_model(cfg)
    optimizer = make_optimizer(cfg["optimizer.kind"], model.parameters(),
                               cfg["optimizer.lr"])
    state = build_state(cfg)

    latest_dir = os.path.join(out_dir, "ckpt", "latest")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    start_step = 0
    if resume and os.path.exists(os.path.join(latest_dir, "manifest.json")):
        start_step, rng = load_checkpoint(latest_dir, model, optimizer, state)
        log(f"resumed from step {start_step}")
    else:
        rng = np.random.default_rng(cfg["run.seed"])
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_COLUMNS)

    n = len(base)
    batch_size = min(cfg["run.batch"], n)
    steps_per_epoch = max(1, n // batch_size)
    dynamic = base.binarization == "dynamic"

    epoch_images = None
    t0 = time.monotonic()
    budget = cfg["run.time_budget_s"]
    last = {}
    step = start_step
    total = cfg["run.steps"]
    while step < total:
        if step % steps_per_epoch == 0 or epoch_images is None:
            if dynamic:
                # per-epoch seed derived from (run seed, epoch) so a resumed
                # run rebuilds the identical epoch without touching the main rng
                epoch = step // steps_per_epoch
                erng = np.random.default_rng([cfg["run.seed"], 7919, epoch])
                epoch_images = data_mod.binarize(base.images, "dynamic", erng).batched()
            else:
                epoch_images = base.batched()
        idx = rng.integers(0, n, size=batch_size)
        batch = epoch_images[idx]
        try:
            metrics = model.train_step(batch, optimizer, state, rng,
                                       polyak_alpha=cfg["optimizer.polyak"],
                                       debug_equivalence=cfg["objective.debug_equivalence"])
        except NumericError as exc:
            raise NumericError(f"step {step + 1}: {exc}") from exc
        step += 1
        last = metrics
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step, f"{metrics['recon']:.6f}", f"{metrics['kl']:.6f}",
                 f"{metrics['elbo']:.6f}", f"{metrics['gamma']:.6g}",
                 f"{metrics['grad_norm']:.6g}",
                 f"{time.monotonic() - t0:.3f}"])
        if step % cfg["run.checkpoint_every"] == 0 or step == total:
            save_checkpoint(latest_dir, model, optimizer, state, rng, step, cfg)
        if budget and time.monotonic() - t0 > budget:
            log(f"time budget reached at step {step}")
            break

    save_checkpoint(latest_dir, model, optimizer, state, rng, step, cfg)
    # the polyak directory is a standalone checkpoint with shadows as values
    saved = model.use_polyak()
    save_checkpoint(os.path.join(out_dir, "ckpt", "polyak"), model, None, state,
                    rng, step, cfg)
    model.restore(saved)
    return {"model": model, "optimizer": optimizer, "state": state, "rng": rng,
            "step": step, "last": last, "out_dir": out_dir}
