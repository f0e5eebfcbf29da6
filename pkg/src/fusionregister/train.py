"""Optimisation loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import RunConfig, config_from_flat, random_crop
from .errors import CheckpointError, ContractError, TrainingAbort
from .losses import LossWeights, total_loss
from .network import FusionRegister, image_pyramid
from .simulate import make_training_sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BETAS = (0.9, 0.999)
LOG_FIELDS = ("step", "epoch", "lr", "total", "edge", "global", "frequency", "detail")


def lr_schedule(step, total_steps, lr_start=2e-4, lr_end=1e-6):
    """Cosine annealing from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_start
    if step == total_steps:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainState:
    config: RunConfig
    model: FusionRegister
    optimizer: torch.optim.Adam
    total_steps: int
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    best_loss: float = math.inf


def init_state(config, total_steps=None, seed=None):
    seed = config.rng_seed if seed is None else seed
    torch.manual_seed(seed)
    model = FusionRegister(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_start, betas=BETAS)
    if total_steps is None:
        total_steps = max(config.epochs, 1)
    return TrainState(config, model, opt, total_steps, rng=np.random.default_rng(seed))


def collate(batch):
    if not batch:
        raise ContractError("empty batch")
    shapes = {s.fused.shape[1:] for s in batch}
    if len(shapes) != 1:
        raise ContractError(f"batch mixes shapes {sorted(map(tuple, shapes))}")
    cat = lambda name: torch.cat([getattr(s, name) for s in batch], dim=0)
    return cat("visible"), cat("infrared_deformed"), cat("fused"), cat("fused_registered")


def train_step(state, batch, weights=None, lr=None):
    """One Adam update on ``batch``; returns ``(state, loss, components)``.

    The returned loss is the value before the update. ``lr`` overrides the
    cosine schedule.
    """
    weights = weights or state.config.loss_weights
    vi, ir, fused, gt = collate(batch)
    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    outputs = model(vi, ir, fused)
    gts = image_pyramid(gt, model.depth)
    loss, comps = total_loss(outputs, gts, weights)
    if not math.isfinite(float(loss.detach())):
        raise TrainingAbort("total", {k: float(v.detach()) for k, v in comps.items()})
    loss.backward()
    if state.config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), state.config.grad_clip)
    if lr is None:
        lr = lr_schedule(
            min(state.step, state.total_steps),
            state.total_steps,
            state.config.lr_start,
            state.config.lr_end,
        )
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1
    return state, float(loss.detach()), {k: float(v.detach()) for k, v in comps.items()}


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive (numpy .npz) of named arrays:
#   param/<name>   model parameters and buffers
#   adam_m/<name>  Adam first moments, adam_v/<name> second moments
#   rng/torch      torch CPU generator state
#   manifest       UTF-8 JSON: version, config (flat), architecture hash,
#                  step, epoch, total_steps, best_loss, adam_step, numpy rng state


def _adam_state(state):
    names = dict(state.model.named_parameters())
    by_id = {id(p): n for n, p in names.items()}
    out = {}
    for p, st in state.optimizer.state.items():
        out[by_id[id(p)]] = st
    return out


def save_checkpoint(state, path, loss=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, t in state.model.state_dict().items():
        arrays[f"param/{name}"] = t.detach().cpu().numpy()
    adam_step = 0
    for name, st in _adam_state(state).items():
        arrays[f"adam_m/{name}"] = st["exp_avg"].cpu().numpy()
        arrays[f"adam_v/{name}"] = st["exp_avg_sq"].cpu().numpy()
        adam_step = int(st["step"])
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_flat(),
        "config_hash": state.config.architecture_hash(),
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
        "best_loss": None if math.isinf(state.best_loss) else state.best_loss,
        "loss": loss,
        "adam_step": adam_step,
        "numpy_rng": state.rng.bit_generator.state,
    }
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` or raise :class:`CheckpointError`."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if "manifest" not in arrays:
        raise CheckpointError(f"{path}: no manifest")
    try:
        manifest = json.loads(arrays.pop("manifest").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    return manifest, arrays


def load_checkpoint(path, config=None):
    """Rebuild a :class:`TrainState` from ``path``.

    With ``config`` given, its architecture hash must match the manifest's.
    """
    manifest, arrays = read_checkpoint(path)
    saved_cfg = config_from_flat(manifest["config"])
    if saved_cfg.architecture_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: manifest hash does not match its config")
    if config is not None and config.architecture_hash() != manifest["config_hash"]:
        raise CheckpointError(
            f"{path}: architecture mismatch (checkpoint {manifest['config_hash']}, "
            f"requested {config.architecture_hash()})"
        )
    cfg = config or saved_cfg

    model = FusionRegister(cfg)
    sd = model.state_dict()
    try:
        loaded = {k: torch.from_numpy(arrays[f"param/{k}"].copy()) for k in sd}
        model.load_state_dict(loaded)
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: parameter set mismatch: {exc}") from exc

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start, betas=BETAS)
    for name, p in model.named_parameters():
        if f"adam_m/{name}" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(manifest["adam_step"])),
                "exp_avg": torch.from_numpy(arrays[f"adam_m/{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam_v/{name}"].copy()),
            }
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["numpy_rng"]
    best = manifest["best_loss"]
    return TrainState(
        cfg,
        model,
        opt,
        manifest["total_steps"],
        step=manifest["step"],
        epoch=manifest["epoch"],
        rng=rng,
        best_loss=math.inf if best is None else best,
    )


# ---------------------------------------------------------------------------
# epoch loop


def make_batch(pairs, indices, state):
    cfg = state.config
    batch = []
    for i in indices:
        vi, ir = pairs[i][0], pairs[i][1]
        if vi.shape[-1] > cfg.patch_size or vi.shape[-2] > cfg.patch_size:
            vi, ir = random_crop([vi, ir], cfg.patch_size, state.rng)
        batch.append(
            make_training_sample(
                vi, ir, state.rng, fuser=cfg.fuser, deform_only_ir=cfg.deform_only_ir
            )
        )
    return batch


def steps_per_epoch(n_pairs, batch_size):
    return max(1, math.ceil(n_pairs / batch_size))


def fit(state, pairs, out_dir=None, epochs=None, on_step=None):
    """Train over ``pairs`` (``(vi, ir)`` tensors) for ``epochs`` passes.

    Each epoch reshuffles the pairs and draws a fresh misregistration per
    sample. With ``out_dir`` set, ``log.csv`` gets one row per step and
    ``ckpt/`` receives ``last.npz``, ``best.npz`` and ``epoch_XXXX.npz``.
    Returns the list of per-step loss rows.
    """
    cfg = state.config
    epochs = cfg.epochs if epochs is None else epochs
    per_epoch = steps_per_epoch(len(pairs), cfg.batch_size)
    rows = []
    writer = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        fresh = not log_path.exists() or state.step == 0
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        start = state.epoch
        for epoch in range(start, start + epochs):
            order = state.rng.permutation(len(pairs))
            epoch_losses = []
            for k in range(per_epoch):
                idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                batch = make_batch(pairs, idx, state)
                lr = lr_schedule(
                    min(state.step, state.total_steps),
                    state.total_steps,
                    cfg.lr_start,
                    cfg.lr_end,
                )
                _, loss, comps = train_step(state, batch, lr=lr)
                row = {"step": state.step, "epoch": epoch, "lr": lr, "total": loss, **comps}
                rows.append(row)
                epoch_losses.append(loss)
                if writer:
                    writer.writerow(row)
                if on_step:
                    on_step(row)
            state.epoch = epoch + 1
            mean_loss = float(np.mean(epoch_losses))
            log.info("epoch %d loss %.5f", epoch, mean_loss)
            if out_dir is not None:
                fh.flush()
                ckpt = out_dir / "ckpt"
                improved = mean_loss < state.best_loss
                if improved:
                    state.best_loss = mean_loss
                save_checkpoint(state, ckpt / f"epoch_{epoch:04d}.npz", mean_loss)
                save_checkpoint(state, ckpt / "last.npz", mean_loss)
                if improved:
                    save_checkpoint(state, ckpt / "best.npz", mean_loss)
            elif mean_loss < state.best_loss:
                state.best_loss = mean_loss
    finally:
        if fh:
            fh.close()
    return rows

