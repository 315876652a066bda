"""Training loop: AdamW with decoupled weight decay, global-norm gradient
clipping, reduce-on-plateau LR, deterministic seeding, and exact-resume
checkpoints.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion, model
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .model import EncoderConfig, Parameters, UNetConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteLoss(ArithmeticError):
    """Training loss or gradients became NaN/Inf; a diagnostic checkpoint is written."""


class NonFiniteParam(ArithmeticError):
    """Optimizer produced a NaN/Inf parameter."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 800
    lr0: float = 1e-4
    weight_decay: float = 1e-2
    plateau_factor: float = 0.9
    plateau_patience: int = 20
    min_lr: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    length_loss_weight: float = 0.01
    snr_gamma: float = 5.0
    timesteps: int = 500
    dtype: str = "f64"

    def __post_init__(self):
        if not (0 < self.plateau_factor < 1):
            raise ValueError("plateau_factor must be in (0, 1)")
        for name in ("batch_size", "epochs", "lr0", "weight_decay", "clip_norm"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def preset(name: str) -> tuple[EncoderConfig, UNetConfig, TrainConfig]:
    """Named configuration bundles.

    "paper" mirrors the published training setup (T=500, batch 64, 800 epochs,
    U-Net base 128 with multipliers (2,2,4,6,8)); "desk" is the reduced config
    used by the smoke and overfit runs (base 32, multipliers (2,2,4), T=100).
    """
    if name == "paper":
        return (
            EncoderConfig(embed_dim=64, depth=4, heads=4),
            UNetConfig(base_channels=128, multipliers=(2, 2, 4, 6, 8), token_dim=64),
            TrainConfig(),
        )
    if name == "desk":
        return (
            EncoderConfig(embed_dim=64, depth=4, heads=4),
            UNetConfig(base_channels=32, multipliers=(2, 2, 4), token_dim=64),
            TrainConfig(
                batch_size=8,
                epochs=500,
                lr0=1e-3,
                timesteps=100,
                val_fraction=0.0,
                dtype="f32",
            ),
        )
    raise ValueError(f"unknown preset {name!r} (expected 'desk' or 'paper')")


@dataclass
class TrainState:
    params: Parameters
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    lr: float = 1e-4
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    train_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def init_state(params: Parameters, cfg: TrainConfig, rng) -> TrainState:
    zeros = {name: np.zeros_like(t.data) for name, t in params.items()}
    return TrainState(
        params=params,
        m=zeros,
        v={name: z.copy() for name, z in zeros.items()},
        lr=cfg.lr0,
        rng=rng,
    )


# ---------------------------------------------------------------------------
# optimizer pieces

def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    total = math.sqrt(sum(float((g.astype(float) ** 2).sum()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads
    scale = clip_norm / total
    return {name: g * np.asarray(scale, dtype=g.dtype) for name, g in grads.items()}


def adamw_step(state: TrainState, grads: dict, cfg: TrainConfig) -> TrainState:
    """One AdamW update with decoupled weight decay (bias-corrected moments)."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for name, tensor in state.params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteParam(f"gradient for {name!r} is non-finite (clip first)")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + cfg.weight_decay * tensor.data
        tensor.data = tensor.data - np.asarray(state.lr, dtype=tensor.data.dtype) * update.astype(
            tensor.data.dtype
        )
        if not np.isfinite(tensor.data).all():
            raise NonFiniteParam(f"parameter {name!r} became non-finite")
    return state


def plateau_lr(history, cfg: TrainConfig) -> float:
    """LR after replaying the validation history through the plateau rule.

    An epoch without strict improvement over the best seen value counts
    against the patience; reaching it multiplies the LR by the factor.
    """
    lr = cfg.lr0
    best = math.inf
    bad = 0
    for value in history:
        if value < best:
            best = value
            bad = 0
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, cfg.min_lr)
                bad = 0
    return lr


# ---------------------------------------------------------------------------
# training loop

def _record_arrays(records, dtype):
    images = np.stack([r.image.pixels for r in records]).astype(dtype)
    x0 = np.stack([r.x0.T for r in records]).astype(dtype)
    masks = np.stack([r.mask for r in records]).astype(dtype)
    n_max = x0.shape[-1]
    fracs = np.array([r.true_len / n_max for r in records], dtype=dtype)
    return images, x0, masks, fracs


def _batch_loss(params, enc_cfg, unet_cfg, cfg, schedule, weights, images, x_t, x0, masks, fracs, t):
    tokens = model.encode(images, params, enc_cfg)
    x0_hat = model.denoise(x_t, t, tokens, params, unet_cfg)
    diff_loss = diffusion.loss(x0, x0_hat, masks, weights, t, schedule)
    frac_hat = model.predict_length_fraction(tokens, params)
    length_loss = ad.mean(ad.square(frac_hat - Tensor(fracs)))
    return diff_loss + cfg.length_loss_weight * length_loss, x0_hat


def train_loop(
    records,
    enc_cfg: EncoderConfig,
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    checkpoint_dir,
    resume=None,
    log_fn=None,
) -> TrainState:
    """Train on normalized records (images attached); returns the final state.

    Writes ``curve.csv`` (epoch, train_loss, val_loss, lr), ``last.ckpt``
    every epoch, and ``best.ckpt`` on validation improvement. ``resume``
    continues bit-exactly from a checkpoint written by this function.
    """
    records = list(records)
    if not records:
        raise ValueError("training needs a non-empty dataset")
    if any(r.image is None for r in records):
        raise ValueError("all records need slice images attached")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)

    dtype = cfg.np_dtype
    schedule = diffusion.make_cosine_schedule(cfg.timesteps)
    weights = diffusion.LossWeights(snr_gamma=cfg.snr_gamma)
    images, x0, masks, fracs = _record_arrays(records, dtype)

    # split is a pure function of the seed so resumed runs see the same fold
    split_rng = np.random.default_rng(cfg.seed)
    perm = split_rng.permutation(len(records))
    val_count = int(round(cfg.val_fraction * len(records)))
    val_idx, train_idx = perm[:val_count], perm[val_count:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training samples")

    if resume is not None:
        state = _load_state(resume, cfg)
    else:
        rng = np.random.default_rng(cfg.seed)
        params = model.init_params(enc_cfg, unet_cfg, rng, dtype=dtype)
        state = init_state(params, cfg, rng)

    config_json = {"encoder": enc_cfg.to_json(), "unet": unet_cfg.to_json(), "train": asdict(cfg)}
    curve_path = checkpoint_dir / "curve.csv"
    if state.epoch == 0 and curve_path.exists():
        curve_path.unlink()
    if not curve_path.exists():
        curve_path.write_text("epoch,train_loss,val_loss,lr\n")

    for epoch in range(state.epoch, cfg.epochs):
        order = state.rng.permutation(train_idx)
        epoch_losses = []
        epoch_mses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            t = state.rng.integers(0, cfg.timesteps, len(batch))
            noise = state.rng.standard_normal((len(batch), 3, x0.shape[-1])).astype(dtype)
            x_t = diffusion.q_sample(x0[batch], t, noise, schedule)
            for tensor in state.params.values():
                tensor.grad = None
            try:
                loss, x0_hat = _batch_loss(
                    state.params, enc_cfg, unet_cfg, cfg, schedule, weights,
                    images[batch], x_t, x0[batch], masks[batch], fracs[batch], t,
                )
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteGradient("loss is non-finite")
                loss.backward()
            except ad.NonFiniteGradient as err:
                _save_state(checkpoint_dir / "diagnostic.ckpt", state, config_json, cfg)
                raise NonFiniteLoss(f"epoch {epoch}: {err}") from err
            grads = {
                name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
                for name, tensor in state.params.items()
            }
            grads = clip_gradients(grads, cfg.clip_norm)
            adamw_step(state, grads, cfg)
            epoch_losses.append(float(loss.data))
            epoch_mses.append(diffusion.masked_mse(x0[batch], x0_hat, masks[batch]))

        train_loss = float(np.mean(epoch_losses))
        train_mse = float(np.mean(epoch_mses))
        if len(val_idx) > 0:
            val_metric = _validation_mse(
                state, enc_cfg, unet_cfg, cfg, schedule, images, x0, masks, val_idx, dtype
            )
        else:
            val_metric = train_mse
        state.train_history.append(train_mse)
        state.val_history.append(val_metric)
        state.lr = plateau_lr(state.val_history, cfg)
        state.epoch = epoch + 1

        with open(curve_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, repr(train_loss), repr(val_metric), repr(state.lr)])
        _save_state(checkpoint_dir / "last.ckpt", state, config_json, cfg)
        if val_metric < state.best_val:
            state.best_val = val_metric
            _save_state(checkpoint_dir / "best.ckpt", state, config_json, cfg)
        if log_fn is not None:
            log_fn(epoch, train_loss, val_metric, state.lr)
    return state


def _validation_mse(state, enc_cfg, unet_cfg, cfg, schedule, images, x0, masks, val_idx, dtype):
    """Masked MSE on held-out records; never backpropagates."""
    t = state.rng.integers(0, cfg.timesteps, len(val_idx))
    noise = state.rng.standard_normal((len(val_idx), 3, x0.shape[-1])).astype(dtype)
    x_t = diffusion.q_sample(x0[val_idx], t, noise, schedule)
    frozen = Parameters({name: Tensor(p.data) for name, p in state.params.items()})
    tokens = model.encode(images[val_idx], frozen, enc_cfg)
    x0_hat = model.denoise(x_t, t, tokens, frozen, unet_cfg)
    return diffusion.masked_mse(x0[val_idx], x0_hat, masks[val_idx])


# ---------------------------------------------------------------------------
# checkpoint plumbing

def _save_state(path, state: TrainState, config_json: dict, cfg: TrainConfig):
    arrays = dict(state.params.arrays())
    for name, m in state.m.items():
        arrays[f"opt.m.{name}"] = m
    for name, v in state.v.items():
        arrays[f"opt.v.{name}"] = v
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "lr": state.lr,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "train_history": state.train_history,
        "val_history": state.val_history,
        "rng_state": json.dumps(state.rng.bit_generator.state),
    }
    save_checkpoint(path, arrays, config_json, meta, dtype=cfg.dtype)


def _load_state(path, cfg: TrainConfig) -> TrainState:
    arrays, _, meta = load_checkpoint(path)
    params = Parameters()
    m, v = {}, {}
    for name, array in arrays.items():
        if name.startswith("opt.m."):
            m[name[len("opt.m.") :]] = array.copy()
        elif name.startswith("opt.v."):
            v[name[len("opt.v.") :]] = array.copy()
        else:
            params[name] = ad.parameter(array, dtype=array.dtype)
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    return TrainState(
        params=params,
        m=m,
        v=v,
        step=meta["step"],
        epoch=meta["epoch"],
        best_val=math.inf if meta["best_val"] is None else meta["best_val"],
        lr=meta["lr"],
        rng=rng,
        train_history=list(meta["train_history"]),
        val_history=list(meta["val_history"]),
    )


def load_model(path) -> tuple[Parameters, EncoderConfig, UNetConfig, dict]:
    """Load just the model parameters and configs from any checkpoint."""
    arrays, config, meta = load_checkpoint(path)
    enc_cfg, unet_cfg = model.config_from_json(config)
    params = Parameters()
    for name, array in arrays.items():
        if not name.startswith("opt."):
            params[name] = ad.parameter(array, dtype=array.dtype)
    return params, enc_cfg, unet_cfg, config
