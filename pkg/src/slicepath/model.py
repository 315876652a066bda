"""Differentiable forward computation: a small trainable patch-token slice
encoder (ViT-style, 256 tokens for 224x224 inputs) and a conditional 1D U-Net
denoiser with FiLM timestep conditioning and multi-scale cross-attention onto
the patch tokens. All functions are pure given a parameter dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import IMAGE_SIZE, SliceImage


class ShapeMismatch(ValueError):
    """Input shape violates the model contract."""


# re-exported: training catches this around backward passes
NonFiniteGradient = ad.NonFiniteGradient


@dataclass(frozen=True)
class EncoderConfig:
    """Patch-token transformer encoder; interface-compatible with a frozen
    pretrained backbone producing 256 tokens, but small and trained end-to-end."""

    patch_size: int = 14
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image side must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2

    def to_json(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "image_size": self.image_size,
        }


@dataclass(frozen=True)
class UNetConfig:
    """1D U-Net over (X, Y, E) sequences."""

    in_channels: int = 3
    base_channels: int = 128
    multipliers: tuple = (2, 2, 4, 6, 8)
    head_dim: int = 32
    attn_scales: tuple | None = None  # None: the three deepest scales
    groups: int = 8
    token_dim: int = 64

    def __post_init__(self):
        if len(self.multipliers) < 1:
            raise ValueError("need at least one resolution scale")
        for channels in self.channels:
            heads = self.heads_for(channels)
            if channels % heads:
                raise ValueError(f"channels {channels} not divisible into heads")

    @property
    def channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.multipliers)

    @property
    def scales(self) -> int:
        return len(self.multipliers)

    @property
    def length_divisor(self) -> int:
        return 2 ** (self.scales - 1)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def heads_for(self, channels: int) -> int:
        return max(1, channels // self.head_dim)

    def attention_scales(self) -> tuple:
        if self.attn_scales is not None:
            return tuple(self.attn_scales)
        return tuple(range(max(0, self.scales - 3), self.scales))

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "multipliers": list(self.multipliers),
            "head_dim": self.head_dim,
            "attn_scales": None if self.attn_scales is None else list(self.attn_scales),
            "groups": self.groups,
            "token_dim": self.token_dim,
        }


def config_from_json(data: dict) -> tuple[EncoderConfig, UNetConfig]:
    enc = EncoderConfig(**data["encoder"])
    raw = dict(data["unet"])
    raw["multipliers"] = tuple(raw["multipliers"])
    if raw.get("attn_scales") is not None:
        raw["attn_scales"] = tuple(raw["attn_scales"])
    return enc, UNetConfig(**raw)


# ---------------------------------------------------------------------------
# Parameters

class Parameters(dict):
    """Named parameter arrays; names unique by construction (dict keys)."""

    def check_finite(self) -> None:
        for name, tensor in self.items():
            if not np.isfinite(tensor.data).all():
                raise ArithmeticError(f"parameter {name!r} is non-finite")

    def arrays(self) -> dict:
        return {name: tensor.data for name, tensor in self.items()}


class _Init:
    """Collects parameters with deterministic creation order."""

    def __init__(self, rng, dtype=float):
        self.rng = rng
        self.dtype = dtype
        self.params = Parameters()

    def dense(self, name, fan_in, fan_out):
        scale = 1.0 / math.sqrt(fan_in)
        self.params[f"{name}.w"] = ad.parameter(
            self.rng.normal(0.0, scale, (fan_in, fan_out)), self.dtype
        )
        self.params[f"{name}.b"] = ad.parameter(np.zeros(fan_out), self.dtype)

    def conv(self, name, c_in, c_out, kernel):
        scale = 1.0 / math.sqrt(c_in * kernel)
        self.params[f"{name}.w"] = ad.parameter(
            self.rng.normal(0.0, scale, (c_out, c_in, kernel)), self.dtype
        )
        self.params[f"{name}.b"] = ad.parameter(np.zeros((c_out, 1)), self.dtype)

    def norm(self, name, channels):
        self.params[f"{name}.g"] = ad.parameter(np.ones(channels), self.dtype)
        self.params[f"{name}.b"] = ad.parameter(np.zeros(channels), self.dtype)

    def raw(self, name, array):
        self.params[name] = ad.parameter(array, self.dtype)


def init_params(enc_cfg: EncoderConfig, unet_cfg: UNetConfig, rng, dtype=float) -> Parameters:
    """Create all trainable arrays for encoder, U-Net, and length head.

    ``dtype=np.float32`` roughly halves step time; float64 (default) is used
    wherever gradients are checked against finite differences.
    """
    if enc_cfg.embed_dim != unet_cfg.token_dim:
        raise ValueError("encoder embed_dim must match unet token_dim")
    init = _Init(rng, dtype)
    _init_encoder(init, enc_cfg)
    _init_unet(init, unet_cfg)
    _init_length_head(init, enc_cfg)
    return init.params


# ---------------------------------------------------------------------------
# shared layer helpers

def _dense(params, name, x: Tensor) -> Tensor:
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _conv(params, name, x: Tensor, stride=1, padding=0) -> Tensor:
    return ad.conv1d(x, params[f"{name}.w"], stride=stride, padding=padding) + params[f"{name}.b"]


def _group_norm(params, name, x: Tensor, groups: int) -> Tensor:
    channels = x.shape[1]
    normed = ad.group_norm(x, groups=min(groups, channels))
    gamma = ad.reshape(params[f"{name}.g"], (1, channels, 1))
    beta = ad.reshape(params[f"{name}.b"], (1, channels, 1))
    return normed * gamma + beta


def _layer_norm(params, name, x: Tensor) -> Tensor:
    return ad.layer_norm(x) * params[f"{name}.g"] + params[f"{name}.b"]


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, tuple(axes))


def attention(q, k, v) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_h)) V over the key axis.

    Accepts (..., N, d) queries against (..., P, d) keys/values; rows of the
    softmax sum to 1 and the mix is permutation-invariant over (K, V) pairs.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    return ad.scaled_dot_attention(q, k, v)


def _split_heads_tokens(t: Tensor, heads: int) -> Tensor:
    # (B, P, C) -> (B, H, P, C/H)
    b, p, c = t.shape
    return ad.transpose(ad.reshape(t, (b, p, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads_tokens(t: Tensor) -> Tensor:
    # (B, H, P, d) -> (B, P, H*d)
    b, h, p, d = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (b, p, h * d))


def _split_heads_seq(t: Tensor, heads: int) -> Tensor:
    # (B, C, L) -> (B, H, L, C/H)
    b, c, length = t.shape
    return ad.transpose(ad.reshape(t, (b, heads, c // heads, length)), (0, 1, 3, 2))


def _merge_heads_seq(t: Tensor) -> Tensor:
    # (B, H, L, d) -> (B, H*d, L)
    b, h, length, d = t.shape
    return ad.reshape(ad.transpose(t, (0, 1, 3, 2)), (b, h * d, length))


# ---------------------------------------------------------------------------
# slice encoder

def _init_encoder(init: _Init, cfg: EncoderConfig):
    patch_dim = cfg.patch_size**2
    init.dense("enc.patch", patch_dim, cfg.embed_dim)
    init.raw("enc.posemb", init.rng.normal(0.0, 0.02, (cfg.tokens, cfg.embed_dim)))
    for d in range(cfg.depth):
        p = f"enc.block{d}"
        init.norm(f"{p}.ln1", cfg.embed_dim)
        init.dense(f"{p}.q", cfg.embed_dim, cfg.embed_dim)
        init.dense(f"{p}.k", cfg.embed_dim, cfg.embed_dim)
        init.dense(f"{p}.v", cfg.embed_dim, cfg.embed_dim)
        init.dense(f"{p}.proj", cfg.embed_dim, cfg.embed_dim)
        init.norm(f"{p}.ln2", cfg.embed_dim)
        init.dense(f"{p}.mlp1", cfg.embed_dim, 4 * cfg.embed_dim)
        init.dense(f"{p}.mlp2", 4 * cfg.embed_dim, cfg.embed_dim)
    init.norm("enc.final", cfg.embed_dim)


def _patchify(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    b = images.shape[0]
    g, p = cfg.grid, cfg.patch_size
    patches = images.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4)
    return patches.reshape(b, cfg.tokens, p * p)


def encode(image, params: Parameters, cfg: EncoderConfig) -> Tensor:
    """Map 224x224 grayscale input(s) to P x D patch tokens.

    A single SliceImage or (H, W) array yields (P, D); a (B, H, W) batch
    yields (B, P, D).
    """
    single = False
    if isinstance(image, SliceImage):
        image = image.pixels
        single = True
    dtype = params["enc.patch.w"].data.dtype
    image = np.asarray(image, dtype=dtype)
    if image.ndim == 2:
        image = image[None]
        single = True
    if image.ndim != 3 or image.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeMismatch(f"expected (B, {cfg.image_size}, {cfg.image_size}), got {image.shape}")

    x = _dense(params, "enc.patch", Tensor(_patchify(image, cfg)))
    x = x + params["enc.posemb"]
    for d in range(cfg.depth):
        p = f"enc.block{d}"
        h = _layer_norm(params, f"{p}.ln1", x)
        q = _split_heads_tokens(_dense(params, f"{p}.q", h), cfg.heads)
        k = _split_heads_tokens(_dense(params, f"{p}.k", h), cfg.heads)
        v = _split_heads_tokens(_dense(params, f"{p}.v", h), cfg.heads)
        attended = _merge_heads_tokens(attention(q, k, v))
        x = x + _dense(params, f"{p}.proj", attended)
        h = _layer_norm(params, f"{p}.ln2", x)
        x = x + _dense(params, f"{p}.mlp2", ad.silu(_dense(params, f"{p}.mlp1", h)))
    x = _layer_norm(params, "enc.final", x)
    if single:
        return ad.reshape(x, (cfg.tokens, cfg.embed_dim))
    return x


# ---------------------------------------------------------------------------
# length head (predicts the valid-keypoint fraction from pooled tokens)

def _init_length_head(init: _Init, cfg: EncoderConfig):
    init.dense("len.fc1", cfg.embed_dim, cfg.embed_dim)
    init.dense("len.fc2", cfg.embed_dim, 1)


def predict_length_fraction(tokens: Tensor, params: Parameters) -> Tensor:
    """Mean-pool tokens -> sigmoid fraction of valid positions, shape (B,)."""
    tokens = ad.as_tensor(tokens)
    if tokens.ndim == 2:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    pooled = ad.mean(tokens, axis=1)
    h = ad.silu(_dense(params, "len.fc1", pooled))
    frac = ad.sigmoid(_dense(params, "len.fc2", h))
    return ad.reshape(frac, (frac.shape[0],))


def predicted_length(tokens, params: Parameters, n_max: int) -> np.ndarray:
    """Rounded valid-length prediction, clamped to [1, n_max]."""
    frac = predict_length_fraction(tokens, params).data
    return np.clip(np.rint(frac * n_max).astype(int), 1, n_max)


# ---------------------------------------------------------------------------
# denoiser U-Net

def _init_res_block(init: _Init, name: str, c_in: int, c_out: int, time_dim: int):
    init.norm(f"{name}.gn1", c_in)
    init.conv(f"{name}.conv1", c_in, c_out, 3)
    init.dense(f"{name}.film", time_dim, 2 * c_out)
    init.norm(f"{name}.gn2", c_out)
    init.conv(f"{name}.conv2", c_out, c_out, 3)
    if c_in != c_out:
        init.conv(f"{name}.skip", c_in, c_out, 1)


def _init_self_attention(init: _Init, name: str, channels: int):
    init.norm(f"{name}.gn", channels)
    init.conv(f"{name}.qkv", channels, 3 * channels, 1)
    init.conv(f"{name}.proj", channels, channels, 1)


def _init_cross_attention(init: _Init, name: str, channels: int, token_dim: int):
    init.norm(f"{name}.gn", channels)
    init.conv(f"{name}.q", channels, channels, 1)
    init.dense(f"{name}.k", token_dim, channels)
    init.dense(f"{name}.v", token_dim, channels)
    init.conv(f"{name}.proj", channels, channels, 1)


def _init_unet(init: _Init, cfg: UNetConfig):
    chans = cfg.channels
    attn = cfg.attention_scales()
    init.conv("unet.in", cfg.in_channels, cfg.base_channels, 1)
    init.dense("unet.time1", cfg.base_channels, cfg.time_dim)
    init.dense("unet.time2", cfg.time_dim, cfg.time_dim)
    ch = cfg.base_channels
    for s, c_out in enumerate(chans):
        _init_res_block(init, f"unet.down{s}.res", ch, c_out, cfg.time_dim)
        if s in attn:
            _init_self_attention(init, f"unet.down{s}.sattn", c_out)
            _init_cross_attention(init, f"unet.down{s}.xattn", c_out, cfg.token_dim)
        if s < cfg.scales - 1:
            init.conv(f"unet.down{s}.down", c_out, c_out, 3)
        ch = c_out
    _init_res_block(init, "unet.mid.res1", ch, ch, cfg.time_dim)
    _init_cross_attention(init, "unet.mid.xattn", ch, cfg.token_dim)
    _init_res_block(init, "unet.mid.res2", ch, ch, cfg.time_dim)
    for s in reversed(range(cfg.scales)):
        c_skip = chans[s]
        _init_res_block(init, f"unet.up{s}.res", ch + c_skip, c_skip, cfg.time_dim)
        if s in attn:
            _init_self_attention(init, f"unet.up{s}.sattn", c_skip)
            _init_cross_attention(init, f"unet.up{s}.xattn", c_skip, cfg.token_dim)
        if s > 0:
            init.conv(f"unet.up{s}.upconv", c_skip, c_skip, 3)
        ch = c_skip
    init.norm("unet.out.gn", ch)
    init.conv("unet.out.conv", ch, cfg.in_channels, 1)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Timestep encoding with frequency ladder 10000^(-2k/dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


def _res_block(params, name, x, t_emb, cfg) -> Tensor:
    c_out = params[f"{name}.conv1.w"].shape[0]
    h = ad.silu(_group_norm(params, f"{name}.gn1", x, cfg.groups))
    h = _conv(params, f"{name}.conv1", h, padding=1)
    film = _dense(params, f"{name}.film", ad.silu(t_emb))
    b = film.shape[0]
    scale = ad.reshape(film[:, :c_out], (b, c_out, 1))
    shift = ad.reshape(film[:, c_out:], (b, c_out, 1))
    h = _group_norm(params, f"{name}.gn2", h, cfg.groups) * (scale + 1.0) + shift
    h = _conv(params, f"{name}.conv2", ad.silu(h), padding=1)
    if f"{name}.skip.w" in params:
        x = _conv(params, f"{name}.skip", x)
    return h + x


def _self_attention_block(params, name, x, cfg) -> Tensor:
    channels = x.shape[1]
    heads = cfg.heads_for(channels)
    h = _group_norm(params, f"{name}.gn", x, cfg.groups)
    qkv = _conv(params, f"{name}.qkv", h)
    q = _split_heads_seq(qkv[:, :channels, :], heads)
    k = _split_heads_seq(qkv[:, channels : 2 * channels, :], heads)
    v = _split_heads_seq(qkv[:, 2 * channels :, :], heads)
    mixed = _merge_heads_seq(attention(q, k, v))
    return x + _conv(params, f"{name}.proj", mixed)


def _cross_attention_block(params, name, x, tokens, cfg) -> Tensor:
    channels = x.shape[1]
    heads = cfg.heads_for(channels)
    h = _group_norm(params, f"{name}.gn", x, cfg.groups)
    q = _split_heads_seq(_conv(params, f"{name}.q", h), heads)
    k = _split_heads_tokens(_dense(params, f"{name}.k", tokens), heads)
    v = _split_heads_tokens(_dense(params, f"{name}.v", tokens), heads)
    mixed = _merge_heads_seq(attention(q, k, v))
    return x + _conv(params, f"{name}.proj", mixed)


def denoise(x_t, t, tokens, params: Parameters, cfg: UNetConfig) -> Tensor:
    """Predict clean keypoints from noisy input conditioned on patch tokens.

    ``x_t`` is (3, L) or (B, 3, L); output shape equals the input shape. The
    sequence is zero-padded to the next multiple of the length divisor and
    cropped after decoding.
    """
    x_t = ad.as_tensor(x_t)
    single = x_t.ndim == 2
    if single:
        x_t = ad.reshape(x_t, (1,) + x_t.shape)
    if x_t.ndim != 3 or x_t.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"expected (B, {cfg.in_channels}, L), got {x_t.shape}")
    tokens = ad.as_tensor(tokens)
    if tokens.ndim == 2:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    if tokens.shape[0] != x_t.shape[0] or tokens.shape[2] != cfg.token_dim:
        raise ShapeMismatch(f"tokens {tokens.shape} incompatible with x_t {x_t.shape}")

    length = x_t.shape[-1]
    pad = (-length) % cfg.length_divisor
    h = ad.pad_last(x_t, 0, pad) if pad else x_t

    dtype = params["unet.in.w"].data.dtype
    t_emb = Tensor(sinusoidal_embedding(t, cfg.base_channels).astype(dtype))
    if t_emb.shape[0] == 1 and x_t.shape[0] > 1:
        t_emb = Tensor(np.repeat(t_emb.data, x_t.shape[0], axis=0))
    t_emb = _dense(params, "unet.time2", ad.silu(_dense(params, "unet.time1", t_emb)))

    attn = cfg.attention_scales()
    h = _conv(params, "unet.in", h)
    skips = []
    for s in range(cfg.scales):
        h = _res_block(params, f"unet.down{s}.res", h, t_emb, cfg)
        if s in attn:
            h = _self_attention_block(params, f"unet.down{s}.sattn", h, cfg)
            h = _cross_attention_block(params, f"unet.down{s}.xattn", h, tokens, cfg)
        skips.append(h)
        if s < cfg.scales - 1:
            h = _conv(params, f"unet.down{s}.down", h, stride=2, padding=1)

    h = _res_block(params, "unet.mid.res1", h, t_emb, cfg)
    h = _cross_attention_block(params, "unet.mid.xattn", h, tokens, cfg)
    h = _res_block(params, "unet.mid.res2", h, t_emb, cfg)

    for s in reversed(range(cfg.scales)):
        h = ad.concat([h, skips[s]], axis=1)
        h = _res_block(params, f"unet.up{s}.res", h, t_emb, cfg)
        if s in attn:
            h = _self_attention_block(params, f"unet.up{s}.sattn", h, cfg)
            h = _cross_attention_block(params, f"unet.up{s}.xattn", h, tokens, cfg)
        if s > 0:
            h = ad.upsample_linear(h)
            h = _conv(params, f"unet.up{s}.upconv", h, padding=1)

    h = ad.silu(_group_norm(params, "unet.out.gn", h, cfg.groups))
    out = _conv(params, "unet.out.conv", h)
    if pad:
        out = out[:, :, :length]
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# gradients

def grad(loss_fn, params: Parameters, *inputs) -> dict:
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter.

    Returns {name: array} aligned with ``params``; parameters the loss never
    touches get zeros. Raises NonFiniteGradient on NaN/Inf.
    """
    for tensor in params.values():
        tensor.grad = None
    loss = loss_fn(params, *inputs)
    loss.backward()
    return {
        name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in params.items()
    }
