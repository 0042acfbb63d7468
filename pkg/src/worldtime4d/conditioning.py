"""Feature-level conditioning: time/camera encoders, AdaLN heads and two baselines.

Parameters live in flat ParamSets keyed ``<prefix>.<name>``; forward functions
take a mapping of Tensors so they can run under ``autodiff.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError


@dataclass(frozen=True)
class TimeEncoderConfig:
    r_t: int = 2
    embed: int = 64
    time_unit: float = 0.125  # multiplies tau * fps before the convolution


@dataclass(frozen=True)
class CameraEncoderConfig:
    patch: int = 2
    embed: int = 64
    moment_scale: float = 1.0 / 12.0  # keeps moments of 4-12 m rigs near unit range


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))


# -- time encoder --------------------------------------------------------------------
def init_time_encoder(rng, cfg, prefix="time_enc"):
    e = cfg.embed
    return ad.ParamSet({
        f"{prefix}.conv": rng.standard_normal((cfg.r_t, 1, e)) / np.sqrt(cfg.r_t),
        f"{prefix}.conv_b": rng.standard_normal(e) * 0.5,
        f"{prefix}.W1": _dense(rng, e, e),
        f"{prefix}.b1": np.zeros(e),
        f"{prefix}.W2": _dense(rng, e, e),
        f"{prefix}.b2": np.zeros(e),
    })


def _pad_tail(frames, r_t):
    """Pad the trailing partial window with its own mean (average-pool tail rule)."""
    n = frames.shape[-1]
    rem = n % r_t
    if rem == 0:
        return frames
    tail = frames[..., n - rem:].mean(axis=-1, keepdims=True)
    pad = np.repeat(tail, r_t - rem, axis=-1)
    return np.concatenate([frames, pad], axis=-1)


def encode_time(frame_times, p, cfg, fps, prefix="time_enc"):
    """Per-latent-frame embeddings from frame-level world times.

    ``frame_times``: (B, F) seconds (or a WorldTimeSequence for B = 1).
    Returns a Tensor (B, ceil(F / r_t), embed).
    """
    if hasattr(frame_times, "array"):
        fps = frame_times.fps
        frame_times = frame_times.array()[None, :]
    frame_times = np.atleast_2d(np.asarray(frame_times, dtype=np.float64))
    if frame_times.shape[-1] < cfg.r_t:
        raise DimensionError(f"{frame_times.shape[-1]} frames is fewer than the window {cfg.r_t}")
    x = _pad_tail(frame_times * fps * cfg.time_unit, cfg.r_t)[..., None]
    h = ad.conv1d(x, p[f"{prefix}.conv"], stride=cfg.r_t) + p[f"{prefix}.conv_b"]
    h = ad.silu(h)
    h = ad.silu(h @ p[f"{prefix}.W1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.W2"] + p[f"{prefix}.b2"]


# -- camera encoder --------------------------------------------------------------------
def init_camera_encoder(rng, cfg, prefix="cam_enc"):
    e, k = cfg.embed, cfg.patch
    return ad.ParamSet({
        f"{prefix}.conv1": rng.standard_normal((k, k, 6, e)) / np.sqrt(k * k * 6),
        f"{prefix}.b1": np.zeros(e),
        f"{prefix}.conv2": rng.standard_normal((1, 1, e, e)) / np.sqrt(e),
        f"{prefix}.b2": np.zeros(e),
    })


def encode_camera(pmaps, p, cfg, prefix="cam_enc"):
    """Token-level camera features from Plücker maps.

    ``pmaps``: (N, H, W, 6) array (or a PlueckerMap for N = 1). Returns a
    Tensor (N, H / patch, W / patch, embed).
    """
    if hasattr(pmaps, "array"):
        pmaps = pmaps.array()[None]
    pmaps = np.asarray(pmaps, dtype=np.float64)
    if pmaps.ndim == 3:
        pmaps = pmaps[None]
    _, h, w, _ = pmaps.shape
    if h % cfg.patch or w % cfg.patch:
        raise DimensionError(f"map {h}x{w} is not divisible by patch {cfg.patch}")
    scaled = pmaps.copy()
    scaled[..., 3:] *= cfg.moment_scale
    x = ad.conv2d(scaled, p[f"{prefix}.conv1"], stride=cfg.patch) + p[f"{prefix}.b1"]
    x = ad.silu(x)
    return ad.conv2d(x, p[f"{prefix}.conv2"], stride=1) + p[f"{prefix}.b2"]


# -- AdaLN --------------------------------------------------------------------------------
def init_adaln_head(rng, embed, width, hidden=None, prefix="ada"):
    """Scale/shift MLPs whose output layers start at (ones, zeros)."""
    hidden = hidden or embed
    out = ad.ParamSet()
    for name, bias in (("gamma", 1.0), ("beta", 0.0)):
        out[f"{prefix}.{name}.W1"] = _dense(rng, embed, hidden)
        out[f"{prefix}.{name}.b1"] = np.zeros(hidden)
        out[f"{prefix}.{name}.W2"] = np.zeros((hidden, width))
        out[f"{prefix}.{name}.b2"] = np.full(width, bias)
    return out


def adaln_params(embedding, p, prefix="ada"):
    """(gamma, beta) from an embedding Tensor (..., embed)."""
    outs = []
    for name in ("gamma", "beta"):
        h = ad.silu(embedding @ p[f"{prefix}.{name}.W1"] + p[f"{prefix}.{name}.b1"])
        outs.append(h @ p[f"{prefix}.{name}.W2"] + p[f"{prefix}.{name}.b2"])
    return outs[0], outs[1]


def _gather_frames(values, frame_index):
    if frame_index is None:
        return values
    return ad.take(values, np.asarray(frame_index), axis=-2)


def modulate(normed, gamma, beta, frame_index=None):
    """``normed * gamma + beta`` with gamma/beta broadcast from frames to tokens."""
    g = _gather_frames(gamma, frame_index)
    b = _gather_frames(beta, frame_index)
    if g.shape[-1] != normed.shape[-1] or g.shape[-2] != normed.shape[-2]:
        raise DimensionError(f"modulation {g.shape} does not match tokens {normed.shape}")
    return normed * g + b


def adaln_modulate(z, embedding, p, prefix="ada", frame_index=None, eps=1e-5):
    """LN(z) * f_gamma(e) + f_beta(e), broadcasting per-frame embeddings over tokens.

    ``z``: (..., N, C); ``embedding``: (..., T, E); ``frame_index``: (N,) latent
    frame of each token (omit when the embedding is already per token).
    """
    gamma, beta = adaln_params(ad.as_tensor(embedding), p, prefix)
    return modulate(ad.layer_norm(z, eps), gamma, beta, frame_index)


# -- baselines ----------------------------------------------------------------------------
def init_cross_attention(rng, width, embed, prefix="xattn"):
    return ad.ParamSet({
        f"{prefix}.Wq": _dense(rng, width, width),
        f"{prefix}.Wk": _dense(rng, embed, width),
        f"{prefix}.Wv": _dense(rng, embed, width),
        f"{prefix}.Wo": np.zeros((width, width)),
    })


def cross_attention_condition(z, cond_tokens, p, prefix="xattn"):
    """Residual cross-attention from tokens (..., N, C) to condition tokens (..., M, E)."""
    z = ad.as_tensor(z)
    cond_tokens = ad.as_tensor(cond_tokens)
    if z.ndim != cond_tokens.ndim:
        raise DimensionError("token and condition batches differ in rank")
    q = z @ p[f"{prefix}.Wq"]
    k = cond_tokens @ p[f"{prefix}.Wk"]
    v = cond_tokens @ p[f"{prefix}.Wv"]
    logits = q @ ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    attn = ad.softmax_rows(logits * (1.0 / np.sqrt(q.shape[-1])))
    return z + (attn @ v) @ p[f"{prefix}.Wo"]


def init_channel_add(rng, width, embed, prefix="chadd"):
    return ad.ParamSet({f"{prefix}.W": np.zeros((embed, width))})


def channel_add_condition(z, cond_features, p=None, prefix="chadd", frame_index=None):
    """``z + cond_features @ W`` (projection skipped when ``p`` is None)."""
    feats = ad.as_tensor(cond_features)
    if p is not None:
        feats = feats @ p[f"{prefix}.W"]
    feats = _gather_frames(feats, frame_index)
    if feats.shape[-1] != z.shape[-1]:
        raise DimensionError(f"condition width {feats.shape[-1]} does not match {z.shape[-1]}")
    return z + feats
