"""A desk-scale 4D-controllable DiT: patchify, 4D-RoPE attention, AdaLN hooks.

Tokens of one video are ordered latent-frame major, then patch row, then patch
column. A conditioned sample stacks the source video tokens before the target
tokens and runs full attention over both.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import conditioning as cond
from .camera import CameraTrajectory, Intrinsics, pluecker_map, subsample_trajectory
from .errors import DimensionError, DomainError
from .rope import RopeFactors, RotaryPlan, TokenCoords, rope4d_factors
from .timewarp import WorldTimeSequence, pool_to_latent

TIME_COND = ("none", "xattn", "chadd", "adaln")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    heads: int = 2
    n_blocks: int = 2
    ffn_hidden: int = 128
    r_t: int = 2
    patch: int = 2
    channels: int = 1
    time_embed: int = 64
    cam_embed: int = 64
    time_pos: str = "trope"  # "trope": world-time positions, "rope": frame-index positions
    time_cond: str = "adaln"
    camera_rope: bool = True
    camera_cond: str = "none"  # "none" | "adaln"
    base: float = 10000.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.width % self.heads:
            raise DomainError("width must be divisible by heads")
        if self.time_pos not in ("trope", "rope"):
            raise DomainError(f"unknown time positional mode '{self.time_pos}'")
        if self.time_cond not in TIME_COND:
            raise DomainError(f"unknown time conditioning '{self.time_cond}'")
        if self.camera_cond not in ("none", "adaln"):
            raise DomainError(f"unknown camera conditioning '{self.camera_cond}'")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def plan(self):
        return RotaryPlan.for_head_dim(self.head_dim, self.base, camera=True)

    @property
    def patch_dim(self):
        return self.r_t * self.patch * self.patch * self.channels

    def unconditioned(self):
        return replace(self, time_cond="none", camera_cond="none")


# -- patchify ---------------------------------------------------------------------------
@dataclass
class TokenGrid:
    tokens: object  # array or Tensor (N, width)
    coords: TokenCoords
    source_flag: np.ndarray
    n_frames: int = 0
    grid_shape: tuple = (0, 0, 0)  # latent frames, patch rows, patch columns

    def __post_init__(self):
        self.source_flag = np.asarray(self.source_flag, dtype=bool)
        if len(self.coords) != self.tokens.shape[0] or self.source_flag.shape != (len(self.coords),):
            raise DimensionError("coords and flags must match the token count")
        n_src = int(self.source_flag.sum())
        if 0 < n_src < len(self.coords) and n_src != len(self.coords) - n_src:
            raise DimensionError("source and target token counts differ")

    def __len__(self):
        return len(self.coords)


def _pad_frames(video, r_t):
    rem = video.shape[0] % r_t
    if rem == 0:
        return video
    pad = np.repeat(video[-1:], r_t - rem, axis=0)
    return np.concatenate([video, pad], axis=0)


def patchify(video, r_t, p, taus=None, traj=None):
    """Split (F, H, W, C) into ceil(F / r_t) * (H / p) * (W / p) tokens.

    A ragged trailing window repeats the last frame. Token time coordinates are
    the average-pooled world times (uniform 1/fps spacing when ``taus`` is None).
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise DimensionError("video must be (F, H, W, C)")
    f, h, w, c = video.shape
    if h % p or w % p:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by patch {p}")
    padded = _pad_frames(video, r_t)
    t_lat, hp, wp = padded.shape[0] // r_t, h // p, w // p
    tok = padded.reshape(t_lat, r_t, hp, p, wp, p, c).transpose(0, 2, 4, 1, 3, 5, 6)
    tokens = tok.reshape(t_lat * hp * wp, r_t * p * p * c)
    fps = traj.fps if traj is not None else (taus.fps if taus is not None else 1.0)
    seq = taus if taus is not None else WorldTimeSequence.uniform(f, fps)
    pooled = pool_to_latent(seq, r_t).array()
    tt, hh, ww = np.meshgrid(np.arange(t_lat), np.arange(hp), np.arange(wp), indexing="ij")
    coords = TokenCoords(pooled[tt.ravel()], hh.ravel(), ww.ravel(), tt.ravel())
    return TokenGrid(tokens, coords, np.zeros(len(coords), dtype=bool), f, (t_lat, hp, wp))


def unpatchify(tokens, r_t, p, n_frames, grid_shape, channels=1):
    t_lat, hp, wp = grid_shape
    arr = np.asarray(tokens.data if isinstance(tokens, ad.Tensor) else tokens)
    vid = arr.reshape(t_lat, hp, wp, r_t, p, p, channels).transpose(0, 3, 1, 4, 2, 5, 6)
    return vid.reshape(t_lat * r_t, hp * p, wp * p, channels)[:n_frames]


def concat_source_target(source, target):
    """Stack source tokens before target tokens; flags mark the source part."""
    if target is None or len(target) == 0:
        return source
    if source.tokens.shape[1:] != target.tokens.shape[1:]:
        raise DimensionError("source and target token widths differ")
    if isinstance(source.tokens, ad.Tensor) or isinstance(target.tokens, ad.Tensor):
        tokens = ad.concat([source.tokens, target.tokens], axis=0)
    else:
        tokens = np.concatenate([source.tokens, target.tokens], axis=0)
    coords = TokenCoords.concat([source.coords, target.coords])
    flags = np.concatenate([np.ones(len(source), bool), np.zeros(len(target), bool)])
    return TokenGrid(tokens, coords, flags, target.n_frames, target.grid_shape)


# -- parameters ------------------------------------------------------------------------
def init_block(rng, cfg, prefix):
    c = cfg.width
    ps = ad.ParamSet({
        f"{prefix}.Wq": cond._dense(rng, c, c),
        f"{prefix}.Wk": cond._dense(rng, c, c),
        f"{prefix}.Wv": cond._dense(rng, c, c),
        f"{prefix}.Wo": cond._dense(rng, c, c, 0.5),
        f"{prefix}.ffn.W1": cond._dense(rng, c, cfg.ffn_hidden),
        f"{prefix}.ffn.b1": np.zeros(cfg.ffn_hidden),
        f"{prefix}.ffn.W2": cond._dense(rng, cfg.ffn_hidden, c, 0.5),
        f"{prefix}.ffn.b2": np.zeros(c),
    })
    # conditioning modules draw from their own sub-stream so the shared weights
    # above are identical across variants with the same seed
    crng = np.random.default_rng(rng.integers(0, 2 ** 63))
    tcfg = cond.TimeEncoderConfig(cfg.r_t, cfg.time_embed)
    if cfg.time_cond != "none":
        ps.update(cond.init_time_encoder(crng, tcfg, f"{prefix}.time_enc"))
    if cfg.time_cond == "adaln":
        ps.update(cond.init_adaln_head(crng, cfg.time_embed, c, prefix=f"{prefix}.time_ada"))
    elif cfg.time_cond == "chadd":
        ps.update(cond.init_channel_add(crng, c, cfg.time_embed, f"{prefix}.chadd"))
    elif cfg.time_cond == "xattn":
        ps.update(cond.init_cross_attention(crng, c, cfg.time_embed, f"{prefix}.xattn"))
    if cfg.camera_cond == "adaln":
        ccfg = cond.CameraEncoderConfig(cfg.patch, cfg.cam_embed)
        ps.update(cond.init_camera_encoder(crng, ccfg, f"{prefix}.cam_enc"))
        ps.update(cond.init_adaln_head(crng, cfg.cam_embed, c, prefix=f"{prefix}.cam_ada"))
    return ps


def init_model(cfg, seed=0):
    rng = np.random.default_rng(seed)
    ps = ad.ParamSet({
        "embed.W": cond._dense(rng, cfg.patch_dim, cfg.width),
        "embed.b": np.zeros(cfg.width),
        "type_emb": rng.standard_normal((2, cfg.width)) * 0.5,
        "noise_emb": np.zeros(cfg.width),
    })
    block_seeds = rng.integers(0, 2 ** 63, size=cfg.n_blocks)
    head_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
    for b in range(cfg.n_blocks):
        ps.update(init_block(np.random.default_rng(block_seeds[b]), cfg, f"block{b}"))
    ps["head.W"] = cond._dense(head_rng, cfg.width, cfg.patch_dim, 0.5)
    ps["head.b"] = np.zeros(cfg.patch_dim)
    return ps


# -- conditioning inputs -------------------------------------------------------------------
@dataclass
class SampleConditioning:
    """Constants for one sample: V videos of F frames each."""

    frame_times: np.ndarray  # (V, F)
    fps: float
    rope: RopeFactors  # over all V * n tokens
    pmaps: np.ndarray | None  # (V * T, H, W, 6)


@dataclass
class BlockInputs:
    """Per-batch constants consumed by the blocks.

    frame_times: (B, V, F) world seconds; cos/sin: (B, 1, N, m) rotary angles;
    cam_q/cam_k: (B, 1, N, d_c / 4, 4, 4); frame_index: (N,) latent frame (over
    V * T) of each token; pmaps: (B * V * T, H, W, 6) or None.
    """

    frame_times: np.ndarray
    fps: float
    cos: np.ndarray
    sin: np.ndarray
    cam_q: np.ndarray
    cam_k: np.ndarray
    frame_index: np.ndarray
    tokens_per_video: int
    n_videos: int
    latent_frames: int
    pmaps: np.ndarray | None = None


def video_coords(cfg, taus, n_latent, hp, wp):
    """Token coordinates for one video under the configured time positional mode."""
    seq = taus if cfg.time_pos == "trope" else WorldTimeSequence.uniform(len(taus), taus.fps)
    pooled = pool_to_latent(seq, cfg.r_t).array()
    tt, hh, ww = np.meshgrid(np.arange(n_latent), np.arange(hp), np.arange(wp), indexing="ij")
    return TokenCoords(pooled[tt.ravel()], hh.ravel(), ww.ravel(), tt.ravel())


def sample_conditioning(cfg, videos, image_hw):
    """Conditioning constants for one sample given [(WorldTimeSequence, CameraTrajectory), ...]."""
    h, w = image_hw
    hp, wp = h // cfg.patch, w // cfg.patch
    n_frames = len(videos[0][0])
    fps = videos[0][0].fps
    n_latent = -(-n_frames // cfg.r_t)
    coords, poses, pmaps = [], [], []
    times = np.empty((len(videos), n_frames))
    for v, (taus, traj) in enumerate(videos):
        if len(taus) != n_frames or len(traj) != n_frames or taus.fps != fps:
            raise DimensionError("world times and trajectories must share frame count and fps")
        times[v] = taus.array()
        sub = subsample_trajectory(traj, cfg.r_t)
        c = video_coords(cfg, taus, n_latent, hp, wp)
        coords.append(TokenCoords(c.tau, c.h, c.w, c.pose_index + len(poses)))
        poses.extend(sub.poses)
        if cfg.camera_cond == "adaln":
            intr = traj.intrinsics.with_size(w, h)
            pmaps.extend(pluecker_map(p, intr).array() for p in sub.poses)
    joint = CameraTrajectory(tuple(poses), videos[0][1].intrinsics, fps)
    factors = rope4d_factors(TokenCoords.concat(coords), joint, cfg.plan,
                             time_scale=fps / cfg.r_t, camera=cfg.camera_rope)
    return SampleConditioning(times, fps, factors, np.stack(pmaps) if pmaps else None)


def collate(cfg, conds, image_hw):
    h, w = image_hw
    hp, wp = h // cfg.patch, w // cfg.patch
    n_videos, n_frames = conds[0].frame_times.shape
    n_latent = -(-n_frames // cfg.r_t)
    frame_index = np.concatenate([np.repeat(np.arange(n_latent), hp * wp) + v * n_latent
                                  for v in range(n_videos)])
    pmaps = None
    if cfg.camera_cond == "adaln":
        pmaps = np.concatenate([c.pmaps for c in conds], axis=0)
    return BlockInputs(
        np.stack([c.frame_times for c in conds]), conds[0].fps,
        np.stack([c.rope.cos for c in conds])[:, None], np.stack([c.rope.sin for c in conds])[:, None],
        np.stack([c.rope.cam_q for c in conds])[:, None], np.stack([c.rope.cam_k for c in conds])[:, None],
        frame_index, n_latent * hp * wp, n_videos, n_latent, pmaps)


def build_inputs(cfg, samples, image_hw):
    """BlockInputs from per-sample lists of (WorldTimeSequence, CameraTrajectory).

    Every sample supplies the same number of videos V (1 for a bare video, 2
    for source + target), all with F frames at one fps.
    """
    if len({len(v) for v in samples}) != 1:
        raise DimensionError("all samples need the same number of videos")
    return collate(cfg, [sample_conditioning(cfg, v, image_hw) for v in samples], image_hw)


# -- forward ------------------------------------------------------------------------------------
def _heads(x, cfg):
    b, n, _ = x.shape
    return x.reshape(b, n, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)


def attention_4d(x, p, prefix, cfg, inputs, return_weights=False):
    """Multi-head self-attention with 4D rotary operators applied to Q and K."""
    b, n, c = x.shape
    q = ad.rotary_apply(_heads(x @ p[f"{prefix}.Wq"], cfg), inputs.cos, inputs.sin, inputs.cam_q)
    q = q * (1.0 / np.sqrt(cfg.head_dim))
    k = ad.rotary_apply(_heads(x @ p[f"{prefix}.Wk"], cfg), inputs.cos, inputs.sin, inputs.cam_k)
    v = _heads(x @ p[f"{prefix}.Wv"], cfg)
    logits = q @ k.transpose(0, 1, 3, 2)
    weights = ad.softmax_rows(logits)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, c) @ p[f"{prefix}.Wo"]
    return (out, weights) if return_weights else out


def _time_condition(hn, p, prefix, cfg, inputs):
    if cfg.time_cond == "none":
        return hn
    b, n, c = hn.shape
    tcfg = cond.TimeEncoderConfig(cfg.r_t, cfg.time_embed)
    times = inputs.frame_times.reshape(b * inputs.n_videos, -1)
    emb = cond.encode_time(times, p, tcfg, inputs.fps, f"{prefix}.time_enc")  # (B*V, T, E)
    if cfg.time_cond == "xattn":
        per_video = hn.reshape(b * inputs.n_videos, inputs.tokens_per_video, c)
        out = cond.cross_attention_condition(per_video, emb, p, f"{prefix}.xattn")
        return out.reshape(b, n, c)
    emb = emb.reshape(b, inputs.n_videos * inputs.latent_frames, cfg.time_embed)
    if cfg.time_cond == "chadd":
        return cond.channel_add_condition(hn, emb, p, f"{prefix}.chadd", inputs.frame_index)
    gamma, beta = cond.adaln_params(emb, p, f"{prefix}.time_ada")
    return cond.modulate(hn, gamma, beta, inputs.frame_index)


def _camera_condition(m, p, prefix, cfg, inputs):
    if cfg.camera_cond == "none":
        return m
    b, n, c = m.shape
    ccfg = cond.CameraEncoderConfig(cfg.patch, cfg.cam_embed)
    feats = cond.encode_camera(inputs.pmaps, p, ccfg, f"{prefix}.cam_enc").reshape(b, n, cfg.cam_embed)
    gamma, beta = cond.adaln_params(feats, p, f"{prefix}.cam_ada")
    return cond.modulate(m, gamma, beta)


def block_apply(x, p, prefix, cfg, inputs):
    """h = x + Attn4D(LN x); out = h + FFN(camera_mod(time_mod(LN h)))."""
    h = x + attention_4d(ad.layer_norm(x, cfg.eps), p, prefix, cfg, inputs)
    m = _time_condition(ad.layer_norm(h, cfg.eps), p, prefix, cfg, inputs)
    m = _camera_condition(m, p, prefix, cfg, inputs)
    f = ad.gelu(m @ p[f"{prefix}.ffn.W1"] + p[f"{prefix}.ffn.b1"]) @ p[f"{prefix}.ffn.W2"]
    return h + (f + p[f"{prefix}.ffn.b2"])


def _as_pair(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x,)


def block_forward(grid, params, taus, traj, cfg, prefix="block0", image_hw=None):
    """Run one block on a single-sample TokenGrid.

    ``taus``/``traj`` are one WorldTimeSequence/CameraTrajectory, or (source,
    target) pairs for a grid produced by ``concat_source_target``.
    """
    taus, traj = _as_pair(taus), _as_pair(traj)
    if len(taus) != len(traj):
        raise DimensionError("need one trajectory per world-time sequence")
    t_lat, hp, wp = grid.grid_shape
    hw = image_hw or (hp * cfg.patch, wp * cfg.patch)
    inputs = build_inputs(cfg, [list(zip(taus, traj))], hw)
    if len(grid) != inputs.tokens_per_video * inputs.n_videos:
        raise DimensionError(f"grid has {len(grid)} tokens, conditioning expects "
                             f"{inputs.tokens_per_video * inputs.n_videos}")
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    x = ad.as_tensor(grid.tokens).reshape(1, len(grid), cfg.width)
    out = block_apply(x, params, prefix, cfg, inputs).reshape(len(grid), cfg.width)
    return TokenGrid(out, grid.coords, grid.source_flag, grid.n_frames, grid.grid_shape)


def model_forward(params, cfg, inputs, source_tokens, target_tokens=None, noise_level=0.0):
    """Predict target patches (B, n, patch_dim) from source patches and controls.

    With two videos per sample the target input defaults to zeros (pure
    regression); pass noisy target patches for the denoising objective.
    """
    src = np.asarray(source_tokens, dtype=np.float64)
    b, n, _ = src.shape
    if inputs.n_videos == 2:
        tgt = np.zeros_like(src) if target_tokens is None else np.asarray(target_tokens, dtype=np.float64)
        raw = np.concatenate([src, tgt], axis=1)
        flags = np.concatenate([np.zeros(n, int), np.ones(n, int)])
    else:
        raw = src
        flags = np.ones(n, int)
    x = raw @ params["embed.W"] + params["embed.b"] + ad.take(params["type_emb"], flags, axis=0)
    if noise_level:
        x = x + params["noise_emb"] * float(noise_level)
    for blk in range(cfg.n_blocks):
        x = block_apply(x, params, f"block{blk}", cfg, inputs)
    tgt_x = x[:, raw.shape[1] - n:, :]
    return ad.layer_norm(tgt_x, cfg.eps) @ params["head.W"] + params["head.b"]


def target_loss(params, cfg, inputs, source_tokens, target_values, target_inputs=None, noise_level=0.0):
    pred = model_forward(params, cfg, inputs, source_tokens, target_inputs, noise_level)
    diff = pred - target_values
    return (diff * diff).mean()
