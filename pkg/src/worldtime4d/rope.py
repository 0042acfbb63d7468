"""Rotary encodings over continuous world time, latent space and camera pose.

Head channels are laid out as ``[time | height | width | camera]``. Rotary
slices pair adjacent channels (2k, 2k+1). Tokens are rotated by the transpose
of their rotation operator, so a query/key logit depends only on the
difference of positions. The camera slice holds 4-channel homogeneous blocks:
queries are multiplied by ``P_i^{-T}`` and keys by ``P_j``, giving the
relative pose ``P_i^{-1} P_j`` inside every logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import CameraPose
from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class RotaryPlan:
    head_dim: int = 64
    base: float = 10000.0
    d_t: int = 16
    d_h: int = 16
    d_w: int = 16
    d_c: int = 16

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise DomainError("head_dim must be a positive even integer")
        if self.base <= 1:
            raise DomainError("rotary base must exceed 1")
        if self.d_t + self.d_h + self.d_w + self.d_c != self.head_dim:
            raise DomainError("channel split must sum to head_dim")
        if min(self.d_t, self.d_h, self.d_w, self.d_c) < 0:
            raise DomainError("channel split entries must be non-negative")
        if self.d_t % 2 or self.d_h % 2 or self.d_w % 2 or self.d_c % 4:
            raise DomainError("rotary slices must be even and the camera slice a multiple of 4")

    @classmethod
    def for_head_dim(cls, head_dim, base=10000.0, camera=True):
        """Equal four-way split (three-way plus an empty camera slice if ``camera`` is False)."""
        if camera:
            q = head_dim // 4
            q -= q % 4
            rest = head_dim - q
            d_t = d_h = (rest // 3) - (rest // 3) % 2
            return cls(head_dim, base, d_t, d_h, rest - d_t - d_h, q)
        d_t = d_h = (head_dim // 3) - (head_dim // 3) % 2
        return cls(head_dim, base, d_t, d_h, head_dim - d_t - d_h, 0)

    def frequencies(self, width):
        """theta_k = base ** (-2 (k - 1) / (width / 2)) for k = 1..width/2."""
        if width == 0:
            return np.zeros(0)
        half = width // 2
        k = np.arange(half)
        return self.base ** (-2.0 * k / half)

    @property
    def slices(self):
        t0 = 0
        h0 = t0 + self.d_t
        w0 = h0 + self.d_h
        c0 = w0 + self.d_w
        return {"time": slice(t0, h0), "height": slice(h0, w0), "width": slice(w0, c0),
                "camera": slice(c0, self.head_dim)}


@dataclass(frozen=True)
class TokenCoords:
    tau: np.ndarray
    h: np.ndarray
    w: np.ndarray
    pose_index: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a) for a in (self.tau, self.h, self.w, self.pose_index)]
        n = arrs[0].shape[0]
        if any(a.shape != (n,) for a in arrs):
            raise DimensionError("token coordinate arrays must share one length")
        if (arrs[1] < 0).any() or (arrs[2] < 0).any():
            raise DomainError("spatial indices must be non-negative")
        object.__setattr__(self, "tau", arrs[0].astype(np.float64))
        object.__setattr__(self, "h", arrs[1].astype(np.int64))
        object.__setattr__(self, "w", arrs[2].astype(np.int64))
        object.__setattr__(self, "pose_index", arrs[3].astype(np.int64))

    def __len__(self):
        return self.tau.shape[0]

    def take(self, idx):
        return TokenCoords(self.tau[idx], self.h[idx], self.w[idx], self.pose_index[idx])

    @staticmethod
    def concat(coords):
        return TokenCoords(*(np.concatenate([getattr(c, f) for c in coords])
                             for f in ("tau", "h", "w", "pose_index")))


def rotation_blocks(positions, thetas):
    """Block-diagonal operators ``diag(R(p theta_1), ...)`` for every position, shape (n, d, d)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    m = thetas.shape[0]
    out = np.zeros((positions.shape[0], 2 * m, 2 * m))
    if m == 0:
        return out
    ang = positions[:, None] * thetas[None, :]
    c, s = np.cos(ang), np.sin(ang)
    ev = np.arange(m) * 2
    out[:, ev, ev] = c
    out[:, ev, ev + 1] = -s
    out[:, ev + 1, ev] = s
    out[:, ev + 1, ev + 1] = c
    return out


def time_rotation(tau, plan):
    """The d_t x d_t time operator at world time ``tau``."""
    return rotation_blocks([tau], plan.frequencies(plan.d_t))[0]


def _apply(x, mats):
    if isinstance(x, ad.Tensor):
        return ad.per_token_apply(x, mats)
    return np.matmul(mats, np.asarray(x, dtype=np.float64)[..., None])[..., 0]


def _slice_operator(plan, n, name, block):
    """Embed a per-token slice operator into a full head_dim identity."""
    full = np.broadcast_to(np.eye(plan.head_dim), (n, plan.head_dim, plan.head_dim)).copy()
    sl = plan.slices[name]
    full[:, sl, sl] = block
    return full


def _check_tokens(x, n):
    if x.shape[-2] != n:
        raise DimensionError(f"{x.shape[-2]} tokens but {n} positions")


def apply_time_rope(q, k, taus, plan, fps=None):
    """Rotate the time slice of queries and keys by ``D(tau * fps)^T``.

    ``taus`` may be a WorldTimeSequence (its fps scales the times) or a plain
    array (scaled by ``fps`` when given, unscaled otherwise).
    """
    if hasattr(taus, "array"):
        fps = taus.fps if fps is None else fps
        taus = taus.array()
    pos = np.asarray(taus, dtype=np.float64) * (1.0 if fps is None else fps)
    _check_tokens(q, pos.shape[0])
    _check_tokens(k, pos.shape[0])
    rot = rotation_blocks(pos, plan.frequencies(plan.d_t)).transpose(0, 2, 1)
    op = _slice_operator(plan, pos.shape[0], "time", rot)
    return _apply(q, op), _apply(k, op)


def apply_index_rope(q, k, indices, plan):
    """Standard rotary encoding at integer positions on the time slice."""
    return apply_time_rope(q, k, np.asarray(indices, dtype=np.float64), plan, fps=None)


def _as_pose(p):
    if isinstance(p, CameraPose):
        return p
    try:
        return CameraPose.from_matrix(p)
    except (ValueError, TypeError) as exc:
        raise DomainError(f"camera rotary needs rigid poses: {exc}") from exc


def scene_scale(poses):
    """Gauge-invariant translation scale: max camera distance from the centroid, floored at 1."""
    poses = [_as_pose(p) for p in poses]
    centers = np.stack([p.translation for p in poses])
    spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return max(float(spread), 1.0)


def _pose_blocks(poses, scale):
    """Per-pose 4x4 query (P^{-T}) and key (P) blocks with translations divided by ``scale``."""
    mats = []
    for p in poses:
        m = _as_pose(p).matrix()
        m[:3, 3] /= scale
        mats.append(m)
    mats = np.stack(mats)
    return np.linalg.inv(mats).transpose(0, 2, 1), mats


def _expand_blocks(blocks, reps):
    n = blocks.shape[0]
    out = np.zeros((n, 4 * reps, 4 * reps))
    for r in range(reps):
        out[:, 4 * r:4 * r + 4, 4 * r:4 * r + 4] = blocks
    return out


def camera_blocks(poses, plan, scale=None):
    """Per-token camera operators for queries and keys, each (n, d_c, d_c)."""
    poses = [_as_pose(p) for p in poses]
    reps = plan.d_c // 4
    if reps == 0:
        return np.zeros((len(poses), 0, 0)), np.zeros((len(poses), 0, 0))
    s = scene_scale(poses) if scale is None else scale
    q4, k4 = _pose_blocks(poses, s)
    return _expand_blocks(q4, reps), _expand_blocks(k4, reps)


def camera_rotary(q, k, poses, plan, scale=None):
    n = len(poses)
    _check_tokens(q, n)
    _check_tokens(k, n)
    q_blk, k_blk = camera_blocks(poses, plan, scale)
    return (_apply(q, _slice_operator(plan, n, "camera", q_blk)),
            _apply(k, _slice_operator(plan, n, "camera", k_blk)))


@dataclass(frozen=True)
class RopeFactors:
    """Compact 4D operator: rotary angles for the first d_t + d_h + d_w channels
    and 4x4 camera blocks (n, d_c / 4, 4, 4) for queries and keys."""

    cos: np.ndarray
    sin: np.ndarray
    cam_q: np.ndarray
    cam_k: np.ndarray

    def take(self, idx):
        return RopeFactors(self.cos[idx], self.sin[idx], self.cam_q[idx], self.cam_k[idx])


def rope4d_factors(coords, traj, plan, time_scale=None, camera=True):
    n = len(coords)
    scale_t = traj.fps if time_scale is None else time_scale
    ang = np.concatenate([
        (coords.tau * scale_t)[:, None] * plan.frequencies(plan.d_t)[None, :],
        coords.h[:, None] * plan.frequencies(plan.d_h)[None, :],
        coords.w[:, None] * plan.frequencies(plan.d_w)[None, :],
    ], axis=1)
    reps = plan.d_c // 4
    if reps and camera:
        if coords.pose_index.max(initial=0) >= len(traj):
            raise DimensionError("pose index outside the trajectory")
        q4, k4 = _pose_blocks(traj.poses, scene_scale(traj.poses))
        cam_q = np.repeat(q4[coords.pose_index][:, None], reps, axis=1)
        cam_k = np.repeat(k4[coords.pose_index][:, None], reps, axis=1)
    else:
        cam_q = cam_k = np.broadcast_to(np.eye(4), (n, reps, 4, 4)).copy()
    return RopeFactors(np.cos(ang), np.sin(ang), cam_q, cam_k)


def apply_factors(x, factors, which):
    """Apply RopeFactors to (..., n, head_dim); ``which`` is "q" or "k"."""
    blocks = factors.cam_q if which == "q" else factors.cam_k
    return ad.rotary_apply(x, factors.cos, factors.sin, blocks if blocks.shape[-3] else None)


def rope4d_operators(coords, traj, plan, time_scale=None, camera=True):
    """Dense query/key operators (n, head_dim, head_dim) equivalent to ``rope4d_factors``."""
    n = len(coords)
    scale_t = traj.fps if time_scale is None else time_scale
    t_rot = rotation_blocks(coords.tau * scale_t, plan.frequencies(plan.d_t)).transpose(0, 2, 1)
    h_rot = rotation_blocks(coords.h, plan.frequencies(plan.d_h)).transpose(0, 2, 1)
    w_rot = rotation_blocks(coords.w, plan.frequencies(plan.d_w)).transpose(0, 2, 1)
    sl = plan.slices
    a_q = np.zeros((n, plan.head_dim, plan.head_dim))
    a_q[:, sl["time"], sl["time"]] = t_rot
    a_q[:, sl["height"], sl["height"]] = h_rot
    a_q[:, sl["width"], sl["width"]] = w_rot
    a_k = a_q.copy()
    if plan.d_c:
        if camera:
            if coords.pose_index.max(initial=0) >= len(traj):
                raise DimensionError("pose index outside the trajectory")
            q_all, k_all = camera_blocks(traj.poses, plan, scene_scale(traj.poses))
            q_blk, k_blk = q_all[coords.pose_index], k_all[coords.pose_index]
        else:
            q_blk = k_blk = np.broadcast_to(np.eye(plan.d_c), (n, plan.d_c, plan.d_c))
        a_q[:, sl["camera"], sl["camera"]] = q_blk
        a_k[:, sl["camera"], sl["camera"]] = k_blk
    return a_q, a_k


def apply_rope_4d(q, k, coords, traj, plan, time_scale=None):
    """Time rotary (times scaled by ``time_scale``, default ``traj.fps``), spatial
    rotary on latent row/column indices and the camera transform, on disjoint slices."""
    _check_tokens(q, len(coords))
    _check_tokens(k, len(coords))
    f = rope4d_factors(coords, traj, plan, time_scale)
    if isinstance(q, ad.Tensor) or isinstance(k, ad.Tensor):
        return apply_factors(q, f, "q"), apply_factors(k, f, "k")
    return (apply_factors(q, f, "q").numpy(), apply_factors(k, f, "k").numpy())


def pairwise_logits(q, k):
    q = np.asarray(q.data if isinstance(q, ad.Tensor) else q)
    k = np.asarray(k.data if isinstance(k, ad.Tensor) else k)
    return q @ np.swapaxes(k, -1, -2)
