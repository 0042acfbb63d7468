"""World-time remapping: generators, validation and latent pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DimensionError, DomainError, InfeasibleError

KINDS = ("linear", "slow_motion", "pausing", "random_speed", "spline")
DEFAULT_SLOPE_BOUNDS = (0.25, 4.0)


@dataclass(frozen=True)
class WorldTimeSequence:
    tau: tuple
    fps: float

    def __post_init__(self):
        tau = tuple(float(t) for t in np.ravel(self.tau))
        object.__setattr__(self, "tau", tau)
        if len(tau) < 1:
            raise DimensionError("a world-time sequence needs at least one frame")
        if not all(np.isfinite(t) and t >= 0 for t in tau):
            raise DomainError("world times must be finite and non-negative")
        if not self.fps > 0:
            raise DomainError("fps must be positive")

    def __len__(self):
        return len(self.tau)

    def array(self):
        return np.asarray(self.tau, dtype=np.float64)

    def speeds(self):
        """Per-step playback speed (tau_{i+1} - tau_i) * fps."""
        return np.diff(self.array()) * self.fps

    def to_json(self):
        return [round(t, 9) for t in self.tau]

    @classmethod
    def uniform(cls, n_frames, fps, start=0.0):
        return cls(start + np.arange(n_frames) / fps, fps)

    def reversed(self):
        return WorldTimeSequence(self.tau[::-1], self.fps)


@dataclass(frozen=True)
class WarpSpec:
    """Kind-specific warp description.

    params by kind:
      slow_motion: ``factor`` (speed inside the window, 0 < factor <= 1),
        ``start``/``end`` as fractions of the clip in [0, 1].
      pausing: ``start``/``end`` frame indices of the held segment.
      random_speed: ``s_min``, ``s_max``, ``segments`` (speed pieces).
      spline: ``s_min``, ``s_max``, ``n_control`` (4..8 knots).
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown warp kind '{self.kind}'")
        lo, hi = self.slope_bounds()
        if not 0 <= lo <= hi:
            raise DomainError(f"slope bounds must satisfy 0 <= s_min <= s_max, got {lo}, {hi}")
        if self.kind == "pausing":
            start, end = self.params.get("start", 0), self.params.get("end", 0)
            if not 0 <= start <= end:
                raise DomainError("pause interval must satisfy 0 <= start <= end")
        if self.kind == "slow_motion":
            f = self.params.get("factor", 0.5)
            s, e = self.params.get("start", 0.0), self.params.get("end", 1.0)
            if not (0 < f <= 1 and 0 <= s <= e <= 1):
                raise DomainError("slow_motion needs 0 < factor <= 1 and 0 <= start <= end <= 1")

    def slope_bounds(self):
        lo, hi = DEFAULT_SLOPE_BOUNDS
        return float(self.params.get("s_min", lo)), float(self.params.get("s_max", hi))

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], params=dict(d.get("params", {})), seed=int(d.get("seed", 0)))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def eval_smoothstep(t):
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"smoothstep is defined on [0, 1], got {t}")
    return 3.0 * t * t - 2.0 * t ** 3


def validate_monotone(tau):
    arr = tau.array() if isinstance(tau, WorldTimeSequence) else np.asarray(tau, dtype=np.float64)
    return bool(np.all(np.diff(arr) >= 0))


def _fit_increments(steps, lo, hi, total, iters=64):
    """Rescale positive ``steps`` to sum to ``total`` while staying in [lo, hi].

    Clip-and-redistribute: entries pinned at a bound are frozen and the rest
    absorb the residual proportionally. Converges when lo*n <= total <= hi*n.
    """
    x = np.clip(np.asarray(steps, dtype=np.float64), lo, hi)
    free = np.ones(x.size, dtype=bool)
    for _ in range(iters):
        residual = total - x.sum()
        if abs(residual) <= 1e-15 * max(total, 1.0):
            break
        movable = free & ((x < hi) if residual > 0 else (x > lo))
        if not movable.any():
            break
        scale = 1.0 + residual / x[movable].sum() if x[movable].sum() > 0 else None
        if scale is None:
            x[movable] += residual / movable.sum()
        else:
            x[movable] *= scale
        pinned = (x <= lo) | (x >= hi)
        x = np.clip(x, lo, hi)
        free &= ~pinned
        if not free.any():
            free = np.ones(x.size, dtype=bool)
    return x


def generate_warp(spec, n_frames, duration, fps):
    """Realise a warp as a world-time sequence starting at 0.

    Every generator returns a non-decreasing sequence with tau[-1] <= duration.
    random_speed and spline keep every step speed inside the WarpSpec slope bounds.
    """
    if n_frames < 2:
        raise DimensionError("need at least 2 frames")
    if not duration > 0 or not fps > 0:
        raise DomainError("duration and fps must be positive")
    steps_n = n_frames - 1
    base = 1.0 / fps
    kind = spec.kind
    p = spec.params

    if kind == "linear":
        if steps_n * base > duration + 1e-12:
            raise InfeasibleError(f"linear timeline needs {steps_n * base}s, duration is {duration}s")
        inc = np.full(steps_n, base)
    elif kind == "slow_motion":
        factor = float(p.get("factor", 0.5))
        lo_f, hi_f = float(p.get("start", 0.0)), float(p.get("end", 1.0))
        frac = (np.arange(steps_n) + 0.5) / steps_n
        speed = np.where((frac >= lo_f) & (frac <= hi_f), factor, 1.0)
        inc = speed * base
        if inc.sum() > duration + 1e-12:
            raise InfeasibleError("slow-motion timeline exceeds the duration")
    elif kind == "pausing":
        start, end = int(p.get("start", 0)), int(p.get("end", 0))
        if end > steps_n:
            raise DomainError(f"pause end {end} beyond last frame {steps_n}")
        inc = np.full(steps_n, base)
        inc[start:end] = 0.0
        if inc.sum() > duration + 1e-12:
            raise InfeasibleError("pausing timeline exceeds the duration")
    else:
        lo, hi = spec.slope_bounds()
        lo_total, hi_total = lo * steps_n * base, hi * steps_n * base
        if lo_total > duration + 1e-12:
            raise InfeasibleError(
                f"minimum speed {lo} over {steps_n} steps needs {lo_total:.6g}s > duration {duration}s")
        target = min(duration, hi_total)
        rng = np.random.default_rng(spec.seed)
        if kind == "random_speed":
            segments = max(1, min(int(p.get("segments", steps_n)), steps_n))
            seg_speed = rng.uniform(lo, hi, size=segments)
            owner = np.minimum((np.arange(steps_n) * segments) // steps_n, segments - 1)
            speed = seg_speed[owner]
        else:
            speed = _spline_speeds(rng, steps_n, lo, hi, int(p.get("n_control", rng.integers(4, 9))))
        inc = _fit_increments(speed * base, lo * base, hi * base, target)
    tau = np.concatenate([[0.0], np.cumsum(inc)])
    tau = np.minimum(tau, duration)
    return WorldTimeSequence(tau, fps)


def _spline_speeds(rng, steps_n, lo, hi, n_control):
    """Step speeds from a monotone cubic through sampled control points."""
    if not 4 <= n_control <= 8:
        raise DomainError("spline warps use 4 to 8 control points")
    knots_x = np.linspace(0.0, steps_n, n_control)
    secants = rng.uniform(lo, hi, size=n_control - 1)
    knots_y = np.concatenate([[0.0], np.cumsum(secants * np.diff(knots_x))])
    curve = PchipInterpolator(knots_x, knots_y)
    values = curve(np.arange(steps_n + 1))
    return np.clip(np.diff(values), lo, hi)


def pool_to_latent(tau, factor):
    """Average-pool world times in groups of ``factor``; a ragged tail is averaged on its own."""
    if factor <= 0:
        raise DomainError("pooling factor must be positive")
    arr = tau.array()
    groups = [arr[i:i + factor].mean() for i in range(0, len(arr), factor)]
    return WorldTimeSequence(groups, tau.fps)


def sample_warp_spec(kind, rng, n_frames):
    """Draw a random WarpSpec of ``kind`` for an ``n_frames`` clip."""
    seed = int(rng.integers(0, 2 ** 63 - 1))
    steps_n = n_frames - 1
    if kind == "linear":
        params = {}
    elif kind == "slow_motion":
        start = float(rng.uniform(0.0, 0.6))
        end = min(1.0, start + float(rng.uniform(0.2, 0.5)))
        params = {"factor": round(float(rng.uniform(0.2, 0.7)), 6), "start": round(start, 6),
                  "end": round(end, 6)}
    elif kind == "pausing":
        start = int(rng.integers(0, max(1, steps_n - 1)))
        length = int(rng.integers(1, max(2, steps_n // 2 + 1)))
        params = {"start": start, "end": min(steps_n, start + length)}
    elif kind == "random_speed":
        params = {"s_min": DEFAULT_SLOPE_BOUNDS[0], "s_max": DEFAULT_SLOPE_BOUNDS[1],
                  "segments": int(rng.integers(2, max(3, steps_n + 1)))}
    elif kind == "spline":
        params = {"s_min": DEFAULT_SLOPE_BOUNDS[0], "s_max": DEFAULT_SLOPE_BOUNDS[1],
                  "n_control": int(rng.integers(4, 9))}
    else:
        raise DomainError(f"unknown warp kind '{kind}'")
    return WarpSpec(kind, params, seed)
