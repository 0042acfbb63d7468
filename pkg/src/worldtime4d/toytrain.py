"""Synthetic blob scenes, an Adam trainer and the conditioning ablation harness.

A toy scene is a Gaussian blob following a smooth path in the world plane
z = 0, rendered through a pinhole camera. A training example pairs a source
clip (linear world time, camera A) with a target clip of the same scene under
a warped world time and camera B; the model regresses the target patches from
the source patches and the controls.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .camera import (CameraTrajectory, Intrinsics, TrajectoryConstraints, WaypointSpec,
                     project_points, static_trajectory, trajectory_from_waypoints, unproject_pixel)
from .ditblock import ModelConfig, collate, init_model, model_forward, patchify, sample_conditioning, unpatchify
from .errors import ContractViolation, DimensionError, DomainError, InfeasibleError, TrainingError
from .metrics import psnr
from .timewarp import WorldTimeSequence, generate_warp, sample_warp_spec

VARIANTS = ("rope+xattn", "rope+chadd", "rope+adaln", "trope", "trope+xattn", "trope+chadd", "trope+adaln")
TRAIN_WARPS = ("linear", "slow_motion", "pausing")
HELD_OUT_WARPS = ("spline", "random_speed", "reversal")

# camera rig of the toy tasks: close enough that the blob spans a few pixels
TOY_CONSTRAINTS = TrajectoryConstraints(radius_range=(4.0, 4.5), max_lookat_offset=0.2,
                                        elevation_range=(0.0, 20.0))


# -- scenes ------------------------------------------------------------------------------
@dataclass(frozen=True)
class BlobPath:
    """position(tau) = (ax sin(wx tau + px), ay sin(wy tau + py), 0)."""

    amplitude: tuple
    omega: tuple
    phase: tuple

    @classmethod
    def from_seed(cls, seed):
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.uniform(1.5, 2.5, 2)), tuple(rng.uniform(3.0, 6.0, 2)),
                   tuple(rng.uniform(0.0, 2 * np.pi, 2)))

    def position(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        x = self.amplitude[0] * np.sin(self.omega[0] * tau + self.phase[0])
        y = self.amplitude[1] * np.sin(self.omega[1] * tau + self.phase[1])
        return np.stack([x, y, np.zeros_like(x)], axis=-1)


@dataclass
class ToyScene:
    seed: int
    path: BlobPath
    frames: np.ndarray  # (F, H, W, 1) in [0, 1]
    taus: WorldTimeSequence
    traj: CameraTrajectory
    blob_world: np.ndarray  # (F, 3)
    blob_pixels: np.ndarray  # (F, 2) projected centre (u, v)
    blob_depth: np.ndarray  # (F,)


def blob_sigma(width):
    return 0.1 * width


def render_toy_scene(seed, taus, traj, height=8, width=8):
    """Render the blob of scene ``seed`` at world times ``taus`` through ``traj``.

    Pixel (row v, column u) samples the image plane at (u + 0.5, v + 0.5).
    Points behind the camera render as empty frames.
    """
    if height < 8 or width < 8:
        raise DimensionError("toy frames need H, W >= 8")
    if len(taus) != len(traj):
        raise DimensionError("world times and trajectory differ in length")
    path = BlobPath.from_seed(seed)
    intr = traj.intrinsics.with_size(width, height)
    world = path.position(taus.array())
    sigma = blob_sigma(width)
    uu = np.arange(width) + 0.5
    vv = np.arange(height) + 0.5
    frames = np.zeros((len(taus), height, width, 1))
    pix = np.zeros((len(taus), 2))
    depth = np.zeros(len(taus))
    for i, pose in enumerate(traj.poses):
        uv, d = project_points(pose, intr, world[i])
        pix[i], depth[i] = uv[0], d[0]
        if d[0] <= 0:
            continue
        gu = np.exp(-((uu - uv[0, 0]) ** 2) / (2 * sigma * sigma))
        gv = np.exp(-((vv - uv[0, 1]) ** 2) / (2 * sigma * sigma))
        frames[i, :, :, 0] = gv[:, None] * gu[None, :]
    return ToyScene(seed, path, frames, taus, traj, world, pix, depth)


def locate_blob(frame):
    """Sub-pixel blob centre from the log-intensity parabola through the peak.

    Exact for an untruncated sampled Gaussian; the peak must be off the border.
    """
    img = np.asarray(frame, dtype=np.float64)
    img = img[..., 0] if img.ndim == 3 else img
    v, u = np.unravel_index(np.argmax(img), img.shape)
    if not (0 < v < img.shape[0] - 1 and 0 < u < img.shape[1] - 1) or img[v, u] <= 0:
        raise DomainError("blob peak is on the image border or absent")
    with np.errstate(divide="ignore"):
        lu = np.log(img[v, u - 1:u + 2])
        lv = np.log(img[v - 1:v + 2, u])
    if not (np.all(np.isfinite(lu)) and np.all(np.isfinite(lv))):
        raise DomainError("blob neighbourhood underflows")

    def vertex(l):
        return 0.5 * (l[0] - l[2]) / (l[0] - 2 * l[1] + l[2])

    return np.array([u + 0.5 + vertex(lu), v + 0.5 + vertex(lv)])


@dataclass(frozen=True)
class ProbeResult:
    max_px: float
    per_frame_px: np.ndarray
    world_positions: np.ndarray


def bullet_time_probe(seed, tau, traj, height=64, width=64):
    """Freeze world time at ``tau``, render through a moving camera and check
    that the blob re-projects to a single world position.

    Each frame's blob is located in the image, lifted to the world with the
    frame's depth, then projected into frame 0; the deviation from frame 0's
    detection is reported in pixels.
    """
    taus = WorldTimeSequence(np.full(len(traj), float(tau)), traj.fps)
    scene = render_toy_scene(seed, taus, traj, height, width)
    intr = traj.intrinsics.with_size(width, height)
    found = np.stack([locate_blob(f) for f in scene.frames])
    world = np.stack([unproject_pixel(p, intr, uv, d)
                      for p, uv, d in zip(traj.poses, found, scene.blob_depth)])
    back, _ = project_points(traj.poses[0], intr, world)
    dev = np.linalg.norm(back - found[0], axis=1)
    return ProbeResult(float(dev.max()), dev, world)


# -- toy datasets -----------------------------------------------------------------------
def _front_waypoint(rng, c=TOY_CONSTRAINTS):
    return WaypointSpec(tuple(rng.uniform(-c.max_lookat_offset, c.max_lookat_offset, 3) / np.sqrt(3)),
                        float(rng.uniform(*c.radius_range)), float(rng.uniform(-35.0, 35.0)),
                        float(rng.uniform(*c.elevation_range)))


def toy_orbit(rng, n_frames, fps, intrinsics=None, c=TOY_CONSTRAINTS):
    """A two-waypoint orbit in front of the blob plane, within the toy rig bounds."""
    for _ in range(100):
        a = _front_waypoint(rng, c)
        b = WaypointSpec(a.lookat_center, float(rng.uniform(*c.radius_range)),
                         a.azimuth + float(rng.choice([-1, 1]) * rng.uniform(10.0, 35.0)),
                         float(np.clip(a.elevation + rng.uniform(-10, 10), *c.elevation_range)))
        try:
            return trajectory_from_waypoints([a, b], n_frames, "smoothstep", c, fps, intrinsics)
        except InfeasibleError:
            continue
    raise InfeasibleError("could not sample a toy orbit")


def warp_taus(kind, rng, n_frames, fps):
    """World times of a toy target clip spanning the source clip's time range."""
    duration = (n_frames - 1) / fps
    if kind == "reversal":
        return WorldTimeSequence.uniform(n_frames, fps).reversed()
    return generate_warp(sample_warp_spec(kind, rng, n_frames), n_frames, duration, fps)


@dataclass
class ToyPair:
    source: ToyScene
    target: ToyScene
    warp_kind: str


@dataclass
class ToyDataset:
    pairs: list
    task: str
    image_hw: tuple
    n_frames: int
    fps: float
    _cond_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.pairs)

    def conditioning(self, cfg):
        """Per-pair conditioning constants, cached per rotary/conditioning layout."""
        key = (cfg.time_pos, cfg.camera_rope, cfg.camera_cond, cfg.r_t, cfg.patch, cfg.head_dim, cfg.base)
        if key not in self._cond_cache:
            self._cond_cache[key] = [
                sample_conditioning(cfg, [(p.source.taus, p.source.traj), (p.target.taus, p.target.traj)],
                                    self.image_hw)
                for p in self.pairs]
        return self._cond_cache[key]

    def tokens(self, cfg):
        """(source, target) patch arrays, each (n_pairs, n_tokens, patch_dim)."""
        src = np.stack([patchify(p.source.frames, cfg.r_t, cfg.patch).tokens for p in self.pairs])
        tgt = np.stack([patchify(p.target.frames, cfg.r_t, cfg.patch).tokens for p in self.pairs])
        return src, tgt

    def subset(self, idx):
        return ToyDataset([self.pairs[i] for i in idx], self.task, self.image_hw, self.n_frames, self.fps)


def make_toy_dataset(task="time", n_pairs=256, warp_kinds=TRAIN_WARPS, seed=0, image=8,
                     n_frames=8, fps=8.0):
    """Source/target pairs for the time task (static camera shared by both
    clips) or the camera task (static source camera, orbiting target camera).
    """
    if task not in ("time", "camera"):
        raise DomainError(f"unknown toy task '{task}'")
    if n_pairs < 1:
        raise DimensionError("need at least one pair")
    rng = np.random.default_rng(seed)
    intr = Intrinsics()
    pairs = []
    for i in range(n_pairs):
        kind = warp_kinds[i % len(warp_kinds)]
        scene_seed = int(rng.integers(0, 2 ** 63 - 1))
        src_cam = static_trajectory(_front_waypoint(rng), n_frames, fps, intr)
        tgt_cam = src_cam if task == "time" else toy_orbit(rng, n_frames, fps, intr)
        src_taus = WorldTimeSequence.uniform(n_frames, fps)
        tgt_taus = warp_taus(kind, rng, n_frames, fps)
        pairs.append(ToyPair(render_toy_scene(scene_seed, src_taus, src_cam, image, image),
                             render_toy_scene(scene_seed, tgt_taus, tgt_cam, image, image), kind))
    return ToyDataset(pairs, task, (image, image), n_frames, fps)


# -- training ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings plus the conditioning variant.

    ``variant`` names the time pathway ("rope"/"trope" positions with an
    optional "+xattn"/"+chadd"/"+adaln" feature injection). ``camera_adaln``
    adds the Plücker AdaLN branch. ``rope4d_on=False`` falls back to
    frame-index time positions without the camera rotary; ``adaln_on=False``
    drops both AdaLN branches.
    """

    lr: float = 1e-3
    clip: float = 1.0
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    variant: str = "trope+adaln"
    camera_adaln: bool = False
    rope4d_on: bool = True
    adaln_on: bool = True
    objective: str = "regression"  # or "denoise"
    noise_level: float = 0.5
    width: int = 32
    heads: int = 1
    n_blocks: int = 2
    ffn_hidden: int = 64
    embed: int = 32
    patch: int = 4
    r_t: int = 2
    label: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant '{self.variant}'")
        if self.objective not in ("regression", "denoise"):
            raise DomainError(f"unknown objective '{self.objective}'")
        if self.iterations < 0 or self.batch_size < 1 or not self.lr > 0 or not self.clip > 0:
            raise DomainError("iterations >= 0, batch_size >= 1, lr > 0 and clip > 0 are required")

    @property
    def name(self):
        return self.label or self.variant

    def model_config(self):
        pos, _, feat = self.variant.partition("+")
        time_cond = feat or "none"
        camera_cond = "adaln" if self.camera_adaln else "none"
        camera_rope = True
        if not self.rope4d_on:
            pos, camera_rope = "rope", False
        if not self.adaln_on:
            time_cond = "none" if time_cond == "adaln" else time_cond
            camera_cond = "none"
        return ModelConfig(width=self.width, heads=self.heads, n_blocks=self.n_blocks,
                           ffn_hidden=self.ffn_hidden, r_t=self.r_t, patch=self.patch,
                           time_embed=self.embed, cam_embed=self.embed, time_pos=pos,
                           time_cond=time_cond, camera_rope=camera_rope, camera_cond=camera_cond)


def variant_configs(**overrides):
    return [TrainConfig(variant=v, **overrides) for v in VARIANTS]


def component_configs(**overrides):
    base = dict(variant="trope+adaln", camera_adaln=True, **overrides)
    return [TrainConfig(label="full", **base),
            TrainConfig(label="w/o 4D-RoPE", rope4d_on=False, **base),
            TrainConfig(label="w/o AdaLN", adaln_on=False, **base)]


@dataclass
class TrainResult:
    params: ad.ParamSet
    losses: list
    grad_norms: list  # pre-clip global norms
    clipped_norms: list  # post-clip global norms


def _global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = params.map(np.zeros_like)
        self.v = params.map(np.zeros_like)
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_loss(cfg, tcfg, inputs, src, tgt, rng):
    if tcfg.objective == "regression":
        return lambda p: _loss(p, cfg, inputs, src, tgt, None, 0.0)
    noise = rng.standard_normal(tgt.shape)
    s = tcfg.noise_level
    noisy = math.sqrt(1.0 - s * s) * tgt + s * noise
    return lambda p: _loss(p, cfg, inputs, src, noise, noisy, s)


def _loss(p, cfg, inputs, src, values, target_inputs, noise_level):
    pred = model_forward(p, cfg, inputs, src, target_inputs, noise_level)
    diff = pred - values
    return (diff * diff).mean()


def train(config, dataset, log_every=0, log=None):
    """Adam on the target-patch objective with global-norm clipping.

    Batches are drawn from a generator seeded by ``config.seed``, so a
    (config, dataset) pair always produces bit-identical parameters.
    """
    if len(dataset) == 0:
        raise DimensionError("training set is empty")
    cfg = config.model_config()
    params = init_model(cfg, config.seed)
    result = TrainResult(params, [], [], [])
    if config.iterations == 0:
        return result
    conds = dataset.conditioning(cfg)
    src_all, tgt_all = dataset.tokens(cfg)
    rng = np.random.default_rng([config.seed, 7919])
    opt = Adam(params, config.lr)
    n = len(dataset)
    for step in range(config.iterations):
        if config.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=config.batch_size, replace=False)
        inputs = collate(cfg, [conds[i] for i in idx], dataset.image_hw)
        diag = {"step": step, "recent_losses": result.losses[-10:], "variant": config.name}
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = ad.grad(_batch_loss(cfg, config, inputs, src_all[idx], tgt_all[idx], rng), params)
                norm = _global_norm(grads)
        except ContractViolation as exc:
            # non-finite activations trip the softmax guard before the loss exists
            raise TrainingError(f"training diverged at step {step}: {exc}", dict(diag, loss=float("nan"))) from exc
        if not (math.isfinite(loss) and math.isfinite(norm)):
            raise TrainingError(f"training diverged at step {step}", dict(diag, loss=loss, grad_norm=norm))
        scale = min(1.0, config.clip / norm) if norm > 0 else 1.0
        if scale < 1.0:
            for g in grads.values():
                g *= scale
        result.losses.append(loss)
        result.grad_norms.append(norm)
        result.clipped_norms.append(norm * scale)
        opt.step(params, grads)
        if log_every and log is not None and (step + 1) % log_every == 0:
            log(f"{config.name} seed {config.seed} step {step + 1}: loss {loss:.6f}")
    return result


# -- evaluation ---------------------------------------------------------------------------
def predict(params, cfg, dataset, batch=16):
    """Predicted target patches for every pair, (n_pairs, n_tokens, patch_dim)."""
    conds = dataset.conditioning(cfg)
    src, _ = dataset.tokens(cfg)
    frozen = {k: ad.as_tensor(v) for k, v in params.items()}
    outs = []
    for s in range(0, len(dataset), batch):
        idx = np.arange(s, min(s + batch, len(dataset)))
        inputs = collate(cfg, [conds[i] for i in idx], dataset.image_hw)
        outs.append(model_forward(frozen, cfg, inputs, src[idx]).data)
    return np.concatenate(outs, axis=0)


def _frames(tokens, cfg, dataset):
    h, w = dataset.image_hw
    t_lat = -(-dataset.n_frames // cfg.r_t)
    return unpatchify(tokens, cfg.r_t, cfg.patch, dataset.n_frames, (t_lat, h // cfg.patch, w // cfg.patch))


def evaluate(params, config, dataset):
    """Held-out MSE on target patches and mean PSNR of the clipped predicted clips."""
    cfg = config.model_config()
    pred = predict(params, cfg, dataset)
    _, tgt = dataset.tokens(cfg)
    loss = float(np.mean((pred - tgt) ** 2))
    scores = []
    for i, pair in enumerate(dataset.pairs):
        frames = np.clip(_frames(pred[i], cfg, dataset), 0.0, 1.0)
        scores.append(psnr(frames.reshape(-1, frames.shape[2], 1),
                           pair.target.frames.reshape(-1, frames.shape[2], 1)))
    return loss, float(np.mean(scores)), pred


@dataclass
class RunRecord:
    variant: str
    seed: int
    held_out_loss: float
    psnr: float
    final_train_loss: float


def _run_one(args):
    config, train_set, eval_set = args
    result = train(config, train_set)
    loss, score, _ = evaluate(result.params, config, eval_set)
    final = float(np.mean(result.losses[-50:])) if result.losses else float("nan")
    return RunRecord(config.name, config.seed, loss, score, final), result.losses


@dataclass
class AblationReport:
    runs: list
    curves: dict  # (variant, seed) -> losses
    order: list  # variant names in the order given

    def summary(self):
        out = {}
        for name in self.order:
            rows = [r for r in self.runs if r.variant == name]
            losses = np.array([r.held_out_loss for r in rows])
            scores = np.array([r.psnr for r in rows])
            ddof = 1 if len(rows) > 1 else 0
            out[name] = {"mean_loss": float(losses.mean()), "sd_loss": float(losses.std(ddof=ddof)),
                         "mean_psnr": float(scores.mean()), "sd_psnr": float(scores.std(ddof=ddof)),
                         "seeds": [r.seed for r in rows]}
        means = sorted({v["mean_loss"] for v in out.values()})
        for v in out.values():
            v["rank"] = means.index(v["mean_loss"]) + 1
        return out

    def pairwise(self):
        """``"a < b"`` -> whether variant a has the lower mean held-out loss."""
        s = self.summary()
        return {f"{a} < {b}": s[a]["mean_loss"] < s[b]["mean_loss"]
                for a in self.order for b in self.order if a != b}

    def less(self, a, b):
        s = self.summary()
        return s[a]["mean_loss"] < s[b]["mean_loss"]

    def separated(self, a, b):
        """True when the mean +- 1 sd loss intervals of a and b do not overlap."""
        s = self.summary()
        lo, hi = (a, b) if s[a]["mean_loss"] <= s[b]["mean_loss"] else (b, a)
        return s[lo]["mean_loss"] + s[lo]["sd_loss"] < s[hi]["mean_loss"] - s[hi]["sd_loss"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "held_out_loss", "psnr"])
        for r in self.runs:
            w.writerow([r.variant, r.seed, f"{r.held_out_loss:.9g}", f"{r.psnr:.6f}"])
        return buf.getvalue()

    def to_json(self, extra=None):
        body = {"summary": self.summary(), "pairwise": self.pairwise(),
                "runs": [asdict(r) for r in self.runs]}
        if extra:
            body.update(extra)
        return json.dumps(body, indent=2, sort_keys=True)

    def curves_csv(self, name, seed):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(self.curves[(name, seed)]):
            w.writerow([i, f"{loss:.9g}"])
        return buf.getvalue()


def run_ablation(variants, train_set, eval_set, seeds=(0, 1, 2), workers=1):
    """Train every variant for every seed on shared data and rank by held-out loss.

    Runs are independent; ``workers > 1`` spreads them over processes.
    """
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise DomainError("variant names must be unique")
    if len({(v.iterations, v.batch_size, v.lr) for v in variants}) > 1:
        raise DomainError("variants must share the iteration budget and optimiser settings")
    jobs = [(replace(v, seed=s), train_set, eval_set) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = [r for r, _ in results]
    curves = {(r.variant, r.seed): c for r, c in results}
    return AblationReport(runs, curves, names)


def eval_time_generalization(params, config, warps, n_scenes=16, seed=12345, image=8,
                             reference=None, training_set=None):
    """Per-warp target reconstruction error on fresh scenes for given world-time sequences.

    ``warps`` is a sequence of (label, WorldTimeSequence). ``reference`` is an
    optional (params, TrainConfig) of a comparison model (typically the
    index-RoPE variant); the report then flags whether this model has the
    lower mean error on every warp. Warps found verbatim among the training
    targets are flagged ``seen_in_training``.
    """
    if not warps:
        raise DimensionError("no warps to evaluate")
    seen = set()
    if training_set is not None:
        seen = {p.target.taus.tau for p in training_set.pairs}
    cfg = config.model_config()
    rng = np.random.default_rng(seed)
    rows = []
    for label, taus in warps:
        n_frames, fps = len(taus), taus.fps
        pairs = []
        for _ in range(n_scenes):
            scene_seed = int(rng.integers(0, 2 ** 63 - 1))
            cam = static_trajectory(_front_waypoint(rng), n_frames, fps, Intrinsics())
            pairs.append(ToyPair(render_toy_scene(scene_seed, WorldTimeSequence.uniform(n_frames, fps), cam,
                                                  image, image),
                                 render_toy_scene(scene_seed, taus, cam, image, image), label))
        ds = ToyDataset(pairs, "time", (image, image), n_frames, fps)
        row = {"warp": label, "tau": list(taus.to_json()), "seen_in_training": taus.tau in seen}
        row.update(_per_frame_error(params, cfg, ds))
        if reference is not None:
            ref = _per_frame_error(reference[0], reference[1].model_config(), ds)
            row["reference_mse"] = ref["mse"]
            row["reference_per_frame"] = ref["per_frame"]
        rows.append(row)
    report = {"variant": config.name, "warps": rows, "continuous_beats_index": None}
    if reference is not None:
        report["reference"] = reference[1].name
        report["continuous_beats_index"] = all(r["mse"] < r["reference_mse"] for r in rows)
    return report


def _per_frame_error(params, cfg, ds):
    pred = predict(params, cfg, ds)
    errs = []
    for i, pair in enumerate(ds.pairs):
        frames = _frames(pred[i], cfg, ds)
        errs.append(np.mean((frames - pair.target.frames) ** 2, axis=(1, 2, 3)))
    per_frame = np.mean(errs, axis=0)
    return {"mse": float(per_frame.mean()), "per_frame": [float(e) for e in per_frame]}
