"""Camera-trajectory errors and (masked) image-similarity metrics.

Trajectory errors compare relative-to-first-frame quantities, so the arbitrary
world gauge of an estimate drops out; translations are additionally aligned by
a least-squares scale. The exact conventions are in ``CONVENTIONS`` and are
written into every report.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraTrajectory, _check_rotation
from .errors import DimensionError, DomainError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

CONVENTIONS = (
    "rot_err: mean over frames of the geodesic angle (degrees) between "
    "relative-to-first-frame world-to-camera rotations; "
    "trans_err: camera centres expressed in the first camera frame, aligned by the "
    "least-squares scale s* = argmin sum |s*t_est - t_gt|^2, mean residual in GT units; "
    "psnr capped at 99 dB; ssim 11x11 gaussian window sigma 1.5, C1=(0.01 peak)^2, "
    "C2=(0.03 peak)^2, reflect padding"
)


@dataclass(frozen=True)
class TrajectoryPair:
    estimate: CameraTrajectory
    truth: CameraTrajectory

    def __post_init__(self):
        if len(self.estimate) != len(self.truth):
            raise DimensionError(f"trajectory lengths differ: {len(self.estimate)} vs {len(self.truth)}")


@dataclass(frozen=True)
class MaskedImagePair:
    a: np.ndarray
    b: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        a, b = _as_image(self.a), _as_image(self.b)
        mask = np.asarray(self.mask)
        if a.shape != b.shape:
            raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
        if mask.shape != a.shape[:2]:
            raise DimensionError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
        if not mask.astype(bool).any():
            raise DomainError("mask selects no pixels")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "mask", mask.astype(bool))


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise DimensionError("images must be (H, W) or (H, W, C)")
    return x


def _pair(estimate, truth=None):
    if isinstance(estimate, TrajectoryPair):
        return estimate
    return TrajectoryPair(estimate, truth)


# -- trajectories ------------------------------------------------------------------
def rotation_angle(r):
    """Geodesic angle (degrees) of a rotation matrix.

    atan2 of the skew and symmetric parts stays accurate near 0 and 180 degrees,
    where arccos of the trace loses half the digits.
    """
    r = np.asarray(r, dtype=np.float64)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def _w2c_rotations(traj):
    return [_check_rotation(p.rotation).T for p in traj.poses]


def per_frame_rot_err(estimate, truth=None):
    pair = _pair(estimate, truth)
    if len(pair.truth) < 1:
        raise DimensionError("need at least one frame")
    est, gt = _w2c_rotations(pair.estimate), _w2c_rotations(pair.truth)
    return np.array([rotation_angle((e @ est[0].T) @ (g @ gt[0].T).T) for e, g in zip(est, gt)])


def rot_err(estimate, truth=None):
    """Mean relative-rotation error in degrees (accepts a TrajectoryPair or two trajectories)."""
    return float(per_frame_rot_err(estimate, truth).mean())


def _relative_centres(traj):
    r0 = traj.poses[0].rotation
    c = traj.centers()
    return (c - c[0]) @ r0


@dataclass(frozen=True)
class TranslationError:
    value: float
    scale: float
    degenerate: bool
    per_frame: np.ndarray


def trans_err_report(estimate, truth=None):
    pair = _pair(estimate, truth)
    if len(pair.truth) < 2:
        raise DimensionError("translation error needs at least two frames")
    t_est, t_gt = _relative_centres(pair.estimate), _relative_centres(pair.truth)
    denom = float(np.sum(t_est * t_est))
    degenerate = denom <= 1e-24
    scale = 1.0 if degenerate else float(np.sum(t_est * t_gt)) / denom
    resid = np.linalg.norm(scale * t_est - t_gt, axis=1)
    return TranslationError(float(resid.mean()), scale, degenerate, resid)


def trans_err(estimate, truth=None):
    """Mean scale-aligned translation residual (see ``trans_err_report`` for details)."""
    return trans_err_report(estimate, truth).value


# -- images ------------------------------------------------------------------------
def _psnr_from_mse(mse, peak):
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def psnr(a, b, peak=1.0):
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def mpsnr(pair, peak=1.0):
    d = (pair.a - pair.b)[pair.mask]
    return _psnr_from_mse(float(np.mean(d * d)), peak)


def mae(a, b):
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def mmae(pair):
    return float(np.mean(np.abs(pair.a - pair.b)[pair.mask]))


def ssim_map(a, b, peak=1.0):
    """Per-pixel SSIM averaged over channels, (H, W)."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA
    sigma = (SSIM_SIGMA, SSIM_SIGMA, 0.0)

    def blur(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=truncate)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=2)


def ssim(a, b, peak=1.0):
    return float(ssim_map(a, b, peak).mean())


def mssim(pair, peak=1.0):
    """Mean SSIM over windows whose centre pixel is inside the mask."""
    return float(ssim_map(pair.a, pair.b, peak)[pair.mask].mean())


# -- reports -----------------------------------------------------------------------
def trajectory_report_csv(estimate, truth, header_lines=()):
    """One row per frame plus a summary row, preceded by '#' convention lines."""
    pair = _pair(estimate, truth)
    rots = per_frame_rot_err(pair)
    trans = trans_err_report(pair) if len(pair.truth) >= 2 else None
    buf = io.StringIO()
    for line in list(header_lines) + [f"conventions: {CONVENTIONS}"]:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "rot_err_deg", "trans_err"])
    for i, r in enumerate(rots):
        t = "" if trans is None else f"{trans.per_frame[i]:.9g}"
        writer.writerow([i, f"{r:.9g}", t])
    writer.writerow(["mean", f"{rots.mean():.9g}", "" if trans is None else f"{trans.value:.9g}"])
    return buf.getvalue()


def image_report_rows(frames_a, frames_b, masks=None, peak=1.0):
    """Per-frame dicts of (m)PSNR, (m)MAE and (m)SSIM for two (F, H, W[, C]) stacks."""
    frames_a = np.asarray(frames_a, dtype=np.float64)
    frames_b = np.asarray(frames_b, dtype=np.float64)
    if frames_a.shape != frames_b.shape:
        raise DimensionError("frame stacks differ in shape")
    rows = []
    for i in range(frames_a.shape[0]):
        if masks is None:
            mask = np.ones(frames_a.shape[1:3], bool)
        else:
            mask = masks[i]
        pair = MaskedImagePair(frames_a[i], frames_b[i], mask)
        rows.append({"frame": i, "psnr": mpsnr(pair, peak), "mae": mmae(pair), "ssim": mssim(pair, peak)})
    return rows
