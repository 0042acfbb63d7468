"""Camera poses, waypoint trajectories and Plücker ray maps.

Convention: right-handed world, camera-to-world extrinsics, the camera looks
down its local -z axis with +y up and +x right. Pixel (u, v) has its centre at
(u + 0.5, v + 0.5); rows (v) grow downwards in the image.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateError, DimensionError, DomainError, InfeasibleError
from .timewarp import eval_smoothstep

CONVENTION = "right-handed; camera-to-world; camera looks down -z, +y up; pixel centres at +0.5"
PLUECKER_MAGIC = b"PLK1"


def _check_rotation(r, tol=1e-9):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise DimensionError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise DomainError("rotation is not orthonormal with det +1")
    return r


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _check_rotation(self.rotation).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.isfinite(t).all():
            raise DomainError("translation must be finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-12:
            raise DomainError("not a rigid homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return CameraPose(rt, -rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    @property
    def forward(self):
        return -self.rotation[:, 2]

    def __eq__(self, other):
        return (isinstance(other, CameraPose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Intrinsics:
    focal_mm: float = 30.0
    sensor_width_mm: float = 50.0
    width_px: int = 64
    height_px: int = 64

    def __post_init__(self):
        if min(self.focal_mm, self.sensor_width_mm) <= 0 or min(self.width_px, self.height_px) <= 0:
            raise DomainError("intrinsics must be positive")

    @property
    def fx(self):
        return self.focal_mm / self.sensor_width_mm * self.width_px

    @property
    def fy(self):
        return self.fx

    @property
    def cx(self):
        return self.width_px / 2.0

    @property
    def cy(self):
        return self.height_px / 2.0

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def with_size(self, width_px, height_px):
        return replace(self, width_px=width_px, height_px=height_px)

    def to_dict(self):
        return {"focal_mm": self.focal_mm, "sensor_width_mm": self.sensor_width_mm,
                "width_px": self.width_px, "height_px": self.height_px}


@dataclass(frozen=True)
class WaypointSpec:
    lookat_center: tuple
    radius: float
    azimuth: float  # degrees
    elevation: float  # degrees

    def __post_init__(self):
        object.__setattr__(self, "lookat_center", tuple(float(c) for c in self.lookat_center))

    def position(self):
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        offset = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        return np.asarray(self.lookat_center) + self.radius * offset

    def to_dict(self):
        return {"center": list(self.lookat_center), "radius": self.radius,
                "azimuth": self.azimuth, "elevation": self.elevation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), float(d["radius"]), float(d["azimuth"]), float(d["elevation"]))


@dataclass(frozen=True)
class CameraTrajectory:
    poses: tuple
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    fps: float = 16.0
    lookat: tuple | None = None  # optional per-frame WaypointSpec annotations

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 1:
            raise DimensionError("a trajectory needs at least one pose")
        if self.lookat is not None:
            object.__setattr__(self, "lookat", tuple(self.lookat))
            if len(self.lookat) != len(self.poses):
                raise DimensionError("look-at annotations must match the pose count")

    def __len__(self):
        return len(self.poses)

    def matrices(self):
        return np.stack([p.matrix() for p in self.poses])

    def centers(self):
        return np.stack([p.translation for p in self.poses])

    def to_dict(self):
        d = {
            "fps": self.fps,
            "intrinsics": self.intrinsics.to_dict(),
            "poses": [{"R": p.rotation.reshape(-1).tolist(), "t": p.translation.tolist()} for p in self.poses],
        }
        if self.lookat is not None:
            d["lookat"] = [w.to_dict() for w in self.lookat]
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            intr = Intrinsics(**d["intrinsics"])
            poses = [CameraPose(np.reshape(p["R"], (3, 3)), p["t"]) for p in d["poses"]]
            lookat = [WaypointSpec.from_dict(w) for w in d["lookat"]] if d.get("lookat") else None
            return cls(tuple(poses), intr, float(d["fps"]), None if lookat is None else tuple(lookat))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed trajectory: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class TrajectoryConstraints:
    subject_centroid: tuple = (0.0, 0.0, 0.0)
    radius_range: tuple = (4.0, 12.0)
    max_azimuth_span: float = 75.0
    max_elevation_span: float = 30.0
    max_lookat_offset: float = 1.0
    elevation_range: tuple = (-10.0, 40.0)


# -- pose construction ------------------------------------------------------------
def look_at_pose(spec, up=(0.0, 1.0, 0.0)):
    position = spec.position()
    center = np.asarray(spec.lookat_center, dtype=np.float64)
    forward = center - position
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise DegenerateError("camera position coincides with the look-at center")
    forward /= dist
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9 * max(np.linalg.norm(up), 1e-300):
        raise DegenerateError("up vector is parallel to the viewing direction")
    right /= norm
    cam_up = np.cross(right, forward)
    rot = np.stack([right, cam_up, -forward], axis=1)
    return CameraPose(rot, position)


def _lerp_angle(a, b, t):
    delta = (b - a + 180.0) % 360.0 - 180.0
    return a + delta * t


def interpolate_waypoints(waypoints, n_frames, easing="uniform", fps=16.0,
                          intrinsics=None, up=(0.0, 1.0, 0.0)):
    """Piecewise interpolation in look-at parameter space.

    Frames are spread evenly over the waypoint segments; within a segment the
    local parameter is eased (``uniform`` or ``smoothstep``). Azimuth follows
    the shorter arc. Orientation is re-derived per frame with ``look_at_pose``.
    """
    waypoints = list(waypoints)
    if len(waypoints) < 2 or n_frames < 2:
        raise DimensionError("need at least 2 waypoints and 2 frames")
    if easing not in ("uniform", "smoothstep"):
        raise DomainError(f"unknown easing '{easing}'")
    n_seg = len(waypoints) - 1
    specs = []
    for i in range(n_frames):
        u = i / (n_frames - 1) * n_seg
        k = min(int(math.floor(u)), n_seg - 1)
        t = u - k
        if easing == "smoothstep":
            t = eval_smoothstep(min(max(t, 0.0), 1.0))
        a, b = waypoints[k], waypoints[k + 1]
        if t == 0.0:
            specs.append(a)
            continue
        if t == 1.0:
            specs.append(b)
            continue
        center = tuple((1 - t) * np.asarray(a.lookat_center) + t * np.asarray(b.lookat_center))
        specs.append(WaypointSpec(center, (1 - t) * a.radius + t * b.radius,
                                  _lerp_angle(a.azimuth, b.azimuth, t),
                                  (1 - t) * a.elevation + t * b.elevation))
    poses = tuple(look_at_pose(s, up) for s in specs)
    return CameraTrajectory(poses, intrinsics or Intrinsics(), fps, tuple(specs))


def static_trajectory(waypoint, n_frames, fps=16.0, intrinsics=None):
    pose = look_at_pose(waypoint)
    return CameraTrajectory((pose,) * n_frames, intrinsics or Intrinsics(), fps, (waypoint,) * n_frames)


# -- constraint checks ------------------------------------------------------------
def measure_trajectory(traj):
    """Recompute look-at geometry from emitted poses and centre annotations."""
    if traj.lookat is None:
        raise DomainError("trajectory carries no look-at annotations")
    centers = np.array([w.lookat_center for w in traj.lookat])
    positions = traj.centers()
    rel = positions - centers
    radii = np.linalg.norm(rel, axis=1)
    unit = rel / radii[:, None]
    az = np.unwrap(np.arctan2(unit[:, 0], unit[:, 2]))
    el = np.arcsin(np.clip(unit[:, 1], -1.0, 1.0))
    aim = np.array([np.dot(p.forward, -u) for p, u in zip(traj.poses, unit)])
    ortho = max(float(np.abs(p.rotation.T @ p.rotation - np.eye(3)).max()) for p in traj.poses)
    return {
        "radii": radii,
        "azimuth_deg": np.degrees(az),
        "elevation_deg": np.degrees(el),
        "centers": centers,
        "aim_cosine_min": float(aim.min()),
        "orthonormality_err": ortho,
    }


def check_constraints(traj, constraints=None):
    """Named pass/fail checks for the waypoint-sampling bounds."""
    c = constraints or TrajectoryConstraints()
    m = measure_trajectory(traj)
    offset = np.linalg.norm(m["centers"] - np.asarray(c.subject_centroid), axis=1).max()
    az_span = float(np.ptp(m["azimuth_deg"]))
    el_span = float(np.ptp(m["elevation_deg"]))
    tol = 1e-9
    return {
        "radius_range": (float(m["radii"].min()), float(m["radii"].max()),
                         m["radii"].min() >= c.radius_range[0] - tol and m["radii"].max() <= c.radius_range[1] + tol),
        "azimuth_span": (az_span, az_span <= c.max_azimuth_span + tol),
        "elevation_span": (el_span, el_span <= c.max_elevation_span + tol),
        "lookat_offset": (float(offset), offset <= c.max_lookat_offset + tol),
        "aim": (m["aim_cosine_min"], m["aim_cosine_min"] >= 1 - 1e-9),
        "orthonormality": (m["orthonormality_err"], m["orthonormality_err"] < 1e-9),
    }


def failed_checks(report):
    return [name for name, vals in report.items() if not vals[-1]]


def trajectory_from_waypoints(waypoints, n_frames, easing="uniform", constraints=None,
                              fps=16.0, intrinsics=None):
    """Interpolate explicit waypoints and reject any violation of the bounds."""
    waypoints = list(waypoints)
    if len(waypoints) == 1:
        traj = static_trajectory(waypoints[0], n_frames, fps, intrinsics)
    else:
        traj = interpolate_waypoints(waypoints, n_frames, easing, fps, intrinsics)
    bad = failed_checks(check_constraints(traj, constraints))
    if bad:
        raise InfeasibleError(f"trajectory violates constraints: {', '.join(bad)}")
    return traj


def _sample_center(rng, c):
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    r = c.max_lookat_offset * rng.uniform() ** (1 / 3)
    return tuple(np.asarray(c.subject_centroid) + r * direction)


def _perturb(rng, base, c):
    return WaypointSpec(
        _sample_center(rng, c),
        float(np.clip(base.radius + rng.uniform(-2.5, 2.5), *c.radius_range)),
        base.azimuth + rng.uniform(-c.max_azimuth_span / 2, c.max_azimuth_span / 2),
        float(np.clip(base.elevation + rng.uniform(-c.max_elevation_span / 2, c.max_elevation_span / 2),
                      *c.elevation_range)),
    )


def sample_trajectory(kind, constraints=None, n_frames=81, seed=0, fps=16.0, intrinsics=None,
                      max_attempts=100):
    """Sample a static, orbit (base + one waypoint) or multi-waypoint (3-4 waypoints) path.

    Candidates are rejected until every bound holds on the interpolated path.
    """
    if n_frames < 1:
        raise DimensionError("need at least one frame")
    if kind not in ("static", "orbit", "multi_waypoint"):
        raise DomainError(f"unknown trajectory kind '{kind}'")
    c = constraints or TrajectoryConstraints()
    if c.radius_range[0] > c.radius_range[1] or c.max_lookat_offset < 0:
        raise InfeasibleError("empty constraint set")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        base = WaypointSpec(_sample_center(rng, c), float(rng.uniform(*c.radius_range)),
                            float(rng.uniform(0.0, 360.0)), float(rng.uniform(*c.elevation_range)))
        easing = "smoothstep" if rng.uniform() < 0.5 else "uniform"
        if kind == "static" or n_frames == 1:
            traj = static_trajectory(base, n_frames, fps, intrinsics)
        else:
            n_extra = 1 if kind == "orbit" else int(rng.integers(2, 4))
            waypoints = [base] + [_perturb(rng, base, c) for _ in range(n_extra)]
            try:
                traj = interpolate_waypoints(waypoints, n_frames, easing, fps, intrinsics)
            except DegenerateError:
                continue
        if not failed_checks(check_constraints(traj, c)):
            return traj
    raise InfeasibleError(f"no {kind} trajectory satisfied the constraints in {max_attempts} attempts")


# -- derived quantities ---------------------------------------------------------------
@dataclass(frozen=True)
class PlueckerMap:
    directions: np.ndarray  # (H, W, 3) unit ray directions
    moments: np.ndarray  # (H, W, 3) origin x direction

    def array(self):
        return np.concatenate([self.directions, self.moments], axis=-1)

    @property
    def shape(self):
        return self.directions.shape[:2]

    def to_bytes(self):
        h, w = self.shape
        header = PLUECKER_MAGIC + struct.pack("<III", h, w, 0)
        return header + self.array().astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != PLUECKER_MAGIC:
            raise DomainError("not a PLK1 Plücker map")
        h, w, _ = struct.unpack("<III", blob[4:16])
        arr = np.frombuffer(blob[16:], dtype="<f4").astype(np.float64)
        if arr.size != h * w * 6:
            raise DimensionError("payload size does not match header")
        arr = arr.reshape(h, w, 6)
        return cls(arr[..., :3], arr[..., 3:])


def camera_ray_directions(intr):
    """Unit ray directions in the camera frame, shape (H, W, 3)."""
    v, u = np.meshgrid(np.arange(intr.height_px), np.arange(intr.width_px), indexing="ij")
    x = (u + 0.5 - intr.cx) / intr.fx
    y = -(v + 0.5 - intr.cy) / intr.fy
    d = np.stack([x, y, -np.ones_like(x, dtype=np.float64)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pluecker_map(pose, intr):
    d = camera_ray_directions(intr) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.translation, d.shape), d)
    return PlueckerMap(d, m)


def project_points(pose, intr, points):
    """World points (N, 3) to pixel coordinates (N, 2) and camera depth (N,)."""
    pts = np.atleast_2d(points)
    cam = (pts - pose.translation) @ pose.rotation
    depth = -cam[:, 2]
    u = intr.fx * cam[:, 0] / depth + intr.cx
    v = -intr.fy * cam[:, 1] / depth + intr.cy
    return np.stack([u, v], axis=1), depth


def unproject_pixel(pose, intr, uv, depth):
    """Inverse of ``project_points`` for one pixel at a given depth."""
    x = (uv[0] - intr.cx) / intr.fx * depth
    y = -(uv[1] - intr.cy) / intr.fy * depth
    return pose.rotation @ np.array([x, y, -depth]) + pose.translation


def subsample_trajectory(traj, factor):
    if factor < 1:
        raise DomainError("subsampling factor must be >= 1")
    lookat = None if traj.lookat is None else traj.lookat[::factor]
    return CameraTrajectory(traj.poses[::factor], traj.intrinsics, traj.fps, lookat)


def _as_rigid(w):
    if isinstance(w, CameraPose):
        return w
    m = np.asarray(w, dtype=np.float64)
    if m.shape != (4, 4):
        raise DomainError("rigid transform must be a CameraPose or 4x4 matrix")
    if np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-12:
        raise DomainError("transform has a projective row")
    return CameraPose(m[:3, :3], m[:3, 3])


def global_transform(traj, w):
    """Left-compose a rigid world transform onto every pose.

    Look-at annotations are dropped because their angles are world-axis bound.
    """
    w = _as_rigid(w)
    return CameraTrajectory(tuple(w.compose(p) for p in traj.poses), traj.intrinsics, traj.fps, None)


def random_rigid(rng, translation_scale=5.0):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return CameraPose(rot, rng.uniform(-translation_scale, translation_scale, size=3))
