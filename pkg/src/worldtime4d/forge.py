"""Render-ready scene specifications: camera trajectories x world-time patterns.

A scene has three camera paths (multi-waypoint, orbit, static) and three
temporal patterns (linear plus two sampled warps). Every one of the nine
combinations is written as its own manifest file so that a renderer can treat
each file as one job; the dataset-level validator re-checks that the temporal
variants of a scene share byte-identical cameras.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .camera import CameraTrajectory, TrajectoryConstraints, check_constraints, sample_trajectory
from .errors import DimensionError, DomainError, ManifestParseError
from .timewarp import WarpSpec, WorldTimeSequence, generate_warp, sample_warp_spec, validate_monotone

SCHEMA_ID = "forge4d/1"
CAMERA_KINDS = ("multi_waypoint", "orbit", "static")
SAMPLED_WARPS = ("slow_motion", "pausing", "random_speed", "spline")
ENVIRONMENTS = tuple(f"env_{i:03d}" for i in range(80))
CHARACTERS = tuple(f"char_{i:03d}" for i in range(100))
VARIANTS_PER_SCENE = len(CAMERA_KINDS) * 3

_REAL = {"type": "number"}
_VEC3 = {"type": "array", "items": _REAL, "minItems": 3, "maxItems": 3}
_WAYPOINT = {
    "type": "object",
    "required": ["center", "radius", "azimuth", "elevation"],
    "properties": {"center": _VEC3, "radius": _REAL, "azimuth": _REAL, "elevation": _REAL},
}
CAMERA_SCHEMA = {
    "type": "object",
    "required": ["fps", "intrinsics", "poses"],
    "properties": {
        "fps": {"type": "number", "exclusiveMinimum": 0},
        "intrinsics": {"type": "object"},
        "poses": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["R", "t"],
            "properties": {"R": {"type": "array", "items": _REAL, "minItems": 9, "maxItems": 9},
                           "t": _VEC3}}},
        "lookat": {"type": "array", "items": _WAYPOINT},
    },
}
MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "scene_id", "fps", "frames", "variants"],
    "properties": {
        "schema": {"const": SCHEMA_ID},
        "scene_id": {"type": "string", "minLength": 1},
        "fps": {"type": "number", "exclusiveMinimum": 0},
        "frames": {"type": "integer", "minimum": 2},
        "environment": {"type": "string"},
        "character": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "subject_centroid": _VEC3,
        "variants": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["variant_id", "camera", "world_time", "warp_spec"],
            "properties": {
                "variant_id": {"type": "string"},
                "camera_kind": {"enum": list(CAMERA_KINDS)},
                "camera": CAMERA_SCHEMA,
                "world_time": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "warp_spec": {"type": "object", "required": ["kind"],
                              "properties": {"kind": {"type": "string"}, "params": {"type": "object"},
                                             "seed": {"type": "integer"}}},
            }}},
    },
}
INDEX_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["path", "scene_id", "variant_id", "environment", "character", "sha256"],
    "properties": {"path": {"type": "string"}, "scene_id": {"type": "string"},
                   "variant_id": {"type": "string"}, "environment": {"type": "string"},
                   "character": {"type": "string"}, "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"}},
}


def scene_seed(global_seed, scene_id):
    """Per-scene seed derived from a hash, so forging order never matters."""
    digest = hashlib.sha256(f"{int(global_seed)}:{scene_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class Variant:
    variant_id: str
    camera_kind: str
    camera: CameraTrajectory
    warp: WarpSpec
    world_time: WorldTimeSequence

    def to_dict(self):
        return {"variant_id": self.variant_id, "camera_kind": self.camera_kind,
                "camera": self.camera.to_dict(), "world_time": self.world_time.to_json(),
                "warp_spec": self.warp.to_dict()}


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    environment: str
    character: str
    fps: float
    frames: int
    seed: int
    subject_centroid: tuple
    variants: tuple

    def header(self):
        return {"schema": SCHEMA_ID, "scene_id": self.scene_id, "environment": self.environment,
                "character": self.character, "fps": self.fps, "frames": self.frames, "seed": self.seed,
                "subject_centroid": [float(x) for x in self.subject_centroid]}

    def to_dict(self):
        return {**self.header(), "variants": [v.to_dict() for v in self.variants]}

    def variant_dict(self, i):
        """Single-variant manifest (one render job)."""
        return {**self.header(), "variants": [self.variants[i].to_dict()]}


def dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def forge_scene(seed, fps=16.0, n_frames=81, subject_centroid=(0.0, 0.0, 0.0), scene_id="scene",
                environment="env_000", character="char_000", constraints=None):
    """Nine variants: three camera paths, each under linear time and two sampled warps.

    The two sampled warp kinds are distinct and shared by all camera paths, so
    the nine clips form a full camera x time grid. Scene duration is
    ``n_frames / fps``.
    """
    if n_frames < 2:
        raise DimensionError("a scene needs at least 2 frames")
    if not fps > 0:
        raise DomainError("fps must be positive")
    base = constraints or TrajectoryConstraints()
    c = TrajectoryConstraints(tuple(float(x) for x in subject_centroid), base.radius_range,
                              base.max_azimuth_span, base.max_elevation_span, base.max_lookat_offset,
                              base.elevation_range)
    rng = np.random.default_rng(seed)
    cam_seeds = rng.integers(0, 2 ** 63 - 1, size=len(CAMERA_KINDS))
    cameras = [sample_trajectory(kind, c, n_frames, int(s), fps) for kind, s in zip(CAMERA_KINDS, cam_seeds)]
    kinds = rng.choice(len(SAMPLED_WARPS), size=2, replace=False)
    duration = n_frames / fps
    warps = [WarpSpec("linear")] + [sample_warp_spec(SAMPLED_WARPS[k], rng, n_frames) for k in kinds]
    times = [generate_warp(w, n_frames, duration, fps) for w in warps]
    for t in times:
        if not validate_monotone(t):
            raise DomainError("generated world time is not monotone")
    variants = []
    for kind, cam in zip(CAMERA_KINDS, cameras):
        for j, (w, t) in enumerate(zip(warps, times)):
            label = "linear" if j == 0 else f"t{j}_{w.kind}"
            variants.append(Variant(f"{kind}.{label}", kind, cam, w, t))
    return SceneManifest(scene_id, environment, character, float(fps), int(n_frames), int(seed),
                         tuple(float(x) for x in subject_centroid), tuple(variants))


@dataclass
class DatasetIndex:
    root: Path
    entries: list
    global_seed: int
    environments: dict = field(default_factory=dict)
    characters: dict = field(default_factory=dict)

    @property
    def manifest_paths(self):
        return [self.root / e["path"] for e in self.entries]


def forge_dataset(out_dir, n_scenes, global_seed=0, fps=16.0, n_frames=81,
                  subject_centroid=(0.0, 0.0, 0.0)):
    """Write ``n_scenes * 9`` variant manifests plus ``index.ndjson`` and ``index_summary.json``."""
    if n_scenes < 1:
        raise DimensionError("need at least one scene")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        sid = f"scene_{i:05d}"
        env, char = ENVIRONMENTS[i % len(ENVIRONMENTS)], CHARACTERS[i % len(CHARACTERS)]
        scene = forge_scene(scene_seed(global_seed, sid), fps, n_frames, subject_centroid, sid, env, char)
        scene_dir = root / sid
        scene_dir.mkdir(exist_ok=True)
        for k, v in enumerate(scene.variants):
            text = dumps(scene.variant_dict(k))
            rel = f"{sid}/{v.variant_id}.json"
            (root / rel).write_text(text)
            entries.append({"path": rel, "scene_id": sid, "variant_id": v.variant_id, "environment": env,
                            "character": char, "sha256": hashlib.sha256(text.encode()).hexdigest()})
    for e in entries:
        jsonschema.validate(e, INDEX_ENTRY_SCHEMA)
    with open(root / "index.ndjson", "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    envs = Counter(e["environment"] for e in entries)
    chars = Counter(e["character"] for e in entries)
    summary = {"schema": SCHEMA_ID, "global_seed": int(global_seed), "scenes": n_scenes,
               "entries": len(entries), "fps": fps, "frames": n_frames,
               "environments": dict(sorted(envs.items())), "characters": dict(sorted(chars.items()))}
    (root / "index_summary.json").write_text(dumps(summary))
    return DatasetIndex(root, entries, int(global_seed), dict(envs), dict(chars))


def read_index(out_dir):
    root = Path(out_dir)
    with open(root / "index.ndjson") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- validation ------------------------------------------------------------------------------
@dataclass
class ValidationReport:
    path: str
    checks: list  # [{"name", "passed", "detail"}]

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks)

    def failed(self):
        return [c["name"] for c in self.checks if not c["passed"]]

    def to_dict(self):
        return {"path": self.path, "passed": self.passed, "checks": self.checks}


def parse_manifest(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"malformed manifest: {exc.msg} at line {exc.lineno} column {exc.colno}",
                                 offset=exc.pos) from exc


def _rotation_error(pose):
    r = np.reshape(np.asarray(pose["R"], dtype=np.float64), (3, 3))
    return max(float(np.abs(r.T @ r - np.eye(3)).max()), abs(float(np.linalg.det(r)) - 1.0))


def check_manifest(doc, constraints=None, path=""):
    """Per-check report for an already parsed manifest document."""
    checks = []

    def add(name, ok, detail=""):
        checks.append({"name": name, "passed": bool(ok), "detail": detail})

    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        add("schema", False, f"{'/'.join(map(str, exc.absolute_path))}: {exc.message}")
        return ValidationReport(path, checks)
    add("schema", True)
    n_var = len(doc["variants"])
    add("variant_count", n_var in (1, VARIANTS_PER_SCENE), f"{n_var} variants")
    frames, fps = doc["frames"], doc["fps"]
    base = constraints or TrajectoryConstraints()
    centroid = tuple(doc.get("subject_centroid", base.subject_centroid))
    c = TrajectoryConstraints(centroid, base.radius_range, base.max_azimuth_span, base.max_elevation_span,
                              base.max_lookat_offset, base.elevation_range)
    agg = {k: True for k in ("frame_count", "orthonormality", "monotone", "linear_timeline", "radius_range",
                              "azimuth_span", "elevation_span", "lookat_offset", "aim")}
    details = {k: [] for k in agg}

    def fail(name, msg):
        agg[name] = False
        details[name].append(msg)

    for v in doc["variants"]:
        vid = v["variant_id"]
        cam, tau = v["camera"], v["world_time"]
        if len(cam["poses"]) != frames or len(tau) != frames:
            fail("frame_count", f"{vid}: {len(cam['poses'])} poses, {len(tau)} times, expected {frames}")
        err = max(_rotation_error(p) for p in cam["poses"])
        if err > 1e-9:
            fail("orthonormality", f"{vid}: rotation error {err:.3g}")
            continue
        if not validate_monotone(tau):
            fail("monotone", f"{vid}: world time decreases")
        if v["warp_spec"]["kind"] == "linear":
            dev = float(np.abs(np.asarray(tau) - np.arange(len(tau)) / fps).max())
            if dev > 1e-9:
                fail("linear_timeline", f"{vid}: deviates by {dev:.3g}s")
        if "lookat" not in cam:
            fail("aim", f"{vid}: no look-at annotations")
            continue
        try:
            traj = CameraTrajectory.from_dict(cam)
        except (DomainError, DimensionError) as exc:
            fail("orthonormality", f"{vid}: {exc}")
            continue
        for name, vals in check_constraints(traj, c).items():
            if name in agg and not vals[-1]:
                fail(name, f"{vid}: {vals[:-1]}")
    for name in agg:
        add(name, agg[name], "; ".join(details[name]))
    if n_var == VARIANTS_PER_SCENE:
        add("camera_shared", _cameras_shared(doc["variants"]))
    return ValidationReport(path, checks)


def _cameras_shared(variants):
    groups = {}
    for v in variants:
        key = v.get("camera_kind", v["variant_id"].split(".")[0])
        groups.setdefault(key, []).append(json.dumps(v["camera"], sort_keys=True))
    return len(groups) == len(CAMERA_KINDS) and all(len(g) == 3 and len(set(g)) == 1 for g in groups.values())


def validate_manifest(path, constraints=None):
    """Re-check a manifest file; malformed JSON raises ManifestParseError with a byte offset."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestParseError(f"manifest is not UTF-8: {exc.reason}", offset=exc.start) from exc
    doc = parse_manifest(text)
    if not isinstance(doc, dict):
        raise ManifestParseError("manifest root must be an object", offset=0)
    return check_manifest(doc, constraints, str(path))


def validate_dataset(out_dir, constraints=None):
    """Validate every indexed manifest plus the per-scene grid invariants.

    Returns (per-manifest reports, dataset checks). Dataset checks cover the
    9-variant count per scene, shared cameras across temporal variants and
    index hashes.
    """
    root = Path(out_dir)
    entries = read_index(root)
    reports = []
    scenes = {}
    hashes_ok = True
    for e in entries:
        jsonschema.validate(e, INDEX_ENTRY_SCHEMA)
        p = root / e["path"]
        raw = p.read_bytes()
        hashes_ok &= hashlib.sha256(raw).hexdigest() == e["sha256"]
        reports.append(validate_manifest(p, constraints))
        doc = json.loads(raw)
        scenes.setdefault(e["scene_id"], []).extend(doc["variants"])
    checks = [
        {"name": "index_hashes", "passed": bool(hashes_ok), "detail": ""},
        {"name": "scene_variant_count", "passed": all(len(v) == VARIANTS_PER_SCENE for v in scenes.values()),
         "detail": f"{len(scenes)} scenes"},
        {"name": "camera_shared", "passed": all(_cameras_shared(v) for v in scenes.values()), "detail": ""},
    ]
    return reports, checks


def manifest_files(out_dir):
    root = Path(out_dir)
    return sorted(p for p in root.glob("scene_*/*.json") if p.is_file())


def tree_digest(out_dir):
    """sha256 over relative paths and bytes of every emitted file (determinism checks)."""
    root = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(os.fsencode(p.relative_to(root).as_posix()))
            h.update(p.read_bytes())
    return h.hexdigest()
