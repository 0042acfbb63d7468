import json

import numpy as np
import pytest

from worldtime4d import forge
from worldtime4d.camera import WaypointSpec, interpolate_waypoints
from worldtime4d.errors import DimensionError, DomainError, ManifestParseError


@pytest.fixture(scope="module")
def two_scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("forge")
    idx = forge.forge_dataset(out, 2, global_seed=3, n_frames=17)
    return out, idx


def test_two_scenes_give_eighteen_entries(two_scenes):
    out, idx = two_scenes
    assert len(idx.entries) == 18
    assert len(forge.manifest_files(out)) == 18
    assert forge.read_index(out) == idx.entries
    summary = json.loads((out / "index_summary.json").read_text())
    assert summary["entries"] == 18 and summary["scenes"] == 2


def test_dataset_validates(two_scenes):
    out, _ = two_scenes
    reports, checks = forge.validate_dataset(out)
    assert all(r.passed for r in reports), [r.failed() for r in reports if not r.passed]
    assert all(c["passed"] for c in checks)


def test_forging_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    forge.forge_dataset(a, 2, global_seed=7, n_frames=9)
    forge.forge_dataset(b, 2, global_seed=7, n_frames=9)
    assert forge.tree_digest(a) == forge.tree_digest(b)
    c = tmp_path / "c"
    forge.forge_dataset(c, 2, global_seed=8, n_frames=9)
    assert forge.tree_digest(c) != forge.tree_digest(a)


def test_scene_seed_independent_of_order():
    assert forge.scene_seed(0, "scene_00001") == forge.scene_seed(0, "scene_00001")
    assert forge.scene_seed(0, "scene_00001") != forge.scene_seed(0, "scene_00002")
    assert forge.scene_seed(0, "scene_00001") != forge.scene_seed(1, "scene_00001")


def test_scene_grid_structure():
    scene = forge.forge_scene(11, fps=16.0, n_frames=17)
    assert len(scene.variants) == forge.VARIANTS_PER_SCENE
    kinds = {v.camera_kind for v in scene.variants}
    assert kinds == set(forge.CAMERA_KINDS)
    for v in scene.variants:
        if v.warp.kind == "linear":
            np.testing.assert_allclose(v.world_time.array(), np.arange(17) / 16.0, atol=1e-12)
        assert len(v.world_time) == 17 and len(v.camera.poses) == 17
    for kind in forge.CAMERA_KINDS:
        cams = [v.camera for v in scene.variants if v.camera_kind == kind]
        assert len(cams) == 3 and all(c is cams[0] for c in cams)
    warps = [v.warp.kind for v in scene.variants if v.camera_kind == forge.CAMERA_KINDS[0]]
    assert warps[0] == "linear" and len(set(warps)) == 3
    doc = scene.to_dict()
    assert forge.check_manifest(doc).passed


def test_forge_scene_errors():
    with pytest.raises(DimensionError):
        forge.forge_scene(0, n_frames=1)
    with pytest.raises(DomainError):
        forge.forge_scene(0, fps=0.0)
    with pytest.raises(DimensionError):
        forge.forge_dataset("/nonexistent-never-created", 0)


def _wide_orbit(n, span):
    ws = [WaypointSpec((0, 0, 0), 6.0, 0.0, 10.0), WaypointSpec((0, 0, 0), 6.0, span, 10.0)]
    return interpolate_waypoints(ws, n, fps=16.0)


def test_injected_azimuth_span_fails_by_name():
    scene = forge.forge_scene(5, n_frames=9)
    doc = json.loads(forge.dumps(scene.variant_dict(0)))
    doc["variants"][0]["camera"] = _wide_orbit(9, 80.0).to_dict()
    rep = forge.check_manifest(doc)
    assert not rep.passed and rep.failed() == ["azimuth_span"]
    doc["variants"][0]["camera"] = _wide_orbit(9, 60.0).to_dict()
    assert forge.check_manifest(doc).passed


def test_non_linear_linear_timeline_and_monotone_failures():
    doc = json.loads(forge.dumps(forge.forge_scene(6, n_frames=9).variant_dict(0)))
    assert doc["variants"][0]["warp_spec"]["kind"] == "linear"
    doc["variants"][0]["world_time"][3] += 0.01
    assert forge.check_manifest(doc).failed() == ["linear_timeline"]
    doc["variants"][0]["world_time"][3] = 0.0
    assert "monotone" in forge.check_manifest(doc).failed()


def test_non_orthonormal_pose_detected():
    doc = json.loads(forge.dumps(forge.forge_scene(6, n_frames=9).variant_dict(0)))
    doc["variants"][0]["camera"]["poses"][2]["R"][0] = 1.5
    assert forge.check_manifest(doc).failed() == ["orthonormality"]


def test_schema_violations():
    doc = json.loads(forge.dumps(forge.forge_scene(6, n_frames=9).variant_dict(0)))
    del doc["fps"]
    rep = forge.check_manifest(doc)
    assert rep.failed() == ["schema"]
    doc = json.loads(forge.dumps(forge.forge_scene(6, n_frames=9).variant_dict(0)))
    doc["variants"] = doc["variants"] * 2
    assert "variant_count" in forge.check_manifest(doc).failed()


def test_full_scene_manifest_requires_shared_cameras():
    doc = json.loads(forge.dumps(forge.forge_scene(8, n_frames=9).to_dict()))
    assert forge.check_manifest(doc).passed
    doc["variants"][1]["camera"] = doc["variants"][3]["camera"]
    assert "camera_shared" in forge.check_manifest(doc).failed()


def test_truncated_manifest_reports_offset(two_scenes, tmp_path):
    out, idx = two_scenes
    text = (out / idx.entries[0]["path"]).read_text()
    bad = tmp_path / "bad.json"
    bad.write_text(text[:200])
    with pytest.raises(ManifestParseError) as info:
        forge.validate_manifest(bad)
    assert 0 < info.value.offset <= 200
    bad.write_bytes(b'{"a": "\xff"}')
    with pytest.raises(ManifestParseError) as info:
        forge.validate_manifest(bad)
    assert info.value.offset == 7
    bad.write_text("[1, 2]")
    with pytest.raises(ManifestParseError):
        forge.validate_manifest(bad)


def test_tampered_file_breaks_index_hash(tmp_path):
    forge.forge_dataset(tmp_path, 1, n_frames=9)
    path = forge.manifest_files(tmp_path)[0]
    path.write_text(path.read_text() + " ")
    _, checks = forge.validate_dataset(tmp_path)
    assert not {c["name"]: c["passed"] for c in checks}["index_hashes"]
