import json
from dataclasses import replace

import numpy as np
import pytest

from worldtime4d import toytrain as tt
from worldtime4d.camera import Intrinsics, WaypointSpec, static_trajectory
from worldtime4d.errors import DimensionError, DomainError, TrainingError
from worldtime4d.timewarp import WorldTimeSequence

FAST = dict(iterations=6, batch_size=4, width=16, ffn_hidden=16, embed=8)


@pytest.fixture(scope="module")
def small_time_set():
    return tt.make_toy_dataset("time", n_pairs=6, seed=1)


def _static(n=8, az=0.0):
    return static_trajectory(WaypointSpec((0, 0, 0), 4.2, az, 10.0), n, 8.0, Intrinsics())


def test_render_frozen_world_static_camera():
    taus = WorldTimeSequence([0.3] * 5, 8.0)
    scene = tt.render_toy_scene(7, taus, _static(5))
    assert scene.frames.shape == (5, 8, 8, 1)
    assert (scene.frames >= 0).all() and (scene.frames <= 1).all()
    assert np.abs(scene.frames - scene.frames[:1]).max() == 0.0
    with pytest.raises(DimensionError):
        tt.render_toy_scene(7, taus, _static(5), height=4, width=8)
    with pytest.raises(DimensionError):
        tt.render_toy_scene(7, taus, _static(6))


def test_render_deterministic_and_reversal():
    taus = WorldTimeSequence.uniform(8, 8.0)
    a = tt.render_toy_scene(3, taus, _static())
    b = tt.render_toy_scene(3, taus, _static())
    np.testing.assert_array_equal(a.frames, b.frames)
    rev = tt.render_toy_scene(3, taus.reversed(), _static())
    np.testing.assert_array_equal(rev.frames, a.frames[::-1])


def test_render_disentanglement():
    taus = WorldTimeSequence.uniform(8, 8.0)
    a = tt.render_toy_scene(5, taus, _static(az=0.0))
    b = tt.render_toy_scene(5, taus, _static(az=20.0))
    # same world times: the blob world position does not depend on the camera
    np.testing.assert_array_equal(a.blob_world, b.blob_world)
    assert np.abs(a.blob_pixels - b.blob_pixels).max() > 0
    c = tt.render_toy_scene(5, WorldTimeSequence(taus.array() * 0.5, 8.0), _static(az=0.0))
    assert np.abs(c.blob_world - a.blob_world).max() > 0


def test_locate_blob_exact():
    taus = WorldTimeSequence([0.1], 8.0)
    scene = tt.render_toy_scene(2, taus, _static(1), height=32, width=32)
    np.testing.assert_allclose(tt.locate_blob(scene.frames[0]), scene.blob_pixels[0], atol=1e-8)
    with pytest.raises(DomainError):
        tt.locate_blob(np.zeros((8, 8)))


def test_bullet_time_probe():
    rng = np.random.default_rng(0)
    traj = tt.toy_orbit(rng, 9, 8.0, Intrinsics())
    res = tt.bullet_time_probe(4, 0.37, traj)
    assert res.max_px < 1.0
    assert np.ptp(res.world_positions, axis=0).max() < 1e-6


def test_dataset_structure(small_time_set):
    ds = small_time_set
    assert len(ds) == 6 and ds.image_hw == (8, 8)
    assert [p.warp_kind for p in ds.pairs] == list(tt.TRAIN_WARPS) * 2
    for p in ds.pairs:
        assert p.source.traj is p.target.traj
        np.testing.assert_allclose(p.source.taus.array(), np.arange(8) / 8.0)
    cam = tt.make_toy_dataset("camera", n_pairs=2, seed=1)
    for p in cam.pairs:
        assert len(set(p.source.traj.poses)) == 1 and len(set(p.target.traj.poses)) > 1
    with pytest.raises(DomainError):
        tt.make_toy_dataset("sound")
    with pytest.raises(DimensionError):
        tt.make_toy_dataset(n_pairs=0)


def test_held_out_warps():
    rng = np.random.default_rng(2)
    for kind in tt.HELD_OUT_WARPS:
        taus = tt.warp_taus(kind, rng, 8, 8.0)
        assert len(taus) == 8 and max(taus.tau) <= 7 / 8 + 1e-12
    rev = tt.warp_taus("reversal", rng, 8, 8.0)
    assert rev.tau[0] == 7 / 8 and rev.tau[-1] == 0.0


def test_train_config():
    with pytest.raises(DomainError):
        tt.TrainConfig(variant="trope+film")
    with pytest.raises(DomainError):
        tt.TrainConfig(lr=0.0)
    assert [c.variant for c in tt.variant_configs()] == list(tt.VARIANTS)
    full, no_rope, no_ada = tt.component_configs()
    assert (full.name, no_rope.name, no_ada.name) == ("full", "w/o 4D-RoPE", "w/o AdaLN")
    assert full.model_config().camera_cond == "adaln" and full.model_config().camera_rope
    assert no_rope.model_config().time_pos == "rope" and not no_rope.model_config().camera_rope
    assert no_ada.model_config().time_cond == "none" and no_ada.model_config().camera_cond == "none"
    assert tt.TrainConfig(variant="rope+xattn").model_config().time_cond == "xattn"


def test_zero_iterations_returns_init(small_time_set):
    cfg = tt.TrainConfig(iterations=0, **{k: v for k, v in FAST.items() if k != "iterations"})
    res = tt.train(cfg, small_time_set)
    init = tt.init_model(cfg.model_config(), cfg.seed)
    assert res.losses == []
    for k in init:
        np.testing.assert_array_equal(res.params[k], init[k])


def test_training_is_deterministic(small_time_set):
    cfg = tt.TrainConfig(**FAST)
    a = tt.train(cfg, small_time_set)
    b = tt.train(cfg, small_time_set)
    assert a.losses == b.losses
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = tt.train(replace(cfg, seed=1), small_time_set)
    assert c.losses != a.losses


def test_gradient_clipping(small_time_set):
    cfg = tt.TrainConfig(clip=0.05, **FAST)
    res = tt.train(cfg, small_time_set)
    assert all(n <= 0.05 + 1e-12 for n in res.clipped_norms)
    assert any(g > 0.05 for g in res.grad_norms)


def test_loss_non_increasing_full_batch_linear():
    ds = tt.make_toy_dataset("time", n_pairs=4, warp_kinds=("linear",), seed=3)
    cfg = tt.TrainConfig(iterations=10, batch_size=8, lr=1e-4, width=16, ffn_hidden=16, embed=8)
    losses = tt.train(cfg, ds).losses
    assert len(losses) == 10
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_training_error_on_divergence(small_time_set):
    cfg = tt.TrainConfig(lr=1e300, clip=1e300, **FAST)
    with pytest.raises(TrainingError) as info:
        tt.train(cfg, small_time_set)
    assert "step" in info.value.diagnostics


def test_denoise_objective_runs(small_time_set):
    res = tt.train(tt.TrainConfig(objective="denoise", **FAST), small_time_set)
    assert len(res.losses) == FAST["iterations"] and all(np.isfinite(res.losses))


def test_evaluate_and_ablation_report(small_time_set):
    eval_set = tt.make_toy_dataset("time", n_pairs=3, warp_kinds=tt.HELD_OUT_WARPS, seed=9)
    variants = [tt.TrainConfig(variant=v, **FAST) for v in ("trope+adaln", "rope+adaln")]
    rep = tt.run_ablation(variants, small_time_set, eval_set, seeds=(0, 1))
    summary = rep.summary()
    assert set(summary) == {"trope+adaln", "rope+adaln"}
    assert sorted(v["rank"] for v in summary.values()) == [1, 2]
    assert rep.pairwise()["trope+adaln < rope+adaln"] == rep.less("trope+adaln", "rope+adaln")
    rows = rep.to_csv().splitlines()
    assert rows[0] == "variant,seed,held_out_loss,psnr" and len(rows) == 5
    body = json.loads(rep.to_json({"note": "x"}))
    assert body["note"] == "x" and len(body["runs"]) == 4
    assert rep.curves_csv("rope+adaln", 1).splitlines()[0] == "step,loss"
    loss, score, pred = tt.evaluate(tt.train(variants[0], small_time_set).params, variants[0], eval_set)
    assert pred.shape[0] == 3 and loss >= 0 and np.isfinite(score)


def test_identical_variants_tie():
    ds = tt.make_toy_dataset("time", n_pairs=3, seed=4)
    a = tt.TrainConfig(label="a", **FAST)
    b = tt.TrainConfig(label="b", **FAST)
    summary = tt.run_ablation([a, b], ds, ds, seeds=(0,)).summary()
    assert summary["a"]["mean_loss"] == summary["b"]["mean_loss"]
    assert summary["a"]["rank"] == summary["b"]["rank"]


def test_ablation_parallel_matches_serial():
    ds = tt.make_toy_dataset("time", n_pairs=3, seed=5)
    variants = [tt.TrainConfig(variant="trope+chadd", **FAST)]
    serial = tt.run_ablation(variants, ds, ds, seeds=(0, 1))
    parallel = tt.run_ablation(variants, ds, ds, seeds=(0, 1), workers=2)
    assert [r.held_out_loss for r in serial.runs] == [r.held_out_loss for r in parallel.runs]


def test_ablation_validation(small_time_set):
    with pytest.raises(DomainError):
        tt.run_ablation([tt.TrainConfig(**FAST), tt.TrainConfig(**FAST)], small_time_set, small_time_set)
    with pytest.raises(DomainError):
        tt.run_ablation([tt.TrainConfig(variant="trope", **FAST), tt.TrainConfig(variant="rope+adaln", lr=1e-2,
                                                                                  **FAST)],
                        small_time_set, small_time_set)


def test_eval_time_generalization(small_time_set):
    cfg = tt.TrainConfig(**FAST)
    params = tt.train(cfg, small_time_set).params
    ref_cfg = tt.TrainConfig(variant="rope+adaln", **FAST)
    ref = tt.train(ref_cfg, small_time_set).params
    seen = small_time_set.pairs[0].target.taus
    slow = WorldTimeSequence(np.arange(8) / 16.0, 8.0)
    rep = tt.eval_time_generalization(params, cfg, [("seen", seen), ("slow", slow)], n_scenes=2,
                                      reference=(ref, ref_cfg), training_set=small_time_set)
    rows = {r["warp"]: r for r in rep["warps"]}
    assert rows["seen"]["seen_in_training"] and not rows["slow"]["seen_in_training"]
    assert len(rows["slow"]["per_frame"]) == 8 and np.isfinite(rows["slow"]["mse"])
    assert isinstance(rep["continuous_beats_index"], bool)
    with pytest.raises(DimensionError):
        tt.eval_time_generalization(params, cfg, [])
