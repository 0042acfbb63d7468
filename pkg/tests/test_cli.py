import json

import numpy as np
import pytest

from worldtime4d import cli
from worldtime4d.camera import sample_trajectory
from worldtime4d.forge import manifest_files, tree_digest


def test_help_and_version(capsys):
    assert cli.main(["--help"]) == 0
    assert "forge" in capsys.readouterr().out
    assert cli.main(["--version"]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["forge", "--out", "x"],
    ["bogus"],
    ["ablate", "--variants", "trope+nothing", "--out", "x"],
    ["ablate", "--variants", "trope", "--set", "lr", "--out", "x"],
    ["ablate", "--variants", "trope", "--set", "colour=red", "--out", "x"],
    ["eval", "--out", "x"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == cli.EXIT_USAGE


def test_forge_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["forge", "--scenes", "2", "--frames", "9", "--out", str(a)]) == 0
    assert cli.main(["forge", "--scenes", "2", "--frames", "9", "--out", str(b)]) == 0
    assert len(manifest_files(a)) == 18
    assert "18 manifests, 0 failing" in capsys.readouterr().out
    result = json.loads((a / "validation.json").read_text())
    assert result["manifests"] == 18 and not result["failed_manifests"]
    # validation.json records the output path, so compare everything else
    for d in (a, b):
        (d / "validation.json").unlink()
    assert tree_digest(a) == tree_digest(b)


def test_forge_validation_failure_exits_4(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["forge", "--scenes", "1", "--frames", "9", "--out", str(out)]) == 0
    argv = ["forge", "--scenes", "1", "--out", str(out), "--validate-only", "--set", "max_azimuth_span=1"]
    assert cli.main(argv) == cli.EXIT_DATA


def test_forge_truncated_manifest_exits_4(tmp_path, capsys):
    out = tmp_path / "d"
    cli.main(["forge", "--scenes", "1", "--frames", "9", "--out", str(out)])
    path = manifest_files(out)[0]
    path.write_text(path.read_text()[:50])
    assert cli.main(["forge", "--scenes", "1", "--out", str(out), "--validate-only"]) == cli.EXIT_DATA
    assert "parse error at byte" in capsys.readouterr().err


def test_eval_missing_file_exits_1(tmp_path):
    argv = ["eval", "--estimate", str(tmp_path / "no.json"), "--truth", str(tmp_path / "no.json"),
            "--out", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_IO


def test_eval_trajectories_and_images(tmp_path, capsys):
    traj = sample_trajectory("orbit", n_frames=5, seed=1)
    traj.save(tmp_path / "t.json")
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (3, 8, 8))
    np.save(tmp_path / "a.npy", a)
    np.save(tmp_path / "b.npy", a)
    np.save(tmp_path / "m.npy", np.ones((8, 8)))
    out = tmp_path / "out"
    argv = ["eval", "--estimate", str(tmp_path / "t.json"), "--truth", str(tmp_path / "t.json"),
            "--images-a", str(tmp_path / "a.npy"), "--images-b", str(tmp_path / "b.npy"),
            "--mask", str(tmp_path / "m.npy"), "--out", str(out)]
    assert cli.main(argv) == 0
    text = capsys.readouterr().out
    assert "RotErr 0.000000" in text and "TransErr 0.000000" in text and "PSNR 99.0000" in text
    lines = (out / "trajectory_metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# tool: worldtime4d")
    assert any("config_hash" in line for line in lines[:4])
    assert (out / "image_metrics.csv").exists() and (out / "image_metrics.png").exists()


def test_eval_length_mismatch_exits_4(tmp_path):
    sample_trajectory("orbit", n_frames=5, seed=1).save(tmp_path / "a.json")
    sample_trajectory("orbit", n_frames=4, seed=1).save(tmp_path / "b.json")
    argv = ["eval", "--estimate", str(tmp_path / "a.json"), "--truth", str(tmp_path / "b.json"),
            "--out", str(tmp_path / "o")]
    assert cli.main(argv) == cli.EXIT_DATA


def test_rope_demo_checks(tmp_path, capsys):
    out = tmp_path / "r"
    assert cli.main(["rope-demo", "--taus", "0,0.1,0.4,0.45,1.0", "--out", str(out)]) == 0
    checks = json.loads((out / "checks.json").read_text())["max_deviation"]
    assert checks["uniform_vs_index"] < 1e-12
    assert checks["shift_invariance"] < 1e-10
    assert checks["rigid_invariance_rel"] < 1e-8
    rows = (out / "time_logits.csv").read_text().splitlines()
    body = [r for r in rows if not r.startswith("#")]
    assert len(body) == 6 and body[0].startswith("query,k0")
    assert cli.main(["rope-demo", "--taus", "a,b", "--out", str(out)]) == cli.EXIT_USAGE


def test_small_ablation_run(tmp_path, capsys):
    out = tmp_path / "abl"
    sets = ["iterations=3", "batch_size=2", "width=16", "ffn_hidden=16", "embed=8", "train_pairs=3",
            "eval_pairs=2"]
    argv = ["ablate", "--variants", "trope+adaln,rope+adaln", "--seeds", "1", "--out", str(out)]
    for s in sets:
        argv += ["--set", s]
    assert cli.main(argv) == 0
    text = capsys.readouterr().out
    assert "trope+adaln" in text and "rank" in text
    summary = json.loads((out / "summary.json").read_text())
    assert summary["header"]["command"] == "ablate"
    assert (out / "ranking.csv").exists() and (out / "loss_curves.png").exists()
    assert len(list((out / "curves").glob("*.csv"))) == 2


def test_ablation_divergence_exits_3(tmp_path):
    argv = ["ablate", "--variants", "trope+adaln", "--seeds", "1", "--out", str(tmp_path)]
    for s in ["iterations=3", "batch_size=2", "width=16", "ffn_hidden=16", "embed=8", "train_pairs=3",
              "eval_pairs=2", "lr=1e300", "clip=1e300"]:
        argv += ["--set", s]
    assert cli.main(argv) == cli.EXIT_TRAIN
