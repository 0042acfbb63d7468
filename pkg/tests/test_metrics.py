import csv
import io

import numpy as np
import pytest

from worldtime4d import metrics as m
from worldtime4d.camera import CameraPose, CameraTrajectory, global_transform, random_rigid, sample_trajectory
from worldtime4d.errors import DimensionError, DomainError


def _rz(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


def _ry(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1.0, 0], [-np.sin(a), 0, np.cos(a)]])


def _line(n, perturb=None):
    poses = []
    for i in range(n):
        t = np.array([float(i), 0.0, 0.0])
        if perturb and i == perturb[0]:
            t = t + perturb[1]
        poses.append(CameraPose(np.eye(3), t))
    return CameraTrajectory(tuple(poses))


def test_rot_err_examples():
    traj = sample_trajectory("multi_waypoint", n_frames=9, seed=1)
    assert m.rot_err(traj, traj) < 1e-12
    est = CameraTrajectory((CameraPose.identity(), CameraPose(_rz(90), np.zeros(3))))
    gt = CameraTrajectory((CameraPose.identity(), CameraPose.identity()))
    assert abs(m.rot_err(est, gt) - 45.0) < 1e-12
    assert abs(m.rot_err(m.TrajectoryPair(est, gt)) - 45.0) < 1e-12


def test_rot_err_cancels_constant_offset():
    traj = sample_trajectory("orbit", n_frames=7, seed=2)
    yawed = global_transform(traj, CameraPose(_ry(10), np.zeros(3)))
    assert m.rot_err(yawed, traj) < 1e-9
    moved = global_transform(traj, random_rigid(np.random.default_rng(0)))
    assert m.rot_err(moved, traj) < 1e-9


def test_rot_err_symmetric_and_common_transform():
    rng = np.random.default_rng(3)
    a = sample_trajectory("multi_waypoint", n_frames=6, seed=4)
    b = sample_trajectory("multi_waypoint", n_frames=6, seed=5)
    assert abs(m.rot_err(a, b) - m.rot_err(b, a)) < 1e-9
    w = random_rigid(rng)
    assert abs(m.rot_err(global_transform(a, w), global_transform(b, w)) - m.rot_err(a, b)) < 1e-9


def test_rotation_angle_oracle():
    for deg in (0.0, 1e-6, 0.5, 45.0, 90.0, 179.0, 180.0):
        assert abs(m.rotation_angle(_rz(deg)) - deg) < 1e-9
        assert abs(m.rotation_angle(_ry(deg) @ _rz(0.0)) - deg) < 1e-9


def test_trajectory_pair_lengths():
    with pytest.raises(DimensionError):
        m.TrajectoryPair(_line(3), _line(4))


def test_trans_err_examples():
    traj = sample_trajectory("orbit", n_frames=5, seed=6)
    assert m.trans_err(traj, traj) < 1e-12
    gt = _line(4)
    twice = CameraTrajectory(tuple(CameraPose(np.eye(3), 2 * p.translation) for p in gt.poses))
    rep = m.trans_err_report(twice, gt)
    assert rep.value < 1e-12 and abs(rep.scale - 0.5) < 1e-12 and not rep.degenerate


def test_trans_err_least_squares_oracle():
    gt = _line(4)
    est = _line(4, perturb=(2, np.array([0.3, 0.0, 0.0])))
    t_gt = np.arange(4.0)
    t_est = np.array([0.0, 1.0, 2.3, 3.0])
    s = (t_est @ t_gt) / (t_est @ t_est)
    expect = np.abs(s * t_est - t_gt).mean()
    rep = m.trans_err_report(est, gt)
    assert abs(rep.scale - s) < 1e-12 and abs(rep.value - expect) < 1e-12


def test_trans_err_degenerate_and_errors():
    gt = _line(3)
    still = CameraTrajectory((CameraPose.identity(),) * 3)
    rep = m.trans_err_report(still, gt)
    assert rep.degenerate and rep.scale == 1.0
    assert abs(rep.value - np.mean([0, 1, 2])) < 1e-12
    with pytest.raises(DimensionError):
        m.trans_err(_line(1), _line(1))


def test_trans_err_global_scale_and_gauge():
    rng = np.random.default_rng(7)
    traj = sample_trajectory("multi_waypoint", n_frames=8, seed=8)
    w = random_rigid(rng)
    scaled = CameraTrajectory(tuple(CameraPose(p.rotation, 3.7 * p.translation) for p in traj.poses))
    assert m.trans_err(global_transform(scaled, w), traj) < 1e-9


def test_psnr_examples():
    a = np.random.default_rng(9).uniform(0, 1, (8, 8, 3))
    assert m.psnr(a, a) == m.PSNR_CAP == 99.0
    assert abs(m.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) - 6.0206) < 1e-3
    b = a.copy()
    b[:, 4:] = 1 - b[:, 4:]
    mask = np.zeros((8, 8), bool)
    mask[:, :4] = True
    assert m.mpsnr(m.MaskedImagePair(a, b, mask)) == 99.0
    with pytest.raises(DimensionError):
        m.psnr(a, a[:4])


def test_psnr_monotone_in_mse():
    base = np.zeros((6, 6))
    vals = [m.psnr(base, np.full((6, 6), d)) for d in (0.05, 0.1, 0.2, 0.4)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_masked_pair_validation():
    a = np.zeros((4, 4))
    with pytest.raises(DomainError):
        m.MaskedImagePair(a, a, np.zeros((4, 4)))
    with pytest.raises(DimensionError):
        m.MaskedImagePair(a, np.zeros((4, 5)), np.ones((4, 4)))
    with pytest.raises(DimensionError):
        m.MaskedImagePair(a, a, np.ones((3, 4)))


def test_mae_and_ssim_examples():
    rng = np.random.default_rng(10)
    a = rng.uniform(0, 1, (16, 16, 1))
    full = np.ones((16, 16), bool)
    pair = m.MaskedImagePair(a, a, full)
    assert m.mmae(pair) == 0.0 and abs(m.mssim(pair) - 1.0) < 1e-12
    binary = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    assert m.mmae(m.MaskedImagePair(binary, 1 - binary, full)) == 1.0
    u, v = np.full((16, 16), 0.2), np.full((16, 16), 0.4)
    assert abs(m.mmae(m.MaskedImagePair(u, v, full)) - 0.2) < 1e-15
    c1 = 0.01 ** 2
    lum = (2 * 0.2 * 0.4 + c1) / (0.2 ** 2 + 0.4 ** 2 + c1)
    assert abs(m.ssim(u, v) - lum) < 1e-12


def test_ssim_range_and_noise():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 1, (20, 20))
    for noise in (0.01, 0.1, 0.5):
        s = m.ssim(a, np.clip(a + noise * rng.standard_normal(a.shape), 0, 1))
        assert -1 <= s < 1
    assert m.ssim(a, 1 - a) < 0


def test_full_mask_matches_unmasked():
    rng = np.random.default_rng(12)
    a, b = rng.uniform(0, 1, (12, 12, 3)), rng.uniform(0, 1, (12, 12, 3))
    pair = m.MaskedImagePair(a, b, np.ones((12, 12)))
    assert abs(m.mpsnr(pair) - m.psnr(a, b)) < 1e-12
    assert abs(m.mmae(pair) - m.mae(a, b)) < 1e-12
    assert abs(m.mssim(pair) - m.ssim(a, b)) < 1e-12


def test_trajectory_report_csv():
    est, gt = _line(4, perturb=(1, np.array([0.0, 0.2, 0.0]))), _line(4)
    text = m.trajectory_report_csv(est, gt, ["tool: test"])
    lines = text.splitlines()
    assert lines[0] == "# tool: test" and lines[1].startswith("# conventions:")
    rows = list(csv.reader(io.StringIO("\n".join(l for l in lines if not l.startswith("#")))))
    assert rows[0] == ["frame", "rot_err_deg", "trans_err"]
    assert len(rows) == 1 + 4 + 1 and rows[-1][0] == "mean"
    assert abs(float(rows[-1][2]) - m.trans_err(est, gt)) < 1e-8


def test_image_report_rows():
    rng = np.random.default_rng(13)
    a, b = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0, 1, (3, 8, 8))
    rows = m.image_report_rows(a, b)
    assert [r["frame"] for r in rows] == [0, 1, 2]
    assert abs(rows[1]["psnr"] - m.psnr(a[1], b[1])) < 1e-12
    with pytest.raises(DimensionError):
        m.image_report_rows(a, b[:2])
