"""Command-line entry point: forge, ablate, eval and rope-demo.

Exit codes: 0 ok, 1 I/O failure, 2 usage error, 3 training failure,
4 data mismatch or failed validation.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CONVENTION, CameraTrajectory, random_rigid, global_transform, sample_trajectory
from .errors import DimensionError, DomainError, ManifestParseError, TrainingError, WorldTimeError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_TRAIN, EXIT_DATA = 0, 1, 2, 3, 4

log = logging.getLogger("worldtime4d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- shared plumbing --------------------------------------------------------------------
def _parse_sets(pairs, allowed):
    """``key=value`` overrides checked against ``allowed`` {key: type}."""
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override '{item}' is not key=value")
        if key not in allowed:
            raise UsageError(f"unknown override key '{key}'; valid keys: {', '.join(sorted(allowed))}")
        kind = allowed[key]
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                out[key] = raw.lower() in ("true", "1")
            else:
                out[key] = kind(raw)
        except ValueError as exc:
            raise UsageError(f"override {key}: cannot parse '{raw}' as {kind.__name__}") from exc
    return out


def config_hash(config):
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def report_header(command, config, extra_conventions=()):
    return {"tool": "worldtime4d", "version": __version__, "command": command,
            "config_hash": config_hash(config), "config": config,
            "conventions": [f"camera: {CONVENTION}", *extra_conventions]}


def _header_lines(header):
    lines = [f"tool: {header['tool']} {header['version']}", f"command: {header['command']}",
             f"config_hash: {header['config_hash']}"]
    lines += [f"convention: {c}" for c in header["conventions"]]
    return lines


def _write_csv(path, header, body):
    text = "".join(f"# {line}\n" for line in _header_lines(header)) + body
    Path(path).write_text(text)


def _log_config(command, config):
    log.info("%s resolved config %s: %s", command, config_hash(config), json.dumps(config, sort_keys=True))


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- forge ------------------------------------------------------------------------------------
FORGE_KEYS = {"radius_min": float, "radius_max": float, "max_azimuth_span": float,
              "max_elevation_span": float, "max_lookat_offset": float}


def cmd_forge(args):
    from .camera import TrajectoryConstraints
    from .forge import forge_dataset, validate_dataset

    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    if args.frames < 2 or args.fps <= 0:
        raise UsageError("--frames must be >= 2 and --fps positive")
    sets = _parse_sets(args.set, FORGE_KEYS)
    base = TrajectoryConstraints()
    constraints = TrajectoryConstraints(
        base.subject_centroid,
        (sets.get("radius_min", base.radius_range[0]), sets.get("radius_max", base.radius_range[1])),
        sets.get("max_azimuth_span", base.max_azimuth_span),
        sets.get("max_elevation_span", base.max_elevation_span),
        sets.get("max_lookat_offset", base.max_lookat_offset), base.elevation_range)
    config = {"scenes": args.scenes, "seed": args.seed, "fps": args.fps, "frames": args.frames,
              "out": str(args.out), "overrides": sets}
    _log_config("forge", config)
    out = Path(args.out)
    if not args.validate_only:
        index = forge_dataset(out, args.scenes, args.seed, args.fps, args.frames)
        log.info("wrote %d manifests under %s", len(index.entries), out)
    reports, checks = validate_dataset(out, constraints)
    bad = [r for r in reports if not r.passed]
    header = report_header("forge", config)
    result = {"header": header, "manifests": len(reports), "failed_manifests": [r.to_dict() for r in bad],
              "dataset_checks": checks}
    (out / "validation.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"{len(reports)} manifests, {len(bad)} failing, dataset checks "
          f"{'pass' if all(c['passed'] for c in checks) else 'FAIL'}")
    for r in bad[:10]:
        print(f"  {r.path}: {', '.join(r.failed())}")
    if bad or not all(c["passed"] for c in checks):
        return EXIT_DATA
    return EXIT_OK


# -- ablate -------------------------------------------------------------------------------------
ABLATE_KEYS = {"lr": float, "clip": float, "iterations": int, "batch_size": int, "width": int,
               "heads": int, "n_blocks": int, "ffn_hidden": int, "embed": int, "patch": int,
               "objective": str, "noise_level": float, "train_pairs": int, "eval_pairs": int,
               "image": int, "frames": int, "fps": float}


def _resolve_variants(spec):
    from .toytrain import VARIANTS, TrainConfig, variant_configs, component_configs

    if spec == "all":
        return variant_configs(), "time"
    if spec == "baselines":
        return [c for c in variant_configs() if c.variant in
                ("trope+adaln", "rope+adaln", "rope+chadd", "rope+xattn")], "time"
    if spec == "components":
        return component_configs(), "camera"
    names = [n.strip() for n in spec.split(",") if n.strip()]
    unknown = [n for n in names if n not in VARIANTS]
    if unknown or not names:
        raise UsageError(f"unknown variant(s) {', '.join(unknown) or '(none)'}; valid names: "
                         f"{', '.join(VARIANTS)}, or all / baselines / components")
    return [TrainConfig(variant=n) for n in names], "time"


def cmd_ablate(args):
    from . import plotting
    from .toytrain import HELD_OUT_WARPS, TRAIN_WARPS, make_toy_dataset, run_ablation

    variants, task = _resolve_variants(args.variants)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    sets = _parse_sets(args.set, ABLATE_KEYS)
    data_keys = {"train_pairs": 1024, "eval_pairs": 96, "image": 8, "frames": 8, "fps": 8.0}
    data = {k: sets.pop(k, v) for k, v in data_keys.items()}
    if args.task:
        task = args.task
    try:
        variants = [dataclasses.replace(v, **sets) for v in variants]
    except (DomainError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    seeds = [args.seed + i for i in range(args.seeds)]
    config = {"variants": [dataclasses.asdict(v) for v in variants], "seeds": seeds, "task": task,
              "data": data, "workers": args.workers}
    _log_config("ablate", config)
    # named sub-streams of the single --seed flag
    train_set = make_toy_dataset(task, data["train_pairs"], TRAIN_WARPS, seed=[args.seed, 1], image=data["image"],
                                 n_frames=data["frames"], fps=data["fps"])
    eval_set = make_toy_dataset(task, data["eval_pairs"], HELD_OUT_WARPS, seed=[args.seed, 2],
                                image=data["image"], n_frames=data["frames"], fps=data["fps"])
    report = run_ablation(variants, train_set, eval_set, seeds, args.workers)
    out = _out_dir(args.out)
    header = report_header("ablate", config, ["loss: mean squared error of target patches on held-out pairs",
                                              "psnr: clipped predicted clip vs render, peak 1"])
    _write_csv(out / "ranking.csv", header, report.to_csv())
    (out / "summary.json").write_text(report.to_json({"header": header}) + "\n")
    curves = _out_dir(out / "curves")
    for name, seed in report.curves:
        safe = name.replace("/", "_").replace(" ", "_")
        _write_csv(curves / f"{safe}_seed{seed}.csv", header, report.curves_csv(name, seed))
    plotting.loss_curves(report.curves, out / "loss_curves.png")
    plotting.ablation_bars(report.summary(), out / "held_out_loss.png")
    summary = report.summary()
    for name in report.order:
        s = summary[name]
        print(f"{name:>14s}  loss {s['mean_loss']:.5f} +- {s['sd_loss']:.5f}  "
              f"psnr {s['mean_psnr']:.2f} +- {s['sd_psnr']:.2f}  rank {s['rank']}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------------------
def _load_array(path):
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    return np.loadtxt(p, delimiter=",")


def _frames(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr[None] if arr.ndim == 2 or (arr.ndim == 3 and arr.shape[-1] in (1, 3)) else arr


def cmd_eval(args):
    from . import plotting
    from .metrics import CONVENTIONS, image_report_rows, trajectory_report_csv, rot_err, trans_err

    for p in [args.estimate, args.truth, args.images_a, args.images_b, args.mask]:
        if p is not None and not Path(p).is_file():
            print(f"missing input file: {p}", file=sys.stderr)
            return EXIT_IO
    if (args.estimate is None) != (args.truth is None):
        raise UsageError("--estimate and --truth go together")
    if (args.images_a is None) != (args.images_b is None):
        raise UsageError("--images-a and --images-b go together")
    if args.estimate is None and args.images_a is None:
        raise UsageError("nothing to evaluate: give trajectories and/or images")
    config = {k: (str(v) if v is not None else None) for k, v in vars(args).items()
              if k in ("estimate", "truth", "images_a", "images_b", "mask", "out")}
    _log_config("eval", config)
    out = _out_dir(args.out)
    header = report_header("eval", config, [CONVENTIONS])
    if args.estimate is not None:
        est, gt = CameraTrajectory.load(args.estimate), CameraTrajectory.load(args.truth)
        if len(est) != len(gt):
            print(f"trajectory length mismatch: {len(est)} vs {len(gt)}", file=sys.stderr)
            return EXIT_DATA
        _write_csv(out / "trajectory_metrics.csv", header, trajectory_report_csv(est, gt))
        print(f"RotErr {rot_err(est, gt):.6f} deg  TransErr "
              f"{trans_err(est, gt) if len(gt) > 1 else float('nan'):.6f}")
    if args.images_a is not None:
        a, b = _frames(_load_array(args.images_a)), _frames(_load_array(args.images_b))
        if a.shape != b.shape:
            print(f"image shape mismatch: {a.shape} vs {b.shape}", file=sys.stderr)
            return EXIT_DATA
        masks = None
        if args.mask is not None:
            m = np.asarray(_load_array(args.mask)) > 0.5
            masks = np.broadcast_to(m, a.shape[:3]) if m.ndim == 2 else m
            if masks.shape != a.shape[:3]:
                print(f"mask shape {m.shape} does not match frames {a.shape[:3]}", file=sys.stderr)
                return EXIT_DATA
        full = image_report_rows(a, b)
        masked = image_report_rows(a, b, masks) if masks is not None else full
        lines = ["frame,psnr,mae,ssim,mpsnr,mmae,mssim\n"]
        for f, m in zip(full, masked):
            lines.append(f"{f['frame']},{f['psnr']:.9g},{f['mae']:.9g},{f['ssim']:.9g},"
                         f"{m['psnr']:.9g},{m['mae']:.9g},{m['ssim']:.9g}\n")
        mean = {k: np.mean([r[k] for r in full]) for k in ("psnr", "mae", "ssim")}
        mmean = {k: np.mean([r[k] for r in masked]) for k in ("psnr", "mae", "ssim")}
        lines.append(f"mean,{mean['psnr']:.9g},{mean['mae']:.9g},{mean['ssim']:.9g},"
                     f"{mmean['psnr']:.9g},{mmean['mae']:.9g},{mmean['ssim']:.9g}\n")
        _write_csv(out / "image_metrics.csv", header, "".join(lines))
        plotting.per_frame_errors({"psnr": [r["psnr"] for r in full], "mpsnr": [r["psnr"] for r in masked]},
                                  out / "image_metrics.png", "dB")
        print(f"PSNR {mean['psnr']:.4f}  mPSNR {mmean['psnr']:.4f}  mMAE {mmean['mae']:.6f}  "
              f"mSSIM {mmean['ssim']:.6f}")
    return EXIT_OK


# -- rope-demo ----------------------------------------------------------------------------------
def _parse_taus(text):
    try:
        return np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError as exc:
        raise UsageError(f"--taus must be comma-separated numbers: {exc}") from exc


def cmd_rope_demo(args):
    from . import plotting
    from .rope import RotaryPlan, TokenCoords, apply_index_rope, apply_rope_4d, apply_time_rope, pairwise_logits
    from .timewarp import WorldTimeSequence

    plan = RotaryPlan.for_head_dim(args.head_dim)
    rng = np.random.default_rng([args.seed, 3])
    taus = _parse_taus(args.taus) if args.taus else np.arange(args.frames) / args.fps
    n = taus.shape[0]
    if n < 1:
        raise UsageError("need at least one world time")
    if args.poses:
        if not Path(args.poses).is_file():
            print(f"missing input file: {args.poses}", file=sys.stderr)
            return EXIT_IO
        traj = CameraTrajectory.load(args.poses)
        if len(traj) != n:
            print(f"{len(traj)} poses for {n} world times", file=sys.stderr)
            return EXIT_DATA
    else:
        traj = sample_trajectory("orbit", n_frames=n, seed=int(rng.integers(2 ** 31)), fps=args.fps)
    config = {"taus": [float(t) for t in taus], "fps": args.fps, "head_dim": args.head_dim, "seed": args.seed,
              "poses": args.poses, "shift": args.shift}
    _log_config("rope-demo", config)
    q = rng.standard_normal((n, plan.head_dim))
    k = rng.standard_normal((n, plan.head_dim))
    qt, kt = apply_time_rope(q, k, WorldTimeSequence(taus, args.fps), plan)
    logits = pairwise_logits(qt, kt)
    checks = {}
    # uniform world time with fps scaling against integer-index rotary
    uni = np.arange(n) / args.fps
    a = pairwise_logits(*apply_time_rope(q, k, uni, plan, fps=args.fps))
    b = pairwise_logits(*apply_index_rope(q, k, np.arange(n), plan))
    checks["uniform_vs_index"] = float(np.abs(a - b).max())
    shifted = pairwise_logits(*apply_time_rope(q, k, taus + args.shift, plan, fps=args.fps))
    checks["shift_invariance"] = float(np.abs(shifted - logits).max())
    coords = TokenCoords(taus, np.zeros(n), np.zeros(n), np.arange(n))
    full = pairwise_logits(*apply_rope_4d(q, k, coords, traj, plan))
    moved = global_transform(traj, random_rigid(rng, 5.0))
    full_moved = pairwise_logits(*apply_rope_4d(q, k, coords, moved, plan))
    checks["rigid_invariance_rel"] = float(np.abs(full_moved - full).max() / max(np.abs(full).max(), 1e-300))
    out = _out_dir(args.out)
    header = report_header("rope-demo", config)
    body = "query," + ",".join(f"k{j}" for j in range(n)) + "\n"
    body += "".join(f"q{i}," + ",".join(f"{v:.17g}" for v in row) + "\n" for i, row in enumerate(logits))
    _write_csv(out / "time_logits.csv", header, body)
    body4 = "query," + ",".join(f"k{j}" for j in range(n)) + "\n"
    body4 += "".join(f"q{i}," + ",".join(f"{v:.17g}" for v in row) + "\n" for i, row in enumerate(full))
    _write_csv(out / "rope4d_logits.csv", header, body4)
    (out / "checks.json").write_text(json.dumps({"header": header, "max_deviation": checks},
                                                indent=1, sort_keys=True) + "\n")
    plotting.logit_heatmap(logits, out / "time_logits.png", "time rotary logits")
    plotting.logit_heatmap(full, out / "rope4d_logits.png", "4D rotary logits")
    for name, value in checks.items():
        print(f"{name}: max deviation {value:.3e}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="worldtime4d", description="World-time and camera conditioning toolkit.")
    p.add_argument("--version", action="version", version=f"worldtime4d {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("forge", help="emit and validate scene manifests")
    f.add_argument("--scenes", type=int, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--fps", type=float, default=16.0)
    f.add_argument("--frames", type=int, default=81)
    f.add_argument("--out", required=True)
    f.add_argument("--validate-only", action="store_true", help="re-check an existing dataset directory")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="constraint overrides for validation")
    f.set_defaults(func=cmd_forge)

    a = sub.add_parser("ablate", help="train conditioning variants on the toy task and rank them")
    a.add_argument("--variants", default="baselines", help="all, baselines, components or comma-separated names")
    a.add_argument("--seeds", type=int, default=3, help="number of seeds")
    a.add_argument("--seed", type=int, default=0, help="first seed; data streams derive from it")
    a.add_argument("--task", choices=("time", "camera"))
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", required=True)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="trajectory and (masked) image metrics")
    e.add_argument("--estimate", help="estimated trajectory JSON")
    e.add_argument("--truth", help="ground-truth trajectory JSON")
    e.add_argument("--images-a", help=".npy or .csv frames")
    e.add_argument("--images-b")
    e.add_argument("--mask", help=".npy or .csv mask (1 = evaluate)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rope-demo", help="dump attention logits and verify rotary identities")
    r.add_argument("--taus", help="comma-separated world times in seconds")
    r.add_argument("--frames", type=int, default=8)
    r.add_argument("--fps", type=float, default=16.0)
    r.add_argument("--shift", type=float, default=3.25)
    r.add_argument("--head-dim", type=int, default=32)
    r.add_argument("--poses", help="trajectory JSON with one pose per world time")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rope_demo)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_TRAIN
    except ManifestParseError as exc:
        print(f"parse error at byte {exc.offset}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DimensionError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except WorldTimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
