"""Command-line entry point: ``dynba simulate|run|eval|gradcheck``.

Exit codes: 0 success, 1 solver or check failure, 2 input error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DynBAError, FormatError
from .features import load_scalar_map
from .gradcheck import run_checks
from .io import (
    config_hash,
    dump_config,
    format_tum,
    gt_trajectory,
    load_config,
    load_scene_config,
    read_tum,
    read_uncertainty_dir,
    write_manifest,
    write_result_dir,
    write_scene_dir,
)
from .metrics import AblationRow, ate_rmse, report_to_csv, uncertainty_auc
from .pipeline import ABLATIONS, AblationFlags, PipelineConfig, Session, SyntheticSource
from .scene_sim import generate_scene

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2
GRADCHECK_TOL = 1e-4


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cfg = load_scene_config(args.config, seed=args.seed)
    scene = generate_scene(cfg)
    out = Path(args.out)
    written = write_scene_dir(out, scene)
    write_manifest(out, "simulate", config_hash(cfg), cfg.seed, written, time.perf_counter() - t0)
    print(f"wrote {scene.n_frames} frames to {out}")
    return EXIT_OK


def _load_scene_dir(path):
    d = Path(path)
    if not (d / "scene.txt").exists() or not (d / "groundtruth.txt").exists():
        raise FormatError(f"{d}: not a scene directory (scene.txt and groundtruth.txt required)")
    scene = generate_scene(load_scene_config(d / "scene.txt"))
    if format_tum(gt_trajectory(scene)) != (d / "groundtruth.txt").read_text():
        raise FormatError(f"{d / 'groundtruth.txt'}: does not match the trajectory generated from scene.txt")
    return scene


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    scene = _load_scene_dir(args.scene)
    cfg = load_config(args.config, PipelineConfig()) if args.config else PipelineConfig()
    if args.ablation:
        names = sorted(set(cfg.ablation.names()) | set(args.ablation), key=ABLATIONS.index)
        cfg.ablation = AblationFlags.from_names(names)
    session = Session(SyntheticSource(scene, seed=scene.config.seed), cfg)
    try:
        result = session.run(global_ba=not args.no_global)
    except DynBAError as exc:
        _err(f"{exc} [{session.progress()}]")
        return EXIT_FAILURE
    out = Path(args.out)
    written = write_result_dir(out, result)
    write_manifest(out, "run " + cfg.ablation.label(), config_hash(cfg), scene.config.seed, written,
                   time.perf_counter() - t0)
    print(f"{cfg.ablation.label()}: {len(result.keyframe_ids)} keyframes written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    d = Path(args.result)
    est = read_tum(d / "traj_kf.txt")
    gt = read_tum(args.gt)
    ate = ate_rmse(est, gt)
    ate_n = ate_rmse(est, gt, normalize=True)
    auc = float("nan")
    if args.masks:
        fields = read_uncertainty_dir(d / "uncertainty")
        ids = sorted(fields)
        masks = [load_scalar_map(Path(args.masks) / f"mask_{k:04d}.dmap") > 0.5 for k in ids]
        if ids:
            auc = uncertainty_auc([fields[k] for k in ids], masks)
    label = "result"
    cfg_path = d / "config.txt"
    if cfg_path.exists():
        label = load_config(cfg_path, PipelineConfig()).ablation.label()
    row = AblationRow(label, ate, ate_n, auc)
    head = f"ATE normalized {ate_n:.6f} ({100 * ate:.3f} cm)" if args.normalize else \
        f"ATE {100 * ate:.3f} cm, normalized {ate_n:.6f}"
    print(f"{label}: {head}" + ("" if np.isnan(auc) else f", AUC {auc:.4f}"))
    (d / "report.csv").write_text(report_to_csv([row]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 0:
        _err("--trials must be >= 0")
        return EXIT_INPUT
    if args.trials == 0:
        print("warning: no trials requested, nothing checked")
        return EXIT_OK
    results = run_checks(args.trials, args.seed, corrupt=args.corrupt_gradient)
    worst = {}
    for r in results:
        worst[r.kind] = max(worst.get(r.kind, 0.0), r.rel_err)
    for kind, err in sorted(worst.items()):
        print(f"{kind}: {args.trials} trials, max rel err {err:.3e}")
    failed = [r for r in results if not r.rel_err <= GRADCHECK_TOL]
    if failed:
        r = failed[0]
        _err(f"{len(failed)} checks above {GRADCHECK_TOL:g}, first: {r.kind} trial {r.trial} rel err {r.rel_err:.3e}")
        return EXIT_FAILURE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynba", description="Uncertainty-aware dense BA on synthetic dynamic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene directory")
    s.add_argument("config", help="scene config file")
    s.add_argument("out", help="output directory")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the pipeline on a scene directory")
    r.add_argument("scene", help="directory written by `simulate`")
    r.add_argument("out", help="result directory")
    r.add_argument("--config", default=None, help="pipeline config file")
    r.add_argument("--ablation", action="append", choices=ABLATIONS, default=[], help="repeatable")
    r.add_argument("--no-global", action="store_true", help="skip the final global BA")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE and AUC of a result directory")
    e.add_argument("result", help="result directory")
    e.add_argument("gt", help="ground-truth TUM trajectory")
    e.add_argument("--masks", default=None, help="directory of mask_%%04d.dmap files for the AUC")
    e.add_argument("--normalize", action="store_true", help="lead with the unit-path-length ATE")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of the analytic gradients")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    except DynBAError as exc:
        _err(str(exc))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
