"""Command-line entry point: ``diffloc {gradcheck,simgen,train,eval}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(failed gradient check, diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigError, RunConfig, apply_override, config_from_dict
from .gradcheck import run_all
from .regressor import CheckpointError, load_checkpoint, save_checkpoint
from .sim import observation_to_dict, save_json, scene_to_dict, trajectory_to_dict
from .training import DivergenceError, TrainLog, build_dataset, evaluate, new_params, summarize, train_e2e, train_init

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("diffloc")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--workers", type=int, help="cap on worker processes")
    p.add_argument("--mode", choices=["rgbd", "rgb-model", "rgb-only"])
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffloc", description="Differentiable RANSAC camera localization on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gradcheck", help="finite-difference checks of all analytic gradients")
    _common(p)
    p.add_argument("--corrupt", action="store_true", help="negate analytic gradients (negative control)")
    p = sub.add_parser("simgen", help="generate a scene and camera trajectory")
    _common(p)
    p.add_argument("--observations", action="store_true", help="also write one observation file per view")
    p = sub.add_parser("train", help="initialisation then end-to-end training")
    _common(p)
    p = sub.add_parser("eval", help="pose errors on the test views")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", type=Path)
    g.add_argument("--oracle", action="store_true", help="feed ground-truth scene coordinates instead of predictions")
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for assignment in args.set:
        apply_override(data, assignment)
    for key in ("seed", "workers", "mode"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.out is not None:
        data["out"] = str(args.out)
    return config_from_dict(data)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_gradcheck(cfg: RunConfig, corrupt: bool = False) -> int:
    out = _outdir(cfg)
    results = run_all(cfg.gradcheck.instances, cfg.seed, corrupt or cfg.gradcheck.corrupt)
    rows = [(r.name, r.n, r.skipped, r.metric, r.value, r.tol, int(r.passed)) for r in results]
    report.write_csv(out / "gradcheck.csv", ["check", "instances", "skipped", "metric", "value", "tolerance", "passed"], rows)
    doc = report.metrics_document(
        "gradcheck",
        {"seed": cfg.seed, "checks": [{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in results]},
    )
    report.write_json(out / "gradcheck.json", doc)
    report.plot_gradcheck(results, out / "gradcheck.png")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.metric} = {r.value:.3g} (tol {r.tol:g}, {r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_simgen(cfg: RunConfig, observations: bool = False) -> int:
    out = _outdir(cfg)
    data = build_dataset(cfg)
    save_json(scene_to_dict(data.scene), out / "scene.json")
    save_json(trajectory_to_dict(data.poses, data.train_idx, data.test_idx), out / "trajectory.json")
    if observations:
        obs_dir = out / "observations"
        obs_dir.mkdir(exist_ok=True)
        for idx, obs in zip(np.concatenate([data.train_idx, data.test_idx]), data.train + data.test):
            save_json(observation_to_dict(obs), obs_dir / f"view_{int(idx):04d}.json")
    print(f"scene: {len(data.scene)} points, {len(data.poses)} views ({len(data.train)} train / {len(data.test)} test) -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    report.write_json(out / "config.json", cfg.to_dict())
    data = build_dataset(cfg)
    params = new_params(cfg, data.scene)
    tlog = TrainLog()
    status = EXIT_OK
    try:
        state = train_init(params, data, cfg, tlog, checkpoint_dir=ckpt_dir)
        save_checkpoint(out / "init.ckpt", params, state, cfg.train.init_iters, {"phase": "init", "mode": cfg.mode})
        if cfg.train.e2e_iters > 0:
            state = train_e2e(params, data, cfg, tlog, checkpoint_dir=ckpt_dir)
            save_checkpoint(out / "final.ckpt", params, state, cfg.train.e2e_iters, {"phase": "e2e", "mode": cfg.mode})
        else:
            save_checkpoint(out / "final.ckpt", params, state, cfg.train.init_iters, {"phase": "init", "mode": cfg.mode})
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        status = EXIT_NUMERICAL
    report.write_csv(out / "loss_curve.csv", ["phase", "iteration", "view", "loss"], tlog.rows)
    if tlog.rows:
        report.plot_loss_curve(tlog.rows, out / "loss_curve.png")
    print(f"train: {len(tlog.rows)} logged iterations, {tlog.skipped} skipped -> {out}")
    return status


def cmd_eval(cfg: RunConfig, checkpoint: Path | None, oracle: bool = False) -> int:
    out = _outdir(cfg)
    data = build_dataset(cfg)
    params = None
    if not oracle:
        try:
            params, _, _, extra = load_checkpoint(checkpoint)
        except FileNotFoundError as exc:
            raise ConfigError(f"checkpoint not found: {checkpoint}") from exc
        if params.sizes[0] != data.scene.descriptors.shape[1] or params.sizes[-1] != 3:
            raise CheckpointError(
                f"checkpoint expects {params.sizes[0]}-dim features, the scene has {data.scene.descriptors.shape[1]}"
            )
    errors = evaluate(params, data, cfg, oracle=oracle)
    summary = summarize(errors, cfg.eval.thresholds)
    report.write_csv(
        out / "per_view.csv",
        ["view", "translation_cm", "rotation_deg", "inliers"],
        [(e.view, e.translation_cm, e.rotation_deg, e.inliers) for e in errors],
    )
    source = "oracle" if oracle else str(checkpoint)
    report.write_json(out / "metrics.json", report.metrics_document("eval", {"mode": cfg.mode, "seed": cfg.seed, "source": source, **summary}))
    report.plot_error_cdf([e.translation_cm for e in errors], [e.rotation_deg for e in errors], out / "error_cdf.png", cfg.eval.thresholds)
    acc = ", ".join(f"{k}: {v:.1f}%" for k, v in summary["accuracy"].items())
    print(f"eval: median {summary['median_translation_cm']:.2f} cm / {summary['median_rotation_deg']:.2f} deg; {acc}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.corrupt)
        if args.command == "simgen":
            return cmd_simgen(cfg, args.observations)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_eval(cfg, args.checkpoint, args.oracle)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
