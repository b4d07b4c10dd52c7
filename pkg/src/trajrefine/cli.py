"""Command-line experiment driver.

Subcommands: synth, build-traj, train, eval, verify, ablate. Every run writes
its fully resolved config next to its outputs. Exit codes: 0 success,
1 verification failure, 2 config error, 3 IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .config import ConfigError, RunConfig, apply_overrides, load_config, save_config
from .geom import iou_3d
from .model import ModelConfig, TrajectoryRefiner, evaluate_model, train_model
from .nn import Adam, CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint
from .synth import make_proposals, simulate_sequence
from .trajseq import build_trajectories
from .verify import run_all_checks

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

METRICS_HEADER = ["run_id", "epoch", "mean_iou_before", "mean_iou_after",
                  "ap_at_thresh", "conf_loss", "reg_loss", "total_loss"]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(getattr(args, "config", None))
        return apply_overrides(cfg, getattr(args, "set", None) or [])
    except (ConfigError, ValueError) as e:
        raise CliError(f"config error: {e}", EXIT_CONFIG)


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    sequences = []
    n_frames = n_objects = n_proposals = 0
    for s in range(cfg.data.num_sequences):
        frames, objects = simulate_sequence(cfg.scene, cfg.data.T, seed=cfg.data.seed + s)
        proposals = make_proposals(objects, cfg.jitter,
                                   seed=cfg.data.seed + 100_000 + s,
                                   T=cfg.data.T)
        sequences.append((frames, objects, proposals))
        n_frames += len(frames)
        n_objects += len(objects)
        n_proposals += sum(len(p) for p in proposals)
    try:
        ds.write_sequences(out_dir, sequences,
                           meta={"num_sequences": cfg.data.num_sequences,
                                 "T": cfg.data.T, "seed": cfg.data.seed})
        save_config(cfg, out_dir / "config.ini")
    except OSError as e:
        raise CliError(f"IO error writing dataset: {e}", EXIT_IO)
    print(f"wrote {cfg.data.num_sequences} sequences ({n_frames} frames, "
          f"{n_objects} objects, {n_proposals} proposals) to {out_dir}")
    return EXIT_OK


def cmd_build_traj(args) -> int:
    cfg = _resolve_config(args)
    data_dir = Path(args.dataset)
    records = []
    try:
        seqs = list(ds.read_sequences(data_dir))
    except (OSError, ds.DatasetError) as e:
        raise CliError(f"IO error reading dataset: {e}", EXIT_IO)
    for seq_id, frames, objects, proposals in seqs:
        trajs = build_trajectories(frames, proposals,
                                   iou_thresh=cfg.traj.iou_thresh, dt=cfg.scene.dt,
                                   margin=cfg.traj.pool_margin, m_max=cfg.traj.m_max,
                                   seed=cfg.train.seed + seq_id)
        for traj in trajs:
            gt = None
            if objects:
                ious = [iou_3d(traj.latest_box, obj.trajectory[-1]) for obj in objects]
                j = int(np.argmax(ious))
                if ious[j] > 0:
                    gt = objects[j].trajectory[-1]
            records.append((seq_id, traj, gt))
    try:
        ds.write_trajectories(data_dir, records)
        save_config(cfg, data_dir / "config.ini")
    except OSError as e:
        raise CliError(f"IO error writing trajectories: {e}", EXIT_IO)
    print(f"built {len(records)} trajectories "
          f"({sum(1 for _, _, g in records if g is not None)} with ground truth)")
    return EXIT_OK


def _load_training_set(data_dir: Path, T: int):
    try:
        items = list(ds.read_trajectories(data_dir))
    except (OSError, ds.DatasetError) as e:
        raise CliError(f"IO error reading trajectories: {e} "
                       f"(run 'build-traj' first)", EXIT_IO)
    trajectories, gt_boxes = [], []
    for _, traj, gt in items:
        if gt is not None and traj.T == T:
            trajectories.append(traj)
            gt_boxes.append(gt)
    return trajectories, gt_boxes


_OPT_PREFIX = "_opt."
_META_KEYS = ("_step",)


def _save_train_checkpoint(path, model, opt: Adam, step: int):
    state = model.state_dict()
    for p, m, v in zip(opt.params, opt.m, opt.v):
        state[_OPT_PREFIX + "m." + p.name] = m
        state[_OPT_PREFIX + "v." + p.name] = v
    state[_OPT_PREFIX + "t"] = np.array(float(opt.t))
    state["_step"] = np.array(float(step))
    save_checkpoint(path, state)


def _split_checkpoint(state: dict):
    model_state = {k: v for k, v in state.items()
                   if not k.startswith(_OPT_PREFIX) and k not in _META_KEYS}
    return model_state, state


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectories, gt_boxes = _load_training_set(Path(args.dataset), cfg.model.T)
    if not trajectories:
        raise CliError(f"no length-{cfg.model.T} trajectories with ground truth "
                       f"in {args.dataset}", EXIT_CONFIG)
    model = TrajectoryRefiner(cfg.model)
    opt = Adam(model.parameters(), lr=cfg.train.lr)
    start_step = 0
    if args.resume:
        try:
            model_state, full = _split_checkpoint(load_checkpoint(args.resume))
            model.load_state_dict(model_state)
            opt.t = int(full[_OPT_PREFIX + "t"].item())
            opt.m = [full[_OPT_PREFIX + "m." + p.name].copy() for p in opt.params]
            opt.v = [full[_OPT_PREFIX + "v." + p.name].copy() for p in opt.params]
            start_step = int(full["_step"].item())
        except (CheckpointError, OSError, KeyError, ValueError) as e:
            raise CliError(f"cannot resume from {args.resume}: {e}", EXIT_CONFIG)
    steps_per_epoch = max(1, -(-len(trajectories) // cfg.train.batch_size))
    if cfg.train.steps > 0:
        total_steps = cfg.train.steps
        epochs = max(1, total_steps // steps_per_epoch)
    else:
        epochs = cfg.train.epochs
        total_steps = epochs * steps_per_epoch
    # the lr schedule horizon covers the whole (possibly resumed) run
    horizon = start_step + total_steps
    save_config(cfg, out_dir / "config.ini")
    metrics_path = out_dir / "metrics.csv"
    run_id = out_dir.name or "run"
    print(f"training on {len(trajectories)} trajectories for {total_steps} steps "
          f"({model.num_parameters()} parameters)")
    try:
        with open(metrics_path, "w", newline="") as mf:
            writer = csv.writer(mf)
            writer.writerow(METRICS_HEADER)
            records = []
            for epoch in range(epochs):
                chunk = total_steps // epochs + (1 if epoch < total_steps % epochs else 0)
                records += train_model(
                    model, trajectories, gt_boxes, steps=chunk,
                    batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                    seed=cfg.train.seed, optimizer=opt, start_step=start_step,
                    total_steps=horizon, log_every=max(1, chunk // 4))
                start_step += chunk
                report = evaluate_model(model, trajectories, gt_boxes,
                                        cfg.train.eval_iou_thresh)
                last = records[-1]
                writer.writerow([run_id, epoch, f"{report.mean_iou_before:.6f}",
                                 f"{report.mean_iou_after:.6f}",
                                 "" if report.ap is None else f"{report.ap:.6f}",
                                 f"{last.conf_loss:.6f}", f"{last.reg_loss:.6f}",
                                 f"{last.loss:.6f}"])
                print(f"epoch {epoch}: loss {last.loss:.4f} "
                      f"iou {report.mean_iou_before:.3f} -> {report.mean_iou_after:.3f}")
    except (FloatingPointError, NonFiniteError) as e:
        raise CliError(f"numeric failure during training: {e}", EXIT_NUMERIC)
    _save_train_checkpoint(out_dir / "checkpoint.bin", model, opt, start_step)
    print(f"checkpoint written to {out_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt_path.parent / "config.ini"
    try:
        cfg = apply_overrides(load_config(cfg_path if cfg_path.exists() else None),
                              args.set or [])
    except ConfigError as e:
        raise CliError(f"config error: {e}", EXIT_CONFIG)
    model = TrajectoryRefiner(cfg.model)
    try:
        model_state, _ = _split_checkpoint(load_checkpoint(ckpt_path))
        model.load_state_dict(model_state)
    except (CheckpointError, OSError) as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_IO)
    except (KeyError, ValueError) as e:
        raise CliError(f"checkpoint does not match model config: {e}", EXIT_CONFIG)
    trajectories, gt_boxes = _load_training_set(Path(args.dataset), cfg.model.T)
    if not trajectories:
        print("empty dataset: nothing to evaluate")
        return EXIT_OK
    report = evaluate_model(model, trajectories, gt_boxes, cfg.train.eval_iou_thresh)
    out_path = Path(args.out) if args.out else ckpt_path.parent / "eval_metrics.csv"
    with open(out_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(METRICS_HEADER)
        writer.writerow(["eval", "", f"{report.mean_iou_before:.6f}",
                         f"{report.mean_iou_after:.6f}",
                         "" if report.ap is None else f"{report.ap:.6f}", "", "", ""])
    print(f"mean IoU: {report.mean_iou_before:.4f} -> {report.mean_iou_after:.4f} "
          f"(delta {report.delta:+.4f}), "
          f"AP@{cfg.train.eval_iou_thresh}: "
          f"{'n/a' if report.ap is None else f'{report.ap:.4f}'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_all_checks(inject_fault=args.inject_fault)
    failed = 0
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"[{status}] {c.name:24s} {c.detail} ({c.elapsed:.1f}s)")
        failed += not c.passed
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectories, gt_boxes = _load_training_set(Path(args.dataset), cfg.model.T)
    if not trajectories:
        raise CliError(f"no usable trajectories in {args.dataset}", EXIT_CONFIG)
    save_config(cfg, out_dir / "config.ini")
    variants = []
    if cfg.model.T > cfg.model.S:
        variants += [("grouping_strided", {"grouping": "strided"}),
                     ("grouping_contiguous", {"grouping": "contiguous"})]
    variants += [(f"proxy_n{n}", {"n": n}) for n in (3, 4, 5)]
    steps = cfg.train.steps if cfg.train.steps > 0 else 200
    results_path = out_dir / "ablation.csv"
    with open(results_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(["variant", "steps", "final_loss", "mean_iou_before",
                         "mean_iou_after", "ap_at_thresh"])
        for name, patch in variants:
            mcfg = dataclasses.replace(cfg.model, **patch)
            model = TrajectoryRefiner(mcfg)
            t0 = time.monotonic()
            records = train_model(model, trajectories, gt_boxes, steps=steps,
                                  batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                                  seed=cfg.train.seed)
            report = evaluate_model(model, trajectories, gt_boxes,
                                    cfg.train.eval_iou_thresh)
            writer.writerow([name, steps, f"{records[-1].loss:.6f}",
                             f"{report.mean_iou_before:.6f}",
                             f"{report.mean_iou_after:.6f}",
                             "" if report.ap is None else f"{report.ap:.6f}"])
            print(f"{name}: loss {records[-1].loss:.4f} "
                  f"iou {report.mean_iou_before:.3f} -> {report.mean_iou_after:.3f} "
                  f"({time.monotonic() - t0:.0f}s)")
    print(f"ablation results written to {results_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajrefine",
        description="Temporal refinement of 3D box proposals on synthetic "
                    "LiDAR sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("build-traj", help="associate proposals into trajectories")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.set_defaults(fn=cmd_build_traj)

    p = sub.add_parser("train", help="train the refinement model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the self-verification suite")
    p.add_argument("--inject-fault", action="store_true",
                   help="force one check to fail (harness self-test)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("ablate", help="run grouping-strategy and proxy-count sweeps")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
