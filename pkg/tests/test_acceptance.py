"""Acceptance gate: ten end-to-end criteria covering geometry oracles,
gradient correctness, encoder invariants, training improvement, the temporal
length trend, determinism and the association oracle.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured values, then
asserts. The suite is self-contained: every derived number is checked against
an independent oracle (Monte-Carlo IoU, central finite differences, exhaustive
assignment) computed inside the test run.
"""

import math
import time

import numpy as np
import pytest

from trajrefine.cli import EXIT_OK, main
from trajrefine.encode import (FrameEncoder, TimeOffset, grid_to_world,
                               make_proxy_grid)
from trajrefine.geom import Box7, Pose2D, iou_3d
from trajrefine.head import compute_loss
from trajrefine.model import (ModelConfig, TrajectoryRefiner, evaluate_model,
                              train_model)
from trajrefine.nn import Linear, MultiHeadAttention, Tensor, grad_check
from trajrefine.oracles import exhaustive_associate, mc_iou, random_box_pair
from trajrefine.synth import (JitterConfig, SceneConfig, TrackedObject,
                              make_proposals, simulate_sequence)
from trajrefine.temporal import Mixer3D, make_groups
from trajrefine.trajseq import PooledPoints, associate, build_trajectories


def _report(capsys, num: int, label: str, ok: bool, detail: str):
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} ({label}): {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


def _labelled_dataset(scene: SceneConfig, T: int, jitter: JitterConfig,
                      seq_seeds, prop_seed0: int, traj_seed0: int,
                      gt_iou: float = 0.3, truncate_to: int | None = None):
    """Simulated sequences -> associated trajectories with a ground-truth box
    per trajectory (highest-IoU object at the latest frame)."""
    trajs, gts = [], []
    for k, seed in enumerate(seq_seeds):
        frames, objects = simulate_sequence(scene, T, seed=seed)
        proposals = make_proposals(objects, jitter, seed=prop_seed0 + k)
        if truncate_to is not None:
            frames = frames[-truncate_to:]
            proposals = proposals[-truncate_to:]
        for traj in build_trajectories(frames, proposals, dt=scene.dt,
                                       seed=traj_seed0 + k):
            ious = [iou_3d(traj.latest_box, o.trajectory[-1]) for o in objects]
            j = int(np.argmax(ious))
            if ious[j] > gt_iou:
                trajs.append(traj)
                gts.append(objects[j].trajectory[-1])
    return trajs, gts


# --------------------------------------------------------------------------
# 1. rotated-IoU oracle
# --------------------------------------------------------------------------

def test_criterion_01_geometry_oracle(capsys):
    start = time.monotonic()
    rng = np.random.default_rng(42)
    worst_mc = 0.0
    for i in range(100):
        a, b = random_box_pair(rng)
        worst_mc = max(worst_mc,
                       abs(iou_3d(a, b) - mc_iou(a, b, 1_000_000, seed=i)))
    # axis-aligned cases with closed-form intersection volumes
    cube = Box7(0, 0, 0, 2, 2, 2, 0.0)
    cases = [
        (cube, cube, 1.0),
        (cube, cube.translated(1.0, 0.0), 4.0 / 12.0),
        (cube, cube.translated(5.0, 0.0), 0.0),
        (Box7(0, 0, 0, 2, 4, 6, 0.0), Box7(0.5, 1.0, 1.5, 2, 4, 6, 0.0),
         20.25 / 75.75),
        # heading pi has the same footprint as heading 0
        (cube, Box7(1.0, 0, 0, 2, 2, 2, math.pi), 4.0 / 12.0),
        (Box7(0, 0, 0, 2, 2, 2, 0.0), Box7(0, 0, 1.0, 2, 2, 2, 0.0), 4.0 / 12.0),
    ]
    worst_exact = max(abs(iou_3d(a, b) - want) for a, b, want in cases)
    elapsed = time.monotonic() - start
    ok = worst_mc < 5e-3 and worst_exact < 1e-9 and elapsed < 60.0
    _report(capsys, 1, "geometry oracle", ok,
            f"max |iou - MC(1e6)| = {worst_mc:.2e} over 100 rotated pairs "
            f"(tol 5e-3), axis-aligned max err = {worst_exact:.2e} "
            f"(tol 1e-9), {elapsed:.1f}s (limit 60s)")


# --------------------------------------------------------------------------
# 2. finite-difference gradient suite
# --------------------------------------------------------------------------

def test_criterion_02_gradient_suite(capsys):
    start = time.monotonic()
    rng = np.random.default_rng(0)
    results = []

    layer = Linear(5, 4, "acc.linear", seed=1)
    x = Tensor(rng.normal(size=(3, 5)))
    results.append(("linear",
                    grad_check(lambda: (layer(x) ** 2).sum(),
                               layer.parameters()).max_rel_error, 1e-6))

    attn = MultiHeadAttention(8, 2, "acc.attn", seed=2)
    q, k, v = (Tensor(rng.normal(size=(m, 8))) for m in (3, 5, 5))
    results.append(("attention",
                    grad_check(lambda: (attn(q, k, v) ** 2).sum(),
                               attn.parameters()).max_rel_error, 1e-5))

    mixer = Mixer3D(2, 6, "acc.mixer", seed=3)
    g = Tensor(rng.normal(size=(8, 6)))
    results.append(("mixer3d",
                    grad_check(lambda: (mixer(g) ** 2).sum(),
                               mixer.parameters()).max_rel_error, 1e-5))

    # full per-frame encoder (both branches) on a simulated 2-frame trajectory
    scene = SceneConfig(num_objects=1, points_per_object=48, noise_sigma=0.01)
    frames, objects = simulate_sequence(scene, 2, seed=15)
    proposals = make_proposals(objects, JitterConfig(), seed=16)
    traj = build_trajectories(frames, proposals, dt=scene.dt, m_max=32)[0]
    enc = FrameEncoder(n=2, dim=8, nsample=8, seed=11)
    results.append(("encoder",
                    grad_check(lambda: (enc.encode_frame(traj, 0, scene.dt)
                                        .combined ** 2).sum(),
                               enc.parameters(),
                               max_coords=400).max_rel_error, 1e-4))

    # end-to-end toy model: T=4, S=2, n=2 (8 proxy points), dim=8
    cfg = ModelConfig(T=4, n=2, dim=8, S=2, depth=1, heads=2, nsample=8, seed=5)
    frames, objects = simulate_sequence(scene, cfg.T, seed=5)
    proposals = make_proposals(objects, JitterConfig(), seed=6)
    traj = build_trajectories(frames, proposals, dt=scene.dt, m_max=32)[0]
    gt = objects[0].trajectory[-1]
    model = TrajectoryRefiner(cfg)
    # nudge off the freshly initialized point: zero biases put dead relu rows
    # exactly on the kink, where one-sided analytic gradients and central
    # differences legitimately disagree
    jrng = np.random.default_rng(105)
    for p in model.parameters():
        p.data = p.data + jrng.normal(scale=1e-3, size=p.shape)
    results.append(("hierarchy",
                    grad_check(lambda: compute_loss(model.forward(traj), gt,
                                                    alpha=cfg.alpha).total_tensor,
                               model.parameters(), max_coords=600,
                               seed=5).max_rel_error, 1e-4))

    elapsed = time.monotonic() - start
    ok = all(err < tol for _, err, tol in results) and elapsed < 300.0
    detail = ", ".join(f"{name} {err:.1e} (tol {tol:g})"
                       for name, err, tol in results)
    _report(capsys, 2, "gradient suite", ok, f"{detail}, {elapsed:.1f}s (limit 300s)")


# --------------------------------------------------------------------------
# 3. geometry/motion decoupling invariants
# --------------------------------------------------------------------------

def test_criterion_03_decoupling(capsys):
    rng = np.random.default_rng(7)
    enc = FrameEncoder(n=3, dim=16, nsample=8, seed=2)
    worst = 0.0
    for _ in range(50):
        box = Box7(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-1, 1),
                   rng.uniform(2, 5), rng.uniform(1, 3), rng.uniform(1, 2),
                   rng.uniform(-math.pi, math.pi))
        pts = box.center + rng.uniform(-1.5, 1.5, size=(40, 3))
        base = enc.encode_geometry(PooledPoints(pts, 40), box,
                                   make_proxy_grid(box, 3)).data
        g = Pose2D(rng.uniform(-10, 10), rng.uniform(-10, 10),
                   rng.uniform(-2, 2), rng.uniform(-math.pi, math.pi))
        tbox = g.apply_box(box)
        tout = enc.encode_geometry(PooledPoints(g.apply(pts), 40), tbox,
                                   make_proxy_grid(tbox, 3)).data
        worst = max(worst, float(np.max(np.abs(tout - base))))

    # motion branch must react to a 1 m translation of a single frame's box
    latest = Box7(5, 2, 0.5, 4, 2, 1.6, 0.4)
    past = Box7(4, 2, 0.5, 4, 2, 1.6, 0.4)
    e = TimeOffset.for_frame(0, 4, 0.1)
    base = enc.encode_motion(grid_to_world(make_proxy_grid(past, 3), past),
                             latest, e).data
    moved = past.translated(1.0, 0.0)
    shifted = enc.encode_motion(grid_to_world(make_proxy_grid(moved, 3), moved),
                                latest, e).data
    motion_dev = float(np.max(np.abs(shifted - base)))

    e_latest = TimeOffset.for_frame(15, 16, 0.1).e
    ok = worst < 1e-9 and motion_dev > 0.0 and e_latest == 0.0
    _report(capsys, 3, "decoupling", ok,
            f"geometry deviation {worst:.2e} over 50 joint rigid transforms "
            f"(tol 1e-9), motion deviation {motion_dev:.2e} under 1 m "
            f"single-frame shift (> 0), latest time offset = {e_latest!r} "
            f"(exactly 0.0)")


# --------------------------------------------------------------------------
# 4. proxy-grid alignment
# --------------------------------------------------------------------------

def test_criterion_04_proxy_alignment(capsys):
    rng = np.random.default_rng(6)
    n = 4
    ref = None
    ok = True
    detail = ""
    for i in range(50):
        box = Box7(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-2, 2),
                   rng.uniform(1, 5), rng.uniform(1, 3), rng.uniform(1, 2),
                   rng.uniform(-math.pi, math.pi))
        grid = make_proxy_grid(box, n)
        if grid.N != 64:
            ok, detail = False, f"n=4 grid has {grid.N} points, expected 64"
            break
        if ref is None:
            # independently recomputed normalized cell centers in [-0.5, 0.5]
            ref = (grid.indices + 0.5) / n - 0.5
        if not np.array_equal(grid.points, ref * box.size):
            ok, detail = False, f"box {i}: grid deviates from shared map"
            break
    if ok:
        detail = ("index -> normalized-coordinate map bitwise identical "
                  "across 50 random boxes; n=4 gives N=64")
    _report(capsys, 4, "proxy alignment", ok, detail)


# --------------------------------------------------------------------------
# 5. strided grouping
# --------------------------------------------------------------------------

def test_criterion_05_grouping(capsys):
    spec = make_groups(16, 4, "strided")
    want = ((1, 5, 9, 13), (2, 6, 10, 14), (3, 7, 11, 15), (4, 8, 12, 16))
    ok = spec.index_sets == want
    _report(capsys, 5, "grouping", ok,
            f"T=16, S=4 strided groups = {spec.index_sets}")


# --------------------------------------------------------------------------
# 6. do-no-harm at initialization
# --------------------------------------------------------------------------

def test_criterion_06_do_no_harm(capsys):
    scene = SceneConfig(num_objects=2, points_per_object=64)
    trajs, gts = _labelled_dataset(scene, T=8, jitter=JitterConfig(),
                                   seq_seeds=range(30, 33), prop_seed0=60,
                                   traj_seed0=90)
    model = TrajectoryRefiner(ModelConfig(T=8, n=3, dim=16, S=4, seed=0))
    identical = all(model.refine(traj).box == traj.latest_box for traj in trajs)
    delta = evaluate_model(model, trajs, gts).delta
    ok = identical and delta == 0.0
    _report(capsys, 6, "do-no-harm start", ok,
            f"zero-initialized regression keeps all {len(trajs)} input boxes "
            f"(exact equality: {identical}), mean-IoU delta = {delta!r} "
            f"(exactly 0.0)")


# --------------------------------------------------------------------------
# 7. training improves the training split
# --------------------------------------------------------------------------

def test_criterion_07_overfit_improvement(capsys):
    start = time.monotonic()
    scene = SceneConfig(num_objects=2)
    trajs, gts = _labelled_dataset(scene, T=8, jitter=JitterConfig(),
                                   seq_seeds=range(100, 116), prop_seed0=200,
                                   traj_seed0=0)
    model = TrajectoryRefiner(ModelConfig(T=8, n=4, dim=64, S=4, seed=0))
    steps = 1200
    state = {"stopped_at": None}

    def early_stop(rec):
        # from step 600 on, stop as soon as the measured gain clears the bar
        # with margin; the assertion below re-measures from scratch
        if rec.step >= 600 and (rec.step + 1) % 200 == 0:
            if evaluate_model(model, trajs, gts).delta >= 0.06:
                state["stopped_at"] = rec.step + 1
                return False

    train_model(model, trajs, gts, steps=steps, batch_size=8, lr=3e-3,
                seed=0, total_steps=steps, callback=early_stop)
    report = evaluate_model(model, trajs, gts)
    elapsed = time.monotonic() - start
    ok = report.delta >= 0.05 and elapsed < 600.0
    _report(capsys, 7, "overfit improvement", ok,
            f"{len(trajs)} jittered 8-frame trajectories, dim=64, "
            f"{state['stopped_at'] or steps} steps: mean IoU "
            f"{report.mean_iou_before:.4f} -> {report.mean_iou_after:.4f} "
            f"(delta {report.delta:+.4f}, need >= +0.05), "
            f"{elapsed:.0f}s (limit 600s)")


# --------------------------------------------------------------------------
# 8. longer temporal context helps on held-out data
# --------------------------------------------------------------------------

def test_criterion_08_temporal_length_trend(capsys):
    start = time.monotonic()
    scene = SceneConfig(num_objects=2, points_per_object=96)

    def refined_iou(seed: int, T_use: int) -> float:
        tr, tr_gt = _labelled_dataset(
            scene, T=16, jitter=JitterConfig(),
            seq_seeds=range(1000 * seed, 1000 * seed + 16),
            prop_seed0=1000 * seed + 500, traj_seed0=1000 * seed,
            truncate_to=T_use)
        ho, ho_gt = _labelled_dataset(
            scene, T=16, jitter=JitterConfig(),
            seq_seeds=range(1000 * seed + 100, 1000 * seed + 116),
            prop_seed0=1000 * seed + 600, traj_seed0=1000 * seed + 100,
            truncate_to=T_use)
        model = TrajectoryRefiner(ModelConfig(T=T_use, n=3, dim=32, S=4,
                                              seed=seed))
        train_model(model, tr, tr_gt, steps=800, batch_size=8, lr=3e-3,
                    seed=seed, total_steps=800)
        return evaluate_model(model, ho, ho_gt).mean_iou_after

    per_seed = []
    for seed in (0, 1, 2):
        per_seed.append((refined_iou(seed, 16), refined_iou(seed, 4)))
    mean16 = float(np.mean([a for a, _ in per_seed]))
    mean4 = float(np.mean([b for _, b in per_seed]))
    elapsed = time.monotonic() - start
    ok = mean16 >= mean4
    detail = ", ".join(f"seed {s}: T16 {a:.4f} vs T4 {b:.4f}"
                       for s, (a, b) in enumerate(per_seed))
    _report(capsys, 8, "temporal length trend", ok,
            f"{detail}; mean over seeds T16 {mean16:.4f} >= T4 {mean4:.4f}, "
            f"{elapsed:.0f}s")


# --------------------------------------------------------------------------
# 9. bitwise determinism of the pipeline
# --------------------------------------------------------------------------

def test_criterion_09_determinism(capsys, tmp_path):
    opts = ["--set", "data.num_sequences=2", "--set", "data.T=4",
            "--set", "scene.num_objects=2", "--set", "scene.points_per_object=64",
            "--set", "model.dim=16", "--set", "model.n=2", "--set", "model.S=2",
            "--set", "model.depth=1", "--set", "train.steps=8",
            "--set", "train.batch_size=4"]
    for root in (tmp_path / "a", tmp_path / "b"):
        data, run = root / "data", root / "run"
        assert main(["synth", "--out", str(data)] + opts) == EXIT_OK
        assert main(["build-traj", "--dataset", str(data)] + opts) == EXIT_OK
        assert main(["train", "--dataset", str(data), "--out", str(run)]
                    + opts) == EXIT_OK
        assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"),
                     "--dataset", str(data),
                     "--out", str(root / "eval.csv")]) == EXIT_OK
    rel_paths = sorted(p.relative_to(tmp_path / "a")
                       for p in (tmp_path / "a").rglob("*") if p.is_file())
    mismatched = [str(rel) for rel in rel_paths
                  if (tmp_path / "a" / rel).read_bytes()
                  != (tmp_path / "b" / rel).read_bytes()]
    ok = not mismatched and len(rel_paths) >= 8
    _report(capsys, 9, "determinism", ok,
            f"synth/build-traj/train/eval re-run: {len(rel_paths)} serialized "
            f"files compared, mismatches: {mismatched or 'none'}")


# --------------------------------------------------------------------------
# 10. greedy association equals the exhaustive oracle
# --------------------------------------------------------------------------

def _two_separated_objects(rng, T=4, dt=0.1):
    """Two constant-velocity objects whose centers stay more than one box
    diagonal apart at every frame."""
    while True:
        objs = []
        for oid in range(2):
            size = (rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.2),
                    rng.uniform(1.4, 1.9))
            heading = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(0.0, 8.0)
            vel = speed * np.array([math.cos(heading), math.sin(heading)])
            c = np.array([rng.uniform(-15, 15), rng.uniform(-15, 15),
                          rng.uniform(0.4, 1.0)])
            boxes = []
            for _ in range(T):
                boxes.append(Box7(c[0], c[1], c[2], *size, heading))
                c = c + np.array([vel[0], vel[1], 0.0]) * dt
            objs.append(TrackedObject(oid, boxes, np.tile(vel, (T, 1))))
        diag = max(o.trajectory[0].diagonal for o in objs)
        sep = min(np.linalg.norm(objs[0].trajectory[t].center
                                 - objs[1].trajectory[t].center)
                  for t in range(T))
        if sep > diag:
            return objs


def _greedy_choices(per_frame, iou_thresh, dt):
    """Greedy association result expressed per latest proposal in input
    order, matching the oracle's output convention."""
    trajs = associate(per_frame, iou_thresh, dt)
    latest_order = sorted(range(len(per_frame[-1])),
                          key=lambda i: -per_frame[-1][i].score)
    out = [None] * len(per_frame[-1])
    for k, traj in enumerate(trajs):
        choices = []
        for t in range(traj.T - 1):
            if not traj.valid_mask[t]:
                choices.append(None)
                continue
            choices.append(next(i for i, p in enumerate(per_frame[t])
                                if p.box == traj.boxes[t]))
        out[latest_order[k]] = choices
    return out


def test_criterion_10_association_oracle(capsys):
    rng = np.random.default_rng(10)
    mismatches = 0
    for case in range(200):
        objs = _two_separated_objects(rng)
        per_frame = make_proposals(
            objs, JitterConfig(0.05, 0.05, 0.05, 0.1, dropout=0.15),
            seed=5000 + case)
        if _greedy_choices(per_frame, 0.3, 0.1) != \
                exhaustive_associate(per_frame, 0.3, 0.1):
            mismatches += 1
    ok = mismatches == 0
    _report(capsys, 10, "association oracle", ok,
            f"greedy == exhaustive on {200 - mismatches}/200 random "
            f"2-object/4-frame cases (separation > 1 diagonal)")
