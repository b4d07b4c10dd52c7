"""Detection head: group queries, box embedding, residual decode, loss and
evaluation metrics."""

import math

import numpy as np
import pytest

from trajrefine.geom import Box7, iou_3d
from trajrefine.head import (Detection, DetectionHead, average_precision,
                             compute_loss, compute_loss_batch,
                             confidence_target, decode_box_residual,
                             encode_box_residual, evaluate)
from trajrefine.nn import Tensor, grad_check
from trajrefine.oracles import random_box_pair
from trajrefine.trajseq import ProposalTrajectory


def _head(dim=8, S=2, seed=0):
    return DetectionHead(dim, S, heads=2, seed=seed)


def _stationary_traj(T=4, box=None):
    box = box or Box7(1, 2, 0.5, 4, 2, 1.6, 0.3)
    return ProposalTrajectory([box] * T, np.ones(T), np.ones(T, dtype=bool),
                              np.zeros((T, 2)))


class TestBoxResidual:
    def test_zero_residual_decodes_to_anchor(self):
        anchor = Box7(3, -1, 0.5, 4.2, 1.9, 1.5, 0.8)
        assert decode_box_residual(np.array([0, 0, 0, 0, 0, 0, 0, 1.0]),
                                   anchor) == anchor

    def test_round_trip_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            anchor, target = random_box_pair(rng)
            back = decode_box_residual(encode_box_residual(target, anchor),
                                       anchor)
            assert np.max(np.abs(back.to_array()[:6] - target.to_array()[:6])) < 1e-9
            assert abs(math.sin(back.heading - target.heading)) < 1e-9

    def test_encode_components(self):
        anchor = Box7(0, 0, 0, 2, 2, 2, 0.0)
        target = Box7(1, 0, 0, 4, 2, 2, 0.0)
        res = encode_box_residual(target, anchor)
        np.testing.assert_allclose(res[:3], [1 / anchor.diagonal, 0, 0],
                                   atol=1e-12)
        np.testing.assert_allclose(res[3:6], [math.log(2), 0, 0], atol=1e-12)
        np.testing.assert_allclose(res[6:], [0.0, 1.0], atol=1e-12)


class TestConfidenceTarget:
    def test_clamped_linear_ramp(self):
        assert confidence_target(0.0) == 0.0
        assert confidence_target(0.25) == 0.0
        assert confidence_target(0.5) == pytest.approx(0.5)
        assert confidence_target(0.75) == 1.0
        assert confidence_target(1.0) == 1.0

    def test_monotone_in_iou(self):
        grid = np.linspace(0, 1, 101)
        vals = [confidence_target(x) for x in grid]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestGroupQuery:
    def test_identical_keys_ignore_query(self):
        rng = np.random.default_rng(1)
        head = _head()
        row = rng.normal(size=8)
        group = Tensor(np.tile(row, (6, 1)))
        pe = Tensor(rng.normal(size=(6, 8)))
        base = head.group_query(group, pe).data
        head.query.data = rng.normal(size=(1, 8))
        np.testing.assert_allclose(head.group_query(group, pe).data, base,
                                   atol=1e-9)

    def test_single_key_weight_is_one(self):
        rng = np.random.default_rng(2)
        head = _head()
        group = Tensor(rng.normal(size=(1, 8)))
        pe = Tensor(rng.normal(size=(1, 8)))
        _, w = head.group_attn(head.query, group + pe, group,
                               return_weights=True)
        np.testing.assert_array_equal(w.data, np.ones((2, 1, 1)))

    def test_query_gradients(self):
        rng = np.random.default_rng(3)
        head = _head(seed=3)
        group = Tensor(rng.normal(size=(5, 8)))
        pe = Tensor(rng.normal(size=(5, 8)))

        def loss():
            return (head.group_query(group, pe) ** 2).sum()

        report = grad_check(loss, [head.query])
        assert report.max_rel_error < 1e-5


class TestBoxEmbedding:
    def test_stationary_tokens_differ_only_in_time(self):
        traj = _stationary_traj(T=4)
        tokens = DetectionHead._box_tokens(traj, dt=0.1)
        np.testing.assert_allclose(tokens[:, :7], 0.0, atol=1e-12)
        np.testing.assert_allclose(tokens[:, 7], [0.3, 0.2, 0.1, 0.0],
                                   atol=1e-12)

    def test_single_frame_pooling(self):
        head = _head()
        traj = _stationary_traj(T=1)
        emb = head.embed_boxes(traj, dt=0.1)
        tokens = DetectionHead._box_tokens(traj, dt=0.1)
        np.testing.assert_array_equal(emb.data,
                                      head.box_mlp(Tensor(tokens)).data)

    def test_token_permutation_leaves_pool_unchanged(self):
        rng = np.random.default_rng(4)
        head = _head()
        tokens = rng.normal(size=(6, 8))
        base = head.box_mlp(Tensor(tokens)).max(axis=0).data
        perm = head.box_mlp(Tensor(tokens[rng.permutation(6)])).max(axis=0).data
        np.testing.assert_allclose(perm, base, atol=1e-12)

    def test_batch_matches_single(self):
        head = _head()
        trajs = [_stationary_traj(box=Box7(i, 0, 0.5, 4, 2, 1.6, 0.1 * i))
                 for i in range(3)]
        batched = head.embed_boxes_batch(trajs, dt=0.1).data
        for i, traj in enumerate(trajs):
            np.testing.assert_allclose(batched[i],
                                       head.embed_boxes(traj, dt=0.1).data[0],
                                       atol=1e-12, rtol=0)


class TestPredict:
    def _inputs(self, head, seed=5):
        rng = np.random.default_rng(seed)
        groups = [Tensor(rng.normal(size=(8, 8))) for _ in range(head.S)]
        pe = Tensor(rng.normal(size=(8, 8)))
        box_emb = Tensor(rng.normal(size=(1, 8)))
        return groups, pe, box_emb

    def test_zero_regression_refines_to_anchor(self):
        head = _head()        # regression branch is zero-initialized
        groups, pe, box_emb = self._inputs(head)
        anchor = Box7(2, -3, 0.4, 4.4, 1.8, 1.5, -0.7)
        pred = head.predict(groups, pe, box_emb, anchor)
        np.testing.assert_array_equal(pred.regression.data, np.zeros((1, 8)))
        assert pred.detection.box == anchor

    def test_zero_conf_logit_gives_half_confidence(self):
        head = _head()
        for p in head.conf_mlp.parameters():
            p.data = np.zeros_like(p.data)
        groups, pe, box_emb = self._inputs(head, seed=6)
        pred = head.predict(groups, pe, box_emb, Box7(0, 0, 0, 2, 2, 2, 0))
        assert pred.detection.confidence == 0.5

    def test_group_count_enforced(self):
        head = _head()
        groups, pe, box_emb = self._inputs(head, seed=7)
        with pytest.raises(ValueError):
            head.predict(groups[:1], pe, box_emb, Box7(0, 0, 0, 2, 2, 2, 0))

    def test_batch_matches_single(self):
        head = _head()
        # exercise a nonzero regression branch
        rng = np.random.default_rng(8)
        for p in head.reg_mlp.parameters():
            p.data = rng.normal(scale=0.05, size=p.shape)
        anchors = [Box7(i, 1, 0.4, 4, 2, 1.5, 0.2) for i in range(3)]
        groups = rng.normal(size=(3, head.S, 8, 8))
        pe = Tensor(rng.normal(size=(8, 8)))
        box_emb = rng.normal(size=(3, 8))
        bp = head.predict_batch(Tensor(groups), pe, Tensor(box_emb), anchors)
        for i in range(3):
            single = head.predict([Tensor(groups[i, s]) for s in range(head.S)],
                                  pe, Tensor(box_emb[i:i + 1]), anchors[i])
            np.testing.assert_allclose(bp.regression.data[i],
                                       single.regression.data[0], atol=1e-12)
            np.testing.assert_allclose(bp.conf_logit.data[i],
                                       single.conf_logit.data[0], atol=1e-12)


class TestComputeLoss:
    def _prediction(self, head, anchor, seed=9):
        rng = np.random.default_rng(seed)
        groups = [Tensor(rng.normal(size=(8, 8))) for _ in range(head.S)]
        pe = Tensor(rng.normal(size=(8, 8)))
        box_emb = Tensor(rng.normal(size=(1, 8)))
        return head.predict(groups, pe, box_emb, anchor)

    def test_total_combines_parts_with_alpha(self):
        head = _head()
        anchor = Box7(0, 0, 0, 4, 2, 1.6, 0.0)
        gt = Box7(0.2, 0.1, 0, 4.1, 2.0, 1.6, 0.05)
        report = compute_loss([self._prediction(head, anchor)], gt, alpha=2.0)
        assert report.total == pytest.approx(
            report.conf_loss + 2.0 * report.reg_loss, abs=1e-12)
        # hand case: parts 0.3 and 0.1 must combine to 0.5 under the same rule
        assert 0.3 + 2.0 * 0.1 == pytest.approx(0.5)

    def test_perfect_prediction_has_zero_regression_loss(self):
        from trajrefine.head import Prediction
        head = _head()
        gt = Box7(1, -2, 0.3, 4.2, 1.9, 1.5, 0.4)
        base = self._prediction(head, gt)      # anchor == gt, c* = 1
        exact = Prediction(base.conf_logit,
                           Tensor(encode_box_residual(gt, gt)[None, :]),
                           base.detection, gt)
        report = compute_loss([exact], gt)
        assert report.reg_loss == 0.0
        z = base.conf_logit.data.item()
        assert report.conf_loss == pytest.approx(np.logaddexp(0, z) - z,
                                                 abs=1e-12)

    def test_no_regression_loss_below_iou_floor(self):
        head = _head()
        anchor = Box7(0, 0, 0, 2, 2, 2, 0)
        gt = Box7(50, 0, 0, 2, 2, 2, 0)        # disjoint: c* = 0
        report = compute_loss([self._prediction(head, anchor)], gt)
        assert report.reg_loss == 0.0
        assert report.conf_loss > 0.0

    def test_intermediate_outputs_sum_linearly(self):
        head = _head()
        anchor = Box7(0, 0, 0, 4, 2, 1.6, 0.0)
        gt = Box7(0.2, 0.1, 0, 4, 2, 1.6, 0.0)
        p1 = self._prediction(head, anchor, seed=10)
        p2 = self._prediction(head, anchor, seed=11)
        both = compute_loss([p1, p2], gt)
        single = [compute_loss([p], gt) for p in (p1, p2)]
        assert both.total == pytest.approx(sum(s.total for s in single),
                                           abs=1e-12)
        assert len(both.per_output) == 2

    def test_alpha_validation(self):
        head = _head()
        gt = Box7(0, 0, 0, 2, 2, 2, 0)
        with pytest.raises(ValueError):
            compute_loss([self._prediction(head, gt)], gt, alpha=0.0)

    def test_batch_loss_matches_per_sample_sum(self):
        head = _head()
        rng = np.random.default_rng(12)
        for p in head.reg_mlp.parameters():
            p.data = rng.normal(scale=0.05, size=p.shape)
        anchors = [Box7(i * 0.3, 0, 0.4, 4, 2, 1.5, 0.1) for i in range(3)]
        gts = [a.translated(0.2, -0.1) for a in anchors]
        groups = rng.normal(size=(3, head.S, 8, 8))
        pe = Tensor(rng.normal(size=(8, 8)))
        box_emb = rng.normal(size=(3, 8))
        bp = head.predict_batch(Tensor(groups), pe, Tensor(box_emb), anchors)
        batch_report = compute_loss_batch([bp], gts)
        total = 0.0
        for i in range(3):
            single = head.predict([Tensor(groups[i, s]) for s in range(head.S)],
                                  pe, Tensor(box_emb[i:i + 1]), anchors[i])
            total += compute_loss([single], gts[i]).total
        assert batch_report.total == pytest.approx(total, rel=1e-12)

    def test_head_gradients(self):
        head = _head(seed=13)
        rng = np.random.default_rng(13)
        # give the zero-initialized regression branch nonzero weights so its
        # gradients are exercised too
        for p in head.parameters():
            p.data = p.data + rng.normal(scale=1e-3, size=p.shape)
        anchor = Box7(0, 0, 0, 4, 2, 1.6, 0.0)
        gt = Box7(0.3, 0.1, 0.05, 4.1, 2.0, 1.55, 0.05)
        groups = [Tensor(rng.normal(size=(8, 8))) for _ in range(head.S)]
        pe = Tensor(rng.normal(size=(8, 8)))
        box_emb = Tensor(rng.normal(size=(1, 8)))

        def loss():
            pred = head.predict(groups, pe, box_emb, anchor)
            return compute_loss([pred], gt).total_tensor

        report = grad_check(loss, head.parameters(), max_coords=400)
        assert report.max_rel_error < 1e-4


def _reference_ap(detections, gt_boxes, iou_thresh):
    """Independent PR-curve implementation used as an oracle."""
    order = sorted(range(len(detections)),
                   key=lambda i: -detections[i].confidence)
    taken = set()
    flags = []
    for i in order:
        best_j, best = None, iou_thresh
        for j, gt in enumerate(gt_boxes):
            if j in taken:
                continue
            v = iou_3d(detections[i].box, gt)
            if v >= best:
                best_j, best = j, v
        if best_j is not None:
            taken.add(best_j)
            flags.append(1.0)
        else:
            flags.append(0.0)
    prec, rec, tp = [], [], 0.0
    for k, f in enumerate(flags):
        tp += f
        prec.append(tp / (k + 1))
        rec.append(tp / len(gt_boxes))
    area = 0.0
    prev_r, prev_p = 0.0, prec[0] if prec else 0.0
    for p, r in zip(prec, rec):
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return area


class TestEvaluate:
    def test_perfect_detections(self):
        rng = np.random.default_rng(14)
        gts = [random_box_pair(rng)[0] for _ in range(5)]
        dets = [Detection(b, 1.0) for b in gts]
        report = evaluate(dets, gts, gts, iou_thresh=0.5)
        assert report.ap == pytest.approx(1.0)
        assert report.mean_iou_after == pytest.approx(1.0)
        assert report.delta == pytest.approx(0.0)

    def test_no_detections_zero_ap(self):
        gt = [Box7(0, 0, 0, 2, 2, 2, 0)]
        assert average_precision([], gt, 0.5) == 0.0

    def test_no_ground_truth_undefined_ap(self):
        det = [Detection(Box7(0, 0, 0, 2, 2, 2, 0), 0.9)]
        assert average_precision(det, [], 0.5) is None

    def test_random_instance_matches_reference(self):
        rng = np.random.default_rng(15)
        for case in range(10):
            gts = []
            while len(gts) < 5:
                b, _ = random_box_pair(rng)
                if all(iou_3d(b, g) < 0.3 for g in gts):
                    gts.append(b)
            dets = []
            for _ in range(10):
                base = gts[rng.integers(5)]
                jit = base.translated(rng.uniform(-1.5, 1.5),
                                      rng.uniform(-1.5, 1.5))
                dets.append(Detection(jit, float(rng.uniform(0.05, 0.95))))
            got = average_precision(dets, gts, 0.5)
            assert got == pytest.approx(_reference_ap(dets, gts, 0.5),
                                        abs=1e-12)

    def test_iou_threshold_validation(self):
        with pytest.raises(ValueError):
            average_precision([], [Box7(0, 0, 0, 1, 1, 1, 0)], 1.5)

    def test_detection_confidence_validated(self):
        with pytest.raises(ValueError):
            Detection(Box7(0, 0, 0, 1, 1, 1, 0), 1.2)
