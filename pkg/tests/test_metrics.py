import numpy as np
import pytest

from semfuse import (LabeledCloud, UNLABELED, UndefinedMetricsError, depth_metrics,
                     recon_metrics, seg_metrics)

from conftest import random_cloud


def depth_oracle(pred, gt, thresholds):
    """Scalar-loop reference implementation of the depth error formulas."""
    vals = [(p, g) for p, g in zip(pred.ravel(), gt.ravel())
            if np.isfinite(p) and np.isfinite(g) and p > 0 and g > 0]
    n = len(vals)
    rel = sum(abs(p - g) / g for p, g in vals) / n
    rms = (sum((p - g) ** 2 for p, g in vals) / n) ** 0.5
    log10 = sum(abs(np.log10(p) - np.log10(g)) for p, g in vals) / n
    deltas = []
    for t in thresholds:
        deltas.append(sum(1 for p, g in vals if max(p / g, g / p) < t) / n)
    return rel, rms, log10, deltas


def seg_oracle(pred, gt, num_classes):
    """Confusion-matrix reference built with explicit loops."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != UNLABELED:
            conf[g, p] += 1
    pixel_acc = np.trace(conf) / conf.sum()
    accs, ious = [], []
    for c in range(num_classes):
        support = conf[c].sum()
        if support == 0:
            continue
        accs.append(conf[c, c] / support)
        union = support + conf[:, c].sum() - conf[c, c]
        ious.append(conf[c, c] / union)
    return pixel_acc, np.mean(accs), np.mean(ious)


class TestDepthMetrics:
    def test_perfect_prediction(self, rng):
        d = rng.uniform(0.5, 4.0, size=(8, 8))
        m = depth_metrics(d, d)
        assert m.rel == 0 and m.log10 == 0 and m.rms == 0
        assert all(frac == 1.0 for _, frac in m.delta_acc)

    def test_single_pixel_hand_case(self):
        m = depth_metrics(np.array([[2.0]]), np.array([[1.0]]))
        assert m.rel == pytest.approx(1.0, abs=1e-12)
        assert m.rms == pytest.approx(1.0, abs=1e-12)
        assert m.log10 == pytest.approx(0.3010299956639812, abs=1e-12)
        assert m.delta_acc[0] == (1.25, 0.0)

    def test_three_pixel_case_vs_oracle(self):
        pred = np.array([[1.0, 2.5, 0.8]])
        gt = np.array([[1.2, 2.0, 0.8]])
        m = depth_metrics(pred, gt)
        rel, rms, log10, deltas = depth_oracle(pred, gt, [1.25, 1.25 ** 2, 1.25 ** 3])
        assert m.rel == pytest.approx(rel, abs=1e-12)
        assert m.rms == pytest.approx(rms, abs=1e-12)
        assert m.log10 == pytest.approx(log10, abs=1e-12)
        assert [f for _, f in m.delta_acc] == pytest.approx(deltas, abs=1e-12)

    def test_random_vs_oracle(self, rng):
        for _ in range(25):
            pred = rng.uniform(0.2, 5.0, size=(7, 5))
            gt = rng.uniform(0.2, 5.0, size=(7, 5))
            pred[rng.random((7, 5)) < 0.1] = 0.0   # holes excluded on both sides
            m = depth_metrics(pred, gt)
            rel, rms, log10, deltas = depth_oracle(pred, gt, [1.25, 1.25 ** 2, 1.25 ** 3])
            assert m.rel == pytest.approx(rel, abs=1e-12)
            assert m.rms == pytest.approx(rms, abs=1e-12)
            assert m.log10 == pytest.approx(log10, abs=1e-12)

    def test_delta_monotone_and_symmetric(self, rng):
        pred = rng.uniform(0.2, 5.0, size=(16, 16))
        gt = rng.uniform(0.2, 5.0, size=(16, 16))
        thresholds = [1.05, 1.25, 1.5, 2.0, 3.0]
        fwd = depth_metrics(pred, gt, thresholds)
        rev = depth_metrics(gt, pred, thresholds)
        fracs = [f for _, f in fwd.delta_acc]
        assert fracs == sorted(fracs)
        assert fracs == [f for _, f in rev.delta_acc]
        assert fwd.rms == pytest.approx(rev.rms, abs=1e-12)

    def test_no_valid_pixels(self):
        with pytest.raises(UndefinedMetricsError):
            depth_metrics(np.zeros((2, 2)), np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((2, 2)), np.ones((2, 3)))


class TestSegMetrics:
    def test_perfect_prediction(self, rng):
        labels = rng.integers(0, 4, size=(10, 10))
        m = seg_metrics(labels, labels, 4)
        assert m.pixel_acc == 1.0 and m.mean_acc == 1.0 and m.iou == 1.0

    def test_four_pixel_hand_case(self):
        gt = np.array([[0, 1, 1, 1]])
        pred = np.array([[0, 0, 1, 1]])
        m = seg_metrics(pred, gt, 2)
        assert m.pixel_acc == pytest.approx(0.75, abs=1e-12)
        assert m.mean_acc == pytest.approx(5.0 / 6.0, abs=1e-12)
        assert m.iou == pytest.approx(7.0 / 12.0, abs=1e-12)

    def test_random_vs_oracle(self, rng):
        for _ in range(10):
            gt = rng.integers(0, 6, size=(32, 32))
            pred = rng.integers(0, 6, size=(32, 32))
            gt[rng.random((32, 32)) < 0.05] = UNLABELED
            m = seg_metrics(pred, gt, 6)
            pa, ma, iou = seg_oracle(pred, gt, 6)
            assert m.pixel_acc == pytest.approx(pa, abs=1e-12)
            assert m.mean_acc == pytest.approx(ma, abs=1e-12)
            assert m.iou == pytest.approx(iou, abs=1e-12)

    def test_relabeling_invariance(self, rng):
        gt = rng.integers(0, 5, size=(20, 20))
        pred = rng.integers(0, 5, size=(20, 20))
        perm = np.array([3, 0, 4, 1, 2])
        a = seg_metrics(pred, gt, 5)
        b = seg_metrics(perm[pred], perm[gt], 5)
        assert a.pixel_acc == pytest.approx(b.pixel_acc, abs=1e-12)
        assert a.mean_acc == pytest.approx(b.mean_acc, abs=1e-12)
        assert a.iou == pytest.approx(b.iou, abs=1e-12)

    def test_all_unlabeled(self):
        gt = np.full((3, 3), UNLABELED)
        with pytest.raises(UndefinedMetricsError):
            seg_metrics(np.zeros((3, 3), dtype=int), gt, 2)


class TestReconMetrics:
    def test_identical_clouds(self, rng):
        cloud = random_cloud(rng, 100)
        m = recon_metrics(cloud, cloud, 0.1)
        assert m.accuracy == 0.0 and m.completeness == 1.0

    def test_shift_beyond_threshold(self, rng):
        gt = random_cloud(rng, 50)
        recon = LabeledCloud(gt.positions + [0.2, 0.0, 0.0], gt.colors, gt.labels)
        m = recon_metrics(recon, gt, 0.1)
        assert m.completeness == 0.0

    def test_vs_quadratic_oracle(self, rng):
        for _ in range(10):
            recon = random_cloud(rng, 200)
            gt = random_cloud(rng, 150)
            m = recon_metrics(recon, gt, 0.25)
            d_rg = np.linalg.norm(recon.positions[:, None] - gt.positions[None], axis=2)
            d_gr = d_rg.T
            acc = d_rg.min(axis=1).mean()
            comp = (d_gr.min(axis=1) <= 0.25).mean()
            assert m.accuracy == pytest.approx(acc, abs=1e-12)
            assert m.completeness == pytest.approx(comp, abs=1e-12)

    def test_scale_equivariance(self, rng):
        recon = random_cloud(rng, 80)
        gt = random_cloud(rng, 60)
        m1 = recon_metrics(recon, gt, 0.2)
        s = 3.5
        m2 = recon_metrics(LabeledCloud(recon.positions * s, recon.colors, recon.labels),
                           LabeledCloud(gt.positions * s, gt.colors, gt.labels), 0.2 * s)
        assert m2.accuracy == pytest.approx(s * m1.accuracy, rel=1e-12)
        assert m2.completeness == m1.completeness

    def test_empty_cloud(self, rng):
        with pytest.raises(UndefinedMetricsError):
            recon_metrics(LabeledCloud.empty(), random_cloud(rng, 10), 0.1)
