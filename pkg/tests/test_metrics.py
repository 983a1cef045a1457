import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ultraseg import metrics as M
from ultraseg.errors import PairingError, ShapeError


def brute_dice_iou(pred, gt):
    """Set-based oracle over pixel coordinates."""
    xs = {tuple(p) for p in np.argwhere(pred)}
    ys = {tuple(p) for p in np.argwhere(gt)}
    if not xs and not ys:
        return 1.0, 1.0
    inter = len(xs & ys)
    return 2 * inter / (len(xs) + len(ys)), inter / len(xs | ys)


def masks(size):
    return arrays(np.bool_, (size, size), elements=st.booleans())


class TestBinarize:
    def test_examples(self):
        assert np.all(M.binarize(np.full((1, 1, 2, 2), 0.5)) == 1)
        assert np.all(M.binarize(np.full((1, 1, 2, 2), 0.49)) == 0)
        assert M.binarize(np.array([0.2, 0.7])).tolist() == [0, 1]


class TestOverlap:
    def test_two_by_two(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[0, 1], [0, 1]])
        assert M.confusion(pred, gt) == M.ConfusionCounts(1, 1, 1, 1)
        assert M.dice(pred, gt) == 0.5
        assert M.iou(pred, gt) == pytest.approx(1 / 3)

    def test_trivial_cases(self):
        m = np.eye(4, dtype=bool)
        assert M.dice(m, m) == 1.0 and M.iou(m, m) == 1.0
        assert M.dice(m, ~m) == 0.0 and M.iou(m, ~m) == 0.0
        z = np.zeros((4, 4))
        assert M.dice(z, z) == 1.0 and M.iou(z, z) == 1.0
        assert M.dice(z, m) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.dice(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(pred=masks(16), gt=masks(16))
    def test_matches_oracle(self, pred, gt):
        d, i = brute_dice_iou(pred, gt)
        assert M.dice(pred, gt) == d
        assert M.iou(pred, gt) == i
        c = M.confusion(pred, gt)
        assert c.total == pred.size

    @given(pred=masks(12), gt=masks(12))
    def test_identities(self, pred, gt):
        d, i = M.dice(pred, gt), M.iou(pred, gt)
        assert i == pytest.approx(d / (2 - d), abs=1e-15)
        assert M.dice(gt, pred) == d and M.iou(gt, pred) == i
        assert i <= d
        if 0 < d < 1:
            assert i < d


class TestHD95:
    def test_single_pixels(self):
        pred, gt = np.zeros((8, 8)), np.zeros((8, 8))
        pred[0, 0] = 1
        gt[3, 4] = 1
        assert M.hd95(pred, gt) == 5.0

    def test_conventions(self):
        z, m = np.zeros((5, 5)), np.eye(5)
        assert M.hd95(m, m) == 0.0
        assert M.hd95(z, z) == 0.0
        assert M.hd95(z, m) is None and M.hd95(m, z) is None

    def test_percentile_interpolates(self):
        assert M.percentile95(np.arange(21)) == 19.0
        assert M.percentile95([0, 10]) == pytest.approx(9.5)
        assert M.percentile95(np.arange(101)) == pytest.approx(np.percentile(np.arange(101), 95))

    def test_accepts_batched_single_mask(self):
        pred = np.zeros((1, 1, 6, 6))
        pred[0, 0, 1, 1] = 1
        assert M.hd95(pred, pred) == 0.0
        with pytest.raises(ShapeError):
            M.hd95(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)))

    @given(pred=masks(16), gt=masks(16))
    def test_matches_bruteforce(self, pred, gt):
        a, b = M.hd95(pred, gt), M.hd95_bruteforce(pred, gt)
        assert (a is None) == (b is None)
        if a is not None:
            assert abs(a - b) <= 1e-9
            assert a == M.hd95(gt, pred)

    @given(pred=masks(6), gt=masks(6), dy=st.integers(0, 4), dx=st.integers(0, 4))
    def test_translation_invariance(self, pred, gt, dy, dx):
        big_p, big_g = np.zeros((10, 10), bool), np.zeros((10, 10), bool)
        big_p[dy:dy + 6, dx:dx + 6], big_g[dy:dy + 6, dx:dx + 6] = pred, gt
        assert M.hd95(big_p, big_g) == M.hd95(pred, gt)
        assert M.dice(big_p, big_g) == M.dice(pred, gt)


class TestEvaluate:
    def test_perfect(self):
        gts = {f"s{i}": np.eye(4) for i in range(3)}
        rep = M.evaluate(dict(gts), gts)
        assert (rep.mean_dice, rep.mean_iou, rep.mean_hd95) == (1.0, 1.0, 0.0)

    def test_undefined_hd95_excluded(self):
        gts = {f"s{i}": np.eye(4) for i in range(10)}
        preds = dict(gts)
        preds["s3"] = np.zeros((4, 4))
        preds["s5"] = np.roll(np.eye(4), 1, axis=1)
        rep = M.evaluate(preds, gts)
        assert rep.hd95_undefined == 1
        defined = [s.hd95 for s in rep.samples if s.hd95 is not None]
        assert len(defined) == 9
        assert rep.mean_hd95 == pytest.approx(np.mean(defined))

    def test_mean_is_per_sample(self):
        gt = np.zeros((4, 4))
        gt[0, :2] = 1
        pred = np.zeros((4, 4))
        pred[0, 1:3] = 1
        # pooled over pixels this pair would score 34/36
        big = np.ones((4, 4))
        rep = M.evaluate({"a": big, "b": pred}, {"a": big, "b": gt})
        assert rep.mean_dice == 0.75

    def test_probabilities_binarized(self):
        gt = np.eye(3)
        rep = M.evaluate({"x": gt * 0.8 + 0.1}, {"x": gt})
        assert rep.mean_dice == 1.0

    def test_pairing_error(self):
        with pytest.raises(PairingError, match="b"):
            M.evaluate({"a": np.eye(2)}, {"a": np.eye(2), "b": np.eye(2)})

    def test_report_sorted_and_tagged(self):
        gts = {k: np.eye(3) for k in ("z", "a", "m")}
        tags = {"z": {"center": "c1"}, "a": {"center": "c0"}, "m": {"center": "c1", "modality": "-"}}
        d = M.evaluate(dict(gts), gts, tags).to_dict()
        assert [s["id"] for s in d["samples"]] == ["a", "m", "z"]
        assert d["by_tag"]["center"]["c1"]["count"] == 2
        assert "modality" not in d["by_tag"]
