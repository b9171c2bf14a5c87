import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from racam.metrics import (
    TABLE_HEADER,
    ClassCounts,
    ConfusionCounts,
    confusion,
    evaluate_set,
    metrics,
)

masks = arrays(np.uint8, (5, 6), elements=st.integers(0, 1))


def loop_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def counts(tp, fp, fn, tn=0):
    return ConfusionCounts({"defect": ClassCounts(tp, fp, fn, tn), "background": ClassCounts(tn, fn, fp, tp)})


class TestConfusion:
    def test_identity(self):
        m = np.random.default_rng(0).integers(0, 2, (8, 8))
        c = confusion(m, m).per_class["defect"]
        assert c.fp == c.fn == 0

    def test_complement(self):
        m = np.random.default_rng(0).integers(0, 2, (8, 8))
        c = confusion(1 - m, m).per_class["defect"]
        assert c.tp == c.tn == 0

    def test_seed_13_pair_matches_loop(self):
        rng = np.random.default_rng(13)
        p, g = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        c = confusion(p, g).per_class["defect"]
        assert (c.tp, c.fp, c.fn, c.tn) == loop_counts(p, g)

    def test_background_view(self):
        rng = np.random.default_rng(13)
        p, g = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        c = confusion(p, g).per_class["background"]
        assert (c.tp, c.fp, c.fn, c.tn) == loop_counts(1 - p, 1 - g)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(masks, masks)
    def test_totals(self, p, g):
        for c in confusion(p, g).per_class.values():
            assert c.tp + c.fp + c.fn + c.tn == p.size


class TestMetrics:
    def test_hand_example(self):
        d = metrics(counts(2, 1, 2, 5)).defect
        assert d.iou == pytest.approx(0.4)
        assert d.precision == pytest.approx(2 / 3)
        assert d.recall == pytest.approx(0.5)
        assert d.f1 == pytest.approx(4 / 7)

    def test_perfect(self):
        m = np.zeros((4, 4))
        m[1, 1:3] = 1
        r = metrics(confusion(m, m))
        for cm in r.per_class.values():
            assert (cm.iou, cm.precision, cm.recall, cm.f1) == (1, 1, 1, 1)
        assert r.miou == 1

    def test_both_empty(self):
        z = np.zeros((4, 4))
        r = metrics(confusion(z, z))
        assert r.defect.iou == 1 and r.miou == 1

    def test_zero_denominators(self):
        d = metrics(counts(0, 0, 3, 5)).defect
        assert d.precision == 0 and d.recall == 0 and d.f1 == 0 and d.iou == 0

    @given(masks)
    def test_self_is_all_ones(self, m):
        r = metrics(confusion(m, m))
        for cm in r.per_class.values():
            assert (cm.iou, cm.precision, cm.recall, cm.f1) == (1, 1, 1, 1)

    @given(masks, masks)
    def test_swap_symmetry(self, p, g):
        a = metrics(confusion(p, g)).defect
        b = metrics(confusion(g, p)).defect
        assert a.precision == pytest.approx(b.recall)
        assert a.recall == pytest.approx(b.precision)
        assert a.iou == pytest.approx(b.iou)
        assert a.f1 == pytest.approx(b.f1)

    @given(masks, masks)
    def test_fractions_in_unit_interval(self, p, g):
        r = metrics(confusion(p, g))
        for cm in r.per_class.values():
            for v in vars(cm).values():
                assert 0 <= v <= 1
        assert 0 <= r.miou <= 1

    @given(masks, masks)
    def test_f1_harmonic_mean(self, p, g):
        d = metrics(confusion(p, g)).defect
        if d.precision + d.recall > 0:
            assert d.f1 == pytest.approx(2 * d.precision * d.recall / (d.precision + d.recall))


class TestEvaluateSet:
    def test_single_image(self):
        rng = np.random.default_rng(2)
        p, g = rng.integers(0, 2, (6, 6)), rng.integers(0, 2, (6, 6))
        assert evaluate_set([p], [g]).per_class == metrics(confusion(p, g)).per_class

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        ps = [rng.integers(0, 2, (6, 6)) for _ in range(3)]
        gs = [rng.integers(0, 2, (6, 6)) for _ in range(3)]
        assert evaluate_set(ps * 2, gs * 2).per_class == evaluate_set(ps, gs).per_class

    def test_hand_aggregation(self):
        p1 = np.zeros((4, 4), int)
        g1 = np.zeros((4, 4), int)
        p1[0, :2] = 1  # TP 1, FP 1
        g1[0, 0] = 1
        g1[3, 3] = 1  # FN 1
        p2 = np.zeros((4, 4), int)
        g2 = np.zeros((4, 4), int)
        p2[1, 1] = g2[1, 1] = 1  # TP 1
        p2[2, 2] = 1  # FP 1
        r = evaluate_set([p1, p2], [g1, g2])
        # summed: TP 2, FP 2, FN 1
        assert r.defect.iou == pytest.approx(2 / 5)
        assert r.defect.precision == pytest.approx(0.5)
        assert r.defect.recall == pytest.approx(2 / 3)
        assert r.n_images == 2

    @given(st.lists(st.tuples(masks, masks), min_size=1, max_size=4), st.randoms(use_true_random=False))
    def test_permutation_invariance(self, pairs, rnd):
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        a = evaluate_set([p for p, _ in pairs], [g for _, g in pairs])
        b = evaluate_set([p for p, _ in shuffled], [g for _, g in shuffled])
        assert a.per_class == b.per_class

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_set([np.zeros(2)], [])

    def test_macro_mode(self):
        a, b = np.array([1, 0]), np.array([1, 1])
        r = evaluate_set([a, b], [a, a], mode="macro")
        assert r.defect.iou == pytest.approx((1 + 0.5) / 2)
        with pytest.raises(ValueError):
            evaluate_set([a], [a], mode="weighted")


class TestReport:
    def test_json_keys(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        r = metrics(counts(2, 1, 2, 5), n_images=3, method="ra-cam", delta=50, layers=["s1.act2"])
        d = json.loads(r.to_json())
        assert {"method", "delta", "layers", "per_class", "miou", "n_images", "timestamp"} <= set(d)
        assert d["timestamp"] == 1700000000
        assert d["per_class"]["defect"]["iou"] == pytest.approx(0.4)
        assert set(d["per_class"]["defect"]) == {"iou", "precision", "recall", "f1"}

    def test_table_row(self):
        r = metrics(counts(2, 1, 2, 5), method="ra-cam")
        row = r.table_row()
        assert row.split() == ["ra-cam", "40.00", "66.67", "50.00", "57.14"]
        assert TABLE_HEADER.split()[:2] == ["method", "IoU"]
