"""Metric exactness, ledger merging, and monotonicity."""

import numpy as np
import pytest

from crcseg.metrics import MetricsLedger, confusion_update, fbiou, iou, miou


def _mask(shape, coords):
    m = np.zeros(shape, dtype=np.uint8)
    for r, c in coords:
        m[r, c] = 1
    return m


def test_confusion_perfect_and_disjoint():
    led = MetricsLedger()
    gt = _mask((4, 4), [(0, 0), (1, 1), (2, 2)])
    confusion_update(led, gt, gt, 0)
    assert led.per_class[0].tolist() == [3, 0, 0]

    led2 = MetricsLedger()
    half = np.zeros((2, 4), dtype=np.uint8)
    half[:, :2] = 1
    confusion_update(led2, 1 - half, half, 1)
    assert led2.per_class[1][0] == 0  # tp


def test_confusion_enumerated_example():
    led = MetricsLedger()
    pred = _mask((2, 2), [(0, 0), (0, 1)])
    gt = _mask((2, 2), [(0, 1), (1, 1)])
    confusion_update(led, pred, gt, 5)
    tp, fp, fn = led.per_class[5]
    assert (tp, fp, fn) == (1, 1, 1)
    assert iou(tp, fp, fn) == pytest.approx(1 / 3)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_update(MetricsLedger(), np.zeros((2, 2)), np.zeros((3, 3)), 0)


def test_iou_edge_cases():
    assert iou(5, 0, 0) == 1.0
    assert iou(0, 3, 2) == 0.0
    assert iou(0, 0, 0) == 1.0  # empty-vs-empty defined as perfect


def test_miou_is_unweighted_mean_and_permutation_invariant():
    led = MetricsLedger()
    led.per_class[0] = np.array([1, 2, 2])   # IoU 0.2
    led.per_class[1] = np.array([6, 2, 2])   # IoU 0.6
    assert miou(led) == pytest.approx(0.4, abs=1e-12)
    assert miou(led, [1, 0]) == miou(led, [0, 1])
    assert miou(led, [1]) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        miou(led, [0, 7])


def test_fbiou_hand_case():
    led = MetricsLedger()
    led.per_class[0] = np.array([1, 1, 1])
    led.fg = np.array([1, 1, 1])
    led.bg = np.array([6, 1, 1])
    assert fbiou(led) == pytest.approx(0.5 * (1 / 3 + 6 / 8), abs=1e-12)
    assert fbiou(led) == pytest.approx(0.5417, abs=5e-5)


def test_fbiou_small_object_background_dominates():
    led = MetricsLedger()
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[0, 0] = 1  # tiny foreground
    confusion_update(led, np.zeros_like(gt), gt, 0)
    assert miou(led) == 0.0
    assert fbiou(led) > 0.49  # background IoU stays high


def test_ledger_merge_matches_sequential_any_order():
    rng = np.random.default_rng(0)
    updates = []
    for _ in range(30):
        pred = (rng.random((6, 6)) > 0.5).astype(np.uint8)
        gt = (rng.random((6, 6)) > 0.5).astype(np.uint8)
        updates.append((pred, gt, int(rng.integers(0, 3))))

    sequential = MetricsLedger()
    for pred, gt, cid in updates:
        sequential.update(pred, gt, cid)

    for perm_seed in range(3):
        order = np.random.default_rng(perm_seed).permutation(len(updates))
        shards = [MetricsLedger() for _ in range(4)]
        for pos, idx in enumerate(order):
            pred, gt, cid = updates[idx]
            shards[pos % 4].update(pred, gt, cid)
        merged = MetricsLedger()
        for shard in shards:
            merged.merge(shard)
        assert miou(merged) == pytest.approx(miou(sequential), abs=1e-15)
        assert fbiou(merged) == pytest.approx(fbiou(sequential), abs=1e-15)


def test_iou_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tp, fp, fn = (int(x) for x in rng.integers(0, 50, size=3))
        base = iou(tp, fp, fn)
        assert iou(tp + 1, fp, fn) >= base
        assert iou(tp, fp + 1, fn) <= base
        assert iou(tp, fp, fn + 1) <= base
        assert 0.0 <= base <= 1.0


def test_counters_monotone_nonnegative():
    led = MetricsLedger()
    rng = np.random.default_rng(2)
    prev = 0
    for _ in range(10):
        pred = (rng.random((5, 5)) > 0.4).astype(np.uint8)
        gt = (rng.random((5, 5)) > 0.6).astype(np.uint8)
        led.update(pred, gt, 0)
        total = int(led.per_class[0].sum())
        assert total >= prev
        assert np.all(led.per_class[0] >= 0)
        prev = total
