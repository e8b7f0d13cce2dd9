"""Losses, augmentation, the training loop, and k-shot strategies."""

import numpy as np
import pytest

from crcseg import data, train
from crcseg.model import (ModelConfig, downsample_mask, forward_pair,
                          init_params, predict_mask, save_checkpoint)
from crcseg.tensor import Tape, Tensor
from crcseg.train import (FinetuneConfig, TrainConfig, augment_pair, bce_loss,
                          kshot_finetune, kshot_fusion_predict,
                          multiscale_predict, ordered_support_pairs,
                          total_loss)
from crcseg.gradcheck import finite_diff_gradient, max_relative_error


def small_train_cfg(**kw) -> TrainConfig:
    base = dict(learning_rate=0.01, epochs=1, episodes_per_epoch=6, seed=0,
                crop_size=32, train_refine_iterations=1,
                model=ModelConfig(channels=8, enc_channels=(4, 8, 8),
                                  refine_iterations=2))
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# losses


def test_bce_uniform_prediction_is_ln2():
    p = Tensor(np.full((1, 3, 3), 0.5))
    y = np.random.default_rng(0).integers(0, 2, (1, 3, 3)).astype(float)
    assert bce_loss(p, y).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_bce_hand_case():
    p = Tensor(np.array([0.9, 0.2]))
    y = np.array([1.0, 0.0])
    expect = -0.5 * (np.log(0.9) + np.log(0.8))
    assert bce_loss(p, y).item() == pytest.approx(expect, abs=1e-12)
    assert bce_loss(p, y).item() == pytest.approx(0.1643, abs=5e-5)


def test_bce_perfect_prediction_at_clamp_floor():
    y = np.array([1.0, 0.0, 1.0])
    p = Tensor(y.copy())
    loss = bce_loss(p, y).item()
    assert 0.0 < loss <= -np.log(1 - train.BCE_EPS) + 1e-12


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((3, 3)))


def _fake_outputs(p_val, h=2, w=2):
    prob = np.full((1, h, w), p_val)
    logit = np.log(p_val / (1 - p_val))
    logits = np.zeros((2, h, w))
    logits[1] = logit
    return {
        "q_prob": Tensor(prob.copy()), "s_prob": Tensor(prob.copy()),
        "qm_sub": Tensor(logits.copy()), "sm_sub": Tensor(logits.copy()),
    }


def test_total_loss_lambda_composition():
    ones = np.ones((2, 2))
    out = _fake_outputs(0.3)
    lb0 = total_loss(out, ones, ones, 0.0)
    assert lb0.total.item() == pytest.approx(
        lb0.l_qm.item() + lb0.l_sm.item(), abs=1e-15)

    out = _fake_outputs(0.3)
    lb = total_loss(out, ones, ones, 0.1)
    t = lb.l_qm.item()
    for part in (lb.l_sm, lb.l_qm_sub, lb.l_sm_sub):
        assert part.item() == pytest.approx(t, abs=1e-12)
    assert lb.total.item() == pytest.approx(2.2 * t, rel=1e-12)


def test_total_loss_without_subtask_heads():
    out = _fake_outputs(0.4)
    out["qm_sub"] = out["sm_sub"] = None
    lb = total_loss(out, np.ones((2, 2)), np.ones((2, 2)), 0.1)
    assert lb.l_qm_sub.item() == 0.0 and lb.l_sm_sub.item() == 0.0
    assert lb.total.item() == pytest.approx(lb.l_qm.item() + lb.l_sm.item())


def test_total_loss_gradient_matches_finite_differences():
    cfg = ModelConfig(channels=4, enc_channels=(4, 4, 4), refine_iterations=1)
    params = init_params(cfg, 2)
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (3, 16, 16))
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:12, 4:12] = 1
    support = data.ImageSample(img, mask, 0)
    query = rng.uniform(0, 1, (3, 16, 16))

    def loss():
        out = forward_pair(params, cfg, support, query, refine_iterations=1)
        return total_loss(out, mask, mask, 0.1).total.item()

    with Tape() as tape:
        out = forward_pair(params, cfg, support, query, refine_iterations=1)
        lb = total_loss(out, mask, mask, 0.1)
        tape.backward(lb.total)
    coords = {}
    crng = np.random.default_rng(3)
    for name, t in params.items():
        coords[name] = sorted(set(crng.integers(0, t.data.size,
                                                size=min(2, t.data.size)).tolist()))
    numeric = finite_diff_gradient(loss, params, 1e-5, coords)
    for name, t in params.items():
        assert max_relative_error(t.grad, numeric[name]) <= 1e-4, name


# ---------------------------------------------------------------------------
# augmentation


def test_flip_preserves_foreground_count():
    rng_img = np.random.default_rng(4)
    img = rng_img.uniform(0, 1, (3, 32, 32))
    mask = (rng_img.random((32, 32)) > 0.8).astype(np.uint8)
    flipped = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        out_img, out_mask = augment_pair(img, mask, 32, rng, scale=False,
                                         crop=False, flip=True)
        assert out_mask.sum() == mask.sum()
        if not np.array_equal(out_mask, mask):
            flipped += 1
            assert np.array_equal(out_img, img[:, :, ::-1])
            assert np.array_equal(out_mask, mask[:, ::-1])
    assert 0 < flipped < 20


def test_augment_synchronized_geometry():
    ds = data.generate_synthetic_dataset(8, 2, 32, seed=3)
    s = ds.samples[0]
    for seed in range(30):
        rng = np.random.default_rng(seed)
        img, mask = augment_pair(s.image, s.mask, 32, rng)
        assert img.shape == (3, 32, 32) and mask.shape == (32, 32)
        assert set(np.unique(mask)) <= {0, 1}
        # the target color travels with the mask: foreground pixels keep a
        # tight color distribution after any geometric transform
        if mask.sum() > 4:
            fg = img[:, mask > 0]
            assert fg.std(axis=1).max() <= s.image[:, s.mask > 0].std(axis=1).max() + 0.15


def test_augment_keeps_mask_nonempty_under_crop():
    ds = data.generate_synthetic_dataset(8, 2, 48, seed=5)
    s = ds.samples[3]
    kept = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        _, mask = augment_pair(s.image, s.mask, 40, rng)
        kept += bool(mask.any())
    assert kept >= 48  # crop retries keep the object almost always


# ---------------------------------------------------------------------------
# training loop


def test_train_runs_and_logs(tiny_dataset):
    splits = data.make_fold_splits(tiny_dataset.categories, 4)
    rows = []
    params = train.train(tiny_dataset, splits[0], small_train_cfg(), log_rows=rows)
    assert len(rows) == 6
    assert all(len(r) == 8 for r in rows)
    assert all(np.isfinite(r[6]) for r in rows)
    assert "encoder.s1a.w" in params


def test_train_deterministic_checkpoints(tmp_path, tiny_dataset):
    splits = data.make_fold_splits(tiny_dataset.categories, 4)
    paths = []
    for i in range(2):
        params = train.train(tiny_dataset, splits[0], small_train_cfg())
        path = tmp_path / f"run{i}.ckpt"
        save_checkpoint(params, path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]


def test_train_loss_halves_within_200_steps():
    # two images per category -> the sampler can only revisit a fixed handful
    # of distinct episodes, so 200 steps must overfit them
    ds = data.generate_synthetic_dataset(8, 2, 32, seed=21)
    splits = data.make_fold_splits(ds.categories, 4)
    cfg = small_train_cfg(episodes_per_epoch=200, learning_rate=0.02,
                          train_refine_iterations=2,
                          model=ModelConfig(channels=16, enc_channels=(8, 16, 16),
                                            refine_iterations=2))
    rows = []
    train.train(ds, splits[0], cfg, log_rows=rows)
    totals = [r[6] for r in rows]
    early = float(np.mean(totals[:15]))
    late = float(np.mean(totals[-15:]))
    assert late <= 0.5 * early, (early, late)


def test_train_validates_config():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_sub=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(crop_size=30)


# ---------------------------------------------------------------------------
# k-shot


def test_ordered_pair_counts():
    assert len(ordered_support_pairs(5)) == 20
    assert len(ordered_support_pairs(5, include_self=True)) == 25
    assert len(ordered_support_pairs(2)) == 2


def _support_set(rng, n, size=16):
    out = []
    for _ in range(n):
        img = rng.uniform(0, 1, (3, size, size))
        mask = np.zeros((size, size), dtype=np.uint8)
        r, c = rng.integers(1, size - 7, size=2)
        mask[r:r + 6, c:c + 6] = 1
        out.append(data.ImageSample(img, mask, 0))
    return out


def test_finetune_freezes_encoder_and_clones():
    cfg = ModelConfig(channels=8, enc_channels=(4, 8, 8), refine_iterations=1)
    params = init_params(cfg, 6)
    before = {n: t.data.copy() for n, t in params.items()}
    rng = np.random.default_rng(6)
    tuned = kshot_finetune(params, cfg, _support_set(rng, 3),
                           FinetuneConfig(steps=4, learning_rate=0.01,
                                          train_refine_iterations=1))
    for name, t in params.items():
        assert np.array_equal(t.data, before[name]), f"input params moved: {name}"
    for name, t in tuned.items():
        if name.startswith("encoder."):
            assert t.data.tobytes() == before[name].tobytes()
    moved = [n for n, t in tuned.items()
             if not n.startswith("encoder.") and not np.array_equal(t.data, before[n])]
    assert moved


def test_finetune_requires_two_supports():
    cfg = ModelConfig(channels=8, enc_channels=(4, 8, 8))
    params = init_params(cfg, 7)
    with pytest.raises(ValueError):
        kshot_finetune(params, cfg, _support_set(np.random.default_rng(7), 1),
                       FinetuneConfig(steps=1))


def test_fusion_identities():
    cfg = ModelConfig(channels=8, enc_channels=(4, 8, 8), refine_iterations=1)
    params = init_params(cfg, 8)
    rng = np.random.default_rng(8)
    supports = _support_set(rng, 2)
    query = rng.uniform(0, 1, (3, 16, 16))
    single = predict_mask(params, cfg, supports[0], query)
    fused1 = kshot_fusion_predict(params, cfg, supports[:1], query)
    assert np.array_equal(single, fused1)
    dup = kshot_fusion_predict(params, cfg, [supports[0]] * 3, query)
    assert np.abs(dup - single).max() <= 1e-15
    fused = kshot_fusion_predict(params, cfg, supports, query)
    assert np.all(fused >= 0) and np.all(fused <= 1)


def test_multiscale_identity_scale_equals_single():
    cfg = ModelConfig(channels=8, enc_channels=(4, 8, 8), refine_iterations=1)
    params = init_params(cfg, 9)
    rng = np.random.default_rng(9)
    support = _support_set(rng, 1)[0]
    query = rng.uniform(0, 1, (3, 16, 16))
    single = predict_mask(params, cfg, support, query)
    ms = multiscale_predict(params, cfg, support, query, scales=(1.0,))
    assert np.array_equal(ms, single)


def test_multiscale_default_scales_shape_and_range():
    cfg = ModelConfig(channels=8, enc_channels=(4, 8, 8), refine_iterations=1)
    params = init_params(cfg, 10)
    rng = np.random.default_rng(10)
    support = _support_set(rng, 1, size=32)[0]
    query = rng.uniform(0, 1, (3, 32, 32))
    prob = multiscale_predict(params, cfg, support, query)
    assert prob.shape == (32, 32)
    assert np.all(prob >= 0) and np.all(prob <= 1)
