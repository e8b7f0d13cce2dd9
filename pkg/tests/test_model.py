"""Model components against hand oracles: gate, attention, pooling,
conditioning, refinement, checkpoints."""

import numpy as np
import pytest

from crcseg import data, model
from crcseg.model import (CheckpointError, ConfidenceCache, ModelConfig,
                          cross_reference, downsample_mask, foreground_avg_pool,
                          forward_pair, fuse_conditions, global_condition,
                          init_params, load_checkpoint, local_condition,
                          mask_refine, mask_refine_step, read_checkpoint,
                          save_checkpoint, siamese_encode, subtask_decode)
from crcseg.tensor import Tape, Tensor, global_avg_pool


def small_cfg(**kw) -> ModelConfig:
    base = dict(channels=8, enc_channels=(4, 8, 8), refine_iterations=2)
    base.update(kw)
    return ModelConfig(**base)


def rand_feat(rng, c=8, h=3, w=3) -> Tensor:
    return Tensor(rng.standard_normal((c, h, w)))


# ---------------------------------------------------------------------------
# encoder


def test_encoder_output_shape():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    img = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 48, 48)))
    out = siamese_encode(p, cfg, img)
    assert out.shape == (32, 6, 6)


def test_encoder_rejects_indivisible_dims():
    cfg = small_cfg()
    p = init_params(cfg, 0)
    with pytest.raises(ValueError):
        siamese_encode(p, cfg, Tensor(np.zeros((3, 20, 20))))


def test_encoder_weight_sharing_determinism():
    cfg = small_cfg()
    p = init_params(cfg, 1)
    img = np.random.default_rng(1).uniform(0, 1, (3, 16, 16))
    a = siamese_encode(p, cfg, Tensor(img))
    b = siamese_encode(p, cfg, Tensor(img.copy()))
    assert np.array_equal(a.data, b.data)


def test_encoder_multi_level_toggle_changes_output():
    img = np.random.default_rng(2).uniform(0, 1, (3, 16, 16))
    outs = {}
    for flag in (True, False):
        cfg = small_cfg(multi_level=flag)
        out = siamese_encode(init_params(cfg, 3), cfg, Tensor(img))
        outs[flag] = out.data
        assert out.shape == (8, 2, 2)
    assert not np.allclose(outs[True], outs[False])


# ---------------------------------------------------------------------------
# cross-reference gate


def test_gate_identical_inputs_square_and_equal_outputs():
    cfg = small_cfg()
    p = init_params(cfg, 4)
    rng = np.random.default_rng(4)
    f = rand_feat(rng)
    g_s, g_q, gate = cross_reference(p, cfg, f, Tensor(f.data.copy()))
    assert np.allclose(g_s.data, g_q.data, atol=1e-15)
    # fused gate is the square of either branch's activation vector
    from crcseg.model import _gate_vector
    v = _gate_vector(p, cfg, f).data
    assert np.allclose(gate.data.reshape(-1), (v * v).reshape(-1), atol=1e-15)


def test_gate_sigmoid_contraction():
    cfg = small_cfg()
    p = init_params(cfg, 5)
    rng = np.random.default_rng(5)
    f_s, f_q = rand_feat(rng), rand_feat(rng)
    g_s, g_q, gate = cross_reference(p, cfg, f_s, f_q)
    assert np.all(gate.data > 0) and np.all(gate.data < 1)
    assert np.all(np.abs(g_s.data) <= np.abs(f_s.data) + 1e-15)
    assert np.all(np.abs(g_q.data) <= np.abs(f_q.data) + 1e-15)


def test_gate_hand_computed_two_channel_case():
    cfg = ModelConfig(channels=2, enc_channels=(4, 8, 8))
    p = init_params(cfg, 0)
    p["gate.fc1.w"].data = np.array([[0.5], [-1.0]])
    p["gate.fc1.b"].data = np.array([[0.1]])
    p["gate.fc2.w"].data = np.array([[2.0, -0.5]])
    p["gate.fc2.b"].data = np.array([[0.0, 0.3]])
    f_s = Tensor(np.array([[[1.0, 3.0]], [[2.0, 0.0]]]))   # means: 2.0, 1.0
    f_q = Tensor(np.array([[[0.0, 0.0]], [[4.0, 4.0]]]))   # means: 0.0, 4.0

    def branch(m1, m2):
        h = max(0.0, 0.5 * m1 - 1.0 * m2 + 0.1)
        o = np.array([2.0 * h + 0.0, -0.5 * h + 0.3])
        return 1.0 / (1.0 + np.exp(-o))

    expect = branch(2.0, 1.0) * branch(0.0, 4.0)
    _, _, gate = cross_reference(p, cfg, f_s, f_q)
    assert np.abs(gate.data.reshape(-1) - expect).max() <= 1e-12


def test_gate_activation_variants():
    rng = np.random.default_rng(6)
    f_s, f_q = rand_feat(rng), rand_feat(rng)
    for act in ("relu", "softmax"):
        cfg = small_cfg(gate_activation=act)
        _, _, gate = cross_reference(init_params(cfg, 6), cfg, f_s, f_q)
        assert gate.shape == (8, 1, 1)
        if act == "softmax":
            assert np.all(gate.data >= 0) and gate.data.sum() <= 1 + 1e-9


# ---------------------------------------------------------------------------
# sub-task head


def test_subtask_shape_and_zero_propagation():
    cfg = small_cfg()
    p = init_params(cfg, 7)
    out = subtask_decode(p, cfg, Tensor(np.zeros((8, 3, 3))))
    assert out.shape == (2, 3, 3)
    assert np.all(out.data == 0.0)  # fresh biases are zero
    probs = 1 / (1 + np.exp(-(out.data[1] - out.data[0])))
    assert np.allclose(probs, 0.5)


# ---------------------------------------------------------------------------
# pooling / conditioning


def test_foreground_pool_full_mask_equals_global():
    rng = np.random.default_rng(8)
    f = rand_feat(rng, h=4, w=4)
    full = foreground_avg_pool(f, np.ones((4, 4)))
    assert np.array_equal(full.data, global_avg_pool(f).data)


def test_foreground_pool_single_position_and_half_plane():
    rng = np.random.default_rng(9)
    f = rand_feat(rng, h=2, w=2)
    one = np.zeros((2, 2))
    one[1, 0] = 1
    v = foreground_avg_pool(f, one)
    assert np.allclose(v.data.reshape(-1), f.data[:, 1, 0], atol=1e-15)

    plane = np.ones((1, 2, 4))
    plane[:, :, 2:] = 3.0
    left = np.zeros((2, 4))
    left[:, :2] = 1
    v2 = foreground_avg_pool(Tensor(plane), left)
    assert v2.data.reshape(-1)[0] == 1.0


def test_foreground_pool_empty_mask_fallback():
    rng = np.random.default_rng(10)
    f = rand_feat(rng, h=3, w=3)
    v = foreground_avg_pool(f, np.zeros((3, 3)))
    assert np.array_equal(v.data, global_avg_pool(f).data)


def test_global_condition_residual_identity():
    cfg = small_cfg()
    p = init_params(cfg, 11)
    p["cond.glob.conv.w"].data[:] = 0.0
    p["cond.glob.conv.b"].data[:] = 0.0
    proj = np.zeros((8, 8, 1, 1))
    for c in range(8):
        proj[c, c, 0, 0] = 1.0
    p["cond.glob.proj.w"].data = proj
    p["cond.glob.proj.b"].data[:] = 0.0
    rng = np.random.default_rng(11)
    f = rand_feat(rng)
    v = Tensor(rng.standard_normal((8, 1, 1)))
    out = global_condition(p, f, v)
    assert np.allclose(out.data, f.data, atol=1e-15)


def test_global_condition_shape():
    cfg = small_cfg()
    p = init_params(cfg, 12)
    rng = np.random.default_rng(12)
    f = rand_feat(rng, h=4, w=5)
    out = global_condition(p, f, Tensor(rng.standard_normal((8, 1, 1))))
    assert out.shape == (8, 4, 5)


# ---------------------------------------------------------------------------
# local attention vs exhaustive oracle


def attention_oracle(fq, fs, tw, tb, dw, db, mask_small, mode):
    """Independent position-pair loop; naive softmax."""
    c, h, w = fq.shape
    hw = h * w
    th = np.maximum(0.0, np.einsum("oc,chw->ohw", tw[:, :, 0, 0], fq) + tb)
    de = np.maximum(0.0, np.einsum("oc,chw->ohw", dw[:, :, 0, 0], fs) + db)
    thm, dem = th.reshape(c, hw), de.reshape(c, hw)
    scores = np.zeros((hw, hw))
    for q in range(hw):
        for s in range(hw):
            for ch in range(c):
                scores[q, s] += thm[ch, q] * dem[ch, s]
    mv = mask_small.reshape(-1)
    if mv.sum() > 0:
        if mode == "multiplicative":
            scores = scores * mv[None, :]
        else:
            scores = scores + np.where(mv > 0, 0.0, -1e9)[None, :]
    attn = np.zeros_like(scores)
    for q in range(hw):
        e = np.exp(scores[q])
        attn[q] = e / e.sum()
    fsm = fs.reshape(c, hw)
    out = np.zeros((c, hw))
    for q in range(hw):
        for s in range(hw):
            out[:, q] += attn[q, s] * fsm[:, s]
    return out.reshape(c, h, w)


@pytest.mark.parametrize("mode", ["multiplicative", "additive"])
def test_local_condition_matches_oracle(mode):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = small_cfg(channels=4, masking_mode=mode)
        p = init_params(cfg, seed)
        fq = rng.standard_normal((4, 2, 2))
        fs = rng.standard_normal((4, 2, 2))
        mask = (rng.random((2, 2)) > 0.4).astype(np.float64)
        got = local_condition(p, cfg, Tensor(fq), Tensor(fs), mask).data
        expect = attention_oracle(
            fq, fs, p["cond.loc.theta.w"].data, p["cond.loc.theta.b"].data,
            p["cond.loc.delta.w"].data, p["cond.loc.delta.b"].data, mask, mode)
        assert np.abs(got - expect).max() <= 1e-10, (mode, seed)


def test_local_condition_row_stochastic_mixture():
    cfg = small_cfg(channels=4)
    p = init_params(cfg, 20)
    # identity transforms so the similarity matrix is symmetric for fq == fs
    for name in ("cond.loc.theta", "cond.loc.delta"):
        eye = np.zeros((4, 4, 1, 1))
        for c in range(4):
            eye[c, c, 0, 0] = 1.0
        p[name + ".w"].data = eye
        p[name + ".b"].data[:] = 0.0
    rng = np.random.default_rng(20)
    f = np.abs(rng.standard_normal((4, 2, 2)))
    out = local_condition(p, cfg, Tensor(f), Tensor(f), np.ones((2, 2))).data
    cols = f.reshape(4, 4)
    # every output position is a convex combination of support columns
    assert np.all(out.reshape(4, 4).min(axis=1) >= cols.min(axis=1) - 1e-12)
    assert np.all(out.reshape(4, 4).max(axis=1) <= cols.max(axis=1) + 1e-12)


def test_local_condition_empty_mask_falls_back_unmasked():
    cfg = small_cfg(channels=4)
    p = init_params(cfg, 21)
    rng = np.random.default_rng(21)
    fq, fs = rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))
    empty = np.zeros((2, 2))
    got = local_condition(p, cfg, Tensor(fq), Tensor(fs), empty).data
    expect = attention_oracle(
        fq, fs, p["cond.loc.theta.w"].data, p["cond.loc.theta.b"].data,
        p["cond.loc.delta.w"].data, p["cond.loc.delta.b"].data,
        np.ones((2, 2)), "multiplicative")
    assert np.abs(got - expect).max() <= 1e-10


def test_fuse_conditions_grid():
    rng = np.random.default_rng(22)
    g = Tensor(rng.standard_normal((4, 2, 2)))
    lo = Tensor(rng.standard_normal((4, 2, 2)))
    re = Tensor(rng.standard_normal((4, 2, 2)))
    assert fuse_conditions(g, lo, re).shape == (8, 2, 2)
    assert fuse_conditions(g, None, re) is g
    assert fuse_conditions(None, lo, re) is lo
    assert fuse_conditions(None, None, re) is re


# ---------------------------------------------------------------------------
# refinement


def test_refine_cache_range_and_zero_init_equivalence():
    cfg = small_cfg()
    p = init_params(cfg, 23)
    rng = np.random.default_rng(23)
    feat = rand_feat(rng)
    logits1, prob1, _ = mask_refine(p, cfg, feat, iterations=1)
    zero = ConfidenceCache(Tensor(np.zeros((1, 3, 3))))
    logits_step, cache_step = mask_refine_step(p, cfg, feat, zero)
    assert np.array_equal(logits1.data, logits_step.data)
    assert np.array_equal(prob1.data, cache_step.prob.data)
    assert np.all(prob1.data >= 0) and np.all(prob1.data <= 1)


def test_refine_two_steps_bit_deterministic():
    cfg = small_cfg()
    p = init_params(cfg, 24)
    rng = np.random.default_rng(24)
    feat = rand_feat(rng)

    def run():
        _, prob, steps = mask_refine(p, cfg, feat, iterations=2, record=True)
        return prob.data.tobytes(), [s.data.tobytes() for s in steps]
    assert run() == run()


def test_refine_records_per_iteration_maps():
    cfg = small_cfg()
    p = init_params(cfg, 25)
    feat = rand_feat(np.random.default_rng(25))
    _, prob, steps = mask_refine(p, cfg, feat, iterations=4, record=True)
    assert len(steps) == 4
    assert np.array_equal(steps[-1].data, prob.data)
    with pytest.raises(ValueError):
        mask_refine(p, cfg, feat, iterations=0)


# ---------------------------------------------------------------------------
# full pipeline


def _sample(rng, size=16, cat=0) -> data.ImageSample:
    img = rng.uniform(0, 1, (3, size, size))
    mask = np.zeros((size, size), dtype=np.uint8)
    r, c = rng.integers(2, size - 6, size=2)
    mask[r:r + 5, c:c + 5] = 1
    return data.ImageSample(img, mask, cat)


def test_forward_pair_contract_shapes():
    cfg = small_cfg()
    p = init_params(cfg, 26)
    rng = np.random.default_rng(26)
    support, query = _sample(rng), _sample(rng)
    out = forward_pair(p, cfg, support, query.image)
    for key in ("qm", "sm", "qm_sub", "sm_sub"):
        assert out[key].shape == (2, 2, 2), key
    for key in ("q_prob", "s_prob"):
        assert out[key].shape == (1, 2, 2)
        assert np.all(out[key].data >= 0) and np.all(out[key].data <= 1)
        assert np.all(np.isfinite(out[key].data))


def test_forward_pair_symmetric_for_identical_inputs():
    cfg = small_cfg()
    p = init_params(cfg, 27)
    rng = np.random.default_rng(27)
    s = _sample(rng)
    out = forward_pair(p, cfg, s, s.image)
    assert np.array_equal(out["qm"].data, out["sm"].data)
    assert np.array_equal(out["qm_sub"].data, out["sm_sub"].data)


def test_forward_pair_without_cross_reference():
    cfg = small_cfg(cross_reference=False)
    p = init_params(cfg, 28)
    rng = np.random.default_rng(28)
    out = forward_pair(p, cfg, _sample(rng), _sample(rng).image)
    assert out["qm_sub"] is None and out["sm_sub"] is None
    assert out["qm"].shape == (2, 2, 2)
    assert "gate.fc1.w" not in p


def test_downsample_mask_threshold():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[0:8, :] = 1
    small = downsample_mask(mask, 2, 2)
    assert small.shape == (2, 2)
    assert set(np.unique(small)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bytes(tmp_path):
    cfg = small_cfg()
    p = init_params(cfg, 29)
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(p, a)
    p2 = load_checkpoint(init_params(cfg, 0), a)
    save_checkpoint(p2, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_forward_agreement(tmp_path):
    cfg = small_cfg()
    p = init_params(cfg, 30)
    rng = np.random.default_rng(30)
    support, query = _sample(rng), _sample(rng)
    before = forward_pair(p, cfg, support, query.image)["q_prob"].data
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    p2 = load_checkpoint(init_params(cfg, 99), path)
    after = forward_pair(p2, cfg, support, query.image)["q_prob"].data
    assert np.abs(before - after).max() <= 1e-5


def test_checkpoint_errors(tmp_path):
    cfg = small_cfg()
    p = init_params(cfg, 31)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)

    bad_magic = tmp_path / "bad.ckpt"
    bad_magic.write_bytes(b"XXXXX" + path.read_bytes()[5:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad_magic)

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(trunc)

    other = init_params(small_cfg(cross_reference=False), 0)
    with pytest.raises(CheckpointError, match="gate.fc1.w"):
        load_checkpoint(p, _save_tmp(other, tmp_path / "other.ckpt"))

    wider = init_params(small_cfg(channels=16, enc_channels=(4, 8, 8)), 0)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(wider, path)


def _save_tmp(params, path):
    save_checkpoint(params, path)
    return path


def test_untrained_model_no_better_than_trivial_baseline(tiny_dataset):
    from crcseg import experiments
    from crcseg.metrics import MetricsLedger, miou
    cfg = small_cfg()
    p = init_params(cfg, 32)
    splits = data.make_fold_splits(tiny_dataset.categories, 4)
    res = experiments.evaluate(p, cfg, tiny_dataset, splits[0],
                               episodes=50, seed=5)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=5, spawn_key=(31, 0)))
    led = MetricsLedger()
    for _ in range(50):
        ep = data.sample_episode(tiny_dataset, splits[0], 1, rng, "test")
        led.update(np.ones_like(ep.query.mask), ep.query.mask, ep.category)
    assert res["miou"] <= miou(led) + 0.05
