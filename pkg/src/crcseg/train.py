"""Losses, the episodic training loop, and k-shot inference strategies."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .data import Episode, ImageSample, FoldSplit, ShapeDataset, sample_episode
from .model import (ModelConfig, ModelParams, _fg_prob, downsample_mask,
                    forward_pair, init_params, predict_mask, prob_to_mask,
                    upsample_prob)
from .optim import SGD
from .tensor import Tape, Tensor, add, affine, clip, log, mean, mul

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0025
    momentum: float = 0.9
    epochs: int = 30
    episodes_per_epoch: int = 200
    lambda_sub: float = 0.1
    k: int = 1
    seed: int = 0
    crop_size: int = 40
    augment_crop: bool = True
    augment_scale: bool = True
    augment_flip: bool = True
    train_refine_iterations: int = 4
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_sub < 0:
            raise ValueError("lambda_sub must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.crop_size % 8:
            raise ValueError("crop_size must be a multiple of 8")


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 100
    learning_rate: float = 0.00025
    momentum: float = 0.9
    lambda_sub: float = 0.1
    include_self_pairs: bool = False
    train_refine_iterations: int = 4
    seed: int = 0


@dataclass
class LossBreakdown:
    l_qm: Tensor
    l_sm: Tensor
    l_qm_sub: Tensor
    l_sm_sub: Tensor
    total: Tensor

    def scalars(self) -> tuple[float, float, float, float, float]:
        return (self.l_qm.item(), self.l_sm.item(), self.l_qm_sub.item(),
                self.l_sm_sub.item(), self.total.item())


def bce_loss(prob: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-mean binary cross entropy; probabilities clamped to [eps, 1-eps]."""
    target = np.asarray(target, dtype=np.float64)
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: prob {prob.shape} vs target {target.shape}")
    p = clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    t = Tensor(target)
    pos = mul(t, log(p))
    neg = mul(Tensor(1.0 - target), log(affine(p, -1.0, 1.0)))
    return affine(mean(add(pos, neg)), -1.0)


def total_loss(outputs: dict, gt_query_mask: np.ndarray,
               gt_support_mask: np.ndarray, lambda_sub: float) -> LossBreakdown:
    """Final-mask losses on both branches plus weighted co-occurrence losses.

    Ground truth is brought to logits resolution with the same bilinear+0.5
    rule the model applies to the support annotation.
    """
    h, w = outputs["q_prob"].shape[1:]
    yq = downsample_mask(np.asarray(gt_query_mask), h, w)[None]
    ys = downsample_mask(np.asarray(gt_support_mask), h, w)[None]
    l_qm = bce_loss(outputs["q_prob"], yq)
    l_sm = bce_loss(outputs["s_prob"], ys)
    if outputs["qm_sub"] is not None:
        l_qm_sub = bce_loss(_fg_prob(outputs["qm_sub"]), yq)
        l_sm_sub = bce_loss(_fg_prob(outputs["sm_sub"]), ys)
    else:
        l_qm_sub = Tensor(0.0)
        l_sm_sub = Tensor(0.0)
    total = add(add(l_qm, l_sm), affine(add(l_qm_sub, l_sm_sub), lambda_sub))
    return LossBreakdown(l_qm, l_sm, l_qm_sub, l_sm_sub, total)


# ---------------------------------------------------------------------------
# augmentation (synchronized image/mask transforms)


def _resize_pair(image: np.ndarray, mask: np.ndarray, h: int, w: int):
    img = kernels.bilinear_resize_forward(image, h, w)
    m = kernels.bilinear_resize_forward(mask[None].astype(np.float64), h, w)[0]
    return img, (m >= 0.5).astype(np.uint8)


def augment_pair(image: np.ndarray, mask: np.ndarray, out_size: int,
                 rng: np.random.Generator, scale: bool = True,
                 crop: bool = True, flip: bool = True):
    """Random scale jitter, crop/pad to out_size, horizontal flip.

    Crops retry a few times to keep at least one foreground pixel.
    """
    img, m = image, mask
    if scale:
        s = rng.uniform(0.75, 1.25)
        nh = max(8, int(round(image.shape[1] * s)))
        nw = max(8, int(round(image.shape[2] * s)))
        img, m = _resize_pair(img, m, nh, nw)
    h, w = img.shape[1:]
    if h < out_size or w < out_size:
        ph, pw = max(0, out_size - h), max(0, out_size - w)
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)))
        m = np.pad(m, ((0, ph), (0, pw)))
        h, w = img.shape[1:]
    if crop and (h > out_size or w > out_size):
        for _ in range(8):
            r = rng.integers(0, h - out_size + 1)
            c = rng.integers(0, w - out_size + 1)
            mc = m[r:r + out_size, c:c + out_size]
            if mc.any():
                break
        img = img[:, r:r + out_size, c:c + out_size]
        m = mc
    elif h != out_size or w != out_size:
        img, m = _resize_pair(img, m, out_size, out_size)
    if flip and rng.random() < 0.5:
        img = img[:, :, ::-1]
        m = m[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(m)


# ---------------------------------------------------------------------------
# training


def _quick_iou(prob: np.ndarray, target: np.ndarray) -> float:
    pred = prob[0] >= 0.5
    gt = target > 0
    union = (pred | gt).sum()
    return float((pred & gt).sum() / union) if union else 1.0


def train(dataset: ShapeDataset, split: FoldSplit, cfg: TrainConfig,
          log_rows: list | None = None):
    """Episodic training on the split's train categories.

    Returns trained parameters; when log_rows is given, appends
    (epoch, step, l_qm, l_sm, l_qm_sub, l_sm_sub, total, miou) tuples.
    """
    params = init_params(cfg.model, cfg.seed)
    opt = SGD(params, cfg.learning_rate, cfg.momentum)
    ep_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                          spawn_key=(11,)))
    aug_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                           spawn_key=(12,)))
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(dataset, split, 1, ep_rng, "train")
            s_img, s_mask = augment_pair(
                episode.support[0].image, episode.support[0].mask,
                cfg.crop_size, aug_rng, cfg.augment_scale, cfg.augment_crop,
                cfg.augment_flip)
            q_img, q_mask = augment_pair(
                episode.query.image, episode.query.mask, cfg.crop_size,
                aug_rng, cfg.augment_scale, cfg.augment_crop, cfg.augment_flip)
            support = ImageSample(s_img, s_mask, episode.category)
            with Tape() as tape:
                out = forward_pair(params, cfg.model, support, q_img,
                                   refine_iterations=cfg.train_refine_iterations)
                lb = total_loss(out, q_mask, s_mask, cfg.lambda_sub)
                tape.backward(lb.total)
            opt.step()
            step += 1
            if log_rows is not None:
                h, w = out["q_prob"].shape[1:]
                miou = _quick_iou(out["q_prob"].data,
                                  downsample_mask(q_mask, h, w))
                log_rows.append((epoch, step) + lb.scalars() + (miou,))
    return params


# ---------------------------------------------------------------------------
# k-shot strategies


def ordered_support_pairs(k: int, include_self: bool = False) -> list[tuple[int, int]]:
    """Ordered (support, query) index pairs; at most k^2, k^2-k without self."""
    return [(i, j) for i in range(k) for j in range(k) if include_self or i != j]


def kshot_finetune(params: ModelParams, cfg: ModelConfig,
                   support_set: list[ImageSample],
                   ft: FinetuneConfig) -> ModelParams:
    """Adapt everything but the encoder on ordered support pairs.

    With k supports there are at most k^2 pairs; self-pairs are excluded
    unless the config re-enables them. The input parameters are left
    untouched (work happens on a clone).
    """
    k = len(support_set)
    if k < 2:
        raise ValueError("k-shot finetuning needs at least 2 support samples")
    pairs = ordered_support_pairs(k, ft.include_self_pairs)
    tuned = params.clone()
    tuned.freeze("encoder.")
    opt = SGD(tuned, ft.learning_rate, ft.momentum)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=ft.seed,
                                                       spawn_key=(21,)))
    for _ in range(ft.steps):
        i, j = pairs[rng.integers(len(pairs))]
        support, query = support_set[i], support_set[j]
        with Tape() as tape:
            out = forward_pair(tuned, cfg, support, query.image,
                               refine_iterations=ft.train_refine_iterations)
            lb = total_loss(out, query.mask, support.mask, ft.lambda_sub)
            tape.backward(lb.total)
        opt.step()
    return tuned


def kshot_fusion_predict(params: ModelParams, cfg: ModelConfig,
                         support_set: list[ImageSample],
                         query_image: np.ndarray,
                         refine_iterations: int | None = None) -> np.ndarray:
    """Average the k independent 1-shot probability maps (full resolution)."""
    if not support_set:
        raise ValueError("need at least one support sample")
    probs = [predict_mask(params, cfg, s, query_image,
                          refine_iterations=refine_iterations)
             for s in support_set]
    return np.mean(probs, axis=0)


def _scaled_size(n: int, scale: float) -> int:
    return max(8, int(np.floor(n * scale / 8.0 + 0.5)) * 8)


def multiscale_predict(params: ModelParams, cfg: ModelConfig,
                       support: ImageSample, query_image: np.ndarray,
                       scales=(0.75, 1.0, 1.25),
                       refine_iterations: int | None = None) -> np.ndarray:
    """Predict at several input scales (rounded to multiples of 8), resize the
    probability maps back and average them."""
    h, w = query_image.shape[1:]
    probs = []
    for s in scales:
        th, tw = _scaled_size(h, s), _scaled_size(w, s)
        if th < 8 or tw < 8:
            raise ValueError(f"scale {s} produces a sub-8-pixel input")
        s_img, s_mask = _resize_pair(support.image, support.mask, th, tw)
        if not s_mask.any():  # tiny objects can vanish at 0.75x
            s_mask = (kernels.bilinear_resize_forward(
                support.mask[None].astype(np.float64), th, tw)[0] > 0
            ).astype(np.uint8)
        q_img = kernels.bilinear_resize_forward(query_image, th, tw)
        prob = predict_mask(params, cfg, ImageSample(s_img, s_mask, support.category),
                            q_img, refine_iterations=refine_iterations)
        probs.append(kernels.bilinear_resize_forward(prob[None], h, w)[0])
    return np.mean(probs, axis=0)
