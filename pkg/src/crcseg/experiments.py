"""Cross-validated evaluation and the ablation harness.

Every comparison is paired: evaluation episodes are drawn from seeds fixed by
(eval_seed, fold), so variant A and variant B see the same episodes in the
same order.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import (Episode, FoldSplit, ImageSample, ShapeDataset,
                   make_fold_splits, mask_to_bbox_mask, sample_episode)
from .metrics import MetricsLedger, fbiou, miou
from .model import (ModelConfig, ModelParams, forward_pair, predict_mask,
                    prob_to_mask, upsample_prob)
from .train import (FinetuneConfig, TrainConfig, kshot_finetune,
                    kshot_fusion_predict, multiscale_predict, train)

EVAL_MODES = ("single", "fusion", "finetune")
ANNOTATIONS = ("mask", "bbox")


def _episode_rng(eval_seed: int, fold: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=eval_seed,
                                                        spawn_key=(31, fold)))


def _weaken(episode: Episode, annotation: str) -> Episode:
    if annotation == "mask":
        return episode
    support = [ImageSample(s.image, mask_to_bbox_mask(s.mask), s.category)
               for s in episode.support]
    return Episode(support=support, query=episode.query,
                   category=episode.category)


def _predict_one(params: ModelParams, cfg: ModelConfig, support: ImageSample,
                 query_image: np.ndarray, scales, refine_iterations):
    if scales:
        return multiscale_predict(params, cfg, support, query_image,
                                  scales=scales,
                                  refine_iterations=refine_iterations)
    return predict_mask(params, cfg, support, query_image,
                        refine_iterations=refine_iterations)


def evaluate(params: ModelParams, cfg: ModelConfig, dataset: ShapeDataset,
             split: FoldSplit, *, episodes: int, seed: int, fold: int = 0,
             k: int = 1, mode: str = "single", scales=None,
             refine_iterations: int | None = None, annotation: str = "mask",
             finetune_cfg: FinetuneConfig | None = None,
             phase: str = "test") -> dict:
    """Score `episodes` seeded episodes; returns miou/fbiou plus the ledger."""
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    if annotation not in ANNOTATIONS:
        raise ValueError(f"annotation must be one of {ANNOTATIONS}")
    rng = _episode_rng(seed, fold)
    ledger = MetricsLedger()
    for idx in range(episodes):
        ep = _weaken(sample_episode(dataset, split, k, rng, phase), annotation)
        query = ep.query
        if mode == "fusion":
            prob = kshot_fusion_predict(params, cfg, ep.support, query.image,
                                        refine_iterations=refine_iterations)
        elif mode == "finetune":
            ft = finetune_cfg or FinetuneConfig()
            ft_seeded = FinetuneConfig(
                steps=ft.steps, learning_rate=ft.learning_rate,
                momentum=ft.momentum, lambda_sub=ft.lambda_sub,
                include_self_pairs=ft.include_self_pairs,
                train_refine_iterations=ft.train_refine_iterations,
                seed=seed * 10_000 + idx)
            tuned = kshot_finetune(params, cfg, ep.support, ft_seeded)
            prob = _predict_one(tuned, cfg, ep.support[0], query.image,
                                scales, refine_iterations)
        else:
            prob = _predict_one(params, cfg, ep.support[0], query.image,
                                scales, refine_iterations)
        ledger.update(prob_to_mask(prob), query.mask, ep.category)
    return {"miou": miou(ledger), "fbiou": fbiou(ledger), "ledger": ledger}


def refinement_curve(params: ModelParams, cfg: ModelConfig,
                     dataset: ShapeDataset, split: FoldSplit, *,
                     episodes: int, seed: int, fold: int = 0,
                     iterations: int = 10, phase: str = "test") -> list[float]:
    """mIoU after each refinement step, averaged over seeded episodes."""
    rng = _episode_rng(seed, fold)
    ledgers = [MetricsLedger() for _ in range(iterations)]
    for _ in range(episodes):
        ep = sample_episode(dataset, split, 1, rng, phase)
        out = forward_pair(params, cfg, ep.support[0], ep.query.image,
                           refine_iterations=iterations, record_refine=True)
        h, w = ep.query.mask.shape
        for i, prob in enumerate(out["q_steps"]):
            full = upsample_prob(prob.data, h, w)
            ledgers[i].update(prob_to_mask(full), ep.query.mask, ep.category)
    return [miou(led) for led in ledgers]


# ---------------------------------------------------------------------------
# cross-validation


def cross_validation_eval(dataset: ShapeDataset, folds: list[FoldSplit],
                          train_cfg: TrainConfig, *, episodes_per_fold: int = 200,
                          eval_seed: int = 1234, k: int = 1,
                          mode: str = "single", scales=None,
                          refine_iterations: int | None = None,
                          annotation: str = "mask",
                          finetune_cfg: FinetuneConfig | None = None,
                          params_per_fold: list[ModelParams] | None = None,
                          ) -> list[dict]:
    """Train (or reuse) one model per fold and score its test categories.

    Returns one row per fold plus a 'mean' row; rows carry fold, miou, fbiou,
    episodes and seed.
    """
    rows = []
    for fold, split in enumerate(folds):
        if params_per_fold is not None:
            params = params_per_fold[fold]
        else:
            params = train(dataset, split, train_cfg)
        res = evaluate(params, train_cfg.model, dataset, split,
                       episodes=episodes_per_fold, seed=eval_seed, fold=fold,
                       k=k, mode=mode, scales=scales,
                       refine_iterations=refine_iterations,
                       annotation=annotation, finetune_cfg=finetune_cfg)
        rows.append({"fold": fold, "miou": res["miou"], "fbiou": res["fbiou"],
                     "episodes": episodes_per_fold, "seed": eval_seed})
    rows.append({"fold": "mean",
                 "miou": float(np.mean([r["miou"] for r in rows])),
                 "fbiou": float(np.mean([r["fbiou"] for r in rows])),
                 "episodes": episodes_per_fold, "seed": eval_seed})
    return rows


# ---------------------------------------------------------------------------
# ablation harness

TRAIN_AXES: dict[str, list[tuple[str, dict]]] = {
    "cross_reference": [
        ("conditional_only", {"cross_reference": False}),
        ("cross_reference_only", {"global_condition": False,
                                  "local_condition": False}),
        ("both", {}),
    ],
    "conditional_global": [
        ("without_global", {"global_condition": False}),
        ("with_global", {}),
    ],
    "conditional_local": [
        ("without_local", {"local_condition": False}),
        ("with_local", {}),
    ],
    "multi_level": [
        ("single_level", {"multi_level": False}),
        ("multi_level", {}),
    ],
    "activation": [
        ("relu", {"gate_activation": "relu"}),
        ("sigmoid", {}),
        ("softmax", {"gate_activation": "softmax"}),
    ],
}

EVAL_AXES: dict[str, list[tuple[str, dict]]] = {
    "multi_scale": [
        ("single_scale", {}),
        ("multi_scale", {"scales": (0.75, 1.0, 1.25)}),
    ],
    "mask_refine": [
        (f"iters_{i}", {"refine_iterations": i}) for i in (1, 2, 5, 10)
    ],
    "bbox_supervision": [
        ("mask", {}),
        ("bbox", {"annotation": "bbox"}),
    ],
    "kshot_mode": [
        ("fusion", {"mode": "fusion", "k": 5}),
        ("finetune", {"mode": "finetune", "k": 5}),
    ],
}

ABLATION_AXES = tuple(TRAIN_AXES) + tuple(EVAL_AXES)


def ablation_run(dataset: ShapeDataset, folds: list[FoldSplit],
                 base_cfg: TrainConfig, axis: str, *,
                 episodes_per_fold: int = 200, eval_seed: int = 1234,
                 finetune_cfg: FinetuneConfig | None = None) -> list[dict]:
    """Run every variant on one axis with identical seeds; rows per variant.

    Train-side axes retrain per variant; eval-side axes share one base model
    per fold and only change inference.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown axis {axis!r}; valid: {', '.join(ABLATION_AXES)}")
    rows = []
    if axis in TRAIN_AXES:
        for variant, overrides in TRAIN_AXES[axis]:
            cfg = TrainConfig(**{**_train_cfg_dict(base_cfg),
                                 "model": base_cfg.model.with_overrides(**overrides)})
            for row in cross_validation_eval(
                    dataset, folds, cfg, episodes_per_fold=episodes_per_fold,
                    eval_seed=eval_seed):
                rows.append({"variant": variant, **row})
    else:
        params_per_fold = [train(dataset, split, base_cfg) for split in folds]
        for variant, overrides in EVAL_AXES[axis]:
            for row in cross_validation_eval(
                    dataset, folds, base_cfg,
                    episodes_per_fold=episodes_per_fold, eval_seed=eval_seed,
                    params_per_fold=params_per_fold,
                    finetune_cfg=finetune_cfg, **overrides):
                rows.append({"variant": variant, **row})
    return rows


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in (
        "learning_rate", "momentum", "epochs", "episodes_per_epoch",
        "lambda_sub", "k", "seed", "crop_size", "augment_crop",
        "augment_scale", "augment_flip", "train_refine_iterations")}


def write_csv(path: Path | str, rows: list[dict],
              header: tuple[str, ...] = ("fold", "variant", "miou", "fbiou",
                                         "episodes", "seed")) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in header})
