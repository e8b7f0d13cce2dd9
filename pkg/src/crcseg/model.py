"""The segmentation network: Siamese encoder, cross-reference channel gate,
global/local conditioning, and the cache-driven mask refinement decoder.

All weights are shared between the support and query branches; the two
branches differ only in what conditions them (the query branch attends to the
support, the support branch to itself under its own annotation). Architecture
flags exist for every ablation axis, and parameters are only created for
enabled sub-modules.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .data import ImageSample
from .tensor import (Tensor, add, bilinear_resize, colwise_scale,
                     colwise_shift, concat_channels, conv2d, global_avg_pool,
                     matmul, mul, relu, reshape, sigmoid, slice_channels,
                     softmax_rows, spatial_weighted_mean, sub, transpose2d)

GATE_ACTIVATIONS = ("sigmoid", "relu", "softmax")
MASKING_MODES = ("multiplicative", "additive")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    enc_channels: tuple[int, int, int] = (16, 32, 32)
    multi_level: bool = True
    cross_reference: bool = True
    gate_activation: str = "sigmoid"
    global_condition: bool = True
    local_condition: bool = True
    masking_mode: str = "multiplicative"
    refine_iterations: int = 10

    def __post_init__(self):
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ValueError(f"gate_activation must be one of {GATE_ACTIVATIONS}")
        if self.masking_mode not in MASKING_MODES:
            raise ValueError(f"masking_mode must be one of {MASKING_MODES}")
        if self.refine_iterations < 1:
            raise ValueError("refine_iterations must be >= 1")

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class ConfidenceCache:
    """Per-pixel foreground probability carried between refinement steps."""
    prob: Tensor


class ModelParams(dict):
    """Named tensor collection; keys are dotted sub-module paths."""

    def freeze(self, prefix: str) -> None:
        for name, t in self.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def clone(self) -> "ModelParams":
        out = ModelParams()
        for name, t in self.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[name] = c
        return out

    def trainable(self):
        return {n: t for n, t in self.items() if t.requires_grad}


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(101,)))
    c = cfg.channels
    e1, e2, e3 = cfg.enc_channels
    p = ModelParams()

    def conv_param(name, cout, cin, kh, kw):
        p[name + ".w"] = Tensor(_he(rng, (cout, cin, kh, kw), cin * kh * kw),
                                requires_grad=True)
        p[name + ".b"] = Tensor(np.zeros((cout, 1, 1)), requires_grad=True)

    conv_param("encoder.s1a", e1, 3, 3, 3)
    conv_param("encoder.s1b", e1, e1, 3, 3)
    conv_param("encoder.s2a", e2, e1, 3, 3)
    conv_param("encoder.s2b", e2, e2, 3, 3)
    conv_param("encoder.s3a", e3, e2, 3, 3)
    conv_param("encoder.s3b", e3, e3, 3, 3)
    fuse_in = e2 + e3 if cfg.multi_level else e3
    conv_param("encoder.fuse", c, fuse_in, 1, 1)

    if cfg.cross_reference:
        hidden = max(1, c // 2)
        p["gate.fc1.w"] = Tensor(_he(rng, (c, hidden), c), requires_grad=True)
        p["gate.fc1.b"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
        p["gate.fc2.w"] = Tensor(_he(rng, (hidden, c), hidden), requires_grad=True)
        # start the gates open so downstream modules see full-strength
        # features from step one (sigmoid(2)^2 ~ 0.77)
        p["gate.fc2.b"] = Tensor(np.full((1, c), 2.0), requires_grad=True)
        conv_param("subtask.c1", c, c, 3, 3)
        conv_param("subtask.c2", c, c, 3, 3)
        for rate in (1, 2, 4):
            p[f"subtask.aspp{rate}.w"] = Tensor(
                _he(rng, (c, c, 3, 3), c * 9), requires_grad=True)
        p["subtask.aspp.b"] = Tensor(np.zeros((c, 1, 1)), requires_grad=True)
        conv_param("subtask.head", 2, c, 1, 1)

    if cfg.global_condition:
        conv_param("cond.glob.conv", c, 2 * c, 3, 3)
        conv_param("cond.glob.proj", c, c, 1, 1)
    if cfg.local_condition:
        conv_param("cond.loc.theta", c, c, 1, 1)
        conv_param("cond.loc.delta", c, c, 1, 1)

    refine_in = c * (1 + int(cfg.global_condition) + int(cfg.local_condition))
    conv_param("refine.proj", c, refine_in, 1, 1)
    conv_param("refine.feat.a1", c, c, 1, 7)
    conv_param("refine.feat.a2", c, c, 7, 1)
    conv_param("refine.feat.b1", c, c, 7, 1)
    conv_param("refine.feat.b2", c, c, 1, 7)
    conv_param("refine.cache.a1", c, 1, 1, 7)
    conv_param("refine.cache.a2", c, c, 7, 1)
    conv_param("refine.cache.b1", c, 1, 7, 1)
    conv_param("refine.cache.b2", c, c, 1, 7)
    conv_param("refine.comb.c1", c, 2 * c, 3, 3)
    conv_param("refine.comb.c2", c, c, 3, 3)
    conv_param("refine.head", 2, c, 1, 1)
    return p


def _convb(p: ModelParams, name: str, x: Tensor, stride=1, padding=0,
           dilation=1) -> Tensor:
    return add(conv2d(x, p[name + ".w"], stride, padding, dilation),
               p[name + ".b"])


# ---------------------------------------------------------------------------
# encoder

def siamese_encode(p: ModelParams, cfg: ModelConfig, image: Tensor) -> Tensor:
    """3×H×W image to C×(H/8)×(W/8) features, mid+high level fused."""
    h, w = image.shape[1:]
    if h % 8 or w % 8:
        raise ValueError(f"image dims must be divisible by 8, got {h}x{w}")
    x = relu(_convb(p, "encoder.s1a", image, stride=2, padding=1))
    x = relu(_convb(p, "encoder.s1b", x, padding=1))
    x = relu(_convb(p, "encoder.s2a", x, stride=2, padding=1))
    mid = relu(_convb(p, "encoder.s2b", x, padding=1))
    x = relu(_convb(p, "encoder.s3a", mid, stride=2, padding=1))
    high = relu(_convb(p, "encoder.s3b", x, padding=1))
    if cfg.multi_level:
        mid_r = bilinear_resize(mid, high.shape[1], high.shape[2])
        fused = concat_channels(mid_r, high)
    else:
        fused = high
    return relu(_convb(p, "encoder.fuse", fused))


# ---------------------------------------------------------------------------
# cross-reference channel gate + co-occurrence heads

def _gate_vector(p: ModelParams, cfg: ModelConfig, f: Tensor) -> Tensor:
    v = reshape(global_avg_pool(f), (1, f.shape[0]))
    h = relu(add(matmul(v, p["gate.fc1.w"]), p["gate.fc1.b"]))
    o = add(matmul(h, p["gate.fc2.w"]), p["gate.fc2.b"])
    if cfg.gate_activation == "sigmoid":
        return sigmoid(o)
    if cfg.gate_activation == "relu":
        return relu(o)
    return softmax_rows(o)


def cross_reference(p: ModelParams, cfg: ModelConfig, f_s: Tensor,
                    f_q: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Reinforce both maps with the product of their per-branch channel gates."""
    if f_s.shape != f_q.shape:
        raise ValueError(f"feature shapes differ: {f_s.shape} vs {f_q.shape}")
    a_s = _gate_vector(p, cfg, f_s)
    a_q = _gate_vector(p, cfg, f_q)
    gate = reshape(mul(a_s, a_q), (f_s.shape[0], 1, 1))
    return mul(f_s, gate), mul(f_q, gate), gate


def subtask_decode(p: ModelParams, cfg: ModelConfig, g: Tensor) -> Tensor:
    """Co-occurrent-object head: convs + 3-rate dilated block, 2-ch logits."""
    x = relu(_convb(p, "subtask.c1", g, padding=1))
    x = relu(_convb(p, "subtask.c2", x, padding=1))
    a = conv2d(x, p["subtask.aspp1.w"], padding=1, dilation=1)
    a = add(a, conv2d(x, p["subtask.aspp2.w"], padding=2, dilation=2))
    a = add(a, conv2d(x, p["subtask.aspp4.w"], padding=4, dilation=4))
    x = relu(add(a, p["subtask.aspp.b"]))
    return _convb(p, "subtask.head", x)


# ---------------------------------------------------------------------------
# conditioning

def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Binary H×W mask to float {0,1} at feature resolution (bilinear, 0.5)."""
    m = kernels.bilinear_resize_forward(mask[None].astype(np.float64), h, w)[0]
    return (m >= 0.5).astype(np.float64)


def foreground_avg_pool(f: Tensor, mask_small: np.ndarray) -> Tensor:
    """Mean feature over annotated pixels; plain global mean if none survive
    downsampling (and exactly global mean for an all-ones mask)."""
    total = mask_small.sum()
    if total == 0 or total == mask_small.size:
        return global_avg_pool(f)
    return spatial_weighted_mean(f, mask_small / total)


def global_condition(p: ModelParams, f: Tensor, v: Tensor) -> Tensor:
    """Tile the category vector over the map, fuse by concat + residual conv."""
    vt = bilinear_resize(v, f.shape[1], f.shape[2])
    y = relu(_convb(p, "cond.glob.conv", concat_channels(f, vt), padding=1))
    return add(y, _convb(p, "cond.glob.proj", f))


def local_condition(p: ModelParams, cfg: ModelConfig, f_q: Tensor, f_s: Tensor,
                    mask_small: np.ndarray) -> Tensor:
    """Position-wise attention from query positions to support positions.

    The support mask suppresses background columns before the row softmax;
    multiplicative mode zeroes the scores (keeping exp(0) weight, the literal
    reading), additive mode pushes them to -1e9 (strict exclusion). An empty
    downsampled mask falls back to unmasked attention.
    """
    c, h, w = f_q.shape
    th = relu(_convb(p, "cond.loc.theta", f_q))
    de = relu(_convb(p, "cond.loc.delta", f_s))
    scores = matmul(transpose2d(reshape(th, (c, h * w))),
                    reshape(de, (c, h * w)))
    mvec = mask_small.reshape(-1)
    if mvec.sum() > 0:
        if cfg.masking_mode == "multiplicative":
            scores = colwise_scale(scores, mvec)
        else:
            scores = colwise_shift(scores, np.where(mvec > 0, 0.0, -1e9))
    attn = softmax_rows(scores)
    mixed = matmul(reshape(f_s, (c, h * w)), transpose2d(attn))
    return reshape(mixed, (c, h, w))


def fuse_conditions(global_out: Tensor | None, local_out: Tensor | None,
                    reinforced: Tensor) -> Tensor:
    """Concat the enabled conditional outputs; pass the reinforced features
    through untouched when both are disabled."""
    parts = [t for t in (global_out, local_out) if t is not None]
    if not parts:
        return reinforced
    if len(parts) == 1:
        return parts[0]
    return concat_channels(*parts)


# ---------------------------------------------------------------------------
# mask refinement

def _global_conv_block(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    a = _convb(p, f"{prefix}.a1", x, padding=(0, 3))
    a = _convb(p, f"{prefix}.a2", a, padding=(3, 0))
    b = _convb(p, f"{prefix}.b1", x, padding=(3, 0))
    b = _convb(p, f"{prefix}.b2", b, padding=(0, 3))
    return add(a, b)


def _fg_prob(logits: Tensor) -> Tensor:
    # two-way softmax foreground probability == sigmoid(fg - bg), exactly
    return sigmoid(sub(slice_channels(logits, 1, 2),
                       slice_channels(logits, 0, 1)))


def _refine_from_feat(p: ModelParams, ft: Tensor,
                      cache: ConfidenceCache) -> tuple[Tensor, ConfidenceCache]:
    ct = _global_conv_block(p, "refine.cache", cache.prob)
    y1 = relu(_convb(p, "refine.comb.c1", concat_channels(ft, ct), padding=1))
    y2 = relu(add(_convb(p, "refine.comb.c2", y1, padding=1), y1))
    logits = _convb(p, "refine.head", y2)
    return logits, ConfidenceCache(_fg_prob(logits))


def mask_refine_step(p: ModelParams, cfg: ModelConfig, feat: Tensor,
                     cache: ConfidenceCache) -> tuple[Tensor, ConfidenceCache]:
    return _refine_from_feat(p, _global_conv_block(p, "refine.feat", feat), cache)


def mask_refine(p: ModelParams, cfg: ModelConfig, feat: Tensor,
                iterations: int, record: bool = False,
                detach_cache: bool = False):
    """Iterate the refinement step from a zero cache.

    The feature-branch block only depends on the (fixed) input features, so
    it is evaluated once and reused every iteration. detach_cache feeds each
    step the previous probability map as a constant: values are identical,
    but gradients then treat every step as 'improve the cache you were
    given' instead of backpropagating through the whole rollout. Returns
    (final logits, final foreground probability, per-step probs or None).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cache = ConfidenceCache(Tensor(np.zeros((1, feat.shape[1], feat.shape[2]))))
    ft = _global_conv_block(p, "refine.feat", feat)
    steps = [] if record else None
    logits = None
    for _ in range(iterations):
        logits, cache = _refine_from_feat(p, ft, cache)
        if record:
            steps.append(cache.prob)
        if detach_cache:
            cache = ConfidenceCache(Tensor(cache.prob.data))
    return logits, cache.prob, steps


# ---------------------------------------------------------------------------
# full pipeline

def forward_pair(p: ModelParams, cfg: ModelConfig, support: ImageSample,
                 query_image: np.ndarray, refine_iterations: int | None = None,
                 record_refine: bool = False) -> dict:
    """Run both branches on one support/query pair.

    Returns logits for the final masks (qm, sm) and the co-occurrence heads
    (qm_sub, sm_sub, None when the cross-reference module is off), plus the
    refined foreground probability maps.
    """
    iters = cfg.refine_iterations if refine_iterations is None else refine_iterations
    f_s = siamese_encode(p, cfg, Tensor(support.image))
    f_q = siamese_encode(p, cfg, Tensor(np.asarray(query_image)))

    if cfg.cross_reference:
        g_s, g_q, gate = cross_reference(p, cfg, f_s, f_q)
        qm_sub = subtask_decode(p, cfg, g_q)
        sm_sub = subtask_decode(p, cfg, g_s)
    else:
        g_s, g_q, gate = f_s, f_q, None
        qm_sub = sm_sub = None

    h, w = g_s.shape[1:]
    mask_small = downsample_mask(support.mask, h, w)
    v = foreground_avg_pool(g_s, mask_small) if (
        cfg.global_condition or cfg.local_condition) else None

    def branch(feat_self: Tensor) -> Tensor:
        gc = global_condition(p, feat_self, v) if cfg.global_condition else None
        lc = (local_condition(p, cfg, feat_self, g_s, mask_small)
              if cfg.local_condition else None)
        fused = fuse_conditions(gc, lc, feat_self)
        x = fused if fused is feat_self else concat_channels(fused, feat_self)
        return relu(_convb(p, "refine.proj", x))

    qm, q_prob, q_steps = mask_refine(p, cfg, branch(g_q), iters, record_refine)
    sm, s_prob, s_steps = mask_refine(p, cfg, branch(g_s), iters, record_refine)
    return {
        "qm": qm, "sm": sm, "qm_sub": qm_sub, "sm_sub": sm_sub,
        "q_prob": q_prob, "s_prob": s_prob, "gate": gate,
        "q_steps": q_steps, "s_steps": s_steps,
    }


def upsample_prob(prob: np.ndarray, h: int, w: int) -> np.ndarray:
    return kernels.bilinear_resize_forward(prob, h, w)[0]


def predict_mask(p: ModelParams, cfg: ModelConfig, support: ImageSample,
                 query_image: np.ndarray,
                 refine_iterations: int | None = None) -> np.ndarray:
    """Full-resolution foreground probability for one support/query pair."""
    out = forward_pair(p, cfg, support, query_image,
                       refine_iterations=refine_iterations)
    return upsample_prob(out["q_prob"].data, query_image.shape[1],
                         query_image.shape[2])


def prob_to_mask(prob: np.ndarray) -> np.ndarray:
    return (prob >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints: magic "CRCN1", then per tensor
#   u32 name length | name bytes | u32 rank | u32 dims... | f32 values...
# (all little-endian, insertion order)

MAGIC = b"CRCN1"


def save_checkpoint(params: ModelParams, path: Path | str) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, t in params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(t.data.astype("<f4").tobytes())


def read_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    path = str(path)
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    tensors: dict[str, np.ndarray] = {}
    off = 5

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    while off < len(raw):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float64)
    return tensors


def load_checkpoint(params: ModelParams, path: Path | str) -> ModelParams:
    """Fill an architecture-matched parameter set from a checkpoint file."""
    tensors = read_checkpoint(path)
    missing = [n for n in params if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensor {missing[0]!r}")
    extra = [n for n in tensors if n not in params]
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    for name, t in params.items():
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"{tensors[name].shape} vs {t.data.shape}")
        t.data = np.ascontiguousarray(tensors[name])
    return params
