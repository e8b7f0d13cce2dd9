"""Procedural multi-category shape dataset, fold splits and episode sampling.

Each category is one parametric shape family rendered with random position,
scale, rotation and color, plus 0-2 distractor shapes from other families and
noisy background. The mask covers target-family pixels only, so a model must
actually use the support annotation to know which object to segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .netpbm import NetpbmError

FG_FRACTION_MIN = 0.02
FG_FRACTION_MAX = 0.60

# P(0), P(1), P(2) distractor objects per image
DISTRACTOR_PROBS = (0.25, 0.40, 0.35)

SHAPE_FAMILIES = (
    "disk", "ring", "square", "triangle", "cross", "bar",
    "lshape", "diamond", "star", "blob", "crescent", "tshape",
)


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray   # 3xHxW float64 in [0,1]
    mask: np.ndarray    # HxW uint8 {0,1}
    category: int


@dataclass
class Episode:
    support: list[ImageSample]
    query: ImageSample
    category: int


@dataclass(frozen=True)
class FoldSplit:
    train_categories: tuple[int, ...]
    test_categories: tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    records: list[tuple[str, str, int]]
    image_size: int
    seed: int


@dataclass
class ShapeDataset:
    samples: list[ImageSample]
    num_categories: int
    images_per_category: int
    image_size: int
    seed: int
    by_category: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_category:
            for i, s in enumerate(self.samples):
                self.by_category.setdefault(s.category, []).append(i)

    @property
    def categories(self) -> list[int]:
        return sorted(self.by_category)


# ---------------------------------------------------------------------------
# shape rasterization

def _shape_inside(family: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership test in normalized coordinates (shape spans roughly [-1,1])."""
    r2 = x * x + y * y
    if family == "disk":
        return r2 <= 1.0
    if family == "ring":
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if family == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.9
    if family == "triangle":
        return (y >= -1.0) & (y <= 0.8) & (np.abs(x) <= 0.53 * (y + 1.0))
    if family == "cross":
        return ((np.abs(x) <= 0.35) & (np.abs(y) <= 1.0)) | \
               ((np.abs(y) <= 0.35) & (np.abs(x) <= 1.0))
    if family == "bar":
        return (np.abs(x) <= 1.0) & (np.abs(y) <= 0.32)
    if family == "lshape":
        return ((x <= -0.3) & (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)) | \
               ((y >= 0.3) & (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0))
    if family == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0
    if family == "star":
        theta = np.arctan2(y, x)
        a = np.abs(np.mod(theta + np.pi / 2, 2 * np.pi / 5) - np.pi / 5)
        rmax = 0.42 + (1.0 - 0.42) * (1.0 - a / (np.pi / 5))
        return np.sqrt(r2) <= rmax
    if family == "blob":
        cell = (np.floor((x + 1.0) * 1.5) + np.floor((y + 1.0) * 1.5)) % 2
        return (r2 <= 1.0) & (cell == 0)
    if family == "crescent":
        return (r2 <= 1.0) & ((x - 0.45) ** 2 + y * y >= 0.7 ** 2)
    if family == "tshape":
        return ((y <= -0.35) & (np.abs(x) <= 1.0) & (y >= -1.0)) | \
               ((np.abs(x) <= 0.3) & (y >= -0.35) & (y <= 1.0))
    raise ValueError(f"unknown shape family {family!r}")


def _rasterize(family: str, size: int, cx: float, cy: float, scale: float,
               angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx = (xx + 0.5 - cx) / scale
    dy = (yy + 0.5 - cy) / scale
    c, s = np.cos(angle), np.sin(angle)
    xn = c * dx + s * dy
    yn = -s * dx + c * dy
    return _shape_inside(family, xn, yn)


def category_family(category: int) -> str:
    return SHAPE_FAMILIES[category % len(SHAPE_FAMILIES)]


def _random_color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.25, 1.0, size=3)


def _render_sample(category: int, size: int, rng: np.random.Generator) -> ImageSample:
    family = category_family(category)

    # Target placement, rejected until the foreground fraction lands in range.
    for _ in range(40):
        cx, cy = rng.uniform(0.30 * size, 0.70 * size, size=2)
        scale = rng.uniform(0.16 * size, 0.34 * size)
        angle = rng.uniform(0.0, 2 * np.pi)
        target = _rasterize(family, size, cx, cy, scale, angle)
        frac = target.mean()
        if FG_FRACTION_MIN <= frac <= FG_FRACTION_MAX and target.any():
            break
    else:
        target = _rasterize(family, size, size / 2, size / 2, 0.25 * size, 0.0)

    base = rng.uniform(0.0, 0.30, size=3)
    gdir = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    grad = ((np.cos(gdir) * xx + np.sin(gdir) * yy) / size) * rng.uniform(0.0, 0.15)
    image = base[:, None, None] + grad[None, :, :]
    image = image + rng.normal(0.0, 0.04, size=(3, size, size))

    # Distractors first so the target overdraws them where they overlap.
    others = [f for f in SHAPE_FAMILIES if f != family]
    for _ in range(rng.choice([0, 1, 2], p=DISTRACTOR_PROBS)):
        dfam = others[rng.integers(len(others))]
        dcx, dcy = rng.uniform(0.15 * size, 0.85 * size, size=2)
        dscale = rng.uniform(0.12 * size, 0.28 * size)
        dmask = _rasterize(dfam, size, dcx, dcy, dscale, rng.uniform(0, 2 * np.pi))
        image[:, dmask] = _random_color(rng)[:, None]

    color = _random_color(rng)
    while np.max(np.abs(color - base)) < 0.25:
        color = _random_color(rng)
    image[:, target] = color[:, None]

    image = np.clip(image, 0.0, 1.0)
    image = np.rint(image * 255.0) / 255.0  # match the on-disk 8-bit values
    return ImageSample(image=image, mask=target.astype(np.uint8), category=category)


def generate_synthetic_dataset(num_categories: int, images_per_category: int,
                               image_size: int, seed: int) -> ShapeDataset:
    """Deterministic dataset; every sample derives its own rng from the seed."""
    if num_categories < 8:
        raise DatasetError(f"need at least 8 categories, got {num_categories}")
    if not 32 <= image_size <= 128:
        raise DatasetError(f"image_size must be in [32, 128], got {image_size}")
    samples = []
    for cat in range(num_categories):
        for idx in range(images_per_category):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(cat, idx))
            samples.append(_render_sample(cat, image_size, np.random.default_rng(ss)))
    return ShapeDataset(samples, num_categories, images_per_category,
                        image_size, seed)


# ---------------------------------------------------------------------------
# folds and episodes

def make_fold_splits(category_ids, num_folds: int) -> list[FoldSplit]:
    """Contiguous blocks of sorted ids as test sets; remainder to early folds."""
    cats = sorted(category_ids)
    if num_folds > len(cats):
        raise DatasetError(f"{num_folds} folds for {len(cats)} categories")
    n, rem = divmod(len(cats), num_folds)
    splits = []
    pos = 0
    for i in range(num_folds):
        size = n + (1 if i < rem else 0)
        test = tuple(cats[pos:pos + size])
        train = tuple(c for c in cats if c not in test)
        splits.append(FoldSplit(train_categories=train, test_categories=test))
        pos += size
    return splits


def sample_episode(dataset: ShapeDataset, split: FoldSplit, k: int,
                   rng: np.random.Generator, phase: str = "train") -> Episode:
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be train|test, got {phase!r}")
    allowed = split.train_categories if phase == "train" else split.test_categories
    eligible = [c for c in allowed if len(dataset.by_category.get(c, ())) >= k + 1]
    if not eligible:
        raise DatasetError(f"no category with at least {k + 1} images in {phase} split")
    cat = eligible[rng.integers(len(eligible))]
    pool = dataset.by_category[cat]
    picks = rng.choice(len(pool), size=k + 1, replace=False)
    chosen = [dataset.samples[pool[i]] for i in picks]
    return Episode(support=chosen[:k], query=chosen[k], category=cat)


# ---------------------------------------------------------------------------
# weak annotations

def _connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected foreground components as boolean masks."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    fg = mask > 0
    for sr, sc in zip(*np.nonzero(fg)):
        if seen[sr, sc]:
            continue
        stack = [(sr, sc)]
        seen[sr, sc] = True
        comp = np.zeros((h, w), dtype=bool)
        while stack:
            r, c = stack.pop()
            comp[r, c] = True
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < h and 0 <= nc < w and fg[nr, nc] and not seen[nr, nc]:
                    seen[nr, nc] = True
                    stack.append((nr, nc))
        comps.append(comp)
    return comps


def mask_to_bbox_mask(mask: np.ndarray, per_component: bool = True) -> np.ndarray:
    """Filled bounding rectangle(s) of the foreground.

    per_component draws one box per 4-connected component (the default);
    otherwise a single tight box covers everything.
    """
    if not (mask > 0).any():
        raise DatasetError("mask_to_bbox_mask: empty mask")
    out = np.zeros_like(mask, dtype=np.uint8)
    regions = _connected_components(mask) if per_component else [mask > 0]
    for comp in regions:
        rows, cols = np.nonzero(comp)
        out[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = 1
    return out


# ---------------------------------------------------------------------------
# persistence

MANIFEST_NAME = "manifest.txt"


def save_dataset(dataset: ShapeDataset, root: Path | str) -> Path:
    """Write PPM/PGM files plus a line-oriented manifest; returns its path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    counter: dict[int, int] = {}
    for s in dataset.samples:
        idx = counter.get(s.category, 0)
        counter[s.category] = idx + 1
        img_rel = f"images/c{s.category:03d}_i{idx:04d}.ppm"
        mask_rel = f"masks/c{s.category:03d}_i{idx:04d}.pgm"
        netpbm.write_ppm(root / img_rel, s.image)
        netpbm.write_pgm(root / mask_rel, s.mask)
        records.append((img_rel, mask_rel, s.category))
    manifest = root / MANIFEST_NAME
    with open(manifest, "w") as f:
        f.write(f"CRCDATA v1 size={dataset.image_size}x{dataset.image_size}"
                f" seed={dataset.seed}\n")
        for img_rel, mask_rel, cat in records:
            f.write(f"{img_rel} {mask_rel} {cat}\n")
    return manifest


def load_dataset(manifest_path: Path | str) -> ShapeDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        lines = manifest_path.read_text().splitlines()
    except OSError as e:
        raise DatasetError(f"{manifest_path}: cannot read manifest ({e})") from e
    if not lines:
        raise DatasetError(f"{manifest_path}: empty manifest")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "CRCDATA" or head[1] != "v1":
        raise DatasetError(f"{manifest_path}: bad header {lines[0]!r}")
    try:
        size = int(head[2].removeprefix("size=").split("x")[0])
        seed = int(lines[0].split("seed=")[1])
    except (ValueError, IndexError):
        raise DatasetError(f"{manifest_path}: malformed header fields {lines[0]!r}")

    root = manifest_path.parent
    samples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{manifest_path}:{ln}: expected 3 fields, got {len(parts)}")
        img_rel, mask_rel, cat = parts[0], parts[1], int(parts[2])
        image = netpbm.read_ppm(root / img_rel)
        mask = netpbm.read_pgm(root / mask_rel)
        if image.shape[1:] != mask.shape:
            raise DatasetError(f"{manifest_path}:{ln}: image/mask size mismatch")
        samples.append(ImageSample(image=image, mask=mask, category=cat))

    per_cat: dict[int, int] = {}
    for s in samples:
        per_cat[s.category] = per_cat.get(s.category, 0) + 1
    return ShapeDataset(samples, num_categories=len(per_cat),
                        images_per_category=max(per_cat.values(), default=0),
                        image_size=size, seed=seed)
