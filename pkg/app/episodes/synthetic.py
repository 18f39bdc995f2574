# app/episodes/synthetic.py
"""
Synthetic shape-segmentation episodes.

Each image holds one coloured, textured object over a grey textured background. Background
pixels are nearly achromatic and object pixels are strongly saturated, so every mask is
recoverable from raw pixels, while telling classes apart needs both colour and shape.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.utils.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "bar", "cross", "ellipse", "l_shape")

# (base colour, noise amplitude, stripe frequency in cycles per image)
TEXTURES = (
    ((0.90, 0.20, 0.20), 0.04, 3.0),
    ((0.20, 0.80, 0.30), 0.05, 5.0),
    ((0.20, 0.30, 0.90), 0.03, 2.0),
    ((0.90, 0.80, 0.10), 0.05, 4.0),
    ((0.80, 0.20, 0.80), 0.04, 6.0),
    ((0.10, 0.80, 0.80), 0.03, 3.5),
)

SCALE_RANGE = (0.2, 0.6)
BACKGROUND_NOISE = 0.03


@dataclass(frozen=True)
class ShapeClass:
    kind: str
    color: Tuple[float, float, float]
    noise: float
    stripe_freq: float


@dataclass
class Episode:
    """
    N-way K-shot task. Support pairs are class-major: support[c * K + k] shows class c with
    mask label c + 1. Query masks use the same task labels (0 = background).
    """
    support: List[Tuple[np.ndarray, np.ndarray]]
    query: List[Tuple[np.ndarray, Optional[np.ndarray]]]
    class_ids: List[int]
    n_way: int
    k_shot: int

    def __post_init__(self):
        if len(self.support) != self.n_way * self.k_shot:
            raise ValueError(f"expected {self.n_way * self.k_shot} support pairs, got {len(self.support)}")
        if len(self.class_ids) != self.n_way:
            raise ValueError(f"expected {self.n_way} class ids, got {len(self.class_ids)}")
        if not self.query:
            raise ValueError("episode needs at least one query image")
        size = self.support[0][0].shape[:2]
        for img, _ in self.support + self.query:
            if img.shape[:2] != size:
                raise ValueError(f"support and query images must share H x W; got {img.shape[:2]} and {size}")
        for i, (_, mask) in enumerate(self.support):
            label = i // self.k_shot + 1
            if not np.any(mask == label):
                raise ValueError(f"support mask {i} has no pixels of its class label {label}")

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.support[0][0].shape[:2]


def all_shape_classes() -> List[ShapeClass]:
    return [ShapeClass(kind, color, noise, freq) for kind in SHAPE_KINDS for (color, noise, freq) in TEXTURES]


def make_class_pool(n_base: int, n_novel: int, seed: int) -> Tuple[List[ShapeClass], List[ShapeClass]]:
    """Deterministic disjoint base and novel class pools."""
    catalogue = all_shape_classes()
    if n_base < 1:
        raise ValueError(f"need at least one base class to train, got n_base={n_base}")
    if n_novel < 0:
        raise ValueError(f"n_novel must be >= 0, got {n_novel}")
    if n_base + n_novel > len(catalogue):
        raise ValueError(f"pool exhausted: {n_base + n_novel} classes requested, {len(catalogue)} available")
    order = make_rng(seed, "class_pool").permutation(len(catalogue))
    chosen = [catalogue[i] for i in order[:n_base + n_novel]]
    return chosen[:n_base], chosen[n_base:]


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, s: float, angle: float) -> np.ndarray:
    """Pixel-center membership for a shape of bounding size s centred at (cy, cx)."""
    # rotate coordinates for the orientable shapes
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    half = s / 2.0
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        # apex up, base s, height 1.25 s
        height = 1.25 * s
        top = -height / 2.0
        t = (dy - top) / height
        return (t >= 0.0) & (t <= 1.0) & (np.abs(dx) <= half * t)
    if kind == "ring":
        r2 = dx ** 2 + dy ** 2
        return (r2 <= half ** 2) & (r2 >= (0.4 * half) ** 2)
    if kind == "bar":
        return (np.abs(u) <= half) & (np.abs(v) <= 0.325 * s)
    if kind == "cross":
        arm = s / 4.0
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if kind == "ellipse":
        return (u / half) ** 2 + (v / (0.4 * s)) ** 2 <= 1.0
    if kind == "l_shape":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        notch = (dx > 0.0) & (dy < 0.0)
        return inside & ~notch
    raise ValueError(f"unknown shape kind {kind!r}")


def _extent(kind: str, s: float) -> Tuple[float, float]:
    """Half height and half width of the region a shape may occupy (rotation included)."""
    if kind == "triangle":
        return 0.625 * s, 0.5 * s
    if kind == "bar":
        # corner of an s x 0.65s rectangle under any rotation
        return 0.6 * s, 0.6 * s
    return 0.5 * s, 0.5 * s


def _background(rng: np.random.Generator, h: int, w: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    level = rng.uniform(0.35, 0.65)
    freq = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    theta = rng.uniform(0.0, np.pi)
    wave = 0.06 * np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / w + phase)
    gray = level + wave
    noise = rng.uniform(-BACKGROUND_NOISE, BACKGROUND_NOISE, size=(h, w, 3))
    return gray[..., None] + noise


def _foreground(rng: np.random.Generator, cls: ShapeClass, h: int, w: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    phase = rng.uniform(0.0, 2.0 * np.pi)
    theta = rng.uniform(0.0, np.pi)
    shade = 0.9 + 0.1 * np.sin(2.0 * np.pi * cls.stripe_freq * (xx * np.cos(theta) + yy * np.sin(theta)) / w + phase)
    base = np.asarray(cls.color)[None, None, :] * shade[..., None]
    return base + rng.uniform(-cls.noise, cls.noise, size=(h, w, 3))


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to 8-bit levels so images survive a PPM round-trip exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def draw_object(rng: np.random.Generator, cls: ShapeClass, label: int, img_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """One image containing one object of cls, and its pixel-exact mask with the given label."""
    h = w = img_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    s = rng.uniform(*SCALE_RANGE) * w
    half_h, half_w = _extent(cls.kind, s)
    cy = rng.uniform(half_h, h - half_h)
    cx = rng.uniform(half_w, w - half_w)
    angle = rng.uniform(0.0, np.pi) if cls.kind in ("bar", "ellipse") else 0.0
    inside = _shape_mask(cls.kind, yy, xx, cy, cx, s, angle)
    img = np.where(inside[..., None], _foreground(rng, cls, h, w, yy, xx), _background(rng, h, w, yy, xx))
    mask = np.where(inside, label, 0).astype(np.int64)
    return quantize(img), mask


def gen_episode(pool: Sequence[ShapeClass], n_way: int, k_shot: int, img_size: int, seed: int) -> Episode:
    """Deterministic N-way K-shot episode with a single query image."""
    if n_way < 1 or n_way > len(pool):
        raise ValueError(f"n_way must lie in [1, {len(pool)}], got {n_way}")
    if k_shot < 1:
        raise ValueError(f"k_shot must be >= 1, got {k_shot}")
    rng = make_rng(seed, "episode")
    picked = [int(i) for i in rng.choice(len(pool), size=n_way, replace=False)]
    support = []
    for c, idx in enumerate(picked):
        for k in range(k_shot):
            support.append(draw_object(make_rng(seed, "support", c, k), pool[idx], c + 1, img_size))
    q_class = int(rng.integers(0, n_way))
    query_img, query_mask = draw_object(make_rng(seed, "query", 0), pool[picked[q_class]], q_class + 1, img_size)
    logger.debug("episode seed=%d: %d-way %d-shot, classes %s, query class %d", seed, n_way, k_shot, picked, q_class + 1)
    return Episode(support=support, query=[(query_img, query_mask)], class_ids=picked, n_way=n_way, k_shot=k_shot)


@dataclass(frozen=True)
class EpisodeSampler:
    """Indexable episode stream: episode i depends only on (seed, stream, i)."""
    pool: Tuple[ShapeClass, ...]
    n_way: int
    k_shot: int
    img_size: int
    seed: int
    stream: str = "train"

    def episode_seed(self, index: int) -> int:
        return derive_seed(self.seed, self.stream, index)

    def episode(self, index: int) -> Tuple[Episode, int]:
        ep_seed = self.episode_seed(index)
        return gen_episode(self.pool, self.n_way, self.k_shot, self.img_size, ep_seed), ep_seed
