"""Procedural "shape world" images with exact segmentation masks.

Every sample is a pure function of ``(spec, split, index)``. Even indices are
positives (a glyph of the target category, mask = that glyph); odd indices are
negatives (a glyph of another category, empty mask). Any sample may also carry
a distractor glyph and background clutter.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

GLYPHS = ("disk", "cross", "triangle", "ring", "bar")
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class ShapeWorldSpec:
    categories: tuple = GLYPHS
    image_size: int = 32
    clutter: float = 0.5          # probability of a distractor glyph on a positive
    noise: float = 0.1            # std of additive pixel noise
    radius: tuple = (5.0, 9.0)
    sizes: dict = field(default_factory=lambda: {"train": 2000, "val": 400, "test": 400})
    seed: int = 0

    def __post_init__(self):
        bad = [c for c in self.categories if c not in GLYPHS]
        if bad:
            raise ValueError(f"unknown glyphs {bad}; available: {GLYPHS}")
        if len(set(self.categories)) < 2:
            raise ValueError("need at least two categories (negatives use the others)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        d["radius"] = list(self.radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeWorldSpec":
        d = dict(d)
        if "categories" in d:
            d["categories"] = tuple(d["categories"])
        if "radius" in d:
            d["radius"] = tuple(d["radius"])
        return cls(**d)


def _glyph_mask(kind: str, n: int, cy: float, cx: float, r: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    rho = np.hypot(u, v)
    if kind == "disk":
        return rho <= r
    if kind == "ring":
        return (rho <= r) & (rho >= 0.55 * r)
    if kind == "cross":
        w = 0.28 * r
        return ((np.abs(u) <= w) | (np.abs(v) <= w)) & (np.abs(u) <= r) & (np.abs(v) <= r)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = theta + np.pi / 2 + 2 * np.pi * k / 3
            # half-plane facing away from vertex k, at inradius r/2
            inside &= (-(np.cos(a) * dx + np.sin(a) * dy)) <= 0.5 * r
        return inside
    raise ValueError(kind)


def _sample_rng(spec: ShapeWorldSpec, split: str, index: int, category: str) -> np.random.Generator:
    cat = spec.categories.index(category)
    ss = np.random.SeedSequence([spec.seed, SPLITS[split], cat, index])
    return np.random.Generator(np.random.PCG64(ss))


def _place(rng, spec: ShapeWorldSpec):
    n = spec.image_size
    r = rng.uniform(*spec.radius)
    margin = r + 1.0
    cy, cx = rng.uniform(margin, n - margin, size=2)
    return cy, cx, r, rng.uniform(0, 2 * np.pi)


def generate(spec: ShapeWorldSpec, split: str, index: int, category: Optional[str] = None):
    """Return ``(image (1,H,W) float32, label int, mask (1,H,W) float32)`` for one sample."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    category = category or spec.categories[0]
    if category not in spec.categories:
        raise ValueError(f"category {category!r} not in spec")
    if not 0 <= index < spec.sizes[split]:
        raise IndexError(f"index {index} outside split {split!r} of size {spec.sizes[split]}")
    rng = _sample_rng(spec, split, index, category)
    n = spec.image_size
    label = int(index % 2 == 0)
    others = [c for c in spec.categories if c != category]
    img = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    if label:
        cy, cx, r, th = _place(rng, spec)
        mask = _glyph_mask(category, n, cy, cx, r, th)
        img[mask] = rng.uniform(0.6, 1.0)
        distract = rng.uniform() < spec.clutter
    else:
        distract = True
    if distract:
        kind = others[rng.integers(len(others))]
        for _ in range(20):
            cy, cx, r, th = _place(rng, spec)
            m = _glyph_mask(kind, n, cy, cx, r, th)
            if not (m & mask).any():
                break
        img[m & ~mask] = rng.uniform(0.6, 1.0)
    # low-contrast clutter speckles
    k = rng.integers(0, 6)
    ys, xs = rng.integers(0, n, size=(2, k))
    img[ys, xs] = np.maximum(img[ys, xs], rng.uniform(0.2, 0.5, size=k))
    img += spec.noise * rng.standard_normal((n, n))
    return img[None].astype(np.float32), label, mask[None].astype(np.float32)


def make_split(spec: ShapeWorldSpec, category: str, split: str, count: Optional[int] = None,
               start: int = 0, positives_only: bool = False):
    """Stack samples into arrays ``(images (N,1,H,W), labels (N,), masks (N,1,H,W))``."""
    size = spec.sizes[split]
    if positives_only:
        idx = list(range(start * 2, size, 2))
    else:
        idx = list(range(start, size))
    if count is not None:
        if count > len(idx):
            raise ValueError(f"split {split!r} has only {len(idx)} samples, asked for {count}")
        idx = idx[:count]
    out = [generate(spec, split, i, category) for i in idx]
    if not out:
        n = spec.image_size
        return (np.zeros((0, 1, n, n), np.float32), np.zeros(0, np.int64), np.zeros((0, 1, n, n), np.float32))
    imgs, labels, masks = zip(*out)
    return np.stack(imgs), np.asarray(labels, dtype=np.int64), np.stack(masks)


_MAGIC = b"SHWD"


def export_split(path, spec: ShapeWorldSpec, category: str, split: str, count: Optional[int] = None) -> Path:
    """Flat little-endian dump: magic, u32 version, u32 N, u32 H, u32 W, then
    per sample: i32 label, f32[H*W] image, u8[H*W] mask."""
    imgs, labels, masks = make_split(spec, category, split, count)
    n, _, h, w = imgs.shape
    p = Path(path)
    with p.open("wb") as fh:
        fh.write(_MAGIC + struct.pack("<IIII", 1, n, h, w))
        for i in range(n):
            fh.write(struct.pack("<i", int(labels[i])))
            fh.write(imgs[i, 0].astype("<f4").tobytes())
            fh.write(masks[i, 0].astype(np.uint8).tobytes())
    return p


def read_export(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a shape-world export")
    _, n, h, w = struct.unpack_from("<IIII", raw, 4)
    off = 20
    imgs = np.empty((n, 1, h, w), np.float32)
    masks = np.empty((n, 1, h, w), np.float32)
    labels = np.empty(n, np.int64)
    for i in range(n):
        labels[i] = struct.unpack_from("<i", raw, off)[0]
        off += 4
        imgs[i, 0] = np.frombuffer(raw, "<f4", h * w, off).reshape(h, w)
        off += 4 * h * w
        masks[i, 0] = np.frombuffer(raw, np.uint8, h * w, off).reshape(h, w)
        off += h * w
    return imgs, labels, masks
