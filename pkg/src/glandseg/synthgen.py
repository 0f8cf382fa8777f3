"""Synthetic gland images with exact ground truth.

Each image holds a few non-overlapping rotated ellipses: a dark elliptical
ring (the border) around a mid-tone textured interior, on a light speckled
background. Intensity bands keep the border strictly darker than everything
else, so the darkest-region cue holds by construction, while per-gland hue
jitter and an intensity ramp give interiors the within-gland appearance
variation the grouping losses are meant to absorb. Generation is fully
deterministic per (config, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .imaging import (
    BORDER,
    INTERIOR,
    Image,
    LabelMap,
    proposal_map,
    save_image,
    save_label_map,
    save_mask,
)
from .spm import fill_interior

PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and appearance ranges for generated images."""

    height: int = 128
    width: int = 128
    min_glands: int = 1
    max_glands: int = 4
    min_radius: float = 12.0
    max_radius: float = 36.0
    min_border: float = 2.0
    max_border: float = 5.0
    border_low: float = 0.15
    border_high: float = 0.35
    interior_low: float = 0.45
    interior_high: float = 0.85
    background_low: float = 0.75
    background_high: float = 0.95
    hue_jitter: float = 0.06
    interior_ramp: float = 0.08
    interior_texture: float = 0.02
    border_texture: float = 0.015
    background_speckle: float = 0.04
    noise_sigma: float = 0.03
    margin: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"image extent too small: {self.height}x{self.width}")
        if not 1 <= self.min_glands <= self.max_glands:
            raise ValueError("gland count range must satisfy 1 <= min <= max")
        if not 4 <= self.min_radius <= self.max_radius:
            raise ValueError("radius range must satisfy 4 <= min <= max")
        if not 2 <= self.min_border <= self.max_border:
            raise ValueError("border thickness range must satisfy 2 <= min <= max")
        if self.min_radius < self.min_border + 3:
            raise ValueError("min_radius must exceed min_border by at least 3")
        for name in ("border", "interior", "background"):
            lo = getattr(self, f"{name}_low")
            hi = getattr(self, f"{name}_high")
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{name} intensity range must satisfy 0 <= low <= high <= 1")
        if self.border_high >= self.interior_low:
            raise ValueError("border intensities must sit strictly below interior")
        if self.border_high >= self.background_low:
            raise ValueError("border intensities must sit strictly below background")
        for name in ("hue_jitter", "interior_ramp", "interior_texture",
                     "border_texture", "background_speckle", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin < 2:
            raise ValueError(f"margin must be >= 2, got {self.margin}")
        if 2 * (self.min_radius + self.margin) + 2 > min(self.height, self.width):
            raise ValueError("even the smallest gland cannot fit inside the frame")


@dataclass(frozen=True)
class _Gland:
    cy: float
    cx: float
    a: float
    b: float
    theta: float
    thickness: float


def _place_glands(cfg: SynthConfig, rng: np.random.Generator) -> list[_Gland]:
    n_target = int(rng.integers(cfg.min_glands, cfg.max_glands + 1))
    placed: list[_Gland] = []
    for _ in range(n_target):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            a = float(rng.uniform(cfg.min_radius, cfg.max_radius))
            b = a * float(rng.uniform(0.65, 1.0))
            theta = float(rng.uniform(0.0, np.pi))
            t = float(rng.uniform(cfg.min_border, cfg.max_border))
            t = min(t, b - 2.0)
            reff = max(a, b)
            lo_r, hi_r = cfg.margin + reff, cfg.height - 1 - cfg.margin - reff
            lo_c, hi_c = cfg.margin + reff, cfg.width - 1 - cfg.margin - reff
            if lo_r > hi_r or lo_c > hi_c:
                continue
            cy = float(rng.uniform(lo_r, hi_r))
            cx = float(rng.uniform(lo_c, hi_c))
            ok = all((cy - g.cy) ** 2 + (cx - g.cx) ** 2
                     > (reff + max(g.a, g.b) + cfg.margin) ** 2 for g in placed)
            if ok:
                placed.append(_Gland(cy, cx, a, b, theta, t))
                break
        else:
            if len(placed) < cfg.min_glands:
                raise RuntimeError(
                    f"could not place {cfg.min_glands} glands in a "
                    f"{cfg.height}x{cfg.width} frame after {PLACEMENT_ATTEMPTS} tries")
            break
    return placed


def _gland_masks(g: _Gland, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Border ring and filled interior of one gland."""
    yy = np.arange(h, dtype=np.float64)[:, None] - g.cy
    xx = np.arange(w, dtype=np.float64)[None, :] - g.cx
    u = xx * np.cos(g.theta) + yy * np.sin(g.theta)
    v = -xx * np.sin(g.theta) + yy * np.cos(g.theta)
    outer = (u / g.a) ** 2 + (v / g.b) ** 2 <= 1.0
    inner = (u / (g.a - g.thickness)) ** 2 + (v / (g.b - g.thickness)) ** 2 <= 1.0
    border = outer & ~inner
    return border, fill_interior(border)


def generate_gland_image(cfg: SynthConfig,
                         seed: int) -> tuple[Image, np.ndarray, LabelMap]:
    """Render one image; returns (image, binary gland mask, 3-class map)."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    glands = _place_glands(cfg, rng)

    canvas = np.empty((3, h, w), dtype=np.float64)
    bg_base = rng.uniform(cfg.background_low, cfg.background_high, size=3)
    speckle = rng.normal(0.0, cfg.background_speckle, size=(h, w)) \
        if cfg.background_speckle > 0 else np.zeros((h, w))
    for ch in range(3):
        canvas[ch] = np.clip(bg_base[ch] + speckle, cfg.background_low,
                             cfg.background_high)

    gt3 = np.zeros((h, w), dtype=np.uint8)
    for g in glands:
        border, interior = _gland_masks(g, h, w)
        gt3[border] = BORDER
        gt3[interior] = INTERIOR

        mid_lo = cfg.interior_low + cfg.hue_jitter
        mid_hi = max(cfg.interior_high - cfg.hue_jitter, mid_lo)
        base = float(rng.uniform(mid_lo, mid_hi))
        hue = rng.uniform(-cfg.hue_jitter, cfg.hue_jitter, size=3)
        ramp_dir = float(rng.uniform(0.0, 2 * np.pi))
        yy = np.arange(h, dtype=np.float64)[:, None] - g.cy
        xx = np.arange(w, dtype=np.float64)[None, :] - g.cx
        ramp = (np.cos(ramp_dir) * xx + np.sin(ramp_dir) * yy) / max(g.a, g.b)
        texture = rng.normal(0.0, cfg.interior_texture, size=(h, w)) \
            if cfg.interior_texture > 0 else np.zeros((h, w))
        field = base + cfg.interior_ramp * ramp + texture
        for ch in range(3):
            canvas[ch][interior] = np.clip(field + hue[ch], cfg.interior_low,
                                           cfg.interior_high)[interior]

        b_base = float(rng.uniform(cfg.border_low + cfg.border_texture,
                                   max(cfg.border_high - cfg.border_texture,
                                       cfg.border_low + cfg.border_texture)))
        b_hue = rng.uniform(-cfg.hue_jitter / 2, cfg.hue_jitter / 2, size=3)
        b_texture = rng.normal(0.0, cfg.border_texture, size=(h, w)) \
            if cfg.border_texture > 0 else np.zeros((h, w))
        for ch in range(3):
            canvas[ch][border] = np.clip(b_base + b_hue[ch] + b_texture,
                                         cfg.border_low, cfg.border_high)[border]

    if cfg.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise_sigma, size=(3, h, w))
    img = Image(np.clip(canvas, 0.0, 1.0))
    return img, gt3 > 0, proposal_map(gt3)


def generate_dataset(out_dir: str, n: int, cfg: SynthConfig,
                     seed: int | None = None) -> dict:
    """Write n image/ground-truth pairs plus a manifest; returns the manifest.

    Item i uses seed base_seed + i, so items are independent of dataset
    size and generation order.
    """
    if n < 0:
        raise ValueError(f"item count must be >= 0, got {n}")
    base_seed = cfg.seed if seed is None else seed
    for sub in ("images", "gt", "gt3"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    items = []
    for i in range(n):
        img, mask, gt3 = generate_gland_image(cfg, base_seed + i)
        name = f"{i:03d}.png"
        save_image(img, os.path.join(out_dir, "images", name))
        save_mask(mask, os.path.join(out_dir, "gt", name))
        save_label_map(gt3, os.path.join(out_dir, "gt3", name))
        items.append({"index": i, "seed": base_seed + i,
                      "image": f"images/{name}", "gt": f"gt/{name}",
                      "gt3": f"gt3/{name}"})
    manifest = {"count": n, "seed": base_seed,
                "height": cfg.height, "width": cfg.width, "items": items}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
