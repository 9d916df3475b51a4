"""Synthetic seven-class "expression" faces so the pipeline runs without external data.

Each class fixes the brow slant, eye size and mouth shape of a cartoon face;
position, scale, skin tone and noise vary per sample. Shapes are kept
coarse enough to survive a 4x bicubic downscale.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, ImageDraw

__all__ = ["EXPRESSIONS", "render_face", "make_toy_dataset"]

EXPRESSIONS = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")

# per class: brow inner-end offset (+ down), eye radius, mouth kind, mouth height
_STYLE = {
    "angry": (0.10, 0.045, "flat", 0.0),
    "disgust": (0.06, 0.035, "wave", 0.05),
    "fear": (-0.08, 0.075, "small_o", 0.05),
    "happy": (0.0, 0.05, "smile", 0.12),
    "sad": (-0.10, 0.05, "frown", 0.10),
    "surprise": (-0.14, 0.08, "big_o", 0.14),
    "neutral": (0.0, 0.05, "none", 0.0),
}


def render_face(label: int, size: int, rng: np.random.Generator, supersample: int = 4) -> np.ndarray:
    """Draw one HxWx3 uint8 face of class ``label``."""
    brow, eye_r, mouth, mouth_h = _STYLE[EXPRESSIONS[label]]
    s = size * supersample
    bg = rng.integers(40, 110, size=3)
    skin = np.clip(np.array([200, 160, 130]) + rng.integers(-30, 30, size=3), 0, 255)
    img = Image.new("RGB", (s, s), tuple(int(v) for v in bg))
    d = ImageDraw.Draw(img)

    cx = s * (0.5 + rng.uniform(-0.05, 0.05))
    cy = s * (0.5 + rng.uniform(-0.05, 0.05))
    scale = s * rng.uniform(0.85, 1.0)
    d.ellipse(
        [cx - 0.42 * scale, cy - 0.48 * scale, cx + 0.42 * scale, cy + 0.48 * scale],
        fill=tuple(int(v) for v in skin),
    )
    dark = (30, 20, 20)
    lw = max(1, int(0.06 * scale))

    for side in (-1, 1):
        ex, ey = cx + side * 0.17 * scale, cy - 0.12 * scale
        r = eye_r * scale
        d.ellipse([ex - r, ey - r, ex + r, ey + r], fill=dark)
        by = cy - 0.27 * scale
        outer = (ex + side * 0.10 * scale, by)
        inner = (ex - side * 0.10 * scale, by + brow * scale)
        d.line([outer, inner], fill=dark, width=lw)

    my = cy + 0.22 * scale
    half = 0.18 * scale
    h = mouth_h * scale
    if mouth == "flat":
        d.line([(cx - half, my), (cx + half, my)], fill=dark, width=lw)
    elif mouth == "smile":
        d.arc([cx - half, my - h, cx + half, my + h], 0, 180, fill=dark, width=lw)
    elif mouth == "frown":
        d.arc([cx - half, my, cx + half, my + 2 * h], 180, 360, fill=dark, width=lw)
    elif mouth == "wave":
        xs = np.linspace(cx - half, cx + half, 24)
        ys = my + h * np.sin((xs - cx) / half * 2 * np.pi)
        d.line(list(zip(xs, ys)), fill=dark, width=lw)
    elif mouth in ("small_o", "big_o"):
        r = (0.06 if mouth == "small_o" else 0.12) * scale
        d.ellipse([cx - r, my - r, cx + r, my + r], fill=dark)

    img = img.resize((size, size), Image.BOX)
    arr = np.asarray(img, dtype=np.float64)
    arr = arr + rng.normal(0.0, 8.0, size=arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def make_toy_dataset(
    root: Union[str, Path], per_class: int = 10, size: int = 48, seed: int = 0
) -> Path:
    """Write ``<root>/<class>/<index>.png`` for every expression class (flat, unsplit layout)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label, name in enumerate(EXPRESSIONS):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(render_face(label, size, rng)).save(d / f"{name}_{i:04d}.png", format="PNG")
    return root
