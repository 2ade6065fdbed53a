"""Procedural desk-scale corpus: textured style images with templated
captions, simple multi-region content scenes, and a procedural stylizer
that serves as the toy stand-in for externally produced semi-ground-truth.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imageops
from .data import ContentImage, StyleRecord

# Named palette in [0, 1] RGB. The six colors sit near cube corners so a
# dimmed or tinted rendition still classifies to its own color under
# nearest-neighbor in RGB.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.90, 0.10),
    "blue": (0.10, 0.10, 0.90),
    "yellow": (0.95, 0.95, 0.10),
    "magenta": (0.90, 0.10, 0.90),
    "cyan": (0.10, 0.90, 0.90),
}

PATTERNS = ("solid", "horizontal stripes", "vertical stripes", "checkerboard")

# the two stripe/checker shades average back to the palette color
_BRIGHT_FACTOR = 1.15
_DARK_FACTOR = 0.85


def caption_for(color: str, pattern: str) -> str:
    if pattern == "solid":
        return f"{color} solid color"
    if pattern == "checkerboard":
        return f"{color} checkerboard pattern"
    return f"{color} {pattern}"


def parse_caption(caption: str) -> tuple[str, str]:
    """Recover (color, pattern) from a templated toy caption."""
    tokens = caption.lower().split()
    color = next((t for t in tokens if t in PALETTE), None)
    if color is None:
        raise ValueError(f"no palette color in caption {caption!r}")
    if "solid" in tokens:
        pattern = "solid"
    elif "checkerboard" in tokens:
        pattern = "checkerboard"
    elif "horizontal" in tokens:
        pattern = "horizontal stripes"
    elif "vertical" in tokens:
        pattern = "vertical stripes"
    else:
        raise ValueError(f"no pattern in caption {caption!r}")
    return color, pattern


def render_texture(
    color01: tuple[float, float, float],
    pattern: str,
    size: tuple[int, int],
    period: int | None = None,
) -> np.ndarray:
    """Rasterize one texture as H x W x 3 in [-1, 1]."""
    w, h = size
    period = period or max(2, min(w, h) // 8)
    base = np.array(color01, dtype=np.float32)
    bright = np.clip(base * _BRIGHT_FACTOR, 0.0, 1.0)
    dark = base * _DARK_FACTOR
    if pattern == "solid":
        return imageops.from_unit(np.broadcast_to(base, (h, w, 3)).copy())
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "horizontal stripes":
        mask = (yy // period) % 2
    elif pattern == "vertical stripes":
        mask = (xx // period) % 2
    elif pattern == "checkerboard":
        mask = ((yy // period) + (xx // period)) % 2
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    img01 = np.where(mask[..., None] == 0, bright, dark).astype(np.float32)
    return imageops.from_unit(img01)


def _render_scene(w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient background with a few solid shapes, in [-1, 1]."""
    top = rng.uniform(0.15, 0.9, size=3)
    bottom = rng.uniform(0.15, 0.9, size=3)
    t = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    img = (1 - t) * top[None, None, :] + t * bottom[None, None, :]
    img = np.repeat(img, w, axis=1).astype(np.float32)
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
        if rng.random() < 0.5:
            x0 = int(rng.integers(0, w - w // 4))
            y0 = int(rng.integers(0, h - h // 4))
            x1 = x0 + int(rng.integers(w // 8, w // 3))
            y1 = y0 + int(rng.integers(h // 8, h // 3))
            img[y0 : min(y1, h), x0 : min(x1, w)] = color
        else:
            cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
            r = int(rng.integers(min(w, h) // 12, min(w, h) // 5))
            yy, xx = np.mgrid[0:h, 0:w]
            img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = color
    return imageops.from_unit(np.clip(img, 0.0, 1.0))


def generate_toy_corpus(
    n_styles: int, n_contents: int, size: tuple[int, int], seed: int
) -> tuple[list[ContentImage], list[StyleRecord]]:
    """Deterministic procedural corpus; `size` is (W, H), divisible by 16."""
    w, h = size
    if w % 16 or h % 16:
        raise ValueError(f"size {w}x{h} must be divisible by 16")
    rng = np.random.default_rng(seed)
    color_names = list(PALETTE)
    n_combos = len(color_names) * len(PATTERNS)
    styles: list[StyleRecord] = []
    for i in range(n_styles):
        if i < n_combos:
            color = color_names[i % len(color_names)]
            pattern = PATTERNS[(i // len(color_names)) % len(PATTERNS)]
            scale = 1
        else:
            # texture-scale variants; the pattern offset keeps these away
            # from the combos a compositional holdout removes
            j = i - n_combos
            ci = j % len(color_names)
            color = color_names[ci]
            pattern = PATTERNS[(ci + 2) % len(PATTERNS)]
            scale = 2 + j // len(color_names)
        period = max(2, (min(w, h) // 8) * scale)
        styles.append(
            StyleRecord(
                image=render_texture(PALETTE[color], pattern, (w, h), period),
                instruction=caption_for(color, pattern),
                record_id=f"style-{i:04d}",
            )
        )
    contents = [
        ContentImage(pixels=_render_scene(w, h, rng), source_id=f"content-{i:04d}")
        for i in range(n_contents)
    ]
    return contents, styles


def holdout_by_pattern(styles: list[StyleRecord]) -> tuple[list[StyleRecord], list[StyleRecord]]:
    """Compositional split: for each palette color, hold out exactly one
    (color, pattern) combo; the color still appears in training under the
    other patterns, and the pattern under other colors."""
    color_names = list(PALETTE)
    held = {
        (color, PATTERNS[ci % len(PATTERNS)]) for ci, color in enumerate(color_names)
    }
    train, test = [], []
    for s in styles:
        (test if parse_caption(s.instruction) in held else train).append(s)
    return train, test


def luminance01(img: np.ndarray) -> np.ndarray:
    """Rec.601 luminance of a [-1, 1] image, in [0, 1]."""
    u = imageops.to_unit(img)
    return 0.299 * u[..., 0] + 0.587 * u[..., 1] + 0.114 * u[..., 2]


def procedural_stylize(content: np.ndarray, instruction: str) -> np.ndarray:
    """Toy semi-ground-truth: the caption's texture modulated by the
    content's luminance, so scene structure survives under the new style.
    """
    color, pattern = parse_caption(instruction)
    h, w = content.shape[:2]
    tex01 = imageops.to_unit(render_texture(PALETTE[color], pattern, (w, h)))
    lum = luminance01(content)[..., None]
    out01 = tex01 * (0.6 + 0.4 * lum)
    return imageops.from_unit(np.clip(out01, 0.0, 1.0).astype(np.float32))


def write_toy_corpus(
    root: str | Path, n_styles: int, n_contents: int, size: tuple[int, int], seed: int
) -> Path:
    """Materialize the toy corpus on disk.

    Layout: `contents/*.png`, `styles/*.png`, and `styles/manifest.jsonl`
    in the loader's JSON-lines format. Returns the corpus root.
    """
    root = Path(root)
    contents, styles = generate_toy_corpus(n_styles, n_contents, size, seed)
    (root / "contents").mkdir(parents=True, exist_ok=True)
    (root / "styles").mkdir(parents=True, exist_ok=True)
    for c in contents:
        imageops.save_image(c.pixels, root / "contents" / f"{c.source_id}.png")
    with open(root / "styles" / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for s in styles:
            imageops.save_image(s.image, root / "styles" / f"{s.record_id}.png")
            fh.write(json.dumps({"image": f"{s.record_id}.png", "caption": s.instruction}) + "\n")
    return root
