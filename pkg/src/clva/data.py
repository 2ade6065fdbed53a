"""Corpus loading, splits, patch cropping and batch sampling.

Style corpora arrive as a UTF-8 JSON-lines manifest, one object per line
with keys `image` (path relative to the manifest file) and `caption`.
Split manifests serialize as a single JSON document.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageops

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class CorpusError(ValueError):
    """Raised when a corpus cannot be used (empty, unreadable, ...)."""


@dataclass
class ContentImage:
    pixels: np.ndarray  # H x W x 3 in [-1, 1], dims divisible by 16
    source_id: str


@dataclass
class StyleRecord:
    image: np.ndarray
    instruction: str
    record_id: str


@dataclass
class SplitManifest:
    train_style_ids: list[str]
    test_style_ids: list[str]
    train_content_ids: list[str]
    test_content_ids: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_style_ids": self.train_style_ids,
                "test_style_ids": self.test_style_ids,
                "train_content_ids": self.train_content_ids,
                "test_content_ids": self.test_content_ids,
                "seed": self.seed,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            train_style_ids=list(d["train_style_ids"]),
            test_style_ids=list(d["test_style_ids"]),
            train_content_ids=list(d["train_content_ids"]),
            test_content_ids=list(d["test_content_ids"]),
            seed=int(d["seed"]),
        )


@dataclass
class LvaBatch:
    contents: list[ContentImage]
    styles: list[StyleRecord]

    def __post_init__(self):
        if len(self.contents) != len(self.styles) or not self.contents:
            raise ValueError("contents and styles must be non-empty and equal length")


@dataclass
class ContrastiveBatch:
    pair_a: tuple[ContentImage, StyleRecord]
    pair_b: tuple[ContentImage, StyleRecord]

    def __post_init__(self):
        if self.pair_a[0].source_id == self.pair_b[0].source_id:
            raise ValueError("contrastive pair shares a content id")
        if self.pair_a[1].record_id == self.pair_b[1].record_id:
            raise ValueError("contrastive pair shares a style id")


def normalize_caption(text: str) -> str:
    """Lower-case and collapse runs of whitespace; no tokenization here."""
    return " ".join(text.lower().split())


def load_content_corpus(directory: str | Path, target_size: tuple[int, int]) -> list[ContentImage]:
    """Load every decodable raster image under `directory`, resized to
    `target_size` (W, H) and normalized to [-1, 1]. Ordering is
    deterministic by filename; unreadable files are skipped with a warning.
    """
    directory = Path(directory)
    w, h = target_size
    if w % 16 or h % 16:
        raise ValueError(f"target size {w}x{h} must be divisible by 16")
    out: list[ContentImage] = []
    for p in sorted(directory.glob("*")):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            pixels = imageops.load_image(p, target_size=(w, h))
        except Exception as exc:  # corrupt/truncated file
            log.warning("skipping unreadable content image %s: %s", p, exc)
            continue
        out.append(ContentImage(pixels=pixels, source_id=p.stem))
    if not out:
        raise CorpusError(f"no usable content images in {directory}")
    return out


def load_style_corpus(
    manifest_file: str | Path, target_size: tuple[int, int] | None = None
) -> list[StyleRecord]:
    """Load style (image, caption) pairs from a JSON-lines manifest.

    Captions are lower-cased and whitespace-normalized. Lines with a
    missing image file are skipped with a warning; lines with an empty
    caption are rejected. Without `target_size` each image is resized to
    its nearest /16-divisible dimensions so the encoder contract holds.
    """
    manifest_file = Path(manifest_file)
    base = manifest_file.parent
    out: list[StyleRecord] = []
    with open(manifest_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            caption = normalize_caption(str(rec.get("caption", "")))
            if not caption:
                log.warning("%s line %d: empty caption, rejected", manifest_file, lineno + 1)
                continue
            img_path = base / rec["image"]
            if not img_path.exists():
                log.warning("%s line %d: missing image %s, skipped", manifest_file, lineno + 1, img_path)
                continue
            try:
                if target_size is not None:
                    pixels = imageops.load_image(img_path, target_size=target_size)
                else:
                    pixels = imageops.load_image(img_path)
                    h0, w0 = pixels.shape[:2]
                    w1, h1 = imageops.nearest_divisible(w0), imageops.nearest_divisible(h0)
                    if (w1, h1) != (w0, h0):
                        pixels = imageops.load_image(img_path, target_size=(w1, h1))
            except Exception as exc:
                log.warning("%s line %d: unreadable image %s: %s", manifest_file, lineno + 1, img_path, exc)
                continue
            out.append(StyleRecord(image=pixels, instruction=caption, record_id=img_path.stem))
    if not out:
        raise CorpusError(f"no usable style records in {manifest_file}")
    return out


def make_split(style_count: int, content_count: int, n_test: int, seed: int) -> SplitManifest:
    """Deterministic train/test partition by position index.

    Ids are decimal indices into the filename-ordered corpus lists. Test
    ids are drawn without replacement; train/test sets are disjoint.
    """
    if not (0 < n_test < min(style_count, content_count)):
        raise ValueError(
            f"n_test={n_test} out of range for corpora of {style_count}/{content_count}"
        )
    rng = np.random.default_rng(seed)
    test_style = rng.choice(style_count, size=n_test, replace=False)
    test_content = rng.choice(content_count, size=n_test, replace=False)
    test_style_set = set(int(i) for i in test_style)
    test_content_set = set(int(i) for i in test_content)
    return SplitManifest(
        train_style_ids=[str(i) for i in range(style_count) if i not in test_style_set],
        test_style_ids=[str(int(i)) for i in test_style],
        train_content_ids=[str(i) for i in range(content_count) if i not in test_content_set],
        test_content_ids=[str(int(i)) for i in test_content],
        seed=seed,
    )


def select_by_ids(items: list, ids: list[str]) -> list:
    """Pick corpus entries by the split manifest's positional ids."""
    return [items[int(i)] for i in ids]


def patch_boxes(
    height: int, width: int, fraction: float, k: int, rng: np.random.Generator
) -> list[tuple[int, int, int, int]]:
    """Sample k patch rectangles (top, left, ph, pw) uniformly inside bounds."""
    ph = int(round(fraction * height))
    pw = int(round(fraction * width))
    if ph < 1 or pw < 1:
        raise ValueError(f"patch {pw}x{ph} smaller than 1 px (fraction={fraction})")
    if k < 1:
        raise ValueError("k must be >= 1")
    tops = rng.integers(0, height - ph + 1, size=k)
    lefts = rng.integers(0, width - pw + 1, size=k)
    return [(int(t), int(l), ph, pw) for t, l in zip(tops, lefts)]


def crop_patches(
    image: np.ndarray, fraction: float = 1 / 8, k: int = 8, seed: int = 0
) -> list[np.ndarray]:
    """Crop k random patches of round(fraction*H) x round(fraction*W).

    Deterministic per seed; patches are exact sub-arrays of the input.
    """
    h, w = image.shape[:2]
    boxes = patch_boxes(h, w, fraction, k, np.random.default_rng(seed))
    return [image[t : t + ph, l : l + pw] for (t, l, ph, pw) in boxes]


def sample_lva_batch(
    contents: list[ContentImage],
    styles: list[StyleRecord],
    batch_size: int,
    rng: np.random.Generator,
) -> LvaBatch:
    """Uniform sampling with replacement; advances `rng`."""
    if not contents or not styles:
        raise CorpusError("cannot sample from an empty corpus")
    c_idx = rng.integers(0, len(contents), size=batch_size)
    s_idx = rng.integers(0, len(styles), size=batch_size)
    return LvaBatch(
        contents=[contents[int(i)] for i in c_idx],
        styles=[styles[int(i)] for i in s_idx],
    )


def sample_contrastive_batch(
    contents: list[ContentImage],
    styles: list[StyleRecord],
    rng: np.random.Generator,
) -> ContrastiveBatch:
    """Two (content, style) pairs with distinct content ids and style ids."""
    if len({c.source_id for c in contents}) < 2 or len({s.record_id for s in styles}) < 2:
        raise CorpusError("contrastive sampling needs >= 2 distinct contents and styles")
    c1 = contents[int(rng.integers(0, len(contents)))]
    s1 = styles[int(rng.integers(0, len(styles)))]
    c2 = contents[int(rng.integers(0, len(contents)))]
    while c2.source_id == c1.source_id:
        c2 = contents[int(rng.integers(0, len(contents)))]
    s2 = styles[int(rng.integers(0, len(styles)))]
    while s2.record_id == s1.record_id:
        s2 = styles[int(rng.integers(0, len(styles)))]
    return ContrastiveBatch(pair_a=(c1, s1), pair_b=(c2, s2))
