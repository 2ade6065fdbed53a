"""Similarity metrics against semi-ground-truth plus instruction-result
matching, with pluggable activation-extractor and joint-embedder backends.

Pixel metrics run in [0, 1]; callers converting from the internal [-1, 1]
range go through `imageops.to_unit` (the `evaluate` driver does). SSIM and
the embedding similarities are reported x100 in reports.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import imageops
from .data import IMAGE_SUFFIXES

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared pixel difference over [0, 1] images; lower is better."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float((d * d).mean())


def _gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation with a 1-D kernel, valid region only."""
    win = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, win, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, win, axis=0) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 1, averaged over valid positions and
    channels. Inputs in [0, 1]; returns the raw value in [-1, 1].
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} smaller than the {SSIM_WINDOW}px window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = _gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch].astype(np.float64)
        y = b[..., ch].astype(np.float64)
        mu_x = _filter_valid(x, g)
        mu_y = _filter_valid(y, g)
        var_x = _filter_valid(x * x, g) - mu_x * mu_x
        var_y = _filter_valid(y * y, g) - mu_y * mu_y
        cov = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


class ActivationExtractor:
    """Interface: `extract(image) -> 1-D activation vector`, plus a stable
    id. Implementations must be deterministic."""

    id: str
    dim: int

    def extract(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RandomConvExtractor(ActivationExtractor):
    """Builtin fallback: a frozen random-weight conv stack. Useful for
    plumbing and distance arithmetic, not a pretrained perceptual space."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.id = f"random-conv-d{dim}-s{seed}"
        g = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, dim]
        self._convs = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            wgt = torch.randn(cout, cin, 3, 3, generator=g) * (2.0 / (cin * 9)) ** 0.5
            self._convs.append(wgt)

    def extract(self, image: np.ndarray) -> np.ndarray:
        x = imageops.img_to_tensor(image.astype(np.float32))
        with torch.no_grad():
            for wgt in self._convs:
                x = torch.relu(torch.nn.functional.conv2d(x, wgt, stride=2, padding=1))
            feat = x.mean(dim=(2, 3))[0]
        return feat.numpy().astype(np.float64)


class JointEmbedder:
    """Interface: unit-norm image and text embeddings in one space."""

    id: str
    dim: int

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashingEmbedder(JointEmbedder):
    """Builtin fallback joint embedder: hashed bag-of-words for text and a
    fixed random projection of simple image statistics. Deterministic and
    unit-norm; for plumbing tests, not semantics."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.id = f"hashing-d{dim}-s{seed}"
        rng = np.random.default_rng(seed)
        # image stats: means/stds per channel + 8x8 gray thumbnail
        self._proj = rng.standard_normal((dim, 6 + 64))

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(v)
        if n < 1e-12:
            v = np.zeros_like(v)
            v[0] = 1.0
            return v
        return v / n

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        tokens = "".join(c if c.isalnum() else " " for c in text.lower()).split()
        for t in tokens:
            h = zlib.crc32(t.encode("utf-8"))
            v[h % self.dim] += 1.0 if (h >> 16) % 2 == 0 else -1.0
        return self._unit(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        u = imageops.to_unit(image)
        gray = u.mean(axis=2)
        h, w = gray.shape
        ys = np.linspace(0, h - 1, 8).astype(int)
        xs = np.linspace(0, w - 1, 8).astype(int)
        thumb = gray[np.ix_(ys, xs)].ravel()
        stats = np.concatenate([u.mean(axis=(0, 1)), u.std(axis=(0, 1)), thumb])
        return self._unit(self._proj @ stats)


def fad(
    set_a: list[np.ndarray], set_b: list[np.ndarray], extractor: ActivationExtractor
) -> float:
    """Mean Euclidean distance between activations of aligned pairs."""
    if len(set_a) != len(set_b):
        raise ValueError(f"length mismatch {len(set_a)} vs {len(set_b)}")
    dists = [
        float(np.linalg.norm(extractor.extract(a) - extractor.extract(b)))
        for a, b in zip(set_a, set_b)
    ]
    return float(np.mean(dists))


def vls(result: np.ndarray, instruction: str, embedder: JointEmbedder) -> float:
    """Cosine similarity of the joint embeddings, x100."""
    ei = embedder.embed_image(result)
    et = embedder.embed_text(instruction)
    return float(100.0 * np.dot(ei, et) / (np.linalg.norm(ei) * np.linalg.norm(et)))


def rs(
    result: np.ndarray, semi_gt: np.ndarray, instruction: str, embedder: JointEmbedder
) -> float | None:
    """Result VLS relative to the semi-ground-truth VLS, x100. Returns
    None when the reference VLS is too close to zero to divide."""
    v_res = vls(result, instruction, embedder)
    v_ref = vls(semi_gt, instruction, embedder)
    if abs(v_ref) < 1e-6:
        return None
    return 100.0 * v_res / v_ref


@dataclass
class PairMetrics:
    pair_id: str
    mse: float
    ssim: float  # x100
    fad_contrib: float
    vls: float
    rs: float | None

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "mse": self.mse,
            "ssim": self.ssim,
            "fad_contrib": self.fad_contrib,
            "vls": self.vls,
            "rs": self.rs,
        }


@dataclass
class MetricReport:
    per_pair: list[PairMetrics]
    aggregate: dict[str, float]
    backend_ids: dict[str, str]
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_pair": [p.to_dict() for p in self.per_pair],
            "aggregate": self.aggregate,
            "backend_ids": self.backend_ids,
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["pair_id", "mse", "ssim", "fad_contrib", "vls", "rs"]
            )
            writer.writeheader()
            for p in self.per_pair:
                writer.writerow(p.to_dict())


def _find_image(directory: Path, pair_id: str) -> Path | None:
    for suffix in sorted(IMAGE_SUFFIXES):
        p = directory / f"{pair_id}{suffix}"
        if p.exists():
            return p
    return None


def read_instructions_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[str(rec["pair_id"])] = str(rec["instruction"])
    return out


def evaluate(
    results_dir: str | Path,
    semi_gt_dir: str | Path,
    instructions_manifest: str | Path,
    extractor: ActivationExtractor | None = None,
    embedder: JointEmbedder | None = None,
) -> MetricReport:
    """Compute per-pair and aggregate metrics over two directories keyed by
    pair id. Pairs missing either image are skipped and listed."""
    extractor = extractor or RandomConvExtractor()
    embedder = embedder or HashingEmbedder()
    results_dir, semi_gt_dir = Path(results_dir), Path(semi_gt_dir)
    instructions = read_instructions_manifest(instructions_manifest)

    per_pair: list[PairMetrics] = []
    skipped: list[dict] = []
    for pair_id, instruction in sorted(instructions.items()):
        rp = _find_image(results_dir, pair_id)
        gp = _find_image(semi_gt_dir, pair_id)
        if rp is None or gp is None:
            skipped.append({"pair_id": pair_id, "reason": "missing result" if rp is None else "missing semi_gt"})
            continue
        result = imageops.load_image(rp)
        semi = imageops.load_image(gp)
        if result.shape != semi.shape:
            skipped.append({"pair_id": pair_id, "reason": "shape mismatch"})
            continue
        u_res, u_gt = imageops.to_unit(result), imageops.to_unit(semi)
        per_pair.append(
            PairMetrics(
                pair_id=pair_id,
                mse=mse(u_res, u_gt),
                ssim=100.0 * ssim(u_res, u_gt),
                fad_contrib=float(
                    np.linalg.norm(extractor.extract(result) - extractor.extract(semi))
                ),
                vls=vls(result, instruction, embedder),
                rs=rs(result, semi, instruction, embedder),
            )
        )

    def _mean(vals: list[float]) -> float:
        return float(np.mean(vals)) if vals else float("nan")

    aggregate = {
        "mse": _mean([p.mse for p in per_pair]),
        "ssim": _mean([p.ssim for p in per_pair]),
        "fad": _mean([p.fad_contrib for p in per_pair]),
        "vls": _mean([p.vls for p in per_pair]),
        "rs": _mean([p.rs for p in per_pair if p.rs is not None]),
        "pairs": float(len(per_pair)),
    }
    return MetricReport(
        per_pair=per_pair,
        aggregate=aggregate,
        backend_ids={"extractor": extractor.id, "embedder": embedder.id},
        skipped=skipped,
    )
