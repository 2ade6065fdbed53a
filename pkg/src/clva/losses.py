"""Scalar training objectives.

All L2-style terms are mean squared differences so losses stay comparable
across feature shapes (a `reduction="sum"` switch exists for ablation).
Probabilities are clamped to [EPS, 1-EPS] before logs so a saturated
discriminator yields finite losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass
class LvaLossReport:
    rec: float
    psd: float
    cm: float
    sm: float
    g_total: float
    d_loss: float
    clamped: bool = False

    def to_dict(self) -> dict:
        return {
            "rec": self.rec,
            "psd": self.psd,
            "cm": self.cm,
            "sm": self.sm,
            "g_total": self.g_total,
            "d_loss": self.d_loss,
            "clamped": self.clamped,
        }


@dataclass
class CrLossReport:
    c_content: float
    c_style: float
    r_style: float
    crt_total: float

    def to_dict(self) -> dict:
        return {
            "c_content": self.c_content,
            "c_style": self.c_style,
            "r_style": self.r_style,
            "crt_total": self.crt_total,
        }


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    t = torch.as_tensor(x)
    return t if t.dtype == torch.float64 else t.double()


def _reduce_sq(diff: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return (diff * diff).mean()
    if reduction == "sum":
        return (diff * diff).sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def squared_difference(a, b, reduction: str = "mean") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _reduce_sq(a - b, reduction)


def clamp_probs(p) -> torch.Tensor:
    return _as_tensor(p).clamp(EPS, 1.0 - EPS)


def probs_were_clamped(p) -> bool:
    t = _as_tensor(p)
    return bool(((t < EPS) | (t > 1.0 - EPS)).any())


def reconstruction_loss(recon, original, reduction: str = "mean") -> torch.Tensor:
    """Mean squared pixel difference between reconstruction and input."""
    return squared_difference(recon, original, reduction)


def patch_style_loss(d_fake, nonsaturating: bool = False) -> torch.Tensor:
    """Generator-side patch objective, averaged over patches.

    Saturating form log(1-d) per the adversarial setup; the nonsaturating
    substitute -log(d) is a stability switch, off by default.
    """
    d = clamp_probs(d_fake)
    if nonsaturating:
        return -torch.log(d).mean()
    return torch.log(1.0 - d).mean()


def discriminator_loss(d_fake, d_real) -> torch.Tensor:
    """log(1-d_fake) + log(d_real), each averaged; the discriminator
    maximizes this."""
    return torch.log(1.0 - clamp_probs(d_fake)).mean() + torch.log(clamp_probs(d_real)).mean()


def matching_losses(
    content_out, style_out, content_ref, style_ref, reduction: str = "mean"
) -> tuple[torch.Tensor, torch.Tensor]:
    """(content matching, style matching): mean squared feature distances
    between the re-encoded result and its content/style references."""
    cm = squared_difference(content_out, content_ref, reduction)
    sm = squared_difference(style_out, style_ref, reduction)
    return cm, sm


def consistent_matching(
    feats_11, feats_12, feats_21, feats_22, reduction: str = "mean"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-result agreement. Each feats_ij is (content_map, style_vec)
    of the result for content i under instruction j.

    Same content => matching content maps (11 vs 12, 21 vs 22); same
    instruction => matching style vectors (11 vs 21, 12 vs 22).
    """
    c11, s11 = feats_11
    c12, s12 = feats_12
    c21, s21 = feats_21
    c22, s22 = feats_22
    c_content = squared_difference(c11, c12, reduction) + squared_difference(c21, c22, reduction)
    c_style = squared_difference(s11, s21, reduction) + squared_difference(s12, s22, reduction)
    return c_content, c_style


def relative_matching(
    style_11, style_12, style_21, style_22, style_ref_a, style_ref_b, reduction: str = "mean"
) -> torch.Tensor:
    """Cross-instruction style distance weighted by how similar the two
    reference style images are; cosine clamped to [0, 1] so unrelated or
    opposed style pairs contribute nothing."""
    dist = squared_difference(style_11, style_12, reduction) + squared_difference(
        style_21, style_22, reduction
    )
    a, b = _as_tensor(style_ref_a), _as_tensor(style_ref_b)
    weight = F.cosine_similarity(a.flatten(), b.flatten(), dim=0).clamp(0.0, 1.0)
    return dist * weight


def contrastive_loss(c_content, c_style, r_style):
    return c_content + c_style + r_style


def generator_total(rec, psd, cm, sm):
    return rec + psd + cm + sm
