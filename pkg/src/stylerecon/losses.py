"""Training objectives for the translators, the discriminator and the reconstruction network.

All losses are minimized. Discriminator convention: D -> 1 means "translated
image", D -> 0 means "actual rendering".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    style_w: float = 1.0
    content_w: float = 400.0
    jaccard_delta: float = 0.25
    noise_sigma: float = 0.15
    huber_threshold: float = 1.0

    def __post_init__(self):
        for name in ("style_w", "content_w", "noise_sigma", "huber_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.jaccard_delta < 1.0:
            raise ValueError("jaccard_delta must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def _clamp(scores):
    return torch.as_tensor(scores).clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def loss_discriminator(scores_rendered, scores_translated) -> torch.Tensor:
    """``-mean[log D(translated) + log(1 - D(rendered))]``."""
    r, t = _clamp(scores_rendered), _clamp(scores_translated)
    return -(torch.log(t).mean() + torch.log1p(-r).mean())


def loss_style(scores_translated) -> torch.Tensor:
    """``mean log(1 - D(translated))``; minimizing pushes translated scores towards 1."""
    return torch.log1p(-_clamp(scores_translated)).mean()


def loss_style_non_saturating(scores_translated) -> torch.Tensor:
    """``-mean log D(translated)``: same fixed point as :func:`loss_style` without its vanishing gradient.

    With D trained to score renderings high, ``loss_style`` has slope
    ``-D / (1 - D)`` in the logit, which vanishes exactly when D confidently
    rejects the translation; this form has slope ``-(1 - D)`` instead.
    """
    return -torch.log(_clamp(scores_translated)).mean()


def relaxed_jaccard(a, b) -> torch.Tensor:
    """Soft IoU ``sum(ab) / sum(a + b - ab)`` over the trailing two (spatial) axes.

    Zero where the union is empty.
    """
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    inter = (a * b).sum(dim=(-1, -2))
    union = (a + b - a * b).sum(dim=(-1, -2))
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


def loss_jaccard(rendered, translated, delta: float = 0.25) -> torch.Tensor:
    """Hinge ``mean max(0, delta - J(alpha_rendered, alpha_translated))`` over the batch.

    Takes ``(B, 4, H, W)`` images and compares their alpha channels.
    """
    j = relaxed_jaccard(rendered[:, 3], translated[:, 3])
    return torch.clamp(delta - j, min=0.0).mean()


def huber(diff, threshold: float = 1.0) -> torch.Tensor:
    """Elementwise Huber penalty: ``d^2 / 2`` inside the threshold, linear outside."""
    a = diff.abs()
    quad = 0.5 * a ** 2
    lin = threshold * (a - 0.5 * threshold)
    return torch.where(a <= threshold, quad, lin)


def loss_cycle(x, x_roundtrip, threshold: float = 1.0) -> torch.Tensor:
    if x.shape != x_roundtrip.shape:
        raise ValueError("cycle loss inputs differ in shape")
    return huber(x - x_roundtrip, threshold).mean()


def loss_reconstruction(rend_x, trans_x, rend_y, trans_y, threshold: float = 1.0) -> torch.Tensor:
    """Huber mismatch between renderings and pseudo-renderings in both views.

    Each term is the per-image mean Huber penalty; the result is the batch mean
    of their sum.
    """
    term_x = huber(rend_x - trans_x, threshold).flatten(1).mean(1)
    term_y = huber(rend_y - trans_y, threshold).flatten(1).mean(1)
    return (term_x + term_y).mean()


def combined_translator_losses(content, style, jaccard, weights: LossWeights = LossWeights()):
    """``(content_w * L_C + style_w * L_S + L_J, content_w * L_C)``."""
    l_i2r = weights.content_w * content + weights.style_w * style + jaccard
    l_r2i = weights.content_w * content
    return l_i2r, l_r2i
