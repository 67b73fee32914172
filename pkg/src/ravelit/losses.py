"""Training objectives.

All losses are pure differentiable functions of embeddings / activations and
guidance state, safe to evaluate concurrently on disjoint inputs.  Inputs may
be python floats or tensors; outputs are tensors (use ``float()`` on the
result for plain numbers).

Convention: the *guidance* losses return the softmax weight of the NEGATIVE
side, so minimizing them pulls the image toward the positive guidance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from ravelit.errors import DegenerateDirectionError
from ravelit.residual import ResidualVector

#: probabilities are clamped to this open interval before logarithms
_PROB_EPS = 1e-7


@dataclass
class LossConfig:
    """Weights shared by the trainers: omega, per-layer identity weights,
    and the ranking-loss margins (m0, m1, m2)."""

    omega: float = 0.9
    alpha_l: Sequence[float] | None = None
    margins: tuple[float, float, float] = (0.9, 0.2, 0.2)

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        for m in self.margins:
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"margins must lie in [0,1], got {self.margins}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def identity_loss(acts_b: Sequence[torch.Tensor], acts_t: Sequence[torch.Tensor],
                  alpha_l: Sequence[float] | None = None) -> torch.Tensor:
    """Layer-weighted feature distance sum_l alpha_l * ||phi_l(b) - phi_l(t)||_2.

    Activations are batch-first; the per-layer norm is over the flattened
    per-sample difference, averaged across the batch.
    """
    if len(acts_b) != len(acts_t):
        raise ValueError(f"layer count mismatch: {len(acts_b)} vs {len(acts_t)}")
    if alpha_l is None:
        alpha_l = [1.0] * len(acts_b)
    if len(alpha_l) != len(acts_b):
        raise ValueError(f"expected {len(acts_b)} layer weights, got {len(alpha_l)}")
    total = None
    for a, b, w in zip(acts_b, acts_t, alpha_l):
        if a.shape != b.shape:
            raise ValueError(f"activation shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        diff = (a - b).reshape(a.shape[0], -1)
        term = w * torch.linalg.vector_norm(diff, dim=1).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no activation layers given")
    return total


def guidance_softmax(cos_pos, cos_neg) -> torch.Tensor:
    """e^{cos_pos} / (e^{cos_pos} + e^{cos_neg}), the well-lit probability."""
    return torch.sigmoid(_as_tensor(cos_pos) - _as_tensor(cos_neg))


def initial_classification_loss(pred, y) -> torch.Tensor:
    """Binary cross-entropy of the guidance classifier (y=1 means well-lit)."""
    pred = _as_tensor(pred)
    if bool((pred < 0).any() or (pred > 1).any()):
        raise ValueError("predicted probability outside [0, 1]")
    pred = pred.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    y = _as_tensor(y).to(pred.dtype)
    return -(y * torch.log(pred) + (1.0 - y) * torch.log1p(-pred))


def _unit(v: torch.Tensor, what: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if bool((n <= 1e-12).any()):
        raise DegenerateDirectionError(f"zero-norm {what} vector")
    return v / n


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """True cosine similarity along the last dim, broadcasting batch dims."""
    return (_unit(_as_tensor(a), "embedding") * _unit(_as_tensor(b), "guidance")).sum(dim=-1)


def clip_guidance_loss(image_emb: torch.Tensor, pos_emb: torch.Tensor,
                       neg_emb: torch.Tensor) -> torch.Tensor:
    """Softmax weight of the negative guidance side, in (0, 1).

    Small when the image is closer (by cosine) to the positive guidance.
    Batched embeddings give per-image values.
    """
    cp = cosine(image_emb, pos_emb)
    cn = cosine(image_emb, neg_emb)
    return torch.sigmoid(cn - cp)


def negative_similarity_score(image_emb: torch.Tensor, pos_emb: torch.Tensor,
                              neg_emb: torch.Tensor) -> torch.Tensor:
    """S(I): same quantity as ``clip_guidance_loss``, named for the ranking
    loss that consumes it."""
    return clip_guidance_loss(image_emb, pos_emb, neg_emb)


def prompt_refinement_loss(s_w, s_b, s_t, s_prev,
                           margins: tuple[float, float, float]) -> torch.Tensor:
    """Margin ranking loss ordering the well-lit / backlit / enhanced /
    previously-enhanced scores:

        max(0, s_w - s_b + m0) + max(0, s_prev - s_b + m0)
      + max(0, s_w - s_t + m1) + max(0, s_t - s_prev + m2)
    """
    m0, m1, m2 = margins
    s_w, s_b, s_t, s_prev = (_as_tensor(s) for s in (s_w, s_b, s_t, s_prev))
    zero = torch.zeros_like(s_w + s_b + s_t + s_prev)
    return (torch.maximum(zero, s_w - s_b + m0)
            + torch.maximum(zero, s_prev - s_b + m0)
            + torch.maximum(zero, s_w - s_t + m1)
            + torch.maximum(zero, s_t - s_prev + m2))


def residual_loss(image_emb: torch.Tensor, rv: ResidualVector,
                  normalize_image_embedding: bool = True) -> torch.Tensor:
    """Squared gap between the image's and the well-lit mean's projections
    onto the residual direction.

    ``v_well_lit`` is built from normalized embeddings, so by default the
    image embedding is normalized before projecting; set
    ``normalize_image_embedding=False`` for the raw-projection variant.
    """
    emb = _as_tensor(image_emb)
    v_res = rv.v_residual.to(emb.dtype)
    v_well = rv.v_well_lit.to(emb.dtype)
    if normalize_image_embedding:
        emb = _unit(emb, "image embedding")
    p_img = (emb * v_res).sum(dim=-1)
    p_well = (v_well * v_res).sum()
    return (p_img - p_well) ** 2


def enhance_loss(clip_term, identity_term, omega) -> torch.Tensor:
    """L_enhance = L_clip + omega * L_identity."""
    return _as_tensor(clip_term) + omega * _as_tensor(identity_term)


def rave_loss(identity_term, residual_term, omega) -> torch.Tensor:
    """L_rave = L_identity + omega * L_residual (omega multiplies the
    residual term here, unlike the enhance loss)."""
    return _as_tensor(identity_term) + omega * _as_tensor(residual_term)
