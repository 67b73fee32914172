"""Learnable guidance state.

Two flavors share one container: token-space prompt pairs that are projected
through the frozen text encoder on every use, and latent-space vector pairs
that live directly in the joint embedding space (and therefore never touch a
text tower).  Both are tuned with the same two procedures: an initialization
step that trains them to classify backlit vs well-lit images, and a
refinement step driven by the margin ranking loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ravelit.backends.base import EncoderBackend
from ravelit.errors import TextTowerUnavailableError
from ravelit.losses import (
    cosine,
    guidance_softmax,
    initial_classification_loss,
    negative_similarity_score,
    prompt_refinement_loss,
)

TOKEN_SPACE = "token_space"
LATENT_SPACE = "latent_space"

_INIT_SCALE = 0.02


@dataclass
class GuidancePair:
    """Positive/negative learnable guidance.

    token_space: both sides are (N, E_tok) token-embedding matrices.
    latent_space: both sides are D-vectors in the joint embedding space.
    """

    kind: str
    positive: torch.Tensor
    negative: torch.Tensor
    token_count: int | None = None

    def parameters(self) -> list[torch.Tensor]:
        return [self.positive, self.negative]

    def detach_clone(self) -> "GuidancePair":
        return GuidancePair(self.kind, self.positive.detach().clone(),
                            self.negative.detach().clone(), self.token_count)


def init_guidance(kind: str, seed: int, backend: EncoderBackend,
                  token_count: int = 16) -> GuidancePair:
    """Randomly initialize a guidance pair (N(0, 0.02^2), seeded)."""
    gen = torch.Generator().manual_seed(seed)
    if kind == LATENT_SPACE:
        shape = (backend.embed_dim,)
        token_count = None
    elif kind == TOKEN_SPACE:
        if not backend.has_text_tower:
            raise TextTowerUnavailableError(
                f"token-space prompts need a text tower; backend '{backend.model_id}' has none")
        if backend.context_length is not None and token_count > backend.context_length:
            raise ValueError(f"token_count {token_count} exceeds context length {backend.context_length}")
        shape = (token_count, backend.token_embedding_dim)
    else:
        raise ValueError(f"unknown guidance kind {kind!r}")
    pos = (torch.randn(*shape, generator=gen) * _INIT_SCALE).requires_grad_(True)
    neg = (torch.randn(*shape, generator=gen) * _INIT_SCALE).requires_grad_(True)
    return GuidancePair(kind, pos, neg, token_count)


def project(pair: GuidancePair, backend: EncoderBackend) -> tuple[torch.Tensor, torch.Tensor]:
    """Map the pair into the embedding space (identity for latent pairs)."""
    if pair.kind == LATENT_SPACE:
        return pair.positive, pair.negative
    return backend.encode_text(pair.positive), backend.encode_text(pair.negative)


def make_guidance_optimizer(pair: GuidancePair, lr: float = 5e-6,
                            betas: tuple[float, float] = (0.9, 0.99)) -> torch.optim.Adam:
    return torch.optim.Adam(pair.parameters(), lr=lr, betas=betas)


def guidance_init_step(pair: GuidancePair, images: torch.Tensor, labels: torch.Tensor,
                       backend: EncoderBackend, optimizer: torch.optim.Optimizer) -> float:
    """One gradient step of the backlit/well-lit classification objective.

    Labels: 0 = backlit, 1 = well-lit.  Only the guidance parameters change;
    image embeddings are computed without gradient tracking.
    """
    with torch.no_grad():
        emb = backend.encode_image(images)
    pos, neg = project(pair, backend)
    pred = guidance_softmax(cosine(emb, pos), cosine(emb, neg))
    loss = initial_classification_loss(pred, torch.as_tensor(labels).to(pred.dtype)).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def guidance_refine_step(pair: GuidancePair,
                         refinement_batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
                         backend: EncoderBackend, margins: tuple[float, float, float],
                         optimizer: torch.optim.Optimizer) -> float:
    """One margin-ranking step on (well-lit, backlit, enhanced, previously
    enhanced) image groups of equal size."""
    wells, backlits, enhanced, previous = refinement_batch
    sizes = {t.shape[0] for t in (wells, backlits, enhanced, previous)}
    if len(sizes) != 1:
        raise ValueError("refinement batch groups must have equal sizes")
    with torch.no_grad():
        embs = [backend.encode_image(t) for t in (wells, backlits, enhanced, previous)]
    pos, neg = project(pair, backend)
    s_w, s_b, s_t, s_prev = (negative_similarity_score(e, pos, neg) for e in embs)
    loss = prompt_refinement_loss(s_w, s_b, s_t, s_prev, margins).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())
