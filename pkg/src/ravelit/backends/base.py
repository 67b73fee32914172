"""Common interface for frozen encoder backends.

A backend is a *handle*: a frozen pretrained (or mock) vision-language
encoder exposing image embeddings, per-layer image activations, a text
projection for token-embedding sequences, and vocabulary access.  Weights
never change for the lifetime of the handle; gradient flow from embeddings
back to the *inputs* is part of the contract, gradients into the weights are
not.

Image tensors everywhere in this package are channel-first ``(3, H, W)``
float tensors in ``[0, 1]`` (batched: ``(N, 3, H, W)``).
"""

from __future__ import annotations

import hashlib

import torch

from ravelit.errors import TextTowerUnavailableError


def as_image_batch(images: torch.Tensor) -> torch.Tensor:
    """Coerce ``(3,H,W)`` or ``(N,3,H,W)`` input to a validated batch.

    Raises ``ValueError`` for empty batches, wrong channel counts, or NaN
    pixels (the failure modes the encode operations must reject).
    """
    if not isinstance(images, torch.Tensor):
        images = torch.as_tensor(images)
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4:
        raise ValueError(f"expected (3,H,W) or (N,3,H,W) image tensor, got shape {tuple(images.shape)}")
    if images.shape[0] == 0:
        raise ValueError("empty image batch")
    if images.shape[1] != 3:
        raise ValueError(f"images must have 3 channels, got {images.shape[1]}")
    if not torch.isfinite(images).all():
        raise ValueError("image batch contains NaN or infinite pixels")
    return images


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over named tensors, order-stable by name."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class EncoderBackend:
    """Base handle for a frozen encoder.

    Attributes
    ----------
    model_id : str
        Identifier the handle was loaded under.
    embed_dim : int
        Length D of every vector produced by ``encode_image``/``encode_text``.
    layer_count : int
        Number of image activations returned by ``encode_image_layers``
        (k + 1: the configured intermediate stages plus the final embedding).
    vocab_size : int
        Tokenizer size; 0 for image-only backends.
    device : str
        Compute device label.
    """

    model_id: str
    embed_dim: int
    layer_count: int
    vocab_size: int
    device: str

    #: width of a single token embedding (None for image-only backends)
    token_embedding_dim: int | None = None
    #: maximum token-sequence length accepted by encode_text
    context_length: int | None = None

    @property
    def has_text_tower(self) -> bool:
        return self.vocab_size > 0

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """Embed a batch of images: ``(N,3,H,W)`` -> ``(N, D)``.

        Outputs are NOT length-normalized; callers apply f_norm explicitly.
        Differentiable w.r.t. the input pixels.
        """
        raise NotImplementedError

    def encode_image_layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer activations for the identity loss, final embedding last.

        Returns ``layer_count`` batched tensors, order fixed per backend.
        """
        raise NotImplementedError

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        """Project a token-embedding sequence ``(N, E_tok)`` to a D-vector.

        Differentiable w.r.t. the token embeddings (prompt tuning relies on
        this).  Image-only backends raise ``TextTowerUnavailableError``.
        """
        raise TextTowerUnavailableError(f"backend '{self.model_id}' has no text tower")

    def vocabulary(self) -> list[tuple[str, torch.Tensor]]:
        """All (token, token-embedding row) pairs in deterministic order."""
        raise TextTowerUnavailableError(f"backend '{self.model_id}' has no text tower")

    def lookup_token(self, token: str) -> torch.Tensor:
        """Embedding row for a vocabulary token; KeyError if unknown."""
        for tok, emb in self.vocabulary():
            if tok == token:
                return emb
        raise KeyError(f"token {token!r} not in the vocabulary of '{self.model_id}'")

    def weight_checksum(self) -> str:
        """Digest of all frozen weights; constant for the handle's lifetime."""
        raise NotImplementedError
