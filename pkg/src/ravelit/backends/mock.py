"""Deterministic closed-form mock backends.

``mock-linear-8`` downsamples an image to 4x4x3, flattens, and applies a
fixed seeded linear map to R^8.  Everything is linear, so Jacobians are exact
and every loss/gradient property is testable on CPU without pretrained
weights.  ``mock-clip-8`` adds a tiny text tower (mean over token embeddings
followed by a fixed linear projection) and a 32-word vocabulary so the
prompt-tuning and interpretation paths can be exercised end to end.

Weights are stored in float64 and cast to the input dtype, so float64 inputs
get float64 math (clean finite-difference checks) while float32 training
batches stay float32.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ravelit.backends.base import EncoderBackend, as_image_batch, tensor_checksum

_IMAGE_PROJ_SEED = 101
_TEXT_PROJ_SEED = 202
_TOKEN_TABLE_SEED = 303

#: fixed 32-word vocabulary of the mock text tower (deterministic order)
MOCK_VOCABULARY = (
    "amber", "beach", "bird", "bridge", "candle", "city", "cloud", "dawn",
    "desert", "dusk", "field", "flower", "forest", "fox", "glow", "harbor",
    "hill", "lake", "lamp", "meadow", "moon", "mountain", "night", "ocean",
    "rain", "river", "sky", "snow", "star", "stone", "sun", "valley",
)


def _seeded_matrix(rows: int, cols: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    m = torch.randn(rows, cols, generator=gen, dtype=torch.float64)
    return m / math.sqrt(cols)


class MockLinearBackend(EncoderBackend):
    """Image-only mock encoder with an exactly linear embedding map.

    Layer stages exposed for the identity loss: average pools at 8x8 and 4x4
    resolution (selectable via ``layer_indices``), plus the final embedding.
    """

    _POOL_SIZES = (8, 4)

    def __init__(self, model_id: str = "mock-linear-8", device: str = "cpu",
                 layer_indices: tuple[int, ...] = (0, 1)):
        for idx in layer_indices:
            if not 0 <= idx < len(self._POOL_SIZES):
                raise ValueError(f"layer index {idx} out of range for {type(self).__name__}")
        self.model_id = model_id
        self.device = device
        self.embed_dim = 8
        self.vocab_size = 0
        self.layer_indices = tuple(layer_indices)
        self.layer_count = len(layer_indices) + 1
        self._image_proj = _seeded_matrix(self.embed_dim, 48, _IMAGE_PROJ_SEED)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        batch = as_image_batch(images)
        pooled = F.adaptive_avg_pool2d(batch, 4)
        flat = pooled.reshape(pooled.shape[0], -1)
        return flat @ self._image_proj.to(flat.dtype).T

    def encode_image_layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        batch = as_image_batch(images)
        acts = [F.adaptive_avg_pool2d(batch, self._POOL_SIZES[i]) for i in self.layer_indices]
        acts.append(self.encode_image(batch))
        return acts

    def _weight_tensors(self) -> dict[str, torch.Tensor]:
        return {"image_proj": self._image_proj}

    def weight_checksum(self) -> str:
        return tensor_checksum(self._weight_tensors())


class MockClipBackend(MockLinearBackend):
    """Mock with both towers; text side is mean-pool + fixed linear map."""

    def __init__(self, model_id: str = "mock-clip-8", device: str = "cpu",
                 layer_indices: tuple[int, ...] = (0, 1)):
        super().__init__(model_id=model_id, device=device, layer_indices=layer_indices)
        self.token_embedding_dim = 6
        self.context_length = 32
        self.vocab_size = len(MOCK_VOCABULARY)
        self._text_proj = _seeded_matrix(self.embed_dim, self.token_embedding_dim, _TEXT_PROJ_SEED)
        self._token_table = _seeded_matrix(self.vocab_size, self.token_embedding_dim, _TOKEN_TABLE_SEED)

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        if not isinstance(token_embeddings, torch.Tensor):
            token_embeddings = torch.as_tensor(token_embeddings)
        if token_embeddings.ndim != 2 or token_embeddings.shape[1] != self.token_embedding_dim:
            raise ValueError(
                f"expected (N, {self.token_embedding_dim}) token-embedding matrix, "
                f"got shape {tuple(token_embeddings.shape)}")
        n = token_embeddings.shape[0]
        if n == 0:
            raise ValueError("zero-length token sequence")
        if n > self.context_length:
            raise ValueError(f"sequence length {n} exceeds context length {self.context_length}")
        pooled = token_embeddings.mean(dim=0)
        return self._text_proj.to(pooled.dtype) @ pooled

    def vocabulary(self) -> list[tuple[str, torch.Tensor]]:
        return [(tok, self._token_table[i].clone()) for i, tok in enumerate(MOCK_VOCABULARY)]

    def _weight_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "image_proj": self._image_proj,
            "text_proj": self._text_proj,
            "token_table": self._token_table,
        }
