"""Adapter for pretrained CLIP weights in Hugging Face layout.

Wraps a frozen ``transformers.CLIPModel``.  Preprocessing (bicubic resize to
the tower's input size plus channel normalization) lives inside the adapter
and is differentiable, so the rest of the toolkit works on raw ``[0,1]``
images.  The text path accepts raw token-embedding sequences (wrapped in
BOS/EOS internally) so learnable prompts can be optimized through the frozen
text transformer.

Only the vocabulary file (``vocab.json``) is needed from the tokenizer; full
BPE encoding is never used because prompts are random-initialized and the
interpretation pass scores bare single-token sequences.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
import torch.nn.functional as F

from ravelit.backends.base import EncoderBackend, as_image_batch, tensor_checksum
from ravelit.errors import UnknownBackendError

# channel statistics the public CLIP releases were trained with
CLIP_PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)

# vision-tower hidden states used for the identity loss (final embedding is
# always appended on top of these)
DEFAULT_LAYER_INDICES = (0, 4, 8, 12)


def _pooled(output):
    # transformers >=5 returns BaseModelOutputWithPooling from get_*_features
    return output.pooler_output if hasattr(output, "pooler_output") else output


class ClipVitBackend(EncoderBackend):
    """Frozen CLIP handle (reference weights: ViT-B/32, D=512)."""

    def __init__(self, model, vocab: dict[str, int], model_id: str,
                 device: str = "cpu", layer_indices: tuple[int, ...] = DEFAULT_LAYER_INDICES):
        model = model.to(device).eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.model_id = model_id
        self.device = device
        self.embed_dim = int(model.config.projection_dim)
        self.token_embedding_dim = int(model.config.text_config.hidden_size)
        # reserve two positions for the BOS/EOS wrapping
        self.context_length = int(model.config.text_config.max_position_embeddings) - 2
        self._vocab = sorted(vocab.items(), key=lambda kv: kv[1])
        self.vocab_size = len(self._vocab)

        n_hidden = int(model.config.vision_config.num_hidden_layers) + 1
        for idx in layer_indices:
            if not 0 <= idx < n_hidden:
                raise ValueError(f"layer index {idx} out of range (vision tower exposes {n_hidden} hidden states)")
        self.layer_indices = tuple(layer_indices)
        self.layer_count = len(layer_indices) + 1

        self._image_size = int(model.config.vision_config.image_size)
        self._mean = torch.tensor(CLIP_PIXEL_MEAN, device=device).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_PIXEL_STD, device=device).view(1, 3, 1, 1)

    @classmethod
    def from_pretrained(cls, path: str | Path, model_id: str, device: str = "cpu",
                        layer_indices: tuple[int, ...] = DEFAULT_LAYER_INDICES) -> "ClipVitBackend":
        from transformers import CLIPModel

        path = Path(path)
        if not path.exists():
            raise UnknownBackendError(f"weights path {path} for '{model_id}' does not exist")
        model = CLIPModel.from_pretrained(str(path))
        vocab_file = path / "vocab.json" if path.is_dir() else None
        if vocab_file is not None and vocab_file.exists():
            vocab = json.loads(vocab_file.read_text(encoding="utf-8"))
        else:
            # fall back to synthetic ids when the checkpoint ships no tokenizer
            vocab = {f"<{i}>": i for i in range(int(model.config.text_config.vocab_size))}
        return cls(model, vocab, model_id=model_id, device=device, layer_indices=layer_indices)

    # -- image tower ---------------------------------------------------

    def _preprocess(self, batch: torch.Tensor) -> torch.Tensor:
        batch = batch.to(self.device)
        if batch.shape[-2:] != (self._image_size, self._image_size):
            batch = F.interpolate(batch, size=(self._image_size, self._image_size),
                                  mode="bicubic", align_corners=False)
        return (batch - self._mean.to(batch.dtype)) / self._std.to(batch.dtype)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        pixels = self._preprocess(as_image_batch(images))
        return _pooled(self._model.get_image_features(pixel_values=pixels))

    def encode_image_layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        pixels = self._preprocess(as_image_batch(images))
        out = self._model.vision_model(pixel_values=pixels, output_hidden_states=True)
        acts = [out.hidden_states[i] for i in self.layer_indices]
        pooled = self._model.visual_projection(out.pooler_output)
        acts.append(pooled)
        return acts

    # -- text tower ----------------------------------------------------

    def encode_text(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        if token_embeddings.ndim != 2 or token_embeddings.shape[1] != self.token_embedding_dim:
            raise ValueError(
                f"expected (N, {self.token_embedding_dim}) token-embedding matrix, "
                f"got shape {tuple(token_embeddings.shape)}")
        n = token_embeddings.shape[0]
        if n == 0:
            raise ValueError("zero-length token sequence")
        if n > self.context_length:
            raise ValueError(f"sequence length {n} exceeds context length {self.context_length}")

        tm = self._model.text_model
        table = tm.embeddings.token_embedding.weight
        bos = table[self._model.config.text_config.bos_token_id].unsqueeze(0)
        eos = table[self._model.config.text_config.eos_token_id].unsqueeze(0)
        seq = torch.cat([bos.to(token_embeddings.dtype), token_embeddings.to(self.device),
                         eos.to(token_embeddings.dtype)], dim=0)
        hidden = tm.embeddings(inputs_embeds=seq.unsqueeze(0))
        L = hidden.shape[1]
        mask = torch.full((L, L), torch.finfo(hidden.dtype).min,
                          dtype=hidden.dtype, device=hidden.device).triu(1)[None, None]
        enc = tm.encoder(inputs_embeds=hidden, attention_mask=mask, is_causal=True)
        pooled = tm.final_layer_norm(enc.last_hidden_state)[:, -1]
        return self._model.text_projection(pooled)[0]

    def vocabulary(self) -> list[tuple[str, torch.Tensor]]:
        table = self._model.text_model.embeddings.token_embedding.weight
        # BPE word-boundary markers are stripped for display; duplicates that
        # arise from a word/subword collision keep their own embedding rows
        return [(tok.removesuffix("</w>"), table[idx]) for tok, idx in self._vocab]

    def weight_checksum(self) -> str:
        return tensor_checksum({k: v for k, v in self._model.state_dict().items()})
