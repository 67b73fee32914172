"""Backend loading and registration.

Two mock backends are built in (``mock-linear-8`` image-only and
``mock-clip-8`` with a text tower); anything else must be registered as a
weights alias pointing at a local checkpoint, optionally pinned to a SHA-256.
``vit-b-32`` may alternatively be resolved from the ``RAVELIT_VIT_B32_DIR``
environment variable.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from ravelit.backends.base import EncoderBackend, as_image_batch, tensor_checksum
from ravelit.backends.mock import MOCK_VOCABULARY, MockClipBackend, MockLinearBackend
from ravelit.errors import ChecksumMismatchError, UnknownBackendError

__all__ = [
    "EncoderBackend", "MockLinearBackend", "MockClipBackend", "MOCK_VOCABULARY",
    "load_backend", "register_weights", "registered_weights",
    "as_image_batch", "tensor_checksum", "path_checksum",
]

_MOCKS = {
    "mock-linear-8": MockLinearBackend,
    "mock-clip-8": MockClipBackend,
}

_VIT_B32_ENV = "RAVELIT_VIT_B32_DIR"


@dataclass
class WeightsAlias:
    path: Path
    sha256: str | None = None


_ALIASES: dict[str, WeightsAlias] = {}


def register_weights(model_id: str, path: str | Path, sha256: str | None = None) -> None:
    """Point a model id at a local checkpoint (file or HF-layout directory)."""
    if model_id in _MOCKS:
        raise ValueError(f"'{model_id}' is a built-in mock and cannot be re-registered")
    _ALIASES[model_id] = WeightsAlias(Path(path), sha256)


def registered_weights() -> dict[str, WeightsAlias]:
    return dict(_ALIASES)


def path_checksum(path: str | Path) -> str:
    """SHA-256 of a weights file, or of the weight-bearing files in a directory."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        names = sorted(p for p in path.iterdir()
                       if p.suffix in (".safetensors", ".bin") or p.name == "config.json")
        for p in names:
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def load_backend(model_id: str, device: str = "cpu", **options) -> EncoderBackend:
    """Load a frozen encoder handle.

    Repeated loads of the same id on the same device behave identically:
    mocks are rebuilt from fixed seeds, pretrained weights are immutable on
    disk (and may be pinned by checksum at registration).
    """
    if model_id in _MOCKS:
        return _MOCKS[model_id](device=device, **options)

    alias = _ALIASES.get(model_id)
    if alias is None and model_id == "vit-b-32" and os.environ.get(_VIT_B32_ENV):
        alias = WeightsAlias(Path(os.environ[_VIT_B32_ENV]))
    if alias is None:
        known = sorted([*_MOCKS, *_ALIASES])
        raise UnknownBackendError(f"unknown model id '{model_id}' (known: {', '.join(known)})")
    if not alias.path.exists():
        raise UnknownBackendError(f"weights path {alias.path} for '{model_id}' does not exist")
    if alias.sha256 is not None:
        actual = path_checksum(alias.path)
        if actual != alias.sha256:
            raise ChecksumMismatchError(
                f"weights for '{model_id}' at {alias.path}: expected sha256 {alias.sha256}, got {actual}")

    from ravelit.backends.clip_vit import ClipVitBackend

    return ClipVitBackend.from_pretrained(alias.path, model_id=model_id, device=device, **options)
