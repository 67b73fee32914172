"""Residual guidance vectors: construction, persistence, interpretation.

The guidance direction is built from two image corpora: each image is
embedded, length-normalized, the per-corpus normalized means are taken, and
the residual is the normalized difference

    v_residual = f_norm(v_well_lit - v_backlit)

which points from the backlit region of the embedding space toward the
well-lit region.  Corpora are streamed (compensated float64 summation) so
they never need to fit in memory, and the accumulation order is fixed so
results are deterministic.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from ravelit.backends.base import EncoderBackend, as_image_batch
from ravelit.errors import DegenerateDirectionError, ResidualFileError

_UNIT_NORM_TOL = 1e-6
_DEGENERATE_EPS = 1e-12

_MAGIC = b"RVRESID\x00"
_VERSION = 1


def normalize(v: torch.Tensor) -> torch.Tensor:
    """f_norm(v) = v / ||v||_2; zero input is a degenerate direction."""
    if not isinstance(v, torch.Tensor):
        v = torch.as_tensor(v)
    n = torch.linalg.vector_norm(v.to(torch.float64))
    if n <= _DEGENERATE_EPS:
        raise DegenerateDirectionError("cannot normalize a (numerically) zero vector")
    return (v.to(torch.float64) / n).to(v.dtype)


@dataclass
class ResidualVector:
    """Unit residual direction plus the corpus means and their provenance."""

    v_residual: torch.Tensor
    v_well_lit: torch.Tensor
    v_backlit: torch.Tensor
    n_well: int
    n_back: int
    backend_model_id: str
    dataset_fingerprint: str

    def __post_init__(self):
        for name in ("v_residual", "v_well_lit", "v_backlit"):
            v = getattr(self, name)
            n = float(torch.linalg.vector_norm(v.to(torch.float64)))
            if abs(n - 1.0) > _UNIT_NORM_TOL:
                raise ValueError(f"{name} has norm {n:.8f}, expected 1 within {_UNIT_NORM_TOL}")
        diff = (self.v_well_lit - self.v_backlit).to(torch.float64)
        dn = float(torch.linalg.vector_norm(diff))
        if dn <= _DEGENERATE_EPS:
            raise DegenerateDirectionError("v_well_lit equals v_backlit: corpora are indistinguishable")
        cos = float(self.v_residual.to(torch.float64) @ (diff / dn))
        if abs(cos - 1.0) > _UNIT_NORM_TOL:
            raise ValueError(f"v_residual is not collinear with the mean difference (cos={cos:.8f})")

    @property
    def embed_dim(self) -> int:
        return self.v_residual.shape[0]


@dataclass
class TokenSimilarity:
    token: str
    score: float


def _iter_images(corpus: Iterable[torch.Tensor]) -> Iterator[torch.Tensor]:
    for item in corpus:
        batch = as_image_batch(item)
        for i in range(batch.shape[0]):
            yield batch[i]


def _streamed_unit_mean(backend: EncoderBackend, corpus, label: str):
    """One pass: per-image normalized embeddings into a Kahan accumulator.

    Returns (unit mean as float64, image count, corpus content digest).
    """
    dim = backend.embed_dim
    total = torch.zeros(dim, dtype=torch.float64)
    comp = torch.zeros(dim, dtype=torch.float64)
    digest = hashlib.sha256()
    count = 0
    for image in _iter_images(corpus):
        digest.update(str(tuple(image.shape)).encode())
        digest.update(image.detach().to(torch.float32).cpu().numpy().tobytes())
        with torch.no_grad():
            emb = backend.encode_image(image.unsqueeze(0))[0]
        unit = normalize(emb).to(torch.float64)
        y = unit - comp
        t = total + y
        comp = (t - total) - y
        total = t
        count += 1
    if count == 0:
        raise DegenerateDirectionError(f"{label} corpus is empty")
    mean = total / count
    n = torch.linalg.vector_norm(mean)
    if n <= _DEGENERATE_EPS:
        raise DegenerateDirectionError(f"mean embedding of the {label} corpus is (numerically) zero")
    return mean / n, count, digest.hexdigest()


def mean_embedding(backend: EncoderBackend, corpus: Iterable[torch.Tensor]) -> torch.Tensor:
    """Normalized mean of per-image normalized embeddings (Kahan-streamed)."""
    mean, _, _ = _streamed_unit_mean(backend, corpus, "input")
    return mean.to(torch.float32)


def compute_residual(backend: EncoderBackend,
                     backlit_corpus: Iterable[torch.Tensor],
                     welllit_corpus: Iterable[torch.Tensor]) -> ResidualVector:
    """Build the residual direction from a backlit and a well-lit corpus."""
    back_mean, n_back, back_fp = _streamed_unit_mean(backend, backlit_corpus, "backlit")
    well_mean, n_well, well_fp = _streamed_unit_mean(backend, welllit_corpus, "well-lit")

    v_back = back_mean.to(torch.float32)
    v_well = well_mean.to(torch.float32)
    diff = (v_well - v_back).to(torch.float64)
    dn = torch.linalg.vector_norm(diff)
    if dn <= _DEGENERATE_EPS:
        raise DegenerateDirectionError(
            "degenerate residual: well-lit and backlit corpora have identical mean embeddings")
    v_res = (diff / dn).to(torch.float32)
    return ResidualVector(
        v_residual=v_res,
        v_well_lit=v_well,
        v_backlit=v_back,
        n_well=n_well,
        n_back=n_back,
        backend_model_id=backend.model_id,
        dataset_fingerprint=f"backlit:{back_fp};welllit:{well_fp}",
    )


def _score_vocabulary(backend: EncoderBackend, rv: ResidualVector) -> list[TokenSimilarity]:
    v_res = rv.v_residual.to(torch.float64)
    scores = []
    with torch.no_grad():
        for token, row in backend.vocabulary():
            emb = backend.encode_text(row.unsqueeze(0))
            unit = normalize(emb).to(torch.float64)
            s = float(torch.clamp(unit @ v_res, -1.0, 1.0))
            scores.append(TokenSimilarity(token, s))
    return scores


def interpret_residual(backend: EncoderBackend, rv: ResidualVector,
                       top_k: int) -> tuple[list[TokenSimilarity], list[TokenSimilarity]]:
    """Vocabulary tokens whose text embeddings score lowest/highest against
    the residual direction (cosine); ties broken lexicographically."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = _score_vocabulary(backend, rv)
    lowest = sorted(scores, key=lambda ts: (ts.score, ts.token))[:top_k]
    highest = sorted(scores, key=lambda ts: (-ts.score, ts.token))[:top_k]
    return lowest, highest


def token_corpus_similarity(backend: EncoderBackend, token: str,
                            corpus: Iterable[torch.Tensor]) -> float:
    """Mean cosine between a vocabulary token's text embedding and the
    normalized image embeddings of a corpus."""
    row = backend.lookup_token(token)
    with torch.no_grad():
        text_unit = normalize(backend.encode_text(row.unsqueeze(0))).to(torch.float64)
    total = 0.0
    count = 0
    for image in _iter_images(corpus):
        with torch.no_grad():
            emb = backend.encode_image(image.unsqueeze(0))[0]
        total += float(normalize(emb).to(torch.float64) @ text_unit)
        count += 1
    if count == 0:
        raise DegenerateDirectionError("corpus is empty")
    return total / count


# -- persistence -------------------------------------------------------
#
# Layout: 8-byte magic, u32 version, length-prefixed key=value metadata
# block, u32 dim, three little-endian float32 arrays, then a SHA-256 of all
# preceding bytes.  Round trips are bit exact and the metadata stays
# readable with `strings`.

def encode_residual(rv: ResidualVector) -> bytes:
    meta = (
        f"model_id={rv.backend_model_id}\n"
        f"n_well={rv.n_well}\n"
        f"n_back={rv.n_back}\n"
        f"fingerprint={rv.dataset_fingerprint}\n"
    ).encode("utf-8")
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<I", _VERSION)
    body += struct.pack("<I", len(meta))
    body += meta
    body += struct.pack("<I", rv.embed_dim)
    for v in (rv.v_residual, rv.v_well_lit, rv.v_backlit):
        body += v.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    return bytes(body)


def decode_residual(raw: bytes, source: str = "residual data") -> ResidualVector:
    if len(raw) < len(_MAGIC) + 8 + 32:
        raise ResidualFileError(f"{source}: too short to be a residual file")
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ResidualFileError(f"{source}: bad magic header")
    stored = raw[-32:]
    if hashlib.sha256(raw[:-32]).digest() != stored:
        raise ResidualFileError(f"{source}: checksum mismatch, file is corrupted")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off); off += 4
    if version != _VERSION:
        raise ResidualFileError(f"{source}: unsupported residual file version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off); off += 4
    meta = dict(line.split("=", 1) for line in
                raw[off:off + meta_len].decode("utf-8").splitlines() if line)
    off += meta_len
    (dim,) = struct.unpack_from("<I", raw, off); off += 4
    vectors = []
    for _ in range(3):
        arr = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        vectors.append(torch.from_numpy(arr))
    try:
        return ResidualVector(
            v_residual=vectors[0], v_well_lit=vectors[1], v_backlit=vectors[2],
            n_well=int(meta["n_well"]), n_back=int(meta["n_back"]),
            backend_model_id=meta["model_id"], dataset_fingerprint=meta["fingerprint"],
        )
    except (DegenerateDirectionError, ValueError) as e:
        raise ResidualFileError(f"{source}: {e}") from e


def save_residual(rv: ResidualVector, path: str | Path) -> None:
    Path(path).write_bytes(encode_residual(rv))


def load_residual(path: str | Path) -> ResidualVector:
    return decode_residual(Path(path).read_bytes(), source=str(path))
