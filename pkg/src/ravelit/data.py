"""Dataset ingestion and deterministic augmentation.

Directory convention: ``<root>/backlit/*.{png,jpg}`` and
``<root>/well_lit/*.{png,jpg}``; paired mode pairs files by identical
filename stems.  Training batches are a pure function of (seed, step): the
batch sample and every per-item augmentation parameter are derived from
those values, so runs replay exactly and paired images share identical
augmentation parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ravelit.errors import CorpusError

PAIRED = "paired_by_filename"
UNPAIRED = "unpaired"

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

ZOOM_RANGE = (1.0, 1.2)
ROTATION_DEGREES = 10.0


@dataclass
class CorpusSpec:
    backlit_dir: str | Path
    welllit_dir: str | Path
    pairing: str = UNPAIRED
    train_size: int = 512


@dataclass
class CorpusIndex:
    backlit: list[Path]
    welllit: list[Path]
    pairing: str
    train_size: int
    fingerprint: str


def _scan_dir(d: Path) -> list[Path]:
    if not d.is_dir():
        raise CorpusError(f"{d} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise CorpusError(f"no images found in {d}")
    return files


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scan_corpus(spec: CorpusSpec) -> CorpusIndex:
    """Index both corpus directories and fingerprint their contents.

    The fingerprint hashes (relative name, content hash) pairs in sorted
    order, so it changes iff any file name or content changes.
    """
    backlit = _scan_dir(Path(spec.backlit_dir))
    welllit = _scan_dir(Path(spec.welllit_dir))
    if spec.pairing == PAIRED:
        b_stems = {p.stem: p for p in backlit}
        w_stems = {p.stem: p for p in welllit}
        if len(b_stems) != len(backlit) or len(w_stems) != len(welllit):
            raise CorpusError("duplicate filename stems make pairing ambiguous")
        for stem in sorted(set(b_stems) ^ set(w_stems)):
            side = "backlit" if stem in b_stems else "well-lit"
            raise CorpusError(f"pairing mismatch: stem '{stem}' present only in the {side} directory")
        welllit = [w_stems[p.stem] for p in backlit]
    elif spec.pairing != UNPAIRED:
        raise ValueError(f"unknown pairing mode {spec.pairing!r}")

    h = hashlib.sha256()
    for role, files in (("backlit", backlit), ("well_lit", welllit)):
        for p in sorted(files):
            h.update(f"{role}/{p.name}".encode())
            h.update(_file_digest(p).encode())
    return CorpusIndex(backlit=backlit, welllit=welllit, pairing=spec.pairing,
                       train_size=spec.train_size, fingerprint=h.hexdigest())


# -- image I/O ---------------------------------------------------------

def _to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_image_file(path: str | Path, long_side: int | None = None,
                    square: int | None = None) -> tuple[torch.Tensor, tuple[int, int]]:
    """Load an RGB image as a (3,H,W) float tensor in [0,1].

    ``square`` resizes to (square, square); ``long_side`` scales so the
    longer side matches exactly, preserving aspect.  Bicubic resampling.
    Returns the tensor and the original (width, height).
    """
    try:
        img = Image.open(path).convert("RGB")
    except OSError as e:
        raise CorpusError(f"cannot read image {path}: {e}") from e
    original = img.size
    if square is not None:
        img = img.resize((square, square), Image.BICUBIC)
    elif long_side is not None:
        if long_side <= 0:
            raise ValueError("long_side must be positive")
        w, h = img.size
        scale = long_side / max(w, h)
        img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BICUBIC)
    return _to_tensor(img), original


def save_image_file(image: torch.Tensor, path: str | Path) -> None:
    """Write a (3,H,W) [0,1] tensor as an 8-bit sRGB PNG/JPEG."""
    arr = (image.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    pil = Image.fromarray(arr.permute(1, 2, 0).cpu().numpy(), mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        pil.save(path)
    except OSError as e:
        raise CorpusError(f"cannot write image {path}: {e}") from e


# -- augmentation ------------------------------------------------------

class AugmentParams(NamedTuple):
    flip: bool
    zoom: float
    angle: float


def augmentation_params(seed: int, step: int, item: int) -> AugmentParams:
    """Deterministic flip/zoom/rotation parameters for one batch item."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, item]))
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        zoom=float(rng.uniform(*ZOOM_RANGE)),
        angle=float(rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES)),
    )


def augment_image(image: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Apply flip, zoom (center-cropped back), and rotation with reflect
    padding to a square (3,S,S) tensor; output shape equals input shape."""
    size = image.shape[-1]
    out = image
    if params.flip:
        out = torch.flip(out, dims=[-1])
    if params.zoom > 1.0:
        target = max(size + 1, round(size * params.zoom))
        big = F.interpolate(out.unsqueeze(0), size=(target, target),
                            mode="bicubic", align_corners=False).squeeze(0)
        off = (target - size) // 2
        out = big[:, off:off + size, off:off + size].clamp(0.0, 1.0)
    if params.angle != 0.0:
        rad = torch.tensor(params.angle * np.pi / 180.0)
        cos, sin = torch.cos(rad), torch.sin(rad)
        theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=out.dtype)
        grid = F.affine_grid(theta.unsqueeze(0), size=(1, 3, size, size), align_corners=False)
        out = F.grid_sample(out.unsqueeze(0), grid, mode="bilinear",
                            padding_mode="reflection", align_corners=False).squeeze(0)
    return out


def _batch_indices(n: int, batch_size: int, seed: int, step: int, salt: int = 0) -> np.ndarray:
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds corpus size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, 7919 + salt]))
    return rng.choice(n, size=batch_size, replace=False)


def _epoch_chunks(n: int, batch_size: int, seed: int, tag: int) -> list[np.ndarray]:
    """Permutation of [0, n) split into batch-sized chunks: one full pass."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, tag, 31337])).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def training_batch(index: CorpusIndex, batch_size: int, seed: int, step: int,
                   augment: bool = True):
    """Augmented (B,3,S,S) backlit batch; paired mode also returns targets
    with identical augmentation parameters applied per pair."""
    idx = _batch_indices(len(index.backlit), batch_size, seed, step)
    size = index.train_size
    inputs, targets = [], []
    for j, i in enumerate(idx):
        img, _ = load_image_file(index.backlit[i], square=size)
        params = augmentation_params(seed, step, j) if augment else None
        if params is not None:
            img = augment_image(img, params)
        inputs.append(img)
        if index.pairing == PAIRED:
            tgt, _ = load_image_file(index.welllit[i], square=size)
            if params is not None:
                tgt = augment_image(tgt, params)
            targets.append(tgt)
    batch = torch.stack(inputs)
    if index.pairing == PAIRED:
        return batch, torch.stack(targets)
    return batch


class EvalItem(NamedTuple):
    name: str
    backlit: torch.Tensor
    ground_truth: torch.Tensor | None


def eval_iterator(index: CorpusIndex, long_side: int = 2048) -> Iterator[EvalItem]:
    """Deterministic, unaugmented test iteration at inference resolution
    (longer side resized to ``long_side``)."""
    for i, path in enumerate(index.backlit):
        img, _ = load_image_file(path, long_side=long_side)
        gt = None
        if index.pairing == PAIRED:
            gt, _ = load_image_file(index.welllit[i], long_side=long_side)
        yield EvalItem(name=path.stem, backlit=img, ground_truth=gt)


# -- training sources --------------------------------------------------
#
# The trainers only need deterministic batches from each side; these two
# sources provide them for directories (with augmentation) and for
# in-memory tensors (toy/synthetic runs).

class DirectorySource:
    def __init__(self, index: CorpusIndex, augment: bool = True):
        self.index = index
        self.augment = augment
        self.fingerprint = index.fingerprint
        self.backlit_count = len(index.backlit)
        self.welllit_count = len(index.welllit)

    def _side_batch(self, paths, batch_size, seed, step, salt):
        idx = _batch_indices(len(paths), batch_size, seed, step, salt=salt)
        size = self.index.train_size
        out = []
        for j, i in enumerate(idx):
            img, _ = load_image_file(paths[i], square=size)
            if self.augment:
                img = augment_image(img, augmentation_params(seed, step, salt * 100003 + j))
            out.append(img)
        return torch.stack(out)

    def backlit_batch(self, batch_size: int, seed: int, step: int) -> torch.Tensor:
        return self._side_batch(self.index.backlit, batch_size, seed, step, salt=0)

    def welllit_batch(self, batch_size: int, seed: int, step: int) -> torch.Tensor:
        return self._side_batch(self.index.welllit, batch_size, seed, step, salt=1)

    def backlit_epoch(self, batch_size: int, seed: int, tag: int):
        """Batches covering one full pass over the backlit corpus."""
        size = self.index.train_size
        for c, chunk in enumerate(_epoch_chunks(self.backlit_count, batch_size, seed, tag)):
            out = []
            for j, i in enumerate(chunk):
                img, _ = load_image_file(self.index.backlit[i], square=size)
                if self.augment:
                    img = augment_image(img, augmentation_params(seed, tag, c * 100003 + j))
                out.append(img)
            yield torch.stack(out)

    def backlit_images(self):
        for p in self.index.backlit:
            yield load_image_file(p, square=self.index.train_size)[0]

    def welllit_images(self):
        for p in self.index.welllit:
            yield load_image_file(p, square=self.index.train_size)[0]


class TensorSource:
    """In-memory training source; tensors are used as-is (no augmentation)."""

    def __init__(self, backlit: torch.Tensor, welllit: torch.Tensor | None = None):
        self.backlit = as_float_batch(backlit)
        self.welllit = as_float_batch(welllit) if welllit is not None else None
        self.backlit_count = self.backlit.shape[0]
        self.welllit_count = 0 if self.welllit is None else self.welllit.shape[0]
        h = hashlib.sha256()
        h.update(self.backlit.numpy().tobytes())
        if self.welllit is not None:
            h.update(self.welllit.numpy().tobytes())
        self.fingerprint = h.hexdigest()

    def backlit_batch(self, batch_size: int, seed: int, step: int) -> torch.Tensor:
        idx = _batch_indices(self.backlit_count, batch_size, seed, step, salt=0)
        return self.backlit[torch.from_numpy(idx)]

    def welllit_batch(self, batch_size: int, seed: int, step: int) -> torch.Tensor:
        if self.welllit is None:
            raise CorpusError("this source has no well-lit images")
        idx = _batch_indices(self.welllit_count, batch_size, seed, step, salt=1)
        return self.welllit[torch.from_numpy(idx)]

    def backlit_epoch(self, batch_size: int, seed: int, tag: int):
        for chunk in _epoch_chunks(self.backlit_count, batch_size, seed, tag):
            yield self.backlit[torch.from_numpy(chunk)]

    def backlit_images(self):
        yield from self.backlit

    def welllit_images(self):
        if self.welllit is None:
            raise CorpusError("this source has no well-lit images")
        yield from self.welllit


def as_float_batch(t: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.contiguous()
