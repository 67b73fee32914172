"""Quantitative evaluation.

PSNR and SSIM are implemented natively on [0,1] float images (after the
model's final clamp, matching what files contain).  LPIPS and FID feature
networks are pluggable adapters, not re-implementations: runs without them
simply omit those columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy.ndimage import correlate1d

from ravelit.data import CorpusIndex, EvalItem, eval_iterator
from ravelit.errors import MetricBackendError
from ravelit.unet import EnhancementUNet, enhance

_LUMA = (0.299, 0.587, 0.114)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

PAIRED_METRICS = ("psnr", "ssim", "lpips")


def _as_hw3(image) -> np.ndarray:
    """Accept (3,H,W) or (H,W,3) in [0,1]; return (H,W,3) float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {arr.shape}")
    return arr


def psnr(a, b) -> float:
    """10*log10(1/MSE) on [0,1] images; identical inputs give +inf."""
    x, y = _as_hw3(a), _as_hw3(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    m = len(kernel) // 2
    return out[m:-m, m:-m]


def ssim(a, b) -> float:
    """Single-scale SSIM on the luminance channel.

    11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2, averaged over
    valid window positions only.
    """
    x, y = _as_hw3(a), _as_hw3(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    gx = x @ np.asarray(_LUMA)
    gy = y @ np.asarray(_LUMA)
    if min(gx.shape) < _SSIM_WINDOW:
        raise ValueError(f"image {gx.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    k = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_x = _window_mean(gx, k)
    mu_y = _window_mean(gy, k)
    var_x = _window_mean(gx * gx, k) - mu_x ** 2
    var_y = _window_mean(gy * gy, k) - mu_y ** 2
    cov = _window_mean(gx * gy, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(num / den))


def lpips(a, b, perceptual_backend: Callable | None) -> float:
    """Perceptual distance via a registered backend (e.g. AlexNet LPIPS)."""
    if perceptual_backend is None:
        raise MetricBackendError("lpips requested but no perceptual backend is registered")
    return float(perceptual_backend(a, b))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (n, d).

    The trace term uses the symmetrized product sqrt(Sa) Sb sqrt(Sa) with
    eigendecomposition and negative-eigenvalue clipping, which is robust on
    small sample counts.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("FID needs at least 2 samples per set")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    for cov in (cov_a, cov_b):
        vals = np.linalg.eigvalsh(cov)
        if vals.min() < -1e-8 * max(1.0, abs(vals.max())):
            raise ValueError("covariance is not PSD after numerical cleanup")
    sa = _sqrt_psd(cov_a)
    inner = sa @ cov_b @ sa
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


# -- test-set evaluation ------------------------------------------------

@dataclass
class MetricsReport:
    per_image: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    fid: float | None = None
    skipped: list[str] = field(default_factory=list)


def evaluate(model: EnhancementUNet, test_corpus, metrics: Sequence[str] = ("psnr", "ssim"),
             perceptual_backend: Callable | None = None,
             feature_backend: Callable | None = None,
             long_side: int | None = None, out_dir: str | Path | None = None) -> MetricsReport:
    """Enhance every test image and score the selected metrics.

    ``test_corpus`` is a ``CorpusIndex`` or an iterable of ``EvalItem``.
    Paired metrics (psnr/ssim/lpips) need ground truths; fid additionally
    needs a feature backend mapping an image to a feature vector.  Metrics
    whose backend is missing are skipped and recorded in ``report.skipped``.
    """
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in (*PAIRED_METRICS, "fid")]
    if unknown:
        raise ValueError(f"unknown metrics: {unknown}")
    if isinstance(test_corpus, CorpusIndex):
        items: Iterable[EvalItem] = eval_iterator(
            test_corpus, long_side=long_side if long_side is not None else 2048)
    else:
        items = test_corpus

    report = MetricsReport()
    if "lpips" in metrics and perceptual_backend is None:
        metrics.remove("lpips")
        report.skipped.append("lpips")
    want_fid = "fid" in metrics
    if want_fid:
        metrics.remove("fid")
        if feature_backend is None:
            want_fid = False
            report.skipped.append("fid")

    feats_enhanced, feats_reference = [], []
    for item in items:
        with torch.no_grad():
            enhanced = enhance(model, item.backlit).enhanced
        row = {"name": item.name}
        if metrics and item.ground_truth is None:
            raise ValueError(f"paired metrics {metrics} requested but '{item.name}' has no ground truth")
        if "psnr" in metrics:
            row["psnr"] = psnr(enhanced, item.ground_truth)
        if "ssim" in metrics:
            row["ssim"] = ssim(enhanced, item.ground_truth)
        if "lpips" in metrics:
            row["lpips"] = lpips(enhanced, item.ground_truth, perceptual_backend)
        if want_fid:
            if item.ground_truth is None:
                raise ValueError("fid needs a reference set: test corpus has no ground truths")
            feats_enhanced.append(np.asarray(feature_backend(enhanced), dtype=np.float64))
            feats_reference.append(np.asarray(feature_backend(item.ground_truth), dtype=np.float64))
        report.per_image.append(row)

    for m in metrics:
        col = [row[m] for row in report.per_image]
        report.means[m] = float(np.mean(col)) if col else math.nan
    if want_fid and feats_enhanced:
        report.fid = fid(np.stack(feats_enhanced), np.stack(feats_reference))
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def format_table(report: MetricsReport) -> str:
    """Human-readable aligned table: one row per image plus the means."""
    cols = [c for c in ("psnr", "ssim", "lpips") if c in report.means]
    width = max([len("image")] + [len(r["name"]) for r in report.per_image]) + 2
    lines = ["image".ljust(width) + "".join(c.rjust(10) for c in cols)]
    for row in report.per_image:
        lines.append(row["name"].ljust(width)
                     + "".join(f"{row[c]:10.4f}" for c in cols))
    lines.append("mean".ljust(width) + "".join(f"{report.means[c]:10.4f}" for c in cols))
    if report.fid is not None:
        lines.append(f"fid (set-level){report.fid:>{width + 10 * len(cols) - 15}.4f}")
    return "\n".join(lines) + "\n"


def to_record(report: MetricsReport) -> str:
    """Machine-readable key = value record."""
    lines = [f"{m}_mean = {v!r}" for m, v in sorted(report.means.items())]
    if report.fid is not None:
        lines.append(f"fid = {report.fid!r}")
    lines.append(f"n_images = {len(report.per_image)}")
    if report.skipped:
        lines.append(f"skipped = {','.join(report.skipped)}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "metrics.txt"
    record = out / "metrics_record.txt"
    table.write_text(format_table(report), encoding="utf-8")
    record.write_text(to_record(report), encoding="utf-8")
    return table, record
