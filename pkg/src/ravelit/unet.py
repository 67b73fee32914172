"""UNet enhancement model.

The network maps a backlit RGB image to a one-channel illumination map in
(0, 1); the enhanced image is the input divided by the (floored) map and
clamped back to [0, 1].  Inputs of any size are handled by reflect-padding
up to a multiple of 2^depth and cropping the output back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ravelit.backends.base import as_image_batch, tensor_checksum

#: floor applied to the illumination map before division (caps amplification)
ILLUMINATION_FLOOR = 1e-4


@dataclass
class UNetConfig:
    depth: int = 3
    base_channels: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class EnhancementUNet(nn.Module):
    """Illumination-map estimator: (N,3,H,W) in [0,1] -> (N,1,H,W) in (0,1)."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.inc = _DoubleConv(3, c)
        self.downs = nn.ModuleList()
        ch = c
        for _ in range(config.depth):
            self.downs.append(_DoubleConv(ch, ch * 2))
            ch *= 2
        self.ups = nn.ModuleList()
        for _ in range(config.depth):
            # upsample halves the channels, skip concat restores them
            self.ups.append(nn.ModuleList([
                nn.Conv2d(ch, ch // 2, 3, padding=1, padding_mode="reflect"),
                _DoubleConv(ch, ch // 2),
            ]))
            ch //= 2
        self.outc = nn.Conv2d(c, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        mult = 2 ** self.config.depth
        pad_h = (mult - h % mult) % mult
        pad_w = (mult - w % mult) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        feat = self.inc(x)
        skips = [feat]
        for down in self.downs:
            feat = down(F.max_pool2d(feat, 2))
            skips.append(feat)
        for (reduce, conv), skip in zip(self.ups, reversed(skips[:-1])):
            feat = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
            feat = reduce(feat)
            feat = conv(torch.cat([skip, feat], dim=1))
        illum = torch.sigmoid(self.outc(feat))
        return illum[:, :, :h, :w]


@dataclass
class EnhancedPair:
    illumination: torch.Tensor
    enhanced: torch.Tensor


def build_model(config: UNetConfig, seed: int = 0) -> EnhancementUNet:
    """Deterministically initialized UNet (does not disturb the global RNG)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return EnhancementUNet(config)


def apply_illumination(image: torch.Tensor, illumination: torch.Tensor) -> torch.Tensor:
    """enhanced = clamp(image / max(illumination, floor), 0, 1)."""
    return torch.clamp(image / torch.clamp(illumination, min=ILLUMINATION_FLOOR), 0.0, 1.0)


def enhance(model: EnhancementUNet, image: torch.Tensor) -> EnhancedPair:
    """Run the model and divide; differentiable end to end.

    Accepts a single (3,H,W) image or an (N,3,H,W) batch and returns
    matching shapes.
    """
    single = isinstance(image, torch.Tensor) and image.ndim == 3
    batch = as_image_batch(image)
    illum = model(batch)
    enhanced = apply_illumination(batch, illum)
    if single:
        return EnhancedPair(illum[0], enhanced[0])
    return EnhancedPair(illum, enhanced)


def model_checksum(model: nn.Module) -> str:
    return tensor_checksum({k: v for k, v in model.state_dict().items()})


def enhance_file(model: EnhancementUNet, input_path: str | Path, output_path: str | Path,
                 long_side: int = 2048) -> dict:
    """Enhance one image file: resize so the longer side equals ``long_side``
    (aspect preserved), enhance, write 8-bit sRGB."""
    from ravelit.data import load_image_file, save_image_file

    if long_side <= 0:
        raise ValueError("long_side must be positive")
    image, original_size = load_image_file(input_path, long_side=long_side)
    with torch.no_grad():
        result = enhance(model, image)
    save_image_file(result.enhanced, output_path)
    return {
        "input": str(input_path),
        "output": str(output_path),
        "original_size": original_size,
        "processed_size": (image.shape[2], image.shape[1]),
    }
