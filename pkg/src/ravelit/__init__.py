"""ravelit: CLIP-guided backlit image enhancement.

Three guidance schemes over one UNet enhancement model: learnable text
prompts (clip_lit), learnable latent vectors (clip_lit_latent), and a fixed
residual direction computed from corpus embedding means (rave), plus the
vocabulary-based interpretation of that residual direction.
"""

from ravelit.backends import load_backend, register_weights
from ravelit.guidance import GuidancePair, init_guidance, project
from ravelit.losses import (
    LossConfig,
    clip_guidance_loss,
    enhance_loss,
    guidance_softmax,
    identity_loss,
    initial_classification_loss,
    negative_similarity_score,
    prompt_refinement_loss,
    rave_loss,
    residual_loss,
)
from ravelit.metrics import MetricsReport, evaluate, fid, lpips, psnr, ssim
from ravelit.residual import (
    ResidualVector,
    TokenSimilarity,
    compute_residual,
    interpret_residual,
    load_residual,
    mean_embedding,
    normalize,
    save_residual,
    token_corpus_similarity,
)
from ravelit.training import (
    TrainConfig,
    TrainResult,
    load_checkpoint,
    make_refinement_batch,
    run_training,
    save_checkpoint,
    train_clip_lit,
    train_rave,
)
from ravelit.unet import EnhancedPair, UNetConfig, build_model, enhance, enhance_file

__version__ = "0.1.0"

__all__ = [
    "load_backend", "register_weights",
    "GuidancePair", "init_guidance", "project",
    "LossConfig", "clip_guidance_loss", "enhance_loss", "guidance_softmax",
    "identity_loss", "initial_classification_loss", "negative_similarity_score",
    "prompt_refinement_loss", "rave_loss", "residual_loss",
    "MetricsReport", "evaluate", "fid", "lpips", "psnr", "ssim",
    "ResidualVector", "TokenSimilarity", "compute_residual", "interpret_residual",
    "load_residual", "mean_embedding", "normalize", "save_residual",
    "token_corpus_similarity",
    "TrainConfig", "TrainResult", "load_checkpoint", "make_refinement_batch",
    "run_training", "save_checkpoint", "train_clip_lit", "train_rave",
    "EnhancedPair", "UNetConfig", "build_model", "enhance", "enhance_file",
]
