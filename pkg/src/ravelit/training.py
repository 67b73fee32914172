"""Training orchestration for the three guidance schemes.

RAVE is a single stage: the residual vector is computed once up front and the
UNet minimizes L_identity + omega * L_residual over backlit batches.

CLIP-LIT and CLIP-LIT-Latent share a two-stage schedule: (1) guidance
initialization (classification loss) followed by enhancement training whose
first `warmup_identity_iters` iterations use only the identity loss, then
(2) `refine_rounds` alternations of a guidance-refinement epoch (margin
ranking loss) and an enhancement-tuning epoch.

Everything is deterministic given (seed, data): batches are pure functions
of (seed, step), manifests carry no timestamps, and checkpoints are
byte-stable, so fixed seeds reproduce bit-identical manifests and a
save/resume run replays the uninterrupted loss trajectory.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ravelit.backends.base import EncoderBackend
from ravelit.errors import CheckpointError
from ravelit.guidance import (
    GuidancePair,
    LATENT_SPACE,
    TOKEN_SPACE,
    guidance_init_step,
    guidance_refine_step,
    init_guidance,
    project,
)
from ravelit.losses import clip_guidance_loss, enhance_loss, identity_loss, rave_loss, residual_loss
from ravelit.residual import ResidualVector, compute_residual, decode_residual, encode_residual
from ravelit.unet import EnhancementUNet, UNetConfig, build_model, enhance

METHOD_RAVE = "rave"
METHOD_CLIP_LIT = "clip_lit"
METHOD_CLIP_LIT_LATENT = "clip_lit_latent"
METHODS = (METHOD_RAVE, METHOD_CLIP_LIT, METHOD_CLIP_LIT_LATENT)
SETTINGS = ("supervised", "unsupervised")

CHECKPOINT_VERSION = 1

# step-namespace offsets so the different loops never share batch draws
_REFINE_GUIDANCE_TAG = 1_000_000
_REFINE_ENHANCE_TAG = 2_000_000


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    Method-dependent defaults: omega 6 for rave / 0.9 otherwise, enhancement
    batch 8 for rave / 16 otherwise, 10k iterations for rave / 50k otherwise.
    RAVE has no identity-only warmup and no refinement rounds.
    """

    method: str
    setting: str = "unsupervised"
    omega: float | None = None
    lr_enhance: float = 2e-5
    lr_guidance: float = 5e-6
    batch_enhance: int | None = None
    batch_guidance: int = 8
    total_iters: int | None = None
    warmup_identity_iters: int = 1000
    margins: tuple[float, float, float] = (0.9, 0.2, 0.2)
    refine_rounds: int = 10
    seed: int = 0
    checkpoint_every: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.99)
    train_size: int = 512
    guidance_tokens: int = 16
    guidance_loss_threshold: float = 0.05
    guidance_max_steps: int = 5000
    alpha_l: tuple[float, ...] | None = None
    normalize_image_embedding: bool = True
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.omega is None:
            self.omega = 6.0 if self.method == METHOD_RAVE else 0.9
        if self.batch_enhance is None:
            self.batch_enhance = 8 if self.method == METHOD_RAVE else 16
        if self.total_iters is None:
            self.total_iters = 10_000 if self.method == METHOD_RAVE else 50_000
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        self.margins = tuple(self.margins)
        self.adam_betas = tuple(self.adam_betas)
        if self.alpha_l is not None:
            self.alpha_l = tuple(self.alpha_l)
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if self.lr_enhance <= 0 or self.lr_guidance <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_enhance <= 0 or self.batch_guidance <= 0:
            raise ValueError("batch sizes must be positive")
        if self.total_iters < 0 or self.refine_rounds < 0:
            raise ValueError("iteration counts must be nonnegative")
        for m in self.margins:
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"margins must lie in [0,1], got {self.margins}")

    @property
    def guidance_kind(self) -> str:
        return TOKEN_SPACE if self.method == METHOD_CLIP_LIT else LATENT_SPACE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("margins", "adam_betas", "alpha_l"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class RunManifest:
    """Append-only JSONL event log: config snapshot, per-iteration losses,
    checkpoint index.  Deterministic content for fixed seeds (no timestamps,
    no absolute paths)."""

    def __init__(self, path: str | Path | None = None, echo: bool = False):
        self.path = Path(path) if path is not None else None
        self.echo = echo
        self.events: list[dict] = []
        self._fh = open(self.path, "w", encoding="utf-8") if self.path else None

    def log(self, event: dict) -> None:
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()
        if self.echo and event.get("event") == "loss":
            parts = " ".join(f"{k}={v:.6f}" for k, v in event.items()
                             if isinstance(v, float))
            print(f"[{event.get('phase', '?')}] iter {event.get('iter', '?')} {parts}")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def losses(self, phase: str | None = None) -> list[dict]:
        return [e for e in self.events
                if e.get("event") == "loss" and (phase is None or e.get("phase") == phase)]


# -- checkpoint container ------------------------------------------------
#
# A versioned zip archive: meta.json plus one .npy entry per tensor
# (little-endian float32 weight arrays), the guidance pair, per-parameter
# Adam slots, an embedded residual file for rave, and the stage-2 model
# snapshot.  Entry timestamps are fixed so identical states produce
# byte-identical files.

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _write_state_dict(zf: zipfile.ZipFile, prefix: str, state: dict) -> None:
    for key in sorted(state):
        _zip_write(zf, f"{prefix}/{key}.npy", _npy_bytes(state[key].detach().cpu().contiguous().numpy()))


def _read_state_dict(zf: zipfile.ZipFile, prefix: str) -> dict:
    out = {}
    plen = len(prefix) + 1
    for name in zf.namelist():
        if name.startswith(prefix + "/") and name.endswith(".npy"):
            arr = np.load(io.BytesIO(zf.read(name)))
            out[name[plen:-4]] = torch.from_numpy(arr.copy())
    return out


def _optimizer_slots(opt: torch.optim.Optimizer, params: list[torch.Tensor]) -> dict:
    slots = {}
    for i, p in enumerate(params):
        state = opt.state.get(p)
        if state:
            for slot, val in state.items():
                slots[f"{i}.{slot}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    return slots


def _restore_optimizer(opt: torch.optim.Optimizer, params: list[torch.Tensor], slots: dict) -> None:
    per_param: dict[int, dict] = {}
    for key, val in slots.items():
        idx, slot = key.split(".", 1)
        per_param.setdefault(int(idx), {})[slot] = val
    for i, state in per_param.items():
        opt.state[params[i]] = state


@dataclass
class Checkpoint:
    """Restored training state (weights already loaded into fresh modules)."""

    config: TrainConfig
    phase: str
    iteration: int
    guidance_steps: int
    rounds_done: int
    data_fingerprint: str
    model: EnhancementUNet
    enhance_slots: dict
    guidance: GuidancePair | None = None
    guidance_slots: dict | None = None
    rv: ResidualVector | None = None
    snapshot: EnhancementUNet | None = None


def save_checkpoint(path: str | Path, *, config: TrainConfig, phase: str, iteration: int,
                    model: EnhancementUNet, enhance_opt: torch.optim.Optimizer,
                    data_fingerprint: str, guidance: GuidancePair | None = None,
                    guidance_opt: torch.optim.Optimizer | None = None,
                    rv: ResidualVector | None = None,
                    snapshot: EnhancementUNet | None = None,
                    guidance_steps: int = 0, rounds_done: int = 0) -> str:
    """Write the checkpoint archive; returns its SHA-256 hex digest."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "phase": phase,
        "iteration": iteration,
        "guidance_steps": guidance_steps,
        "rounds_done": rounds_done,
        "config": config.to_dict(),
        "data_fingerprint": data_fingerprint,
        "guidance_kind": guidance.kind if guidance is not None else None,
        "guidance_token_count": guidance.token_count if guidance is not None else None,
        "has_snapshot": snapshot is not None,
        "has_rv": rv is not None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        _write_state_dict(zf, "model", model.state_dict())
        _write_state_dict(zf, "opt_enhance", _optimizer_slots(enhance_opt, list(model.parameters())))
        if guidance is not None:
            _zip_write(zf, "guidance/positive.npy", _npy_bytes(guidance.positive.detach().numpy()))
            _zip_write(zf, "guidance/negative.npy", _npy_bytes(guidance.negative.detach().numpy()))
            if guidance_opt is not None:
                _write_state_dict(zf, "opt_guidance", _optimizer_slots(guidance_opt, guidance.parameters()))
        if rv is not None:
            _zip_write(zf, "residual.rvec", encode_residual(rv))
        if snapshot is not None:
            _write_state_dict(zf, "snapshot", snapshot.state_dict())
    tmp.replace(path)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_checkpoint(path: str | Path, expect_unet: UNetConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CheckpointError(f"{path} is not a ravelit checkpoint (missing meta.json)") from None
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        config = TrainConfig.from_dict(meta["config"])
        if expect_unet is not None and asdict(expect_unet) != asdict(config.unet):
            raise CheckpointError(
                f"{path}: checkpoint architecture {asdict(config.unet)} does not match "
                f"requested {asdict(expect_unet)}")
        model = build_model(config.unet, seed=config.seed)
        model.load_state_dict(_read_state_dict(zf, "model"))
        enhance_slots = _read_state_dict(zf, "opt_enhance")

        guidance = None
        guidance_slots = None
        if meta.get("guidance_kind"):
            pos = torch.from_numpy(np.load(io.BytesIO(zf.read("guidance/positive.npy"))).copy())
            neg = torch.from_numpy(np.load(io.BytesIO(zf.read("guidance/negative.npy"))).copy())
            guidance = GuidancePair(meta["guidance_kind"], pos.requires_grad_(True),
                                    neg.requires_grad_(True), meta.get("guidance_token_count"))
            guidance_slots = _read_state_dict(zf, "opt_guidance")

        rv = None
        if meta.get("has_rv"):
            rv = decode_residual(zf.read("residual.rvec"), source=f"{path}!residual.rvec")

        snapshot = None
        if meta.get("has_snapshot"):
            snapshot = build_model(config.unet, seed=config.seed)
            snapshot.load_state_dict(_read_state_dict(zf, "snapshot"))

    return Checkpoint(config=config, phase=meta["phase"], iteration=meta["iteration"],
                      guidance_steps=meta.get("guidance_steps", 0),
                      rounds_done=meta.get("rounds_done", 0),
                      data_fingerprint=meta.get("data_fingerprint", ""),
                      model=model, enhance_slots=enhance_slots, guidance=guidance,
                      guidance_slots=guidance_slots, rv=rv, snapshot=snapshot)


# -- training loops ------------------------------------------------------

@dataclass
class TrainResult:
    model: EnhancementUNet
    config: TrainConfig
    out_dir: Path
    manifest: RunManifest
    final_checkpoint: Path
    guidance: GuidancePair | None = None
    rv: ResidualVector | None = None
    stage1_checkpoint: Path | None = None


def make_refinement_batch(current_model: EnhancementUNet, previous_snapshot: EnhancementUNet,
                          wells: torch.Tensor, backlits: torch.Tensor):
    """(I_w, I_b, I_t, I_prev) for a guidance refinement step; the enhanced
    groups carry no gradients into the enhancement weights."""
    if previous_snapshot is None:
        raise ValueError("missing previous enhancement snapshot (run stage 1 first)")
    with torch.no_grad():
        enhanced = enhance(current_model, backlits).enhanced
        previous = enhance(previous_snapshot, backlits).enhanced
    return wells, backlits, enhanced, previous


def _adam(params, config: TrainConfig, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=config.adam_betas)


def _alpha(config: TrainConfig, backend: EncoderBackend) -> list[float]:
    if config.alpha_l is not None:
        return list(config.alpha_l)
    return [1.0] * backend.layer_count


def _log_run_header(manifest: RunManifest, config: TrainConfig, backend: EncoderBackend,
                    data, resumed_at: int | None, rv: ResidualVector | None = None) -> None:
    event = {
        "event": "run_config",
        "config": config.to_dict(),
        "backend_model_id": backend.model_id,
        "backend_checksum": backend.weight_checksum(),
        "data_fingerprint": data.fingerprint,
    }
    if rv is not None:
        event["residual_fingerprint"] = rv.dataset_fingerprint
    if resumed_at is not None:
        event["resumed_at_iteration"] = resumed_at
    manifest.log(event)


def _maybe_checkpoint(out_dir: Path, manifest: RunManifest, it: int, every: int, **state) -> None:
    if every and (it + 1) % every == 0:
        name = f"checkpoint_{it + 1:06d}.ckpt"
        digest = save_checkpoint(out_dir / name, iteration=it + 1, **state)
        manifest.log({"event": "checkpoint", "iter": it + 1, "file": name, "sha256": digest})


def train_rave(config: TrainConfig, backend: EncoderBackend, rv: ResidualVector,
               data, out_dir: str | Path, resume_from: str | Path | None = None,
               echo: bool = False) -> TrainResult:
    """Single-stage RAVE training: L_rave = L_identity + omega * L_residual."""
    if config.method != METHOD_RAVE:
        raise ValueError(f"train_rave needs method='rave', got {config.method!r}")
    if rv.backend_model_id != backend.model_id:
        raise ValueError(
            f"residual vector was computed with backend '{rv.backend_model_id}' "
            f"but training uses '{backend.model_id}'")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        config = ckpt.config
        model = ckpt.model
        opt = _adam(model.parameters(), config, config.lr_enhance)
        _restore_optimizer(opt, list(model.parameters()), ckpt.enhance_slots)
        if ckpt.rv is not None:
            rv = ckpt.rv
        start = ckpt.iteration
    else:
        model = build_model(config.unet, seed=config.seed)
        opt = _adam(model.parameters(), config, config.lr_enhance)

    manifest = RunManifest(out_dir / "manifest.jsonl", echo=echo)
    _log_run_header(manifest, config, backend, data, start if resume_from else None, rv=rv)
    alpha = _alpha(config, backend)
    ckpt_state = dict(config=config, phase="rave", model=model, enhance_opt=opt,
                      rv=rv, data_fingerprint=data.fingerprint)

    for it in range(start, config.total_iters):
        batch = data.backlit_batch(config.batch_enhance, config.seed, it)
        out = enhance(model, batch)
        with torch.no_grad():
            acts_b = backend.encode_image_layers(batch)
        acts_t = backend.encode_image_layers(out.enhanced)
        ident = identity_loss(acts_b, acts_t, alpha)
        resid = residual_loss(acts_t[-1], rv, config.normalize_image_embedding).mean()
        loss = rave_loss(ident, resid, config.omega)
        opt.zero_grad()
        loss.backward()
        opt.step()
        manifest.log({"event": "loss", "phase": "rave", "iter": it,
                      "identity": float(ident.detach()), "residual": float(resid.detach()),
                      "total": float(loss.detach())})
        _maybe_checkpoint(out_dir, manifest, it, config.checkpoint_every, **ckpt_state)

    final = out_dir / "checkpoint_final.ckpt"
    digest = save_checkpoint(final, iteration=config.total_iters, **ckpt_state)
    manifest.log({"event": "checkpoint", "iter": config.total_iters,
                  "file": final.name, "sha256": digest})
    manifest.log({"event": "done", "iterations": config.total_iters})
    manifest.close()
    return TrainResult(model=model, config=config, out_dir=out_dir, manifest=manifest,
                       final_checkpoint=final, rv=rv)


def _enhance_step(model, opt, batch, backend, alpha, config, pair) -> dict:
    """One full L_enhance step (clip + omega * identity); returns loss parts."""
    out = enhance(model, batch)
    with torch.no_grad():
        acts_b = backend.encode_image_layers(batch)
        pos, neg = project(pair, backend)
    acts_t = backend.encode_image_layers(out.enhanced)
    ident = identity_loss(acts_b, acts_t, alpha)
    clip = clip_guidance_loss(acts_t[-1], pos, neg).mean()
    loss = enhance_loss(clip, ident, config.omega)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {"clip": float(clip.detach()), "identity": float(ident.detach()),
            "total": float(loss.detach())}


def train_clip_lit(config: TrainConfig, backend: EncoderBackend, data,
                   out_dir: str | Path, resume_from: str | Path | None = None,
                   echo: bool = False) -> TrainResult:
    """Two-stage CLIP-LIT / CLIP-LIT-Latent training with refinement rounds."""
    if config.method not in (METHOD_CLIP_LIT, METHOD_CLIP_LIT_LATENT):
        raise ValueError(f"train_clip_lit needs a clip_lit method, got {config.method!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_iter = 0
    rounds_done = 0
    guidance_steps = 0
    snapshot = None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        config = ckpt.config
        model = ckpt.model
        pair = ckpt.guidance
        if pair is None:
            raise CheckpointError(f"{resume_from} carries no guidance state")
        opt_e = _adam(model.parameters(), config, config.lr_enhance)
        _restore_optimizer(opt_e, list(model.parameters()), ckpt.enhance_slots)
        opt_g = _adam(pair.parameters(), config, config.lr_guidance)
        _restore_optimizer(opt_g, pair.parameters(), ckpt.guidance_slots or {})
        start_iter = ckpt.iteration
        guidance_steps = ckpt.guidance_steps
        rounds_done = ckpt.rounds_done
        snapshot = ckpt.snapshot
        skip_guidance_init = True
    else:
        model = build_model(config.unet, seed=config.seed)
        opt_e = _adam(model.parameters(), config, config.lr_enhance)
        pair = init_guidance(config.guidance_kind, config.seed, backend,
                             token_count=config.guidance_tokens)
        opt_g = _adam(pair.parameters(), config, config.lr_guidance)
        skip_guidance_init = False

    manifest = RunManifest(out_dir / "manifest.jsonl", echo=echo)
    _log_run_header(manifest, config, backend, data, start_iter if resume_from else None)
    alpha = _alpha(config, backend)

    def ckpt_state(phase):
        return dict(config=config, phase=phase, model=model, enhance_opt=opt_e,
                    guidance=pair, guidance_opt=opt_g, snapshot=snapshot,
                    guidance_steps=guidance_steps, rounds_done=rounds_done,
                    data_fingerprint=data.fingerprint)

    # stage 1a: guidance initialization (classification of backlit vs well-lit)
    if not skip_guidance_init:
        manifest.log({"event": "phase", "phase": "guidance_init"})
        half = max(1, config.batch_guidance // 2)
        for g in range(config.guidance_max_steps):
            backlits = data.backlit_batch(half, config.seed, g)
            wells = data.welllit_batch(config.batch_guidance - half, config.seed, g)
            images = torch.cat([backlits, wells])
            labels = torch.cat([torch.zeros(len(backlits)), torch.ones(len(wells))])
            loss = guidance_init_step(pair, images, labels, backend, opt_g)
            guidance_steps = g + 1
            manifest.log({"event": "loss", "phase": "guidance_init", "iter": g, "loss": loss})
            if loss < config.guidance_loss_threshold:
                break

    # stage 1b: enhancement training (identity-only warmup, then full loss)
    if start_iter < config.total_iters:
        manifest.log({"event": "phase", "phase": "stage1_enhance"})
    for it in range(start_iter, config.total_iters):
        batch = data.backlit_batch(config.batch_enhance, config.seed, it)
        if it < config.warmup_identity_iters:
            out = enhance(model, batch)
            with torch.no_grad():
                acts_b = backend.encode_image_layers(batch)
            acts_t = backend.encode_image_layers(out.enhanced)
            ident = identity_loss(acts_b, acts_t, alpha)
            opt_e.zero_grad()
            ident.backward()
            opt_e.step()
            manifest.log({"event": "loss", "phase": "warmup", "iter": it,
                          "identity": float(ident.detach())})
        else:
            parts = _enhance_step(model, opt_e, batch, backend, alpha, config, pair)
            manifest.log({"event": "loss", "phase": "enhance", "iter": it, **parts})
        _maybe_checkpoint(out_dir, manifest, it, config.checkpoint_every, **ckpt_state("stage1_enhance"))

    stage1_path = None
    if snapshot is None:
        snapshot = copy.deepcopy(model)
        stage1_path = out_dir / "checkpoint_stage1.ckpt"
        digest = save_checkpoint(stage1_path, iteration=config.total_iters, **ckpt_state("refine"))
        manifest.log({"event": "checkpoint", "iter": config.total_iters,
                      "file": stage1_path.name, "sha256": digest})

    # stage 2: alternating guidance refinement and enhancement tuning
    for r in range(rounds_done + 1, config.refine_rounds + 1):
        manifest.log({"event": "phase", "phase": "refine_round", "round": r})
        for j, backlits in enumerate(data.backlit_epoch(config.batch_guidance, config.seed,
                                                        _REFINE_GUIDANCE_TAG + r)):
            wells = data.welllit_batch(len(backlits), config.seed, _REFINE_GUIDANCE_TAG + r * 1000 + j)
            batch4 = make_refinement_batch(model, snapshot, wells, backlits)
            loss = guidance_refine_step(pair, batch4, backend, config.margins, opt_g)
            manifest.log({"event": "loss", "phase": "refine_guidance", "round": r,
                          "iter": j, "loss": loss})
        for j, backlits in enumerate(data.backlit_epoch(config.batch_enhance, config.seed,
                                                        _REFINE_ENHANCE_TAG + r)):
            parts = _enhance_step(model, opt_e, backlits, backend, alpha, config, pair)
            manifest.log({"event": "loss", "phase": "refine_enhance", "round": r, "iter": j, **parts})
        snapshot = copy.deepcopy(model)
        rounds_done = r
        name = f"checkpoint_round_{r:03d}.ckpt"
        digest = save_checkpoint(out_dir / name, iteration=config.total_iters, **ckpt_state("refine"))
        manifest.log({"event": "checkpoint", "iter": config.total_iters, "round": r,
                      "file": name, "sha256": digest})

    final = out_dir / "checkpoint_final.ckpt"
    digest = save_checkpoint(final, iteration=config.total_iters, **ckpt_state("refine"))
    manifest.log({"event": "checkpoint", "iter": config.total_iters,
                  "file": final.name, "sha256": digest})
    manifest.log({"event": "done", "iterations": config.total_iters, "rounds": rounds_done})
    manifest.close()
    return TrainResult(model=model, config=config, out_dir=out_dir, manifest=manifest,
                       final_checkpoint=final, guidance=pair, stage1_checkpoint=stage1_path)


def run_training(config: TrainConfig, backend: EncoderBackend, data, out_dir: str | Path,
                 rv: ResidualVector | None = None, resume_from: str | Path | None = None,
                 echo: bool = False) -> TrainResult:
    """Dispatch on method; for rave without a residual vector, compute it
    from the training corpora first."""
    if config.method == METHOD_RAVE:
        if rv is None:
            rv = compute_residual(backend, data.backlit_images(), data.welllit_images())
        return train_rave(config, backend, rv, data, out_dir, resume_from=resume_from, echo=echo)
    return train_clip_lit(config, backend, data, out_dir, resume_from=resume_from, echo=echo)
