"""Command-line entry point.

Subcommands: compute-residual, interpret, train, enhance, evaluate.
Precedence: command-line flags override config-file values, which override
built-in defaults.  Config files are line-oriented ``key = value`` text;
``weights.<model-id> = <path>`` lines register pretrained weight locations
(optionally pinned with ``weights_sha256.<model-id>``).

Exit codes: 0 success; 2 degenerate directions and invalid requests
(including usage errors); 1 I/O and environment failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from ravelit import backends
from ravelit.data import (
    PAIRED,
    UNPAIRED,
    CorpusIndex,
    CorpusSpec,
    DirectorySource,
    scan_corpus,
)
from ravelit.errors import (
    CheckpointError,
    ChecksumMismatchError,
    CorpusError,
    DegenerateDirectionError,
    MetricBackendError,
    RavelitError,
    ResidualFileError,
    TextTowerUnavailableError,
    UnknownBackendError,
)
from ravelit.metrics import evaluate, format_table, write_report
from ravelit.residual import compute_residual, interpret_residual, load_residual, save_residual
from ravelit.training import METHODS, TrainConfig, load_checkpoint, run_training
from ravelit.unet import UNetConfig, enhance_file

_EXIT_OK = 0
_EXIT_IO = 1
_EXIT_INVALID = 2

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


# -- config files --------------------------------------------------------

def parse_config_file(path: str | Path) -> dict[str, str]:
    """Line-oriented ``key = value``; '#' starts a comment."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


_TUPLE_KEYS = {"margins": float, "adam_betas": float, "alpha_l": float}


def apply_config_entries(cfg: dict, entries: dict[str, str]) -> None:
    """Fold parsed config-file entries into a TrainConfig dict, registering
    any weights aliases on the way.  Unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    unet_fields = {f.name for f in dataclasses.fields(UNetConfig)}
    for key, value in entries.items():
        if key.startswith("weights_sha256."):
            continue
        if key.startswith("weights."):
            model_id = key[len("weights."):]
            backends.register_weights(model_id, value,
                                      sha256=entries.get(f"weights_sha256.{model_id}"))
            continue
        if key.startswith("unet."):
            sub = key[len("unet."):]
            if sub not in unet_fields:
                raise ValueError(f"unknown config key {key!r}")
            cfg.setdefault("unet", {})[sub] = _coerce(value, int)
            continue
        if key in _TUPLE_KEYS:
            cfg[key] = tuple(_coerce(v.strip(), _TUPLE_KEYS[key]) for v in value.split(","))
            continue
        if key == "pairing":
            if value not in (PAIRED, UNPAIRED, "paired", "unpaired"):
                raise ValueError(f"pairing must be paired or unpaired, got {value!r}")
            cfg["pairing"] = PAIRED if value.startswith("paired") else UNPAIRED
            continue
        if key == "backend":
            cfg["backend"] = value
            continue
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        hint = str(fields[key])
        if key in ("normalize_image_embedding",):
            cfg[key] = _coerce(value, bool)
        elif "int" in hint:
            cfg[key] = _coerce(value, int)
        elif "float" in hint:
            cfg[key] = _coerce(value, float)
        else:
            cfg[key] = value


# -- helpers ---------------------------------------------------------------

def _write_cli_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _positive_int(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _load_backend_from_args(args, entries: dict[str, str] | None = None):
    if entries:
        for key, value in entries.items():
            if key.startswith("weights."):
                model_id = key[len("weights."):]
                backends.register_weights(model_id, value,
                                          sha256=entries.get(f"weights_sha256.{model_id}"))
    return backends.load_backend(args.backend, device=args.device)


def _tensor_corpus(directory: str, train_size: int | None):
    from ravelit.data import load_image_file, _scan_dir

    for p in _scan_dir(Path(directory)):
        yield load_image_file(p, square=train_size)[0]


# -- subcommands -----------------------------------------------------------

def cmd_compute_residual(args) -> int:
    entries = parse_config_file(args.config) if args.config else {}
    backend = _load_backend_from_args(args, entries)
    rv = compute_residual(
        backend,
        _tensor_corpus(args.backlit, args.train_size),
        _tensor_corpus(args.well_lit, args.train_size),
    )
    out = Path(args.out)
    save_residual(rv, out)
    _write_cli_manifest(out.with_suffix(out.suffix + ".manifest.json"), {
        "command": "compute-residual",
        "backend": backend.model_id,
        "backend_checksum": backend.weight_checksum(),
        "backlit_dir": str(args.backlit),
        "well_lit_dir": str(args.well_lit),
        "dataset_fingerprint": rv.dataset_fingerprint,
        "n_back": rv.n_back,
        "n_well": rv.n_well,
    })
    norm = float(torch.linalg.vector_norm(rv.v_residual.double()))
    print(f"residual written to {out}")
    print(f"backlit images: {rv.n_back}  well-lit images: {rv.n_well}")
    print(f"residual norm: {norm:.6f}")
    return _EXIT_OK


def cmd_interpret(args) -> int:
    backend = _load_backend_from_args(args)
    rv = load_residual(args.residual)
    lowest, highest = interpret_residual(backend, rv, args.top_k)
    width = max([len("lowest similarity")]
                + [len(ts.token) for ts in lowest + highest]) + 2
    print(f"{'lowest similarity'.ljust(width + 8)}{'highest similarity'}")
    for lo, hi in zip(lowest, highest):
        left = f"{lo.token.ljust(width)}{lo.score:+.3f}"
        print(f"{left.ljust(width + 8)}{hi.token.ljust(width)}{hi.score:+.3f}")
    return _EXIT_OK


def cmd_train(args) -> int:
    cfg: dict = {"method": args.method.replace("-", "_")}
    entries = parse_config_file(args.config) if args.config else {}
    apply_config_entries(cfg, entries)
    backend_id = cfg.pop("backend", "vit-b-32")
    pairing = cfg.pop("pairing", UNPAIRED)

    for flag, key in (
        ("setting", "setting"), ("omega", "omega"), ("total_iters", "total_iters"),
        ("seed", "seed"), ("checkpoint_every", "checkpoint_every"),
        ("batch_enhance", "batch_enhance"), ("batch_guidance", "batch_guidance"),
        ("refine_rounds", "refine_rounds"), ("warmup_identity_iters", "warmup_identity_iters"),
        ("train_size", "train_size"), ("lr_enhance", "lr_enhance"),
        ("lr_guidance", "lr_guidance"), ("guidance_max_steps", "guidance_max_steps"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if args.backend is not None:
        backend_id = args.backend
    if args.paired:
        pairing = PAIRED

    config = TrainConfig.from_dict(cfg)
    backend = backends.load_backend(backend_id, device=args.device)
    index = scan_corpus(CorpusSpec(args.backlit, args.well_lit, pairing=pairing,
                                   train_size=config.train_size))
    data = DirectorySource(index, augment=not args.no_augment)
    rv = load_residual(args.residual) if args.residual else None
    result = run_training(config, backend, data, args.out, rv=rv,
                          resume_from=args.resume, echo=True)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"manifest: {result.manifest.path}")
    return _EXIT_OK


def cmd_enhance(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    model.eval()
    src = Path(args.input)
    dst = Path(args.output)
    reports = []
    if src.is_dir():
        files = sorted(p for p in src.rglob("*") if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise CorpusError(f"no images found in {src}")
        for p in files:
            out_path = dst / p.relative_to(src)
            reports.append(enhance_file(model, p, out_path, long_side=args.long_side))
        manifest_path = dst / "enhance_manifest.json"
    else:
        reports.append(enhance_file(model, src, dst, long_side=args.long_side))
        manifest_path = dst.with_suffix(dst.suffix + ".manifest.json")
    _write_cli_manifest(manifest_path, {
        "command": "enhance",
        "checkpoint": str(args.checkpoint),
        "long_side": args.long_side,
        "images": reports,
    })
    print(f"enhanced {len(reports)} image(s) -> {dst}")
    return _EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    model.eval()
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    root = Path(args.test)
    backlit_dir = root / "backlit"
    well_dir = root / "well_lit"
    if backlit_dir.is_dir() and well_dir.is_dir():
        index = scan_corpus(CorpusSpec(backlit_dir, well_dir, pairing=PAIRED))
    elif backlit_dir.is_dir():
        index = CorpusIndex(backlit=sorted(backlit_dir.iterdir()), welllit=[],
                            pairing=UNPAIRED, train_size=512, fingerprint="")
    else:
        raise CorpusError(f"{root} has no backlit/ subdirectory")
    out_dir = Path(args.out) if args.out else root / "eval"
    report = evaluate(model, index, metrics=metric_names, long_side=args.long_side,
                      out_dir=out_dir)
    print(format_table(report), end="")
    _write_cli_manifest(out_dir / "eval_manifest.json", {
        "command": "evaluate",
        "checkpoint": str(args.checkpoint),
        "test_fingerprint": index.fingerprint,
        "metrics": metric_names,
        "skipped": report.skipped,
        "long_side": args.long_side,
    })
    return _EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ravelit",
        description="CLIP-guided backlit image enhancement toolkit",
        epilog="Flags override config-file values, which override built-in defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compute-residual", help="build a residual guidance vector from two corpora")
    p.add_argument("--backlit", required=True, help="directory of backlit images")
    p.add_argument("--well-lit", dest="well_lit", required=True, help="directory of well-lit images")
    p.add_argument("--backend", required=True, help="encoder model id")
    p.add_argument("--out", required=True, help="output residual file")
    p.add_argument("--device", default="cpu")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--train-size", dest="train_size", type=_positive_int, default=None,
                   help="resize images to this square size before encoding")
    p.set_defaults(func=cmd_compute_residual)

    p = sub.add_parser("interpret", help="score vocabulary tokens against a residual vector")
    p.add_argument("--residual", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--top-k", dest="top_k", type=_positive_int, default=7)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("train", help="train an enhancement model")
    p.add_argument("--method", required=True, choices=[m.replace("_", "-") for m in METHODS])
    p.add_argument("--backlit", required=True)
    p.add_argument("--well-lit", dest="well_lit", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and manifest")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--backend", default=None)
    p.add_argument("--residual", default=None, help="precomputed residual file (rave)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--device", default="cpu")
    p.add_argument("--paired", action="store_true", help="pair corpora by filename stem")
    p.add_argument("--no-augment", dest="no_augment", action="store_true")
    p.add_argument("--setting", choices=["supervised", "unsupervised"], default=None)
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--total-iters", dest="total_iters", type=int, default=None)
    p.add_argument("--warmup-identity-iters", dest="warmup_identity_iters", type=int, default=None)
    p.add_argument("--refine-rounds", dest="refine_rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--batch-enhance", dest="batch_enhance", type=int, default=None)
    p.add_argument("--batch-guidance", dest="batch_guidance", type=int, default=None)
    p.add_argument("--train-size", dest="train_size", type=int, default=None)
    p.add_argument("--lr-enhance", dest="lr_enhance", type=float, default=None)
    p.add_argument("--lr-guidance", dest="lr_guidance", type=float, default=None)
    p.add_argument("--guidance-max-steps", dest="guidance_max_steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance an image file or directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--long-side", dest="long_side", type=_positive_int, default=2048)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="run metrics over a test corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test root with backlit/ (and well_lit/)")
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--out", default=None)
    p.add_argument("--long-side", dest="long_side", type=_positive_int, default=2048)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DegenerateDirectionError as e:
        print(f"error: degenerate residual: {e}", file=sys.stderr)
        return _EXIT_INVALID
    except (ValueError, TextTowerUnavailableError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_INVALID
    except (CorpusError, ResidualFileError, CheckpointError, UnknownBackendError,
            ChecksumMismatchError, MetricBackendError, RavelitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
