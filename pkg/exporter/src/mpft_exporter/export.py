"""Feature export: images in, one MPFT file out.

Inference-mode preprocessing only (resize, 224x224 center crop,
per-model normalization), gradients disabled throughout, and a sorted
directory walk, so exporting the same directory twice is
byte-identical. Labels are the index of each class subdirectory in
sorted order; the class-name mapping goes to a sidecar text file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import transforms

from .errors import ConfigError, DataError
from .models import IMAGE_SIZE, build_model
from .mpft import write_mpft

log = logging.getLogger("mpft_exporter")

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass(frozen=True)
class ExportSpec:
    model: str
    data_dir: str
    out_path: str
    batch_size: int = 16
    device: str = "cpu"
    mode: str = "auto"        # auto adopts the model family's mode

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.mode not in ("auto", "cls+tokens", "tokens-only"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class ExportSummary:
    out_path: Path
    sidecar_path: Path
    exported: int
    skipped: int
    classes: list[str]
    tokens_per_sample: int
    feature_dim: int
    has_cls: bool


def _scan_images(root: Path) -> tuple[list[str], list[tuple[Path, int]]]:
    """Class subdirectories in sorted order; a flat directory becomes a
    single unlabeled class."""
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if class_dirs:
        classes = [d.name for d in class_dirs]
        pairs = [(path, idx) for idx, d in enumerate(class_dirs)
                 for path in sorted(d.iterdir())
                 if path.suffix.lower() in _IMAGE_SUFFIXES]
    else:
        classes = ["unlabeled"]
        pairs = [(path, 0) for path in sorted(root.iterdir())
                 if path.suffix.lower() in _IMAGE_SUFFIXES]
    if not pairs:
        raise DataError(f"no images found under {root}")
    return classes, pairs


def export_features(spec: ExportSpec) -> ExportSummary:
    info, model = build_model(spec.model)
    if spec.mode != "auto" and spec.mode != info.mode:
        raise ConfigError(
            f"model {info.name} produces {info.mode!r} features; "
            f"requested {spec.mode!r}")
    device = torch.device(spec.device)
    model.to(device)

    preprocess = transforms.Compose([
        transforms.Resize(256),
        transforms.CenterCrop(IMAGE_SIZE),
        transforms.ToTensor(),
        transforms.Normalize(mean=info.mean, std=info.std),
    ])

    classes, pairs = _scan_images(Path(spec.data_dir))
    batch_imgs: list[torch.Tensor] = []
    batch_labels: list[int] = []
    sample_blocks: list[np.ndarray] = []
    labels: list[int] = []
    skipped = 0
    has_cls = info.mode == "cls+tokens"

    def flush():
        if not batch_imgs:
            return
        with torch.inference_mode():
            cls, tokens = model.forward_tokens(torch.stack(batch_imgs).to(device))
        tokens = tokens.cpu().numpy().astype(np.float32)
        if has_cls:
            cls = cls.cpu().numpy().astype(np.float32)
            block = np.concatenate([cls[:, None, :], tokens], axis=1)
        else:
            block = tokens
        sample_blocks.append(block)
        labels.extend(batch_labels)
        batch_imgs.clear()
        batch_labels.clear()

    for path, label in pairs:
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB")
        except Exception as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        batch_imgs.append(preprocess(rgb))
        batch_labels.append(label)
        if len(batch_imgs) == spec.batch_size:
            flush()
    flush()

    if not labels:
        raise DataError(f"no decodable images under {spec.data_dir}")
    features = np.concatenate(sample_blocks, axis=0)
    if features.shape[1:] != (info.tokens + int(has_cls), info.dim):
        raise ConfigError(
            f"model produced {features.shape[1:]} features, registry "
            f"expects ({info.tokens + int(has_cls)}, {info.dim})")

    out_path = Path(spec.out_path)
    write_mpft(out_path, np.asarray(labels, dtype=np.uint32), features,
               tokens_per_sample=info.tokens, has_cls=has_cls,
               class_count=len(classes))
    sidecar = out_path.with_suffix(out_path.suffix + ".classes.txt")
    sidecar.write_text("".join(f"{name}\n" for name in classes))
    return ExportSummary(out_path=out_path, sidecar_path=sidecar,
                         exported=len(labels), skipped=skipped,
                         classes=classes, tokens_per_sample=info.tokens,
                         feature_dim=info.dim, has_cls=has_cls)
