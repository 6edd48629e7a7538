"""Corpus ingestion, joint training, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    ArchMismatchError,
    ChecksumError,
    ConfigError,
    DivergenceError,
    IngestionError,
    MigrationError,
)
from .imageio import list_images, read_image
from .metrics import MetricsReport, MetricsRow, blockiness_index, paper_reference, psnr, ssim
from .models import ARCHS, FULL_ARCHS, ArchConfig, Model, build_model, reconstruction_loss

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"CVCSCKPT"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    arch: str = "fully-conv-res"
    rate: float = 0.10
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch_size: int = 96
    patches_per_image: int = 1
    max_steps: int = 0  # 0 = no cap
    warmup_epochs: int = 0  # leading epochs that train only the linear path
    checkpoint_every: int = 0  # 0 = only at the end
    train: list = field(default_factory=list)  # image files or directories
    checkpoint: str = ""
    history: str = ""
    features: int = 64
    residual_blocks: int = 3
    kernel: int = 32
    stride: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
        cfg = cls(**d)
        if isinstance(cfg.train, str):
            cfg.train = [cfg.train]
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(data)

    def validate(self) -> "TrainConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: unknown arch {self.arch!r}")
        if not isinstance(self.rate, (int, float)) or not 0 < self.rate <= 1:
            raise ConfigError(f"rate out of range: {self.rate}")
        for name in ("epochs", "batch_size", "patch_size", "patches_per_image", "features", "kernel", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("max_steps", "checkpoint_every", "residual_blocks", "seed", "warmup_epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("adam betas must lie in [0, 1) and eps must be positive")
        if self.arch in FULL_ARCHS and self.patch_size % self.stride:
            raise ConfigError(f"patch_size {self.patch_size} must be a multiple of stride {self.stride}")
        self.arch_config()
        return self

    def arch_config(self) -> ArchConfig:
        return ArchConfig(features=self.features, residual_blocks=self.residual_blocks,
                          kernel=self.kernel, stride=self.stride).validate()

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# corpus


def corpus_files(paths) -> list:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(list_images(p))
        elif p.is_file():
            files.append(p)
        else:
            raise IngestionError(f"{p}: no such file or directory")
    return files


def load_corpus(paths) -> list:
    """Images as (1, 1, H, W) float64 arrays in [0, 1], lexicographic within each directory."""
    return [read_image(f)[None, None] for f in corpus_files(paths)]


def load_named_corpus(paths) -> list:
    return [(f.stem, read_image(f)[None, None]) for f in corpus_files(paths)]


@dataclass
class PatchSet:
    patches: list
    skipped: int = 0


def extract_patches(corpus: Sequence[np.ndarray], patch_size: int, per_image: int, seed: int) -> PatchSet:
    """Seeded uniform random crops; images smaller than the patch are skipped and counted."""
    rng = np.random.default_rng(seed)
    out, skipped = [], 0
    for img in corpus:
        h, w = img.shape[-2:]
        if h < patch_size or w < patch_size:
            skipped += 1
            continue
        for _ in range(per_image):
            top = int(rng.integers(0, h - patch_size + 1))
            left = int(rng.integers(0, w - patch_size + 1))
            out.append(np.ascontiguousarray(img[..., top:top + patch_size, left:left + patch_size]))
    if skipped:
        log.warning("skipped %d image(s) smaller than %d px", skipped, patch_size)
    return PatchSet(out, skipped)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: Model
    history: list = field(default_factory=list)
    train_config: dict | None = None
    steps: int = 0

    def header(self) -> dict:
        m = self.model
        return {
            "format_version": FORMAT_VERSION,
            "arch": m.arch,
            "rate": m.rate,
            "seed": m.seed,
            "arch_config": m.config.as_dict(),
            "train_config": self.train_config,
            "history": list(self.history),
            "steps": self.steps,
            "refine": m.refine,
            "params": [{"name": n, "shape": list(p.shape), "trainable": p.trainable}
                       for n, p in m.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(p.data.astype("<f8").tobytes() for p in self.model.params.values())
        body = MAGIC + struct.pack("<I", len(head)) + head + payload
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    def save(self, path) -> Path:
        """Write atomically: a failed save never leaves a partial file at ``path``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_bytes(cls, blob: bytes, expected_arch: str | None = None) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
            raise ChecksumError("not a convcs checkpoint or truncated header")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted file)")
        (hlen,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
        start = len(MAGIC) + 4
        header = json.loads(body[start:start + hlen].decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise MigrationError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
        if expected_arch is not None and header["arch"] != expected_arch:
            raise ArchMismatchError(f"checkpoint holds arch {header['arch']!r}, expected {expected_arch!r}")
        model = build_model(header["arch"], header["rate"], header["seed"], ArchConfig(**header["arch_config"]))
        offset = start + hlen
        specs = header["params"]
        if [s["name"] for s in specs] != list(model.params):
            raise ChecksumError("checkpoint parameter layout does not match its architecture")
        for spec in specs:
            p = model.params[spec["name"]]
            count = int(np.prod(spec["shape"], dtype=np.int64))
            raw = body[offset:offset + 8 * count]
            if len(raw) != 8 * count or tuple(spec["shape"]) != p.shape:
                raise ChecksumError(f"parameter {spec['name']} payload is malformed")
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
            offset += 8 * count
        if offset != len(body):
            raise ChecksumError("trailing bytes after parameter payload")
        model.refine = bool(header.get("refine", True))
        return cls(model, header["history"], header["train_config"], header["steps"])

    @classmethod
    def load(cls, path, expected_arch: str | None = None) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise IngestionError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        return cls.from_bytes(blob, expected_arch)


def checkpoint_roundtrip(model: Model) -> Model:
    return Checkpoint.from_bytes(Checkpoint(model).to_bytes()).model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    patches_skipped: int = 0

    @property
    def model(self) -> Model:
        return self.checkpoint.model


def _write_history(path, history: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")


def train(config: TrainConfig, corpus: Sequence[np.ndarray] | None = None,
          progress=None) -> TrainResult:
    """Minibatch Adam on ||f(x) - x||^2 over every trainable parameter of the model.

    ``corpus`` overrides ``config.train``.  The Gaussian block matrix is
    built non-trainable, so it is excluded from updates automatically.
    """
    config.validate()
    if corpus is None:
        if not config.train:
            raise ConfigError("train: no training images configured")
        corpus = load_corpus(config.train)
    if not corpus:
        raise ConfigError("train: training corpus is empty")
    patch_set = extract_patches(corpus, config.patch_size, config.patches_per_image, config.seed)
    if not patch_set.patches:
        raise ConfigError(f"no training image is at least {config.patch_size} px in both axes")
    data = np.concatenate(patch_set.patches, axis=0)

    model = build_model(config.arch, config.rate, config.seed, config.arch_config())

    # Warm-up fits measurement + linear recovery alone; the refinement then
    # starts from a working preliminary reconstruction instead of absorbing it.
    model.refine = config.warmup_epochs == 0
    opt = ad.Adam(model.trainable_params, config.lr, config.beta1, config.beta2, config.eps)
    order_rng = np.random.default_rng([config.seed, 1])
    history: list = []
    ckpt = Checkpoint(model, history, config.as_dict())
    steps = 0
    for epoch in range(config.epochs):
        if epoch == config.warmup_epochs and not model.refine:
            model.refine = True
        perm = order_rng.permutation(len(data))
        total = 0.0
        seen = 0
        for start in range(0, len(data), config.batch_size):
            batch = data[perm[start:start + config.batch_size]]
            opt.zero_grad()
            # overflow is caught below as divergence, so numpy need not warn about it
            with np.errstate(over="ignore", invalid="ignore"):
                loss = reconstruction_loss(model, batch)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"loss became {value} at epoch {epoch + 1}, step {steps + 1}")
                ad.backprop(loss)
                opt.step()
            steps += 1
            total += value * len(batch)
            seen += len(batch)
            if config.max_steps and steps >= config.max_steps:
                break
        history.append(total / seen)
        ckpt.steps = steps
        if progress is not None:
            progress(epoch + 1, history[-1])
        log.info("epoch %d loss %.6g", epoch + 1, history[-1])
        if config.checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            ckpt.save(config.checkpoint)
        if config.max_steps and steps >= config.max_steps:
            break
    model.refine = True
    if config.checkpoint:
        ckpt.save(config.checkpoint)
    if config.history:
        _write_history(config.history, history)
    return TrainResult(ckpt, history, patch_set.skipped)


# ---------------------------------------------------------------------------
# evaluation


def reconstruct_image(model: Model, image: np.ndarray, clamp: bool = True) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape((1, 1) + img.shape[-2:])
    out = model.reconstruct(img).data[0, 0]
    return np.clip(out, 0.0, 1.0) if clamp else out


def evaluate(model: Model, test_corpus: Sequence, grid: int = 33) -> MetricsReport:
    """Per-image PSNR, SSIM, blockiness and achieved rate; ``test_corpus`` holds (name, image) pairs."""
    if isinstance(model, Checkpoint):
        model = model.model
    if not test_corpus:
        raise ConfigError("evaluation corpus is empty")
    report = MetricsReport(model.arch, model.rate)
    for name, img in test_corpus:
        truth = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
        recon = reconstruct_image(model, truth)
        h, w = truth.shape
        report.rows.append(MetricsRow(name, psnr(recon, truth), ssim(recon, truth),
                                      blockiness_index(recon, grid), model.achieved_rate(h, w)))
    try:
        report.reference = paper_reference(model.rate).for_arch(model.arch)
    except ConfigError:
        report.notes.append(f"no published reference for rate {model.rate}; deltas omitted")
    return report


def write_report(report: MetricsReport, json_path=None, csv_path=None) -> list:
    written = []
    if json_path:
        p = Path(json_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if csv_path:
        p = Path(csv_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(report.csv_lines()) + "\n")
        written.append(p)
    return written
