"""Architecture variants binding a measurement operator to a reconstruction head.

``fully-conv-res`` is the full model: strided-conv measurement, a
deconvolution producing a preliminary image, and a BN-free residual path
(entry conv, Resblocks, exit conv) whose output is added back.
``fully-conv-tiny`` drops the residual path.  The two block archs measure
33x33 tiles independently, recover each tile linearly and refine it with a
small per-tile conv stack, which is what produces block effect.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError
from .measurement import (
    BLOCK_SIZE,
    GaussianBlockMeasurer,
    LearnedConvMeasurer,
    LearnedFCBlockMeasurer,
    achieved_rate,
    blocks_to_image,
    reflect_pad,
)

FULL_ARCHS = ("fully-conv-tiny", "fully-conv-res")
BLOCK_ARCHS = ("gaussian-block", "adaptive-fc-block")
ARCHS = BLOCK_ARCHS + FULL_ARCHS


@dataclass
class ArchConfig:
    features: int = 64
    residual_blocks: int = 3
    kernel: int = 32
    stride: int = 16
    block_size: int = BLOCK_SIZE
    # multiplier on the He init of the residual exit conv; a small exit layer lets
    # training start from final ~ preliminary
    exit_init_scale: float = 0.1

    def validate(self) -> "ArchConfig":
        for f in fields(self):
            if f.name == "exit_init_scale":
                continue
            if getattr(self, f.name) < (0 if f.name == "residual_blocks" else 1):
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if not (math.isfinite(self.exit_init_scale) and self.exit_init_scale >= 0):
            raise ConfigError(f"exit_init_scale must be finite and >= 0, got {self.exit_init_scale}")
        if self.kernel <= self.stride:
            raise ConfigError(f"kernel ({self.kernel}) must exceed stride ({self.stride})")
        if (self.kernel - self.stride) % 2:
            raise ConfigError("kernel - stride must be even")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture field(s): {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionTriple:
    preliminary: Tensor
    residual: Tensor
    final: Tensor


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Model:
    def __init__(self, arch: str, rate: float, seed: int, config: ArchConfig):
        self.arch = arch
        self.rate = rate
        self.seed = seed
        self.config = config
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        # False bypasses the nonlinear refinement (Resblock path or block refinement),
        # leaving only measurement + linear recovery; used for warm-up training.
        self.refine = True

    # -- bookkeeping
    @property
    def trainable_params(self) -> list:
        return [p for p in self.params.values() if p.trainable]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _add(self, name: str, value, trainable: bool = True) -> Parameter:
        p = value if isinstance(value, Parameter) else Parameter(value, name, trainable)
        p.name = name
        self.params[name] = p
        return p

    def achieved_rate(self, h: int, w: int) -> float:
        return achieved_rate(self.measurer, h, w)

    def reconstruct(self, x) -> Tensor:
        """Final reconstruction of an (N, 1, H, W) batch, same spatial size as ``x``."""
        if self.arch in FULL_ARCHS:
            return forward_full(self, x).final
        return forward_blockwise(self, x)

    def __repr__(self):
        return f"Model({self.arch!r}, rate={self.rate}, params={self.parameter_count})"


def build_model(arch: str, rate: float, seed: int = 0, config: ArchConfig | dict | None = None) -> Model:
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; choose one of {', '.join(ARCHS)}")
    if config is None:
        config = ArchConfig()
    elif isinstance(config, dict):
        config = ArchConfig.from_dict(config)
    config.validate()
    model = Model(arch, rate, seed, config)
    rng = np.random.default_rng(seed)
    f = config.features

    if arch in FULL_ARCHS:
        model.measurer = LearnedConvMeasurer(rate, seed, config.kernel, config.stride, rng=rng)
        c, k = model.measurer.channels, config.kernel
        model._add("measure.K", model.measurer.K)
        model._add("deconv.w", _he(rng, (c, 1, k, k), c * k * k))
        model._add("deconv.b", np.zeros(1))
        if arch == "fully-conv-res":
            model._add("entry.w", _he(rng, (f, 1, 3, 3), 9))
            model._add("entry.b", np.zeros(f))
            for i in range(config.residual_blocks):
                model._add(f"res{i}.w1", _he(rng, (f, f, 3, 3), 9 * f))
                model._add(f"res{i}.b1", np.zeros(f))
                model._add(f"res{i}.w2", _he(rng, (f, f, 3, 3), 9 * f))
                model._add(f"res{i}.b2", np.zeros(f))
            model._add("exit.w", config.exit_init_scale * _he(rng, (1, f, 3, 3), 9 * f))
            model._add("exit.b", np.zeros(1))
        return model

    cls = GaussianBlockMeasurer if arch == "gaussian-block" else LearnedFCBlockMeasurer
    model.measurer = cls(rate, seed, config.block_size)
    phi = model.measurer.phi
    model._add("measure.phi", phi)
    m, n = phi.shape
    # least-squares-style back-projection start: Phi Phi^T ~ (n/m) I for N(0, 1/m) entries
    model._add("recover.A", phi.data.T * (m / n))
    model._add("refine1.w", _he(rng, (f, 1, 3, 3), 9))
    model._add("refine1.b", np.zeros(f))
    model._add("refine2.w", _he(rng, (1, f, 3, 3), 9 * f))
    model._add("refine2.b", np.zeros(1))
    return model


def forward_full(model: Model, image) -> ReconstructionTriple:
    if model.arch not in FULL_ARCHS:
        raise ContractError(f"forward_full needs a fully convolutional arch, got {model.arch!r}")
    x = np.asarray(getattr(image, "data", image), dtype=np.float64)
    h, w = x.shape[-2:]
    xp = reflect_pad(x, model.measurer.stride)
    p = model.params
    s, pad = model.measurer.stride, model.measurer.pad

    y = model.measurer.measure(xp)
    prelim = ad.deconv2d(y, p["deconv.w"], p["deconv.b"], stride=s, pad=pad)
    if model.arch == "fully-conv-res" and model.refine:
        t = ad.conv2d(prelim, p["entry.w"], p["entry.b"], stride=1, pad=1)
        for i in range(model.config.residual_blocks):
            t = ad.residual_block(t, p[f"res{i}.w1"], p[f"res{i}.b1"], p[f"res{i}.w2"], p[f"res{i}.b2"])
        residual = ad.conv2d(t, p["exit.w"], p["exit.b"], stride=1, pad=1)
    else:
        residual = Tensor(np.zeros(prelim.shape))
    final = ad.add(prelim, residual)
    if xp.shape[-2:] != (h, w):
        prelim, residual, final = (ad.crop(t, 0, 0, h, w) for t in (prelim, residual, final))
    return ReconstructionTriple(prelim, residual, final)


def forward_blockwise(model: Model, image) -> Tensor:
    if model.arch not in BLOCK_ARCHS:
        raise ContractError(f"forward_blockwise needs a block arch, got {model.arch!r}")
    x = np.asarray(getattr(image, "data", image), dtype=np.float64)
    n, _, h, w = x.shape
    b = model.config.block_size
    xp = reflect_pad(x, b)
    hp, wp = xp.shape[-2:]
    p = model.params

    y = model.measurer.measure(xp)  # (N*B, m)
    initial = ad.matmul(y, ad.transpose(p["recover.A"], (1, 0)))  # (N*B, b*b)
    tiles = ad.reshape(initial, (initial.shape[0], 1, b, b))
    if model.refine:
        hidden = ad.relu(ad.conv2d(tiles, p["refine1.w"], p["refine1.b"], stride=1, pad=1))
        tiles = ad.add(tiles, ad.conv2d(hidden, p["refine2.w"], p["refine2.b"], stride=1, pad=1))
    out = blocks_to_image(tiles, n, hp, wp, b)
    if (hp, wp) != (h, w):
        out = ad.crop(out, 0, 0, h, w)
    return out


def reconstruction_loss(model: Model, batch) -> Tensor:
    """Mean squared error between the reconstruction and the input itself."""
    batch = np.asarray(batch, dtype=np.float64)
    return ad.mse_loss(model.reconstruct(batch), batch)


def gradcheck_model(model: Model, image, tolerance: float = 1e-4, max_entries: int | None = 64,
                    seed: int = 0) -> ad.GradCheckReport:
    return ad.finite_diff_check(lambda: reconstruction_loss(model, image), list(model.params.values()),
                                tolerance, max_entries=max_entries, seed=seed)


# Plain He init for the exit conv: with the training-time 0.1 scale some
# residual-path gradients fall near 1e-9, where the central difference at
# h=1e-5 is dominated by round-off (~eps * loss / h).
MINI_CONFIG = ArchConfig(features=4, residual_blocks=1, kernel=8, stride=4, exit_init_scale=1.0)


def mini_model(arch: str, rate: float, seed: int = 0) -> Model:
    """Small variant for gradient checking: F=4, R=1, 8x8 stride-4 measurement kernels, He exit init."""
    return build_model(arch, rate, seed, ArchConfig(**MINI_CONFIG.as_dict()))
