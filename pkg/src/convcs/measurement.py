"""Measurement operators: block-wise Gaussian, block-wise learned, whole-image convolutional."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, GeometryError
from .imageio import write_pgm
from .metrics import dft2_log_magnitude, minmax

BLOCK_SIZE = 33


def rows_for_rate(rate: float, n: int) -> int:
    """Number of measurements for ``n`` samples at ``rate``; half rounds away from zero, floor 1."""
    if not 0 < rate <= 1:
        raise ConfigError(f"rate out of range: {rate} (must satisfy 0 < rate <= 1)")
    return max(1, int(math.floor(rate * n + 0.5)))


def gaussian_matrix(m: int, n: int, seed: int) -> np.ndarray:
    """i.i.d. N(0, 1/m) entries, reproducible from ``seed``."""
    if m < 1 or n < 1:
        raise ConfigError(f"matrix dimensions must be positive, got {m}x{n}")
    return np.random.default_rng(seed).standard_normal((m, n)) / math.sqrt(m)


# ---------------------------------------------------------------------------
# padding and block tiling


def padded_size(size: int, multiple: int) -> int:
    return -(-size // multiple) * multiple


def reflect_pad(x: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad the bottom/right of an (N, C, H, W) array up to multiples of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = padded_size(h, multiple) - h, padded_size(w, multiple) - w
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


def image_to_blocks(x, block: int = BLOCK_SIZE) -> Tensor:
    """(N, 1, H, W) -> (N * B, block * block), blocks in raster order, each vectorized row-major."""
    x = ad.as_tensor(x)
    n, c, h, w = x.shape
    if c != 1:
        raise GeometryError(f"block measurement expects one channel, got {c}")
    if h % block or w % block:
        raise GeometryError(
            f"image {h}x{w} is not a multiple of the {block}x{block} block grid; reflect-pad it first")
    by, bx = h // block, w // block
    t = ad.reshape(x, (n, by, block, bx, block))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, (n * by * bx, block * block))


def blocks_to_image(blocks, n: int, h: int, w: int, block: int = BLOCK_SIZE) -> Tensor:
    """Inverse of :func:`image_to_blocks` for any (N * B, ...) tensor holding block*block values per row."""
    by, bx = h // block, w // block
    t = ad.reshape(blocks, (n, by, bx, block, block))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, (n, 1, h, w))


def measure_blocks(image, phi) -> Tensor:
    """Row b of the result is ``Phi @ vec(block_b)``; image must already be block-aligned."""
    phi = ad.as_tensor(phi)
    v = image_to_blocks(image, int(round(math.sqrt(phi.shape[1]))))
    return ad.matmul(v, ad.transpose(phi, (1, 0)))


# ---------------------------------------------------------------------------
# measurers


class BlockMeasurer:
    trainable = False
    kind = "block"

    def __init__(self, rate: float, seed: int, block_size: int = BLOCK_SIZE):
        self.nominal_rate = rate
        self.seed = seed
        self.block_size = block_size
        n = block_size * block_size
        self.m = rows_for_rate(rate, n)
        self.phi = Parameter(gaussian_matrix(self.m, n, seed), "measure.phi", trainable=self.trainable)

    @property
    def params(self) -> dict:
        return {"measure.phi": self.phi}

    @property
    def multiple(self) -> int:
        return self.block_size

    def measure(self, x) -> Tensor:
        """Measure a block-aligned (N, 1, H, W) batch; returns (N * B, m)."""
        return measure_blocks(x, self.phi)

    def num_measurements(self, h: int, w: int) -> int:
        b = self.block_size
        return (padded_size(h, b) // b) * (padded_size(w, b) // b) * self.m

    def kernels(self) -> list:
        b = self.block_size
        return [row.reshape(b, b).copy() for row in self.phi.data]


class GaussianBlockMeasurer(BlockMeasurer):
    """Fixed random Gaussian block sensing; the matrix is never trained."""

    trainable = False
    kind = "gaussian-block"


class LearnedFCBlockMeasurer(BlockMeasurer):
    """Block sensing with a trainable (fully-connected) measurement matrix."""

    trainable = True
    kind = "learned-fc-block"


class LearnedConvMeasurer:
    """Whole-image measurement by a bias-free strided convolution with overlapping kernels.

    With ``pad = (kernel - stride) / 2`` an H x W image (multiples of the
    stride) yields a (H / stride) x (W / stride) map with
    ``channels = max(1, round(rate * stride**2))`` measurements per site.
    """

    trainable = True
    kind = "learned-conv"

    def __init__(self, rate: float, seed: int, kernel: int = 32, stride: int = 16, rng=None):
        if not kernel > stride:
            raise ConfigError(f"kernel ({kernel}) must exceed stride ({stride}) so receptive fields overlap")
        if (kernel - stride) % 2:
            raise ConfigError(f"kernel - stride must be even, got {kernel} - {stride}")
        self.nominal_rate = rate
        self.seed = seed
        self.kernel = kernel
        self.stride = stride
        self.pad = (kernel - stride) // 2
        self.channels = rows_for_rate(rate, stride * stride)
        rng = np.random.default_rng(seed) if rng is None else rng
        std = math.sqrt(2.0 / (kernel * kernel))
        self.K = Parameter(rng.standard_normal((self.channels, 1, kernel, kernel)) * std, "measure.K")

    @property
    def params(self) -> dict:
        return {"measure.K": self.K}

    @property
    def multiple(self) -> int:
        return self.stride

    def measure(self, x) -> Tensor:
        x = ad.as_tensor(x)
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise GeometryError(f"image {h}x{w} is not a multiple of the measurement stride {self.stride}")
        return ad.conv2d(x, self.K, None, stride=self.stride, pad=self.pad)

    def num_measurements(self, h: int, w: int) -> int:
        s = self.stride
        return self.channels * (padded_size(h, s) // s) * (padded_size(w, s) // s)

    def kernels(self) -> list:
        return [k[0].copy() for k in self.K.data]


def conv_measure(image, measurer: LearnedConvMeasurer) -> Tensor:
    return measurer.measure(image)


def achieved_rate(measurer, h: int, w: int) -> float:
    """Measurement scalars emitted for an H x W image (padding overhead included) per pixel."""
    return measurer.num_measurements(h, w) / float(h * w)


# ---------------------------------------------------------------------------
# kernel export


@dataclass
class KernelAtlas:
    spatial: list  # k x k maps in [0, 1]
    frequency: list  # centred log-magnitude spectra in [0, 1]

    def __len__(self):
        return len(self.spatial)


def export_kernels(measurer) -> KernelAtlas:
    """Each measurement row/kernel as a normalized spatial map plus its log spectrum."""
    maps = measurer.kernels()
    return KernelAtlas(spatial=[minmax(k) for k in maps], frequency=[dft2_log_magnitude(k) for k in maps])


def tile_grid(maps: list, columns: int | None = None, gap: int = 1) -> np.ndarray:
    if not maps:
        raise ConfigError("no maps to tile")
    columns = columns or int(math.ceil(math.sqrt(len(maps))))
    rows = int(math.ceil(len(maps) / columns))
    h, w = maps[0].shape
    grid = np.ones((rows * (h + gap) - gap, columns * (w + gap) - gap))
    for i, m in enumerate(maps):
        r, c = divmod(i, columns)
        grid[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = m
    return grid


def write_atlas(atlas: KernelAtlas, out_dir, stem: str) -> list:
    out_dir = Path(out_dir)
    return [
        write_pgm(out_dir / f"{stem}_spatial.pgm", tile_grid(atlas.spatial)),
        write_pgm(out_dir / f"{stem}_frequency.pgm", tile_grid(atlas.frequency)),
    ]
