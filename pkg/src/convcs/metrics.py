"""Image quality metrics, block-effect index and spectral analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, GeometryError

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def _plane(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim > 2:
        if any(d != 1 for d in x.shape[:-2]):
            raise DimensionError(f"expected a single-channel image, got shape {x.shape}")
        x = x.reshape(x.shape[-2:])
    return x


def _pair(x, y):
    x, y = _plane(x), _plane(y)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """PSNR in dB for images with peak value 1.0, capped at 99 dB."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian (sigma 1.5) windows."""
    x, y = _pair(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise GeometryError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def blockiness_index(image, grid: int = 33) -> float:
    """Mean |first difference| across grid lines over the mean elsewhere.

    Pairs (j, j + 1) straddle a grid line when ``j + 1`` is a multiple of
    ``grid``, horizontally and vertically.  Values near 1 mean no block
    effect.  A flat image gives 1; a piecewise-constant one whose only
    jumps sit on the grid gives a huge ratio (denominator floored at 1e-12).
    """
    img = _plane(image)
    dh = np.abs(np.diff(img, axis=1))
    dv = np.abs(np.diff(img, axis=0))
    on_h = (np.arange(1, img.shape[1]) % grid) == 0
    on_v = (np.arange(1, img.shape[0]) % grid) == 0
    boundary = np.concatenate([dh[:, on_h].ravel(), dv[on_v, :].ravel()])
    interior = np.concatenate([dh[:, ~on_h].ravel(), dv[~on_v, :].ravel()])
    if boundary.size == 0 or interior.size == 0:
        return 1.0
    num, denom = boundary.mean(), interior.mean()
    if denom < 1e-12 and num < 1e-12:
        return 1.0
    return float(num / max(denom, 1e-12))


def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    # exact index product mod n keeps the phase argument small
    return np.exp(-2j * np.pi * (np.outer(k, k) % n) / n)


def dft2(image) -> np.ndarray:
    """Direct (non-FFT) 2-D discrete Fourier transform via DFT matrices."""
    img = _plane(image)
    return _dft_matrix(img.shape[0]) @ img @ _dft_matrix(img.shape[1])


def center_spectrum(spec: np.ndarray) -> np.ndarray:
    """Move the zero frequency to index (H // 2, W // 2)."""
    return np.roll(spec, (spec.shape[0] // 2, spec.shape[1] // 2), axis=(0, 1))


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    # treat rounding-level spread as flat so noise is not stretched to [0, 1]
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1.0):
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def dft2_log_magnitude(image) -> np.ndarray:
    """log(1 + |DFT|), DC centred, min-max normalized to [0, 1]."""
    return minmax(np.log1p(np.abs(center_spectrum(dft2(image)))))


def highfreq_energy_ratio(image, cutoff: float = 0.25) -> float:
    """Share of non-DC spectral energy outside the centred low-frequency box.

    The box keeps frequencies with |ky| <= cutoff * H and |kx| <= cutoff * W.
    """
    img = _plane(image)
    h, w = img.shape
    power = np.abs(center_spectrum(dft2(img))) ** 2
    ky = np.abs(np.arange(h) - h // 2)[:, None]
    kx = np.abs(np.arange(w) - w // 2)[None, :]
    low = (ky <= cutoff * h) & (kx <= cutoff * w)
    total = power.sum() - power[h // 2, w // 2]
    if total <= 1e-20 * max(power[h // 2, w // 2], 1.0):
        return 0.0
    return float(min(1.0, max(0.0, power[~low].sum() / total)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsRow:
    name: str
    psnr: float
    ssim: float
    blockiness: float
    achieved_rate: float

    def as_dict(self) -> dict:
        return {"image": self.name, "psnr": self.psnr, "ssim": self.ssim,
                "blockiness": self.blockiness, "achieved_rate": self.achieved_rate}


@dataclass
class MetricsReport:
    arch: str
    rate: float
    rows: list = field(default_factory=list)
    reference: dict | None = None
    notes: list = field(default_factory=list)

    FIELDS = ("psnr", "ssim", "blockiness", "achieved_rate")

    @property
    def means(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in self.FIELDS}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in self.FIELDS}

    @property
    def deltas(self) -> dict | None:
        """Measured mean minus the published mean for the matching method."""
        if not self.reference:
            return None
        out = {}
        m = self.means
        if self.reference.get("psnr") is not None:
            out["psnr"] = m["psnr"] - self.reference["psnr"]
        if self.reference.get("ssim") is not None:
            out["ssim"] = m["ssim"] - self.reference["ssim"]
        return out

    def as_dict(self) -> dict:
        return {
            "arch": self.arch,
            "rate": self.rate,
            "rows": [r.as_dict() for r in self.rows],
            "mean": self.means,
            "reference": self.reference,
            "delta_vs_reference": self.deltas,
            "notes": list(self.notes),
        }

    def csv_lines(self) -> list:
        lines = ["image,psnr,ssim,blockiness,achieved_rate"]
        fmt = "{},{:.6f},{:.6f},{:.6f},{:.6f}"
        for r in self.rows:
            lines.append(fmt.format(r.name, r.psnr, r.ssim, r.blockiness, r.achieved_rate))
        m = self.means
        lines.append(fmt.format("mean", m["psnr"], m["ssim"], m["blockiness"], m["achieved_rate"]))
        return lines


# ---------------------------------------------------------------------------
# published reference numbers (11-image test set, "Mean(all)" rows)

METHODS = ("ReconNet", "DR2-Net", "Adp-Rec", "Fully-Conv", "Proposed")

_MEAN_PSNR = {
    0.01: (17.94, 17.44, 20.33, 20.59, 21.27),
    0.10: (23.28, 24.32, 27.53, 26.98, 28.30),
    0.25: (26.42, 28.66, 30.80, 30.09, 32.69),
}

# The published SSIM values only cover rate 1%, and Fully-Conv is not listed there.
_MEAN_SSIM_1PCT = {"Original": 1.0000, "ReconNet": 0.4083, "DR2-Net": 0.4291,
                   "Adp-Rec": 0.5031, "Proposed": 0.5447}
_MEAN_MOS_1PCT = {"Original": 4.9545, "ReconNet": 1.0734, "DR2-Net": 1.1188,
                  "Adp-Rec": 1.8496, "Proposed": 2.6328}

ARCH_TO_METHOD = {
    "gaussian-block": "ReconNet",
    "adaptive-fc-block": "Adp-Rec",
    "fully-conv-tiny": "Fully-Conv",
    "fully-conv-res": "Proposed",
}


@dataclass(frozen=True)
class PaperReferenceTable:
    rate: float
    psnr: dict
    ssim: dict | None
    mos: dict | None

    def for_arch(self, arch: str) -> dict:
        method = ARCH_TO_METHOD[arch]
        return {"method": method, "psnr": self.psnr[method],
                "ssim": None if self.ssim is None else self.ssim.get(method)}


def _rate_key(rate: float):
    for key in _MEAN_PSNR:
        if abs(rate - key) < 1e-9:
            return key
    return None


def paper_reference(rate: float) -> PaperReferenceTable:
    key = _rate_key(rate)
    if key is None:
        raise ConfigError(f"no published reference numbers for rate {rate}; known rates are 0.01, 0.10, 0.25")
    return PaperReferenceTable(
        rate=key,
        psnr=dict(zip(METHODS, _MEAN_PSNR[key])),
        ssim=dict(_MEAN_SSIM_1PCT) if key == 0.01 else None,
        mos=dict(_MEAN_MOS_1PCT) if key == 0.01 else None,
    )
