"""Reconstruction quality metrics: NRMSE, PSNR, HFEN and 3D SSIM.

Every metric takes an explicit mask (``None`` means all voxels). Conventions:

* PSNR peak is the range of ``gt`` inside the mask.
* HFEN filters with a 15^3 Laplacian-of-Gaussian (sigma 1.5 voxels, zero-sum),
  edge-replicated borders, and masks after filtering.
* SSIM uses an 11^3 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and the
  ``gt`` range inside the mask as dynamic range; the map is averaged over the
  masked voxels.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage, signal

LOG_SIZE = 15
LOG_SIGMA = 1.5
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CONVENTIONS = {
    "nrmse": "100*||pred-gt||/||gt|| over mask",
    "psnr": "10*log10(peak^2/mse), peak = max(gt)-min(gt) over mask, inf when mse = 0",
    "hfen": f"LoG {LOG_SIZE}^3 sigma={LOG_SIGMA} vox zero-sum, edge padding, mask after filtering",
    "ssim": f"gaussian window {SSIM_WIN}^3 sigma={SSIM_SIGMA}, K1={SSIM_K1}, K2={SSIM_K2}, "
            "L = gt range over mask, mean over masked centers",
}


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"grid mismatch: pred {pred.shape} vs gt {gt.shape}")
    if mask is None:
        m = np.ones(gt.shape, dtype=bool)
    else:
        m = np.asarray(mask)
        if m.shape != gt.shape:
            raise ValueError(f"mask shape {m.shape} != {gt.shape}")
        m = m.astype(bool)
    if not m.any():
        raise ValueError("mask is empty")
    return pred, gt, m


def nrmse(pred, gt, mask=None) -> float:
    pred, gt, m = _prepare(pred, gt, mask)
    ref = np.linalg.norm(gt[m])
    if ref == 0:
        raise ValueError("gt has zero norm inside the mask")
    return float(100.0 * np.linalg.norm(pred[m] - gt[m]) / ref)


def psnr(pred, gt, mask=None) -> float:
    pred, gt, m = _prepare(pred, gt, mask)
    mse = np.mean((pred[m] - gt[m]) ** 2)
    if mse == 0:
        return math.inf
    peak = gt[m].max() - gt[m].min()
    return float(10.0 * np.log10(peak**2 / mse))


@lru_cache(maxsize=None)
def log_kernel(size: int = LOG_SIZE, sigma: float = LOG_SIGMA) -> np.ndarray:
    """Zero-sum 3D Laplacian-of-Gaussian kernel."""
    r = np.arange(size) - (size - 1) / 2
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    rr = x**2 + y**2 + z**2
    k = (rr - 3 * sigma**2) / sigma**4 * np.exp(-rr / (2 * sigma**2))
    k -= k.mean()
    k.setflags(write=False)
    return k


def log_filter(v) -> np.ndarray:
    k = log_kernel()
    h = k.shape[0] // 2
    padded = np.pad(np.asarray(v, dtype=float), h, mode="edge")
    return signal.fftconvolve(padded, k, mode="valid")


def hfen(pred, gt, mask=None) -> float:
    pred, gt, m = _prepare(pred, gt, mask)
    ref = np.linalg.norm(log_filter(gt)[m])
    # FFT round-off leaves ~1e-16 of a constant; treat that as zero
    if ref <= 1e-12 * np.linalg.norm(gt[m]):
        raise ValueError("LoG-filtered gt has zero norm inside the mask")
    # LoG is linear, so filtering the difference equals differencing the filtered volumes
    return float(100.0 * np.linalg.norm(log_filter(pred - gt)[m]) / ref)


def _gauss(v):
    return ndimage.gaussian_filter(v, SSIM_SIGMA, mode="reflect",
                                   truncate=(SSIM_WIN // 2) / SSIM_SIGMA)


def ssim_map(pred, gt, data_range: float) -> np.ndarray:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _gauss(pred), _gauss(gt)
    sxx = _gauss(pred * pred) - mu_x**2
    syy = _gauss(gt * gt) - mu_y**2
    sxy = _gauss(pred * gt) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim3d(pred, gt, mask=None) -> float:
    pred, gt, m = _prepare(pred, gt, mask)
    data_range = gt[m].max() - gt[m].min()
    if data_range == 0:
        # constant gt: fall back on the pred range, then on 1, to keep the constants positive
        data_range = (pred[m].max() - pred[m].min()) or 1.0
    return float(np.clip(ssim_map(pred, gt, data_range)[m].mean(), -1.0, 1.0))


@dataclass
class MetricsReport:
    nrmse_percent: float
    psnr_db: float
    hfen_percent: float
    ssim: float
    mask_voxels: int
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    FIELDS = ("nrmse_percent", "psnr_db", "hfen_percent", "ssim", "mask_voxels", "conventions")

    def to_json(self) -> str:
        d = asdict(self)
        # strict JSON has no infinity; a perfect match is written as the string "inf"
        d = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}
        return json.dumps(d, indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(float(d["nrmse_percent"]), float(d["psnr_db"]), float(d["hfen_percent"]),
                   float(d["ssim"]), int(d["mask_voxels"]), d["conventions"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow([repr(self.nrmse_percent), repr(self.psnr_db), repr(self.hfen_percent),
                    repr(self.ssim), self.mask_voxels, json.dumps(self.conventions, sort_keys=True)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        row = dict(zip(rows[0], rows[1]))
        return cls(float(row["nrmse_percent"]), float(row["psnr_db"]), float(row["hfen_percent"]),
                   float(row["ssim"]), int(row["mask_voxels"]), json.loads(row["conventions"]))


def evaluate(pred, gt, mask=None) -> MetricsReport:
    pred, gt, m = _prepare(pred, gt, mask)
    return MetricsReport(
        nrmse_percent=nrmse(pred, gt, m),
        psnr_db=psnr(pred, gt, m),
        hfen_percent=hfen(pred, gt, m),
        ssim=ssim3d(pred, gt, m),
        mask_voxels=int(m.sum()),
    )
