"""Protection success rates, identification ranks and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .fr import cosine_distance, cosine_similarity
from .types import Embedding, FaceImage


@dataclass(frozen=True)
class VerificationRecord:
    image_id: str
    cos_to_target: float
    tau: float
    success: bool

    def __post_init__(self):
        if self.success != (self.cos_to_target >= self.tau):
            raise ValidationError(f"{self.image_id}: success flag disagrees with cos >= tau")

    @classmethod
    def score(cls, image_id: str, probe, target, tau: float) -> "VerificationRecord":
        cos = cosine_similarity(probe, target)
        return cls(image_id, cos, tau, cos >= tau)


@dataclass(frozen=True)
class GalleryEntry:
    identity_id: Hashable
    embedding: Embedding


def psr_verification(records: Sequence[VerificationRecord]) -> float:
    if not records:
        raise ValidationError("no verification records")
    return 100.0 * sum(r.success for r in records) / len(records)


def psr_gain(method_psr: float, baseline_psr: float) -> float:
    return method_psr - baseline_psr


def gallery_ranking(probe, gallery: Sequence[GalleryEntry]) -> list[int]:
    """Gallery indices sorted by cosine distance to the probe, ties by index."""
    dists = [cosine_distance(probe, g.embedding) for g in gallery]
    return sorted(range(len(gallery)), key=lambda i: (dists[i], i))


def rank_n_hit(probe, gallery: Sequence[GalleryEntry], target_id, n: int) -> bool:
    if n < 1:
        raise ValidationError("rank must be >= 1")
    if not gallery:
        raise ValidationError("empty gallery")
    if not any(g.identity_id == target_id for g in gallery):
        raise ValidationError(f"target identity {target_id!r} absent from gallery")
    return any(gallery[i].identity_id == target_id for i in gallery_ranking(probe, gallery)[:n])


def psr_identification(probes: Sequence, galleries: Sequence[Sequence[GalleryEntry]],
                       target_ids: Sequence, n: int) -> float:
    if not probes:
        raise ValidationError("no probes")
    hits = [rank_n_hit(p, g, t, n) for p, g, t in zip(probes, galleries, target_ids)]
    return 100.0 * sum(hits) / len(hits)


def _sqrt_trace_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) via the symmetric form A^{1/2} B A^{1/2}."""
    wa, va = np.linalg.eigh((cov_a + cov_a.T) / 2)
    sqrt_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    m = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dims differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("FID needs at least two samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    diff = float(((mu_a - mu_b) ** 2).sum())
    try:
        tr_sqrt = 0.5 * (_sqrt_trace_product(cov_a, cov_b) + _sqrt_trace_product(cov_b, cov_a))
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.eye(cov_a.shape[0])
        cov_a, cov_b = cov_a + ridge, cov_b + ridge
        tr_sqrt = 0.5 * (_sqrt_trace_product(cov_a, cov_b) + _sqrt_trace_product(cov_b, cov_a))
    value = diff + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt
    return max(value, 0.0)


def _as_array(image) -> np.ndarray:
    if isinstance(image, FaceImage):
        return image.pixels.detach().cpu().double().numpy()
    arr = np.asarray(image, dtype=np.float64)
    return arr


def mse(a, b) -> float:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for a unit dynamic range; inf when identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_filter_valid(img: np.ndarray) -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM on channel-mean grayscale, 11x11 Gaussian window (sigma 1.5)."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x.mean(axis=-1), y.mean(axis=-1)
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _gaussian_filter_valid(x), _gaussian_filter_valid(y)
    sxx = _gaussian_filter_valid(x * x) - mu_x ** 2
    syy = _gaussian_filter_valid(y * y) - mu_y ** 2
    sxy = _gaussian_filter_valid(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
