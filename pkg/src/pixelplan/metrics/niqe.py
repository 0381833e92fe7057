"""Natural-image quality evaluator: a no-reference score measuring the
distance between an image's bandpass statistics and a pristine model.

The pipeline follows the classic construction: mean-subtracted
contrast-normalized (MSCN) coefficients at two scales, asymmetric
generalized Gaussian fits per patch, and a Mahalanobis-style distance
between multivariate Gaussians. The pristine model ships in-repo as a
JSON container and can be refitted from any image corpus.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.special import gamma as _gamma_fn

from ..errors import DegenerateInput, SingularCovariance, TooSmall
from ..imagecore import ImageBuf, rgb_to_luma

MODEL_VERSION = 1
FEATURE_DIM = 36  # 18 per scale, two scales

_MSCN_WINDOW = 7
_MSCN_SIGMA = 7.0 / 6.0
_MSCN_C = 1.0

# alpha lookup table for the AGGD moment-matching fit
_GAM = np.arange(0.2, 10.001, 0.001)
_R_GAM = (_gamma_fn(2.0 / _GAM) ** 2) / (_gamma_fn(1.0 / _GAM) * _gamma_fn(3.0 / _GAM))


@dataclass(frozen=True)
class AggdParams:
    alpha: float
    beta_l: float
    beta_r: float
    mean_offset: float


def fit_aggd(samples) -> AggdParams:
    """Moment-matched asymmetric generalized Gaussian fit.

    Needs at least 64 samples with some spread; the zero-mean
    distribution is assumed (MSCN coefficients satisfy this).
    """
    vec = np.asarray(samples, dtype=np.float64).ravel()
    if vec.size < 64:
        raise DegenerateInput(f"need >= 64 samples, got {vec.size}")
    if np.all(vec == vec[0]):
        raise DegenerateInput("all samples identical")

    neg = vec[vec < 0]
    pos = vec[vec > 0]
    left_std = math.sqrt(float(np.mean(neg * neg))) if neg.size else 0.0
    right_std = math.sqrt(float(np.mean(pos * pos))) if pos.size else 0.0
    # one-sided inputs would zero a std and blow up the ratio; clamp
    left_std = max(left_std, 1e-12)
    right_std = max(right_std, 1e-12)

    gamma_hat = left_std / right_std
    r_hat = float(np.mean(np.abs(vec))) ** 2 / float(np.mean(vec * vec))
    r_hat_norm = (r_hat * (gamma_hat**3 + 1.0) * (gamma_hat + 1.0)) / (
        (gamma_hat**2 + 1.0) ** 2
    )
    alpha = float(_GAM[int(np.argmin((_R_GAM - r_hat_norm) ** 2))])

    ratio = math.sqrt(_gamma_fn(1.0 / alpha) / _gamma_fn(3.0 / alpha))
    beta_l = left_std * ratio
    beta_r = right_std * ratio
    mean_offset = float(
        (beta_r - beta_l) * (_gamma_fn(2.0 / alpha) / _gamma_fn(1.0 / alpha))
    )
    return AggdParams(alpha=alpha, beta_l=beta_l, beta_r=beta_r, mean_offset=mean_offset)


@dataclass(frozen=True)
class NiqeModel:
    mu: np.ndarray
    sigma: np.ndarray
    patch_size: int = 96
    sharpness_fraction: float = 0.75

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != (FEATURE_DIM,) or sigma.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError(
                f"model must be {FEATURE_DIM}-dimensional, got {mu.shape} / {sigma.shape}"
            )
        if not np.allclose(sigma, sigma.T, atol=1e-9):
            raise ValueError("covariance not symmetric")
        if not (0.0 < self.sharpness_fraction <= 1.0):
            raise ValueError("sharpness_fraction must be in (0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def save_niqe_model(model: NiqeModel, path: str | Path) -> None:
    doc = {
        "version": MODEL_VERSION,
        "patch_size": model.patch_size,
        "sharpness_fraction": model.sharpness_fraction,
        "mu": model.mu.tolist(),
        "sigma": model.sigma.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_niqe_model(path: str | Path) -> NiqeModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    return NiqeModel(
        mu=np.array(doc["mu"], dtype=np.float64),
        sigma=np.array(doc["sigma"], dtype=np.float64),
        patch_size=int(doc["patch_size"]),
        sharpness_fraction=float(doc["sharpness_fraction"]),
    )


_DEFAULT_MODEL: NiqeModel | None = None


def default_niqe_model() -> NiqeModel:
    global _DEFAULT_MODEL
    if _DEFAULT_MODEL is None:
        path = Path(__file__).resolve().parent.parent / "data" / "niqe_model.json"
        _DEFAULT_MODEL = load_niqe_model(path)
    return _DEFAULT_MODEL


def _mscn_kernel() -> np.ndarray:
    g = cv2.getGaussianKernel(_MSCN_WINDOW, _MSCN_SIGMA)
    return (g @ g.T).astype(np.float64)


def _mscn(luma255: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MSCN coefficients and the local variance field used for sharpness."""
    kernel = _mscn_kernel()
    mu = cv2.filter2D(luma255, -1, kernel, borderType=cv2.BORDER_REPLICATE)
    var = cv2.filter2D(luma255 * luma255, -1, kernel, borderType=cv2.BORDER_REPLICATE)
    var = np.abs(var - mu * mu)
    mscn = (luma255 - mu) / (np.sqrt(var) + _MSCN_C)
    return mscn, var


def _aggd_features(block: np.ndarray) -> list[float]:
    """18 features for one MSCN block: 2 for the coefficients themselves,
    4 for each of the 4 neighboring-product orientations."""
    p = fit_aggd(block)
    feats = [p.alpha, (p.beta_l + p.beta_r) / 2.0]
    shifts = (
        block[:, :-1] * block[:, 1:],
        block[:-1, :] * block[1:, :],
        block[:-1, :-1] * block[1:, 1:],
        block[:-1, 1:] * block[1:, :-1],
    )
    for prod in shifts:
        q = fit_aggd(prod)
        feats.extend([q.alpha, q.mean_offset, q.beta_l, q.beta_r])
    return feats


def _downscale_half(luma255: np.ndarray) -> np.ndarray:
    h, w = luma255.shape
    img = Image.fromarray(luma255.astype(np.float32), mode="F")
    half = img.resize((w // 2, h // 2), Image.Resampling.BICUBIC)
    return np.asarray(half, dtype=np.float64)


def _image_patch_features(
    img: ImageBuf, patch_size: int, sharpness_fraction: float
) -> np.ndarray:
    """Per-patch 36-dim feature rows for the sharpest patches of one image."""
    if min(img.width, img.height) < 2 * patch_size:
        raise TooSmall(
            f"niqe needs min side >= {2 * patch_size}, got {img.width}x{img.height}"
        )
    luma = rgb_to_luma(img) * 255.0
    n_rows = img.height // patch_size
    n_cols = img.width // patch_size

    per_scale: list[np.ndarray] = []
    sharpness: np.ndarray | None = None
    for scale in (1, 2):
        block = patch_size // scale
        mscn, var = _mscn(luma)
        feats = np.empty((n_rows * n_cols, 18), dtype=np.float64)
        for r in range(n_rows):
            for c in range(n_cols):
                tile = mscn[r * block:(r + 1) * block, c * block:(c + 1) * block]
                feats[r * n_cols + c] = _aggd_features(tile)
        per_scale.append(feats)
        if scale == 1:
            sharp = np.empty(n_rows * n_cols, dtype=np.float64)
            for r in range(n_rows):
                for c in range(n_cols):
                    tile = var[r * block:(r + 1) * block, c * block:(c + 1) * block]
                    sharp[r * n_cols + c] = float(np.mean(tile))
            sharpness = sharp
            luma = _downscale_half(luma)

    all_feats = np.hstack(per_scale)
    keep = max(1, math.ceil(sharpness_fraction * len(all_feats)))
    order = np.argsort(-sharpness, kind="stable")
    selected = all_feats[np.sort(order[:keep])]
    finite = np.all(np.isfinite(selected), axis=1)
    return selected[finite]


def niqe(img: ImageBuf, model: NiqeModel | None = None) -> float:
    """Distance between the image's patch statistics and the pristine
    model; lower is better, 0 only for an exact statistical match."""
    if model is None:
        model = default_niqe_model()
    feats = _image_patch_features(img, model.patch_size, model.sharpness_fraction)
    if len(feats) < 2:
        raise SingularCovariance("too few usable patches for a covariance fit")
    nu2 = np.mean(feats, axis=0)
    sigma2 = np.cov(feats, rowvar=False)

    pooled = (model.sigma + sigma2) / 2.0
    diff = model.mu - nu2
    try:
        chol = np.linalg.cholesky(pooled)
        half = np.linalg.solve(chol, diff)
        d2 = float(half @ half)
    except np.linalg.LinAlgError:
        try:
            inv = np.linalg.pinv(pooled, rcond=1e-10)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("pooled covariance not invertible") from exc
        d2 = float(diff @ inv @ diff)
    return math.sqrt(max(d2, 0.0))


def fit_niqe_model(
    images,
    patch_size: int = 96,
    sharpness_fraction: float = 0.75,
    augment_flips: bool = True,
) -> NiqeModel:
    """Fit the pristine multivariate Gaussian from an image corpus.

    With augment_flips the corpus is closed under horizontal mirroring,
    which makes the fitted model symmetric in the two diagonal-product
    feature blocks and the resulting score flip-stable.
    """
    pool = list(images)
    if augment_flips:
        pool += [ImageBuf(np.ascontiguousarray(im.planes[:, :, ::-1])) for im in pool]
    rows = [
        _image_patch_features(img, patch_size, sharpness_fraction) for img in pool
    ]
    feats = np.vstack(rows)
    if len(feats) < FEATURE_DIM + 1:
        raise DegenerateInput(
            f"corpus yields {len(feats)} patches; need > {FEATURE_DIM}"
        )
    return NiqeModel(
        mu=np.mean(feats, axis=0),
        sigma=np.cov(feats, rowvar=False),
        patch_size=patch_size,
        sharpness_fraction=sharpness_fraction,
    )
