from .fullref import psnr_y, ssim_y
from .niqe import NiqeModel, default_niqe_model, fit_niqe_model, niqe
from .registry import MetricKind, MetricRegistry, MetricReport, RemoteScorer, score_remote

__all__ = [
    "MetricKind",
    "MetricRegistry",
    "MetricReport",
    "NiqeModel",
    "RemoteScorer",
    "default_niqe_model",
    "fit_niqe_model",
    "niqe",
    "psnr_y",
    "score_remote",
    "ssim_y",
]
