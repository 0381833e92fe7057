"""Degradation synthesis and the batch evaluation harness.

Recipes compose downsampling, defocus and motion blur, additive Gaussian
noise, and JPEG compression in a declared order; the same recipe, seed,
and input always produce the same bytes. The harness runs a corpus
through the full engine, scores each output against its original, and
writes a CSV/JSON report with trace files and summary figures alongside.
"""
from __future__ import annotations

import csv
import io
import json
import time
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import cv2
import numpy as np

from .engine import WorkerBindings, run_image
from .errors import InvalidField, PixelplanError
from .imagecore import (
    ImageBuf,
    ResampleKernel,
    decode_image,
    encode_jpeg,
    load_image,
    resize,
)
from .metrics import MetricKind, MetricRegistry
from .metrics.fullref import psnr_y, ssim_y
from .profiles import Profile
from .restoration import dump_trace

OP_KINDS = ("downsample", "defocus_blur", "motion_blur", "gaussian_noise", "jpeg")

_OP_PARAMS = {
    "downsample": {"factor", "kernel"},
    "defocus_blur": {"sigma"},
    "motion_blur": {"length", "angle"},
    "gaussian_noise": {"sigma"},
    "jpeg": {"quality"},
}


@dataclass(frozen=True)
class RecipeOp:
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in _OP_PARAMS:
            raise InvalidField(f"unknown degradation op {self.kind!r}")
        unknown = set(self.params) - _OP_PARAMS[self.kind]
        if unknown:
            raise InvalidField(
                f"op {self.kind}: unknown param(s) {sorted(unknown)}")


@dataclass(frozen=True)
class DegradationRecipe:
    """An ordered list of degradation ops plus the seed for the noise
    stream. Application order is exactly the list order."""

    ops: tuple
    seed: int = 0

    def __post_init__(self):
        for op in self.ops:
            if not isinstance(op, RecipeOp):
                raise InvalidField(f"recipe entries must be ops, got {op!r}")

    def to_json_dict(self) -> dict:
        return {"seed": self.seed,
                "ops": [{"kind": op.kind, **op.params} for op in self.ops]}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DegradationRecipe":
        try:
            ops = []
            for entry in doc["ops"]:
                entry = dict(entry)
                kind = entry.pop("kind")
                ops.append(RecipeOp(kind, entry))
            return cls(ops=tuple(ops), seed=int(doc.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise InvalidField(f"malformed recipe: {exc}") from exc


def _op_downsample(img, rng, factor, kernel="bicubic"):
    f = float(factor)
    if f < 1:
        raise InvalidField(f"downsample factor must be >= 1, got {factor}")
    w = max(1, int(round(img.width / f)))
    h = max(1, int(round(img.height / f)))
    return resize(img, w, h, ResampleKernel(kernel))


def _op_defocus_blur(img, rng, sigma):
    if sigma <= 0:
        return img
    hwc = img.to_hwc()
    out = cv2.GaussianBlur(hwc, (0, 0), sigmaX=float(sigma),
                           borderType=cv2.BORDER_REFLECT)
    return ImageBuf.from_hwc(np.clip(out, 0.0, 1.0))


def motion_psf(length: int, angle_deg: float) -> np.ndarray:
    """Normalized box line of the given pixel length along the angle."""
    length = int(length)
    if length < 1:
        raise InvalidField(f"motion length must be >= 1, got {length}")
    if length == 1:
        return np.ones((1, 1), np.float32)
    size = length if length % 2 == 1 else length + 1
    kern = np.zeros((size, size), np.float32)
    c = size // 2
    theta = np.deg2rad(float(angle_deg))
    dx, dy = np.cos(theta), np.sin(theta)
    half = (length - 1) / 2.0
    x0 = int(round(c - half * dx))
    y0 = int(round(c - half * dy))
    x1 = int(round(c + half * dx))
    y1 = int(round(c + half * dy))
    cv2.line(kern, (x0, y0), (x1, y1), 1.0, thickness=1)
    return kern / kern.sum()


def _op_motion_blur(img, rng, length, angle):
    kern = motion_psf(length, angle)
    planes = np.stack([
        cv2.filter2D(p, -1, kern, borderType=cv2.BORDER_REFLECT)
        for p in img.planes
    ])
    return ImageBuf(np.clip(planes, 0.0, 1.0).astype(np.float32))


def _op_gaussian_noise(img, rng, sigma):
    if sigma < 0:
        raise InvalidField(f"noise sigma must be >= 0, got {sigma}")
    # unit draws scaled afterwards, so a larger sigma on the same seed
    # stream is exactly the same noise field, amplified
    unit = rng.standard_normal(img.planes.shape).astype(np.float32)
    noisy = img.planes + float(sigma) * unit
    return ImageBuf(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def _op_jpeg(img, rng, quality):
    q = int(quality)
    if not 1 <= q <= 100:
        raise InvalidField(f"jpeg quality must be in [1,100], got {quality}")
    return decode_image(encode_jpeg(img, quality=q))


_OP_FNS = {
    "downsample": _op_downsample,
    "defocus_blur": _op_defocus_blur,
    "motion_blur": _op_motion_blur,
    "gaussian_noise": _op_gaussian_noise,
    "jpeg": _op_jpeg,
}


def synthesize_lq(hq: ImageBuf, recipe: DegradationRecipe) -> ImageBuf:
    """Apply the recipe's ops strictly in list order. Deterministic for a
    fixed (recipe, seed, input); an empty recipe is the identity."""
    rng = np.random.default_rng(recipe.seed)
    out = hq
    for op in recipe.ops:
        out = _OP_FNS[op.kind](out, rng, **op.params)
    return out


# --- recipe sampling ----------------------------------------------------------

def default_ranges() -> dict:
    text = resources.files("pixelplan").joinpath(
        "data/degradation_ranges.json").read_text()
    return json.loads(text)


def sample_recipe(seed: int, ranges: dict | None = None) -> DegradationRecipe:
    """Draw a recipe from the documented parameter ranges. Ops keep the
    fixed order of OP_KINDS; each joins with its stated probability
    (downsampling, at probability 1.0, always does)."""
    ranges = ranges if ranges is not None else default_ranges()
    rng = np.random.default_rng(seed)
    ops = []
    for kind in OP_KINDS:
        spec = ranges.get(kind)
        if spec is None:
            continue
        if rng.random() >= float(spec.get("probability", 1.0)):
            continue
        params = {}
        for name in sorted(_OP_PARAMS[kind]):
            if name not in spec:
                continue
            val = spec[name]
            if isinstance(val, list):
                lo, hi = float(val[0]), float(val[1])
                drawn = rng.uniform(lo, hi)
                if kind == "motion_blur" and name == "length":
                    drawn = int(round(drawn))
                elif kind == "jpeg" and name == "quality":
                    drawn = int(round(drawn))
                elif kind == "downsample" and name == "factor":
                    drawn = int(round(drawn))
                params[name] = drawn
            else:
                params[name] = val
        ops.append(RecipeOp(kind, params))
    return DegradationRecipe(ops=tuple(ops), seed=int(seed))


# --- report -------------------------------------------------------------------

ROW_COLUMNS = ("id", "status", "psnr", "ssim", "niqe_lq", "niqe_out",
               "baseline_psnr", "runtime_ms", "trace")
_MEAN_FIELDS = ("psnr", "ssim", "niqe_lq", "niqe_out", "baseline_psnr",
                "runtime_ms")


@dataclass
class BenchRow:
    id: str
    status: str = "ok"  # "ok" or an error summary
    psnr: float | None = None
    ssim: float | None = None
    niqe_lq: float | None = None
    niqe_out: float | None = None
    baseline_psnr: float | None = None
    runtime_ms: float | None = None
    trace: str | None = None  # path of the run's trace file, if written

    def to_json_dict(self) -> dict:
        return {col: getattr(self, col) for col in ROW_COLUMNS}


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        """Arithmetic means over the rows that carry each value."""
        out = {"rows": len(self.rows),
               "ok": sum(1 for r in self.rows if r.status == "ok")}
        for name in _MEAN_FIELDS:
            vals = [getattr(r, name) for r in self.rows
                    if getattr(r, name) is not None]
            out[f"mean_{name}"] = (sum(vals) / len(vals)) if vals else None
        return out

    def to_json_dict(self) -> dict:
        return {"rows": [r.to_json_dict() for r in self.rows],
                "aggregate": self.aggregate}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BenchReport":
        rows = []
        for entry in doc["rows"]:
            rows.append(BenchRow(**{col: entry.get(col) for col in ROW_COLUMNS}))
        return cls(rows=rows)


def emit_report(report: BenchReport, fmt: str, path) -> None:
    """CSV keeps a stable column order with floats at 4 decimals; JSON is
    canonical full precision. Neither format ever holds NaN: error rows
    carry a status and empty metric cells."""
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROW_COLUMNS)
        for row in report.rows:
            out = []
            for col in ROW_COLUMNS:
                val = getattr(row, col)
                if val is None:
                    out.append("")
                elif isinstance(val, float):
                    out.append(f"{val:.4f}")
                else:
                    out.append(str(val))
            writer.writerow(out)
        path.write_text(buf.getvalue())
    elif fmt == "json":
        path.write_text(json.dumps(report.to_json_dict(), sort_keys=True,
                                   separators=(",", ":"), allow_nan=False) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def emit_figures(report: BenchReport, out_dir) -> list:
    """Per-image PSNR (pipeline vs. plain bicubic) and NIQE before/after
    charts, written as PNGs. Returns the paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in report.rows if r.status == "ok"]
    paths = []

    if any(r.psnr is not None for r in ok):
        ids = [r.id for r in ok if r.psnr is not None]
        pipe = [r.psnr for r in ok if r.psnr is not None]
        base = [r.baseline_psnr if r.baseline_psnr is not None else float("nan")
                for r in ok if r.psnr is not None]
        x = np.arange(len(ids))
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
        ax.bar(x - 0.2, pipe, width=0.4, label="pipeline")
        ax.bar(x + 0.2, base, width=0.4, label="bicubic only")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("Y-PSNR (dB)")
        ax.legend()
        fig.tight_layout()
        p = out_dir / "psnr.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)

    if any(r.niqe_lq is not None or r.niqe_out is not None for r in ok):
        ids = [r.id for r in ok]
        lq = [r.niqe_lq if r.niqe_lq is not None else float("nan") for r in ok]
        out = [r.niqe_out if r.niqe_out is not None else float("nan") for r in ok]
        x = np.arange(len(ids))
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
        ax.plot(x, lq, "o--", label="input")
        ax.plot(x, out, "o-", label="restored")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("NIQE (lower is better)")
        ax.legend()
        fig.tight_layout()
        p = out_dir / "niqe.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)
    return paths


# --- harness ------------------------------------------------------------------

def bicubic_baseline(lq: ImageBuf, hq: ImageBuf) -> ImageBuf:
    """The no-restoration reference: bicubic resample straight to the
    original's dimensions."""
    return resize(lq, hq.width, hq.height, ResampleKernel.BICUBIC)


def _finite_psnr(value: float) -> float:
    # identical images give +inf, which the NaN-free report cannot hold;
    # the registry's sentinel for that case is 99.0
    return 99.0 if value == float("inf") else value


def _match_dims(img: ImageBuf, ref: ImageBuf) -> ImageBuf:
    if (img.width, img.height) == (ref.width, ref.height):
        return img
    return resize(img, ref.width, ref.height, ResampleKernel.BICUBIC)


def _row_seed(base_seed: int, image_id: str) -> int:
    return (int(base_seed) * 2654435761 + zlib.crc32(image_id.encode())) % 2**31


def run_bench(corpus_dir, profile: Profile, bindings: WorkerBindings,
              out_dir, *, seed: int = 0, fast4k: bool = False,
              limit: int | None = None, timeout_ms: int = 120_000,
              clock=time.perf_counter, figures: bool = True) -> BenchReport:
    """Run every corpus image through the engine and score the results.

    Corpus layout: ``hq/*.png`` originals; optional ``lq/<same name>.png``
    precomputed inputs; optional ``recipes.json`` mapping image ids to
    recipe documents. Images without either get a recipe sampled from the
    documented default ranges, seeded by (seed, id) so reruns are
    identical. Output PSNR/SSIM are measured on the Y channel against the
    original (resampled to its size if the profile's scale lands
    elsewhere); NIQE is measured on the input and the restored output.
    Per-image failures become rows with an error status; the harness
    always finishes the corpus. ``clock`` exists so a frozen run can
    produce byte-identical reports.
    """
    corpus = Path(corpus_dir)
    out = Path(out_dir)
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)

    hq_paths = sorted((corpus / "hq").glob("*.png"))
    if limit is not None:
        hq_paths = hq_paths[:limit]
    recipes_path = corpus / "recipes.json"
    recipe_docs = {}
    if recipes_path.is_file():
        recipe_docs = json.loads(recipes_path.read_text())

    niqe_only = MetricRegistry()  # native NIQE for the before/after columns
    report = BenchReport()
    for hq_path in hq_paths:
        image_id = hq_path.stem
        row = BenchRow(id=image_id)
        report.rows.append(row)
        t0 = clock()
        try:
            hq = load_image(hq_path)
            lq_path = corpus / "lq" / hq_path.name
            if lq_path.is_file():
                lq = load_image(lq_path)
            elif image_id in recipe_docs:
                lq = synthesize_lq(
                    hq, DegradationRecipe.from_json_dict(recipe_docs[image_id]))
            else:
                lq = synthesize_lq(hq, sample_recipe(_row_seed(seed, image_id)))

            result = run_image(lq, profile, bindings, fast4k=fast4k,
                               image_path=lq_path if lq_path.is_file() else None,
                               timeout_ms=timeout_ms)

            trace_path = traces_dir / f"{image_id}.jsonl"
            trace_path.write_text(dump_trace(result.trace))
            row.trace = str(trace_path.relative_to(out))

            restored = _match_dims(result.image, hq)
            row.psnr = _finite_psnr(psnr_y(hq, restored))
            row.ssim = ssim_y(hq, restored)
            baseline = bicubic_baseline(lq, hq)
            row.baseline_psnr = _finite_psnr(psnr_y(hq, baseline))
            row.niqe_lq = niqe_only.report(lq, (MetricKind.NIQE,)).score(
                MetricKind.NIQE)
            row.niqe_out = niqe_only.report(restored, (MetricKind.NIQE,)).score(
                MetricKind.NIQE)
        except PixelplanError as exc:
            row.status = f"{exc.__class__.__name__}: {exc}"
        row.runtime_ms = (clock() - t0) * 1000.0

    emit_report(report, "csv", out / "report.csv")
    emit_report(report, "json", out / "report.json")
    if figures:
        emit_figures(report, out / "figures")
    return report
