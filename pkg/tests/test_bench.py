"""Degradation synthesis and the corpus harness: recipe determinism,
per-op behavior, report formats, and end-to-end bench runs with the
native toolbox."""
import csv
import io
import json

import numpy as np
import pytest

from pixelplan.bench import (
    BenchReport,
    BenchRow,
    DegradationRecipe,
    OP_KINDS,
    ROW_COLUMNS,
    RecipeOp,
    bicubic_baseline,
    default_ranges,
    emit_figures,
    emit_report,
    motion_psf,
    run_bench,
    sample_recipe,
    synthesize_lq,
)
from pixelplan.engine import WorkerBindings
from pixelplan.errors import InvalidField
from pixelplan.imagecore import save_image
from pixelplan.metrics.fullref import psnr_y
from pixelplan.profiles import load_profile
from pixelplan.synthimg import synth_pristine


def op(kind, **params):
    return RecipeOp(kind, params)


def recipe(*ops, seed=0):
    return DegradationRecipe(ops=tuple(ops), seed=seed)


@pytest.fixture(scope="module")
def hq():
    return synth_pristine(11, 96, 80)


# --- recipe validation --------------------------------------------------------

class TestRecipeValidation:
    def test_unknown_op_kind(self):
        with pytest.raises(InvalidField):
            op("sharpen", amount=2)

    def test_unknown_param_for_op(self):
        with pytest.raises(InvalidField):
            op("gaussian_noise", sigma=0.1, mean=0.5)

    def test_non_op_recipe_entry(self):
        with pytest.raises(InvalidField):
            DegradationRecipe(ops=({"kind": "jpeg"},))

    def test_json_round_trip(self):
        r = recipe(op("downsample", factor=4, kernel="bicubic"),
                   op("gaussian_noise", sigma=0.05), seed=9)
        assert DegradationRecipe.from_json_dict(r.to_json_dict()) == r

    def test_malformed_recipe_document(self):
        with pytest.raises(InvalidField):
            DegradationRecipe.from_json_dict({"seed": 1})

    @pytest.mark.parametrize("bad", [
        op("downsample", factor=0.5),
        op("gaussian_noise", sigma=-0.1),
        op("jpeg", quality=0),
        op("jpeg", quality=101),
        op("motion_blur", length=0, angle=0),
    ])
    def test_out_of_range_params_fail_on_application(self, bad, hq):
        with pytest.raises(InvalidField):
            synthesize_lq(hq, recipe(bad))


# --- synthesis ------------------------------------------------------------

class TestSynthesis:
    def test_same_recipe_same_bytes(self, hq):
        r = recipe(op("defocus_blur", sigma=1.2),
                   op("gaussian_noise", sigma=0.04),
                   op("jpeg", quality=70), seed=5)
        a = synthesize_lq(hq, r)
        b = synthesize_lq(hq, r)
        assert np.array_equal(a.planes, b.planes)

    def test_empty_recipe_is_identity(self, hq):
        out = synthesize_lq(hq, recipe())
        assert np.array_equal(out.planes, hq.planes)

    def test_downsample_dimensions_and_floor(self, hq):
        out = synthesize_lq(hq, recipe(op("downsample", factor=4)))
        assert (out.width, out.height) == (24, 20)
        tiny = synthesize_lq(hq, recipe(op("downsample", factor=1000)))
        assert (tiny.width, tiny.height) == (1, 1)

    def test_noise_scales_as_an_amplified_copy_of_the_field(self, hq):
        # unit draws are scaled after the fact, so on one seed the fields
        # at two sigmas differ only by the factor
        lo = synthesize_lq(hq, recipe(op("gaussian_noise", sigma=0.02), seed=4))
        hi = synthesize_lq(hq, recipe(op("gaussian_noise", sigma=0.08), seed=4))
        field_lo = lo.planes - hq.planes
        field_hi = hi.planes - hq.planes
        # clipped samples sit exactly on 0 or 1; compare the rest
        free = ((lo.planes > 0) & (lo.planes < 1) &
                (hi.planes > 0) & (hi.planes < 1))
        assert free.sum() > field_lo.size // 2
        np.testing.assert_allclose(
            field_hi[free], 4.0 * field_lo[free], atol=1e-6)

    def test_more_noise_means_lower_psnr(self, hq):
        lo = synthesize_lq(hq, recipe(op("gaussian_noise", sigma=0.02), seed=4))
        hi = synthesize_lq(hq, recipe(op("gaussian_noise", sigma=0.08), seed=4))
        assert psnr_y(hq, hi) < psnr_y(hq, lo)

    def test_lower_jpeg_quality_means_lower_psnr(self, hq):
        good = synthesize_lq(hq, recipe(op("jpeg", quality=90)))
        bad = synthesize_lq(hq, recipe(op("jpeg", quality=20)))
        assert psnr_y(hq, bad) < psnr_y(hq, good)

    def test_zero_sigma_defocus_is_identity(self, hq):
        out = synthesize_lq(hq, recipe(op("defocus_blur", sigma=0)))
        assert np.array_equal(out.planes, hq.planes)

    def test_op_order_is_applied_literally(self, hq):
        ab = synthesize_lq(hq, recipe(op("gaussian_noise", sigma=0.05),
                                      op("defocus_blur", sigma=1.5), seed=2))
        ba = synthesize_lq(hq, recipe(op("defocus_blur", sigma=1.5),
                                      op("gaussian_noise", sigma=0.05), seed=2))
        assert not np.array_equal(ab.planes, ba.planes)


class TestMotionPsf:
    def test_length_one_is_a_no_op_kernel(self):
        assert np.array_equal(motion_psf(1, 37.0), np.ones((1, 1), np.float32))

    @pytest.mark.parametrize("length,angle", [(3, 0), (5, 45), (9, 90), (7, 135)])
    def test_kernel_is_normalized(self, length, angle):
        kern = motion_psf(length, angle)
        assert kern.sum() == pytest.approx(1.0, abs=1e-6)

    def test_horizontal_streak_occupies_one_row(self):
        kern = motion_psf(5, 0.0)
        assert (np.count_nonzero(kern, axis=1) > 0).sum() == 1

    def test_blur_preserves_dimensions(self, hq):
        out = synthesize_lq(hq, recipe(op("motion_blur", length=7, angle=30)))
        assert (out.width, out.height) == (hq.width, hq.height)


# --- sampling -------------------------------------------------------------

class TestSampleRecipe:
    def test_deterministic_per_seed(self):
        assert sample_recipe(42) == sample_recipe(42)

    def test_downsampling_always_participates(self):
        for seed in range(20):
            kinds = [o.kind for o in sample_recipe(seed).ops]
            assert "downsample" in kinds

    def test_ops_keep_the_declared_order(self):
        for seed in range(20):
            kinds = [o.kind for o in sample_recipe(seed).ops]
            assert kinds == [k for k in OP_KINDS if k in kinds]

    def test_parameters_stay_inside_the_documented_ranges(self):
        ranges = default_ranges()
        for seed in range(50):
            for o in sample_recipe(seed).ops:
                spec = ranges[o.kind]
                for name, value in o.params.items():
                    bound = spec[name]
                    if isinstance(bound, list):
                        assert bound[0] <= value <= bound[1], (seed, o.kind, name)
                    else:
                        assert value == bound

    def test_seeds_disagree_eventually(self):
        drawn = [sample_recipe(s) for s in range(10)]
        assert any(r != drawn[0] for r in drawn[1:])

    def test_custom_ranges_force_ops(self):
        ranges = {"jpeg": {"probability": 1.0, "quality": [50, 50]}}
        r = sample_recipe(0, ranges)
        assert [o.kind for o in r.ops] == ["jpeg"]
        assert r.ops[0].params["quality"] == 50


# --- report formats ---------------------------------------------------------

def two_row_report():
    return BenchReport(rows=[
        BenchRow(id="a", psnr=25.123456, ssim=0.87654321, niqe_lq=9.5,
                 niqe_out=5.25, baseline_psnr=24.5, runtime_ms=120.7,
                 trace="traces/a.jsonl"),
        BenchRow(id="b", status="ToolFailed: worker said no"),
    ])


class TestReport:
    def test_aggregate_means_skip_missing_values(self):
        agg = two_row_report().aggregate
        assert agg["rows"] == 2
        assert agg["ok"] == 1
        assert agg["mean_psnr"] == pytest.approx(25.123456)
        assert agg["mean_runtime_ms"] == pytest.approx(120.7)

    def test_aggregate_of_nothing_is_none(self):
        assert BenchReport().aggregate["mean_psnr"] is None

    def test_csv_has_stable_columns_and_four_decimals(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report(two_row_report(), "csv", path)
        rows = list(csv.reader(io.StringIO(path.read_text())))
        assert tuple(rows[0]) == ROW_COLUMNS
        a = dict(zip(rows[0], rows[1]))
        assert a["psnr"] == "25.1235"
        assert a["ssim"] == "0.8765"
        b = dict(zip(rows[0], rows[2]))
        assert b["status"] == "ToolFailed: worker said no"
        assert b["psnr"] == ""

    def test_json_is_canonical_and_round_trips(self, tmp_path):
        path = tmp_path / "r.json"
        report = two_row_report()
        emit_report(report, "json", path)
        text = path.read_text()
        doc = json.loads(text)
        assert text == json.dumps(doc, sort_keys=True,
                                  separators=(",", ":")) + "\n"
        again = BenchReport.from_json_dict(doc)
        assert again.to_json_dict() == report.to_json_dict()

    def test_unknown_format_is_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(two_row_report(), "xml", tmp_path / "r.xml")

    def test_figures_are_rendered(self, tmp_path):
        paths = emit_figures(two_row_report(), tmp_path)
        names = {p.name for p in paths}
        assert names == {"psnr.png", "niqe.png"}
        for p in paths:
            assert p.stat().st_size > 0


# --- harness ------------------------------------------------------------------

def make_corpus(tmp_path, n=2, size=64):
    hq_dir = tmp_path / "corpus" / "hq"
    hq_dir.mkdir(parents=True)
    for i in range(n):
        save_image(hq_dir / f"img{i:02d}.png", synth_pristine(100 + i, size, size))
    return tmp_path / "corpus"


class TestRunBench:
    def test_every_corpus_image_gets_a_row(self, tmp_path):
        corpus = make_corpus(tmp_path, n=2)
        report = run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                           tmp_path / "out", seed=1, figures=False)
        assert [r.id for r in report.rows] == ["img00", "img01"]
        assert all(r.status == "ok" for r in report.rows)
        for r in report.rows:
            assert r.psnr is not None and r.baseline_psnr is not None
            assert r.runtime_ms is not None
            trace_path = tmp_path / "out" / r.trace
            assert trace_path.is_file()
            for line in trace_path.read_text().splitlines():
                assert set(json.loads(line)) == {
                    "v", "phase", "step", "task", "tool_id", "scores",
                    "decision"}

    def test_report_files_and_figures_land_next_to_each_other(self, tmp_path):
        # 192px originals keep the restored output above the native NIQE
        # minimum, so both charts have data
        corpus = make_corpus(tmp_path, n=1, size=192)
        out = tmp_path / "out"
        run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(), out,
                  seed=1)
        assert (out / "report.csv").is_file()
        assert (out / "report.json").is_file()
        assert (out / "figures" / "psnr.png").is_file()
        assert (out / "figures" / "niqe.png").is_file()

    def test_limit_trims_the_corpus(self, tmp_path):
        corpus = make_corpus(tmp_path, n=3)
        report = run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                           tmp_path / "out", limit=1, figures=False)
        assert len(report.rows) == 1

    def test_a_broken_image_fails_its_row_only(self, tmp_path):
        corpus = make_corpus(tmp_path, n=2)
        (corpus / "hq" / "img00.png").write_bytes(b"not an image")
        report = run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                           tmp_path / "out", seed=1, figures=False)
        by_id = {r.id: r for r in report.rows}
        assert by_id["img00"].status != "ok"
        assert by_id["img00"].psnr is None
        assert by_id["img01"].status == "ok"
        # the error row still emits cleanly in both formats
        assert json.loads((tmp_path / "out" / "report.json").read_text())

    def test_recipes_file_overrides_sampling(self, tmp_path):
        corpus = make_corpus(tmp_path, n=1)
        noop = DegradationRecipe(ops=()).to_json_dict()
        (corpus / "recipes.json").write_text(json.dumps({"img00": noop}))
        report = run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                           tmp_path / "out", figures=False)
        # identity recipe: the input equals the original, so even the
        # bicubic baseline scores as a perfect match
        assert report.rows[0].baseline_psnr == pytest.approx(99.0)

    def test_precomputed_lq_directory_wins(self, tmp_path):
        corpus = make_corpus(tmp_path, n=1)
        lq_dir = corpus / "lq"
        lq_dir.mkdir()
        marker = synth_pristine(999, 32, 32)
        save_image(lq_dir / "img00.png", marker)
        report = run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                           tmp_path / "out", figures=False)
        # a 32px input upscaled 4x lands at 128, resampled to 64 for
        # scoring; the run must have started from the marker, not a
        # synthesized input
        trace = (tmp_path / "out" / report.rows[0].trace).read_text()
        assert report.rows[0].status == "ok"
        assert '"scale":4' in trace or '"scale": 4' in trace

    def test_frozen_clock_and_seed_reproduce_the_report_bytes(self, tmp_path):
        corpus = make_corpus(tmp_path, n=2)
        frozen = lambda: 0.0  # noqa: E731
        for name in ("one", "two"):
            run_bench(corpus, load_profile("GenSR-s4-P"), WorkerBindings(),
                      tmp_path / name, seed=7, clock=frozen, figures=False)
        assert (tmp_path / "one" / "report.json").read_bytes() == \
            (tmp_path / "two" / "report.json").read_bytes()
        assert (tmp_path / "one" / "report.csv").read_bytes() == \
            (tmp_path / "two" / "report.csv").read_bytes()

    def test_baseline_column_tracks_plain_bicubic(self, tmp_path):
        hq = synth_pristine(5, 64, 64)
        lq = synthesize_lq(hq, recipe(op("downsample", factor=4)))
        base = bicubic_baseline(lq, hq)
        assert (base.width, base.height) == (64, 64)
