"""Acceptance gate: one test per shipped guarantee, each ending in a
single printed verdict line. These intentionally re-derive expected
values from scratch (brute force, hand-coded evaluators, scripted
workers) instead of reusing library helpers, so a regression in the
library cannot hide inside its own oracle."""
import dataclasses
import json
import math
import random
import time
from pathlib import Path

import cv2
import numpy as np
import pytest

from pixelplan.bench import run_bench
from pixelplan.engine import WorkerBindings
from pixelplan.errors import (
    PlanExhausted,
    ProtocolError,
    WorkerError,
    WorkerUnreachable,
)
from pixelplan.facepipe import (
    FaceWeights,
    IDENTITY_TOOL_ID,
    RemoteDetector,
    TestEmbedder,
    face_qsf,
    restore_faces,
)
from pixelplan.imagecore import ImageBuf, save_image
from pixelplan.metrics import (
    MetricKind,
    MetricRegistry,
    RemoteScorer,
    psnr_y,
    ssim_y,
)
from pixelplan.metrics.niqe import fit_aggd
from pixelplan.perception import AgendaStep, Plan, upscale_factor
from pixelplan.profiles import (
    PRESETS,
    dump_catalog,
    effective_config,
    parse_profile_name,
    preset_names,
)
from pixelplan.restoration import (
    Candidate,
    QmoeWeights,
    QualityScores,
    RunDeps,
    execute_step,
    make_state,
    reflect,
    run_pipeline,
    select_best,
)
from pixelplan.synthimg import synth_pristine
from pixelplan.toolbox import (
    Cost,
    Preference,
    RemoteBackend,
    TaskKind,
    ToolRegistry,
    ToolSpec,
    apply_tool,
)
from pixelplan.toolbox.registry import DEFAULT_FAST4K_THRESHOLD
from pixelplan.workerproto.client import call_apply, call_score, health
from pixelplan.workerproto.schema import (
    ApplyRequest,
    ScoreRequest,
    b64_to_image,
    image_to_b64,
)
from pixelplan.workerproto.testing import StubWorker, const_scorer, identity_tool

GOLDEN = Path(__file__).parent / "golden"

NR_KINDS = [MetricKind.NIQE, MetricKind.MUSIQ, MetricKind.MANIQA,
            MetricKind.CLIPIQA]


def verdict(name, detail):
    print(f"ACCEPTANCE {name}: PASS ({detail})")


def quantized(img):
    """Snap to the 8-bit lattice so PNG wire trips are lossless."""
    return ImageBuf(np.round(img.planes * 255.0).astype(np.float32) / 255.0)


def remote_tools(endpoint, entries, cost=Cost.FAST):
    reg = ToolRegistry()
    for tool_id, task in entries:
        reg.register(ToolSpec(
            id=tool_id, task=task, preference=Preference.PERCEPTION,
            cost=cost, backend=RemoteBackend(endpoint),
        ))
    return reg


def remote_metrics(endpoint, kinds=tuple(NR_KINDS)):
    reg = MetricRegistry()
    for kind in kinds:
        reg.bind(RemoteScorer(endpoint=endpoint, metric=kind))
    return reg


# --- 1. upscale factor ----------------------------------------------------------

def test_upscale_factor_exhaustive_against_brute_force():
    started = time.perf_counter()
    for side in range(1, 8193):
        expected = min([s for s in (2, 4, 8, 16) if side * s >= 4000] or [16])
        got = upscale_factor(side)
        assert got == expected, f"side {side}: got {got}, brute force {expected}"
    assert upscale_factor(256) == 16
    assert upscale_factor(1920) == 4
    assert upscale_factor(4000) == 2
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    verdict("upscale-factor", f"8192 sides exact, {elapsed:.2f}s")


# --- 2. quality blend audit -----------------------------------------------------

def hand_qnr(niqe, musiq, maniqa, clipiqa):
    return (1.0 * (1.0 - min(niqe, 10.0) / 10.0)
            + 0.01 * musiq + 1.0 * maniqa + 1.0 * clipiqa)


def test_quality_blend_matches_independent_evaluator_over_http():
    rng = np.random.default_rng(20260816)
    rows = [(float(rng.uniform(0.0, 20.0)), float(rng.uniform(0.0, 100.0)),
             float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)))
            for _ in range(1000)]
    cursors = {k: 0 for k in ("niqe", "musiq", "maniqa", "clipiqa")}

    def scripted(name, col):
        def fn(img, context):
            i = cursors[name]
            cursors[name] += 1
            return rows[i][col]
        return fn

    gray = quantized(synth_pristine(8, 4, 4))
    candidates = [Candidate(tool_id=f"c{i}", image=gray) for i in range(1000)]
    with StubWorker(metrics={"niqe": scripted("niqe", 0),
                             "musiq": scripted("musiq", 1),
                             "maniqa": scripted("maniqa", 2),
                             "clipiqa": scripted("clipiqa", 3)}) as w:
        metrics = remote_metrics(w.endpoint)
        scores = reflect(candidates, "", QmoeWeights(), metrics)
    assert all(cursors[k] == 1000 for k in cursors)
    worst = 0.0
    for score, row in zip(scores, rows):
        want_qnr = hand_qnr(*row)
        want_qs = 0.0 + want_qnr / 4.0
        worst = max(worst, abs(score.q_nr - want_qnr), abs(score.q_s - want_qs))
        assert abs(score.q_nr - want_qnr) <= 1e-9
        assert abs(score.q_s - want_qs) <= 1e-9

    anchor = {"niqe": const_scorer(5.0), "musiq": const_scorer(60.0),
              "maniqa": const_scorer(0.5), "clipiqa": const_scorer(0.6)}
    with StubWorker(metrics=anchor) as w:
        metrics = remote_metrics(w.endpoint)
        score = reflect([Candidate("a", gray)], "", QmoeWeights(), metrics)[0]
    assert score.q_nr == 2.2
    assert score.q_s == 0.55
    verdict("quality-blend", f"1000 tuples, max |err| {worst:.1e}, anchor exact")


# --- 3. candidate selection -----------------------------------------------------

def scores_list(values):
    return [QualityScores(tool_id=f"t{i}", raw={}, q_nr=0.0, h=0.0, q_s=v)
            for i, v in enumerate(values)]


def test_selection_argmax_stability_and_monotone_invariance():
    rng = random.Random(99173)
    cases = ties = 0
    for _ in range(10_000):
        n = rng.randint(1, 8)
        vals = [round(rng.uniform(-1.0, 2.0), 6) for _ in range(n)]
        if n >= 2 and rng.random() < 0.3:
            j, k = rng.sample(range(n), 2)
            vals[k] = vals[j]
        best = select_best(scores_list(vals))
        top = max(vals)
        assert vals[best] == top
        assert best == vals.index(top)
        if vals.count(top) > 1:
            ties += 1
        for f in (lambda x: 3.0 * x + 1.0, lambda x: x ** 3):
            assert select_best(scores_list([f(v) for v in vals])) == best
        cases += 1
    assert cases == 10_000
    assert ties > 100
    verdict("selection", f"10000 cases, {ties} with ties, 0 failures")


# --- 4. rollback machine --------------------------------------------------------

TAG_LEVELS = (0.0, 0.25, 0.5, 0.75, 0.9)


def read_tag(img):
    v = float(img.planes[0, 0, 0])
    return min(TAG_LEVELS, key=lambda t: abs(t - v))


def tag_tool(transition):
    def fn(img, params, context):
        planes = img.planes.copy()
        planes[:, :2, :2] = transition[read_tag(img)]
        return ImageBuf(planes)
    return fn


def table_metric(col, table):
    def fn(img, context):
        return table[read_tag(img)][col]
    return fn


FAIL_ROW = (10.0, 0.0, 0.8, 0.8)    # q_s 0.4
OK_ROW = (10.0, 4.0, 1.0, 1.0)      # q_s 0.51

DN_STEPS = {0.0: 0.25, 0.5: 0.75}
JQ_STEPS = {0.0: 0.5, 0.25: 0.9}


def rollback_run(score_table):
    with StubWorker(tools={"dn": tag_tool(DN_STEPS), "jq": tag_tool(JQ_STEPS)},
                    metrics={"niqe": table_metric(0, score_table),
                             "musiq": table_metric(1, score_table),
                             "maniqa": table_metric(2, score_table),
                             "clipiqa": table_metric(3, score_table)}) as w:
        tools = remote_tools(w.endpoint, [("dn", TaskKind.DENOISING),
                                          ("jq", TaskKind.JPEG_CAR)])
        plan = Plan(steps=(AgendaStep(TaskKind.DENOISING),
                           AgendaStep(TaskKind.JPEG_CAR)),
                    provenance="rule-based")
        planes = synth_pristine(41, 48, 48).planes.copy()
        planes[:, :2, :2] = 0.0  # start at a known tag
        base = ImageBuf(planes)
        state = make_state(base, plan)
        deps = RunDeps(tools=tools, metrics=remote_metrics(w.endpoint))
        final, trace = run_pipeline(state, deps)

        replayed = base
        for event in trace:
            if event["phase"] == "select" and event["decision"]["outcome"] == "accept":
                spec = tools.get(event["tool_id"])
                replayed = apply_tool(spec, replayed,
                                      scale=event["decision"]["params"].get("scale"))
    return final, trace, replayed


def test_rollback_accept_and_compromise_with_bit_exact_replay():
    # the first tool lands at q_s 0.4 and must roll back; the replanned
    # order then accepts at 0.51, and the failed task re-enters through
    # the compromise pass only
    table = {0.0: FAIL_ROW, 0.25: FAIL_ROW, 0.5: OK_ROW, 0.75: OK_ROW,
             0.9: OK_ROW}
    final, trace, replayed = rollback_run(table)

    selects = [e for e in trace if e["phase"] == "select"]
    assert selects[0]["decision"]["outcome"] == "rollback"
    assert selects[0]["decision"]["q_s"] == pytest.approx(0.4, abs=1e-9)

    replans = [e for e in trace if e["phase"] == "replan"]
    assert len(replans) == 1
    assert replans[0]["decision"]["order"] == ["jpeg-car", "denoising"]

    accepts = [e for e in selects if e["decision"]["outcome"] == "accept"]
    assert [e["tool_id"] for e in accepts] == ["jq", "dn"]
    for e in accepts:
        assert e["decision"]["q_s"] == pytest.approx(0.51, abs=1e-9)
    assert [e["decision"]["compromise"] for e in accepts] == [False, True]
    assert read_tag(final) == 0.75
    assert np.array_equal(final.planes, replayed.planes)

    # nothing ever clears the bar: the run must degrade to the best
    # effort in the original plan order instead of raising
    all_fail = {t: FAIL_ROW for t in TAG_LEVELS}
    final, trace, replayed = rollback_run(all_fail)
    compromise = [e for e in trace if e["phase"] == "compromise"]
    assert len(compromise) == 1
    assert compromise[0]["decision"]["order"] == ["denoising", "jpeg-car"]
    accepts = [e for e in trace
               if e["phase"] == "select" and e["decision"]["outcome"] == "accept"]
    assert [e["tool_id"] for e in accepts] == ["dn", "jq"]
    assert all(e["decision"]["compromise"] for e in accepts)
    assert read_tag(final) == 0.9
    assert np.array_equal(final.planes, replayed.planes)
    verdict("rollback", "0.4 rolls back, 0.51 accepts, compromise keeps "
                        "original order, replay bit-exact twice")


# --- 5. face stage --------------------------------------------------------------

def sr_state(pre, post):
    plan = Plan(steps=(AgendaStep(TaskKind.SUPER_RESOLUTION, {"scale": 2}),),
                provenance="rule-based")
    state = make_state(pre, plan)
    state.current = post
    state.sr_step_survived = True
    return state


def count_keyed_detector(counts):
    """Rect list sized by image width, in reply form."""
    def fn(req):
        img = b64_to_image(req.image)
        n = counts[img.width]
        return {"faces": [{"x": 4 + 30 * i, "y": 4, "w": 24, "h": 24}
                          for i in range(n)]}
    return fn


def brightness_clib(bright_score, dark_score):
    def fn(img, context):
        return bright_score if float(img.planes.mean()) > 0.6 else dark_score
    return fn


def boost_tool(img, params, context):
    return ImageBuf(np.clip(img.planes + 0.35, 0.0, 1.0))


def test_face_score_anchor_gate_paste_locality_and_identity_floor():
    w = FaceWeights()
    assert abs(face_qsf(0.8, 2.2, 0.7, w) - 1.2508) <= 1e-9

    pre = quantized(synth_pristine(61, 64, 64))
    post = quantized(synth_pristine(62, 128, 128))
    native = MetricRegistry()

    # pre/post face counts disagree: the stage must skip untouched
    with StubWorker(face_detector=count_keyed_detector({64: 1, 128: 2})) as wk:
        state = sr_state(pre, post)
        out = restore_faces(state, [], TestEmbedder(), w, native,
                            detector=RemoteDetector(wk.endpoint))
    assert out is post
    skip = [e for e in state.trace if e["phase"] == "face-skip"]
    assert len(skip) == 1 and "counts differ" in skip[0]["decision"]["reason"]

    # counts agree and the remote candidate wins: pixels outside the
    # face rect stay bit-identical
    with StubWorker(tools={"boost": boost_tool},
                    metrics={"clib_fiqa": brightness_clib(0.9, 0.1)},
                    face_detector=count_keyed_detector({64: 1, 128: 1})) as wk:
        face_reg = remote_tools(wk.endpoint,
                                [("boost", TaskKind.FACE_RESTORATION)])
        metrics = remote_metrics(wk.endpoint, (MetricKind.CLIB_FIQA,))
        state = sr_state(pre, post)
        out = restore_faces(state, list(face_reg.tools_for(
            TaskKind.FACE_RESTORATION, Preference.PERCEPTION,
            image_max_side=128)), TestEmbedder(), w, metrics,
            detector=RemoteDetector(wk.endpoint))
        selected = [e for e in state.trace if e["phase"] == "face-select"]
        assert selected[0]["tool_id"] == "boost"
        rect = selected[0]["decision"]["rect"]
        mask = np.ones((128, 128), dtype=bool)
        mask[rect["y"]:rect["y"] + rect["h"], rect["x"]:rect["x"] + rect["w"]] = False
        assert np.array_equal(out.planes[:, mask], post.planes[:, mask])
        assert not np.array_equal(out.planes, post.planes)

        # lower-scored candidate: identity must win
        wk.metrics["clib_fiqa"] = brightness_clib(0.1, 0.9)
        state = sr_state(pre, post)
        out = restore_faces(state, list(face_reg.tools_for(
            TaskKind.FACE_RESTORATION, Preference.PERCEPTION,
            image_max_side=128)), TestEmbedder(), w, metrics,
            detector=RemoteDetector(wk.endpoint))
        selected = [e for e in state.trace if e["phase"] == "face-select"]
        assert selected[0]["tool_id"] == IDENTITY_TOOL_ID
        assert np.array_equal(out.planes, post.planes)

        # exact tie (identity-valued remote tool): identity still wins
        wk.tools["boost"] = identity_tool
        wk.metrics["clib_fiqa"] = const_scorer(0.5)
        state = sr_state(pre, post)
        restore_faces(state, list(face_reg.tools_for(
            TaskKind.FACE_RESTORATION, Preference.PERCEPTION,
            image_max_side=128)), TestEmbedder(), w, metrics,
            detector=RemoteDetector(wk.endpoint))
        reflected = [e for e in state.trace if e["phase"] == "face-reflect"]
        scores = reflected[0]["scores"]
        assert scores[0]["q_sf"] == scores[1]["q_sf"]
        selected = [e for e in state.trace if e["phase"] == "face-select"]
        assert selected[0]["tool_id"] == IDENTITY_TOOL_ID
    verdict("face-stage", "anchor 1.2508, count gate skips, paste local, "
                          "identity wins losses and ties")


# --- 6. naturalness metric ------------------------------------------------------

def with_noise(img, rng, sigma):
    if sigma == 0.0:
        return img
    noisy = img.planes + rng.standard_normal(img.planes.shape) * sigma
    return ImageBuf(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def with_blur(img, radius):
    if radius == 0:
        return img
    hwc = np.transpose(img.planes, (1, 2, 0))
    k = 2 * radius + 1
    out = cv2.blur(hwc, (k, k), borderType=cv2.BORDER_REFLECT)
    return ImageBuf(np.transpose(out, (2, 0, 1)).astype(np.float32))


def test_aggd_alpha_recovery_and_niqe_degradation_ordering():
    started = time.perf_counter()
    rng = np.random.default_rng(42)
    gauss = fit_aggd(rng.standard_normal(100_000))
    assert abs(gauss.alpha - 2.0) <= 0.2
    laplace = fit_aggd(rng.laplace(size=100_000))
    assert abs(laplace.alpha - 1.0) <= 0.2

    reg = MetricRegistry()

    def score(img):
        return reg.report(img, [MetricKind.NIQE]).score(MetricKind.NIQE)

    orderings = 0
    for seed in range(101, 106):
        base = synth_pristine(seed, 256, 256)
        noise_rng = np.random.default_rng(seed)
        n = [score(with_noise(base, noise_rng, s)) for s in (0.0, 0.05, 0.1)]
        b = [score(with_blur(base, r)) for r in (0, 1, 3)]
        assert n[0] < n[1] < n[2], f"seed {seed}: noise chain {n}"
        assert b[0] < b[1] < b[2], f"seed {seed}: blur chain {b}"
        orderings += 4
    elapsed = time.perf_counter() - started
    assert orderings >= 15
    assert elapsed < 30.0
    verdict("naturalness", f"alpha 2/1 recovered, {orderings}/{orderings} "
                           f"orderings strict, {elapsed:.1f}s")


# --- 7. full-reference anchors --------------------------------------------------

def test_psnr_offset_and_ssim_self_anchors():
    zeros = ImageBuf(np.zeros((3, 32, 32), dtype=np.float32))
    halves = ImageBuf(np.full((3, 32, 32), 0.5, dtype=np.float32))
    got = psnr_y(zeros, halves)
    assert abs(got - 6.0206) <= 1e-3
    img = synth_pristine(5, 96, 96)
    assert abs(ssim_y(img, img) - 1.0) <= 1e-9
    verdict("full-reference", f"uniform-offset psnr {got:.4f}, self-ssim 1.0")


# --- 8. profile presets ---------------------------------------------------------

def test_preset_catalog_name_grammar_and_scale_override():
    assert dump_catalog() == (GOLDEN / "preset_catalog.json").read_text()
    names = preset_names()
    assert len(names) == 12 and len(set(names)) == 12
    for name in names:
        profile = PRESETS[name]
        for field, value in parse_profile_name(name).pins().items():
            assert getattr(profile, field) == value, f"{name}: {field}"

    # explicit scale beats the 4K sizing rule; without it the rule runs
    deluxe = PRESETS["Gen4K-P"]
    assert effective_config(deluxe, 256, 256).scale == 16
    assert effective_config(deluxe, 1920, 1080).scale == 4
    pinned = dataclasses.replace(deluxe, scale_factor=4)
    assert effective_config(pinned, 256, 256).scale == 4
    assert effective_config(PRESETS["ExpSR-s4-F"], 3000, 3000).scale == 4
    bare = dataclasses.replace(PRESETS["GenMIR-P"], scale_factor=None)
    assert effective_config(bare, 256, 256).scale is None
    verdict("profiles", "catalog byte-match, 12 nicknames agree, "
                        "scale override exact")


# --- 9. worker protocol ---------------------------------------------------------

def test_worker_protocol_roundtrip_version_timeout_and_errors():
    img = quantized(synth_pristine(9, 40, 40))
    with StubWorker(tools={"id": identity_tool}) as w:
        reply = call_apply(w.endpoint, ApplyRequest(
            task="denoising", tool_id="id", image=image_to_b64(img)))
        out = b64_to_image(reply.image)
        assert np.array_equal(out.planes, img.planes)

    with StubWorker(health_version=2) as w:
        with pytest.raises(ProtocolError, match="unsupported version"):
            health(w.endpoint)

    with StubWorker(metrics={"niqe": const_scorer(3.0)}, delay_s=0.6) as w:
        with pytest.raises(WorkerUnreachable):
            call_score(w.endpoint, ScoreRequest(
                metric="niqe", image=image_to_b64(img)), timeout_ms=150)

    with StubWorker(force_error=("overloaded", "try later")) as w:
        with pytest.raises(WorkerError) as info:
            call_score(w.endpoint, ScoreRequest(
                metric="niqe", image=image_to_b64(img)))
        assert info.value.code == "overloaded"
        assert "try later" in str(info.value)
    verdict("protocol", "roundtrip bit-exact, version gate, timeout, "
                        "error envelope all typed")


# --- 10. end-to-end restoration -------------------------------------------------

def test_pipeline_beats_bicubic_on_synthetic_corpus(tmp_path):
    started = time.perf_counter()
    corpus = tmp_path / "corpus"
    (corpus / "hq").mkdir(parents=True)
    recipes = {}
    for i in range(20):
        name = f"e2e{i:02d}"
        save_image(corpus / "hq" / f"{name}.png", synth_pristine(300 + i, 256, 256))
        recipes[name] = {"seed": i, "ops": [
            {"kind": "downsample", "factor": 4},
            {"kind": "gaussian_noise", "sigma": 0.05},
        ]}
    (corpus / "recipes.json").write_text(json.dumps(recipes))

    report = run_bench(corpus, PRESETS["GenSR-s4-P"], WorkerBindings(),
                       tmp_path / "out", seed=5, figures=False)
    rows = report.rows
    assert len(rows) == 20
    assert all(r.status == "ok" for r in rows)
    mean = sum(r.psnr for r in rows) / len(rows)
    baseline = sum(r.baseline_psnr for r in rows) / len(rows)
    wins = sum(1 for r in rows if r.psnr > r.baseline_psnr)
    elapsed = time.perf_counter() - started
    assert mean >= baseline
    assert wins >= 16
    assert elapsed < 300.0
    verdict("end-to-end", f"mean {mean:.3f} vs bicubic {baseline:.3f}, "
                          f"wins {wins}/20, {elapsed:.1f}s")


# --- 11. large-input tool filter ------------------------------------------------

def test_large_input_drops_slow_tools_small_input_keeps_all():
    assert DEFAULT_FAST4K_THRESHOLD == 1024
    calls = {"slow": 0, "fast": 0}

    def counting(name):
        def fn(img, params, context):
            calls[name] += 1
            return img
        return fn

    with StubWorker(tools={"slow": counting("slow"), "fast": counting("fast")}) as w:
        reg = ToolRegistry()
        reg.register(ToolSpec(id="slow", task=TaskKind.DENOISING,
                              preference=Preference.PERCEPTION, cost=Cost.SLOW,
                              backend=RemoteBackend(w.endpoint)))
        reg.register(ToolSpec(id="fast", task=TaskKind.DENOISING,
                              preference=Preference.PERCEPTION, cost=Cost.FAST,
                              backend=RemoteBackend(w.endpoint)))
        deps = RunDeps(tools=reg, metrics=MetricRegistry(), fast4k=True)
        plan = Plan(steps=(AgendaStep(TaskKind.DENOISING),),
                    provenance="rule-based")

        big = make_state(synth_pristine(3, 2048, 16), plan)
        out = execute_step(big, plan.steps[0], reg, deps)
        assert [c.tool_id for c in out] == ["fast"]
        assert calls == {"slow": 0, "fast": 1}

        small = make_state(synth_pristine(3, 512, 16), plan)
        out = execute_step(small, plan.steps[0], reg, deps)
        assert [c.tool_id for c in out] == ["slow", "fast"]
        assert calls == {"slow": 1, "fast": 2}
    verdict("fast-4k", "2048px ran fast only, 512px ran both")
