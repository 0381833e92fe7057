"""Model-worker lifecycle: loader resolution, binding rules, and the
never-half-serve guarantee."""
import base64
import json
import os
import random
import socket
import subprocess
import sys
from pathlib import Path

import pytest

from adapters.errors import ModelLoadError
from adapters.model import WorkerConfig, serve_model_worker
from adapters.png import Raster, decode_png, encode_png

from conftest import post, post_json

TESTS_DIR = Path(__file__).parent


def toy_image(seed: int, side: int = 8) -> Raster:
    rng = random.Random(seed)
    return Raster(side, side, bytearray(
        rng.randrange(256) for _ in range(side * side * 3)))


def test_config_requires_exactly_one_binding():
    with pytest.raises(ValueError):
        WorkerConfig(model_id="m", loader="toymodels:load_sr")
    with pytest.raises(ValueError):
        WorkerConfig(model_id="m", loader="toymodels:load_sr",
                     task="denoising", metric="musiq")
    with pytest.raises(ValueError):
        WorkerConfig(model_id="m", loader="toymodels:load_sr",
                     task="super-resolution", scales=(3,))


def test_sr_model_serves_and_scales():
    config = WorkerConfig(model_id="sr-nearest", loader="toymodels:load_sr",
                          task="super-resolution", scales=(2, 4))
    src = toy_image(1, side=8)
    with serve_model_worker(config) as server:
        ready = server.readiness()
        assert ready["bindings"]["model_id"] == "sr-nearest"
        assert ready["bindings"]["scales"] == [2, 4]
        doc = {"protocol_version": 1, "task": "super-resolution",
               "tool_id": "sr-nearest", "params": {"scale": 4},
               "image": base64.b64encode(encode_png(src)).decode()}
        status, reply = post_json(f"{server.endpoint}/v1/apply", doc)
    assert status == 200
    out = decode_png(base64.b64decode(reply["image"]))
    assert (out.width, out.height) == (32, 32)
    assert out.pixel(0, 0) == src.pixel(0, 0)
    assert out.pixel(31, 31) == src.pixel(7, 7)
    assert reply["meta"] == {"model_id": "sr-nearest", "device": "cpu"}


def test_metric_model_serves_finite_scores():
    config = WorkerConfig(model_id="luma", loader="toymodels:load_luma",
                          metric="musiq")
    img = toy_image(2)
    expected = sum(img.data) / (len(img.data) * 255.0)
    with serve_model_worker(config) as server:
        doc = {"protocol_version": 1, "metric": "musiq",
               "image": base64.b64encode(encode_png(img)).decode()}
        status, reply = post_json(f"{server.endpoint}/v1/score", doc)
    assert status == 200
    assert reply["score"] == pytest.approx(expected, abs=1e-12)
    assert 0.0 <= reply["score"] <= 1.0


@pytest.mark.parametrize("loader,fragment", [
    ("toymodels:load_broken", "missing on purpose"),
    ("toymodels:no_such_attr", "no attribute"),
    ("nope_not_a_module:load", "cannot import"),
    ("missing-colon", "package.module:attribute"),
])
def test_loader_failures_raise_before_any_port_is_bound(loader, fragment):
    config = WorkerConfig(model_id="m", loader=loader, task="denoising")
    with pytest.raises(ModelLoadError, match=fragment):
        serve_model_worker(config)


def test_failed_load_exits_nonzero_and_never_binds_the_port():
    """The whole point of loading before binding: a worker whose model
    cannot load must never look alive."""
    port_probe = socket.socket()
    port_probe.bind(("127.0.0.1", 0))
    port = port_probe.getsockname()[1]
    port_probe.close()  # freed so the subprocess could bind it if it tried

    env = dict(os.environ)
    env["PYTHONPATH"] = str(TESTS_DIR) + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.run(
        [sys.executable, "-m", "adapters", "serve-model",
         "--model-id", "m", "--loader", "toymodels:load_broken",
         "--task", "denoising", "--port", str(port)],
        capture_output=True, text=True, timeout=30, env=env)
    assert proc.returncode == 1
    assert "missing on purpose" in proc.stderr
    assert proc.stdout == ""  # no readiness line was ever printed
    with pytest.raises(OSError):
        socket.create_connection(("127.0.0.1", port), timeout=0.5)


def test_model_cli_readiness_and_round_trip():
    env = dict(os.environ)
    env["PYTHONPATH"] = str(TESTS_DIR) + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.Popen(
        [sys.executable, "-m", "adapters", "serve-model",
         "--model-id", "sr-nearest", "--loader", "toymodels:load_sr",
         "--task", "super-resolution", "--scales", "2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        ready = json.loads(proc.stdout.readline())
        src = toy_image(3, side=4)
        doc = {"protocol_version": 1, "task": "super-resolution",
               "tool_id": "sr-nearest", "params": {"scale": 2},
               "image": base64.b64encode(encode_png(src)).decode()}
        status, reply = post_json(
            f"http://127.0.0.1:{ready['port']}/v1/apply", doc)
        assert status == 200
        out = decode_png(base64.b64decode(reply["image"]))
        assert (out.width, out.height) == (8, 8)
    finally:
        proc.terminate()
        proc.wait(timeout=10)
