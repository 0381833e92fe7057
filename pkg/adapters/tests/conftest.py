import json
import urllib.error
import urllib.request
from pathlib import Path

import pytest

# The wire-format fixtures are owned by the engine repo and shared with
# every worker implementation as plain files.
GOLDEN = Path(__file__).parents[2] / "tests" / "golden"


def post(url: str, body: bytes, timeout: float = 10.0):
    """POST raw bytes, return (status, body bytes) even for error
    statuses."""
    req = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"},
        method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as reply:
            return reply.status, reply.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def post_json(url: str, doc: dict, timeout: float = 10.0):
    status, body = post(url, json.dumps(doc).encode("utf-8"), timeout)
    return status, json.loads(body.decode("utf-8"))


@pytest.fixture
def golden():
    assert GOLDEN.is_dir(), f"shared fixtures not found at {GOLDEN}"
    return GOLDEN
