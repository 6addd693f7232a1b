import numpy as np
import pytest

from sid.datasets import ManifestRecord, make_manifest
from sid.imageops import encode_png


def write_images(root, label, n, size=(224, 224), seed=0, prefix=None):
    """Random PNGs under ``root/label``; returns their manifest records."""
    rng = np.random.default_rng(seed)
    d = root / label
    d.mkdir(parents=True, exist_ok=True)
    recs = []
    for i in range(n):
        h, w = size
        p = d / f"{prefix or label}_{i:03d}.png"
        p.write_bytes(encode_png(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)))
        recs.append(ManifestRecord(p.as_posix(), label))
    return recs


@pytest.fixture
def image_set(tmp_path):
    """Four authentic and six synthetic images split across two generators."""
    recs = (write_images(tmp_path, "authentic", 4, seed=1)
            + write_images(tmp_path, "sdxl", 3, seed=2)
            + write_images(tmp_path, "mj56", 3, seed=3))
    return make_manifest(recs, ("authentic", "sdxl", "mj56"))


# --------------------------------------------------------------------------
# acceptance criteria reporting: one PASS/FAIL line per ``criterion`` marker

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    line = f"{'PASS' if rep.passed else 'FAIL'}  criterion {number:>2}: {title}"
    if details:
        line += "  [" + "; ".join(details) + "]"
    item.config.stash[_CRITERIA][number] = line


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
