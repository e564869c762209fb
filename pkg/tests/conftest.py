from __future__ import annotations

import time
from pathlib import Path

import pytest

from drivescene.core import SceneLabel, TrafficLight, serialize_label, write_frames, write_labels
from drivescene.mining import simulate_drive

TRUTH = SceneLabel(recommended_speed_kmh=60.0, traffic_light=TrafficLight.GREEN)


def write_drive(root: Path, n: int, seed: int = 0, rate: float = 0.05):
    """Frames + expert labels on disk, plus a server script that answers
    with the (corrupted) VLM stream."""
    frames, vlm, expert, corrupted = simulate_drive(n, TRUTH, rate, seed)
    root.mkdir(parents=True, exist_ok=True)
    write_frames(root / "frames.jsonl", frames)
    write_labels(root / "expert.jsonl", expert)
    script = {f.image_ref: serialize_label(vlm[f.frame_id]) for f in frames}
    return frames, script, corrupted


@pytest.fixture(autouse=True)
def _no_endpoint_env(monkeypatch):
    monkeypatch.delenv("DRIVESCENE_ENDPOINT", raising=False)


# --- acceptance reporting -----------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, log, number, title, limit_s):
        self.log, self.number, self.title, self.limit_s = log, number, title, limit_s

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed < self.limit_s
        detail = f"{elapsed:.2f}s (limit {self.limit_s:g}s)"
        if exc_type is not None:
            detail += f" {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"{'PASS' if ok else 'FAIL'} [{self.number:2d}] {self.title} - {detail}"
        self.log.append((self.number, line))
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} exceeded its runtime limit: {detail}")
        return False


@pytest.fixture
def criterion(request):
    log = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title, limit_s: _Criterion(log, number, title, limit_s)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, [])
    if log:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(log):
            terminalreporter.write_line(line)
