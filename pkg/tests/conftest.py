"""Shared synthetic fixtures.

The expensive runs (rendering the 60-frame fixtures and searching them)
happen once per session and are reused by the module tests and the
acceptance suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import pytest

from pano_forge import synth
from pano_forge.correspondence_search import SearchConfig, search_frames
from pano_forge.pose_estimation import OracleDepthEstimator, OracleEstimator
from pano_forge.projection import PanoFrame, to_uint8

VIDEO = "synth"
PLANTED_SCALE = 2.0
PANO_W, PANO_H = 256, 128
VIEW = 32

_ACCEPTANCE: dict = {}


@dataclass
class Fixture:
    scene: synth.SceneSpec
    cams: list
    panos: list
    planted_scale: float
    extra: dict = field(default_factory=dict)

    @property
    def camera_map(self):
        return {(VIDEO, p.timestamp_ms): c for p, c in zip(self.panos, self.cams)}

    def estimator(self, **kw):
        return OracleEstimator(self.scene, self.camera_map, planted_scale=self.planted_scale, **kw)

    def depth_estimator(self, **kw):
        return OracleDepthEstimator(self.scene, self.camera_map, **kw)


def render_fixture(scene, cams, planted_scale=PLANTED_SCALE, w=PANO_W, h=PANO_H):
    panos = [PanoFrame(VIDEO, 1000 * k, to_uint8(synth.render_equirect(scene, c, w, h)[0]))
             for k, c in enumerate(cams)]
    return Fixture(scene, cams, panos, planted_scale)


def search_config(**kw):
    return SearchConfig(view_h=VIEW, view_w=VIEW, **kw)


@pytest.fixture(scope="session")
def line_fixture():
    scene = synth.corridor_scene()
    return render_fixture(scene, synth.make_trajectory(scene, 60, "line", 1.0))


@pytest.fixture(scope="session")
def line_search(line_fixture):
    """Window search over the 60-frame line fixture, with wall time."""
    t0 = time.perf_counter()
    tasks, results = search_frames(line_fixture.panos, line_fixture.estimator(), search_config())
    return tasks, results, time.perf_counter() - t0


@pytest.fixture(scope="session")
def loop_fixture():
    scene = synth.hall_scene()
    return render_fixture(scene, synth.make_trajectory(scene, 60, "loop", 0.5))


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(number, passed, detail)`` records a criterion outcome."""

    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

