import numpy as np
import pytest

from cqdet.geometry import CameraModel
from cqdet.pipeline import PipelineConfig
from cqdet.scene import SceneConfig


def identity_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=640, height=480, camera_id=0):
    return CameraModel(fx, fy, cx, cy, np.eye(3), np.zeros(3), width, height, camera_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Narrow decoder so pipeline tests stay quick on one core."""
    return PipelineConfig(n_layers=2, n_global=40, d=32, heads=4, ffn_hidden=64,
                          queue_size=8, temporal_budget=32, feature_channels=16)


@pytest.fixture
def small_scene_cfg():
    return SceneConfig(n_boxes=4, n_cameras=6, n_frames=3, channels=16)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
