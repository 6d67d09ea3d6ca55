import json
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"

# filled by test_acceptance, echoed at the end of the session
ACCEPTANCE_LINES = {}


def small_config(**extra):
    """A run that finishes in a few seconds: 4 frames, ~20 objects, 4 small videos."""
    cfg = {
        "seed": 5,
        "guide": {"generator": {"frames": 4, "initial_cells": 24, "growth": 1.1,
                                "shell_radius": 30.0, "shell_thickness": 12.0,
                                "cap_start_deg": 50.0, "cap_end_deg": 70.0,
                                "jitter": 0.5, "min_spacing": 6.0}},
        "population": {"fraction": 0.75},
        "dynamics": {"r_min": 3.0, "r_max": 4.0, "l_min": 2, "l_max": 4},
        "videos": {"generator": {"count": 4, "radius": 4.0, "frames": 6}},
        "acquisition": {"multiview": True, "psf_sigma_xy": 1.0, "psf_sigma_z": 1.5},
    }
    for key, value in extra.items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


@pytest.fixture
def small_config_file(tmp_path):
    def make(**extra):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(small_config(**extra)), encoding="utf-8")
        return path
    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
