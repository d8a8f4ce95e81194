import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pgdflow.meshgen import DESK, swimmer_mesh  # noqa: E402

from helpers import SwimmerStudy  # noqa: E402


@pytest.fixture(scope="session")
def swimmer_mesh_desk():
    return swimmer_mesh(3, DESK)


@pytest.fixture(scope="session")
def radius_study(swimmer_mesh_desk):
    """Radius parameter on [-1, 1] with 10 parametric elements."""
    return SwimmerStudy("radius", (-1.0, 1.0), 10, mesh=swimmer_mesh_desk)


@pytest.fixture(scope="session")
def distance_study(swimmer_mesh_desk):
    """Extended distance range [-3, 2] with 20 parametric elements and equal spheres."""
    return SwimmerStudy("distance", (-3.0, 2.0), 20, mesh=swimmer_mesh_desk)


ACCEPTANCE_KEYS = [f"criterion {n}" for n in range(1, 10)] + ["invariant n_i"]


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in ACCEPTANCE_KEYS:
        checks = ACCEPTANCE.get(key)
        if not checks:
            terminalreporter.write_line(f"{key}: NOT RUN")
            continue
        ok = all(c[1] for c in checks)
        failed = [f"{label} {detail}".strip() for label, good, detail in checks if not good]
        summary = f"{sum(c[1] for c in checks)}/{len(checks)} checks"
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'} ({summary})" +
                                    ("" if ok else "; failed: " + "; ".join(failed)))
