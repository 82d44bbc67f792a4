import numpy as np
import pytest

from reg3dad.cloud import PointCloud
from reg3dad.synthetic import ShapeSpec, make_prototype

ACCEPTANCE = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str):
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere():
    return make_prototype(ShapeSpec("sphere", {"radius": 15.0}, 6000, seed=3))


@pytest.fixture(scope="session")
def blob():
    return make_prototype(ShapeSpec("blended-union", n_points=8000, seed=5))


@pytest.fixture
def grid_cloud():
    """Planar 20 x 20 grid at 1 mm pitch with +z normals."""
    xs, ys = np.meshgrid(np.arange(20.0), np.arange(20.0))
    pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(400)])
    return PointCloud(pts, np.tile([0.0, 0.0, 1.0], (400, 1)))


@pytest.fixture(scope="session")
def tiny_suite(tmp_path_factory):
    """One small category generated once for the harness tests."""
    from reg3dad.synthetic import generate_suite

    root = tmp_path_factory.mktemp("suite")
    cfg = {
        "points_per_prototype": 5000,
        "categories": [{"name": "blob", "shape": {"family": "blended-union"},
                        "n_prototypes": 2, "n_normal": 3, "n_abnormal": 3}],
    }
    generate_suite(cfg, root)
    return root
