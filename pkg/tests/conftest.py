import numpy as np
import pytest

from splat_oed.dataset import make_rig
from splat_oed.scene import Scene, look_at, n_sh_coeffs


def random_scene(seed: int, n: int = 5, sh_degree: int = 0, spread: float = 0.5,
                 scale=(0.08, 0.25)) -> Scene:
    """Seeded scene of ``n`` Gaussians near the origin, all comfortably visible."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    log_s = np.log(rng.uniform(*scale, (n, 3)))
    op = rng.uniform(-1.0, 2.0, n)
    sh = rng.normal(scale=0.6, size=(n, n_sh_coeffs(sh_degree), 3))
    return Scene(pos, q, log_s, op, sh, sh_degree)


def front_camera(width: int = 16, height: int = 16, view_id: str = "cam",
                 eye=(0.3, -3.0, 1.2)):
    return look_at(view_id, eye, (0.0, 0.0, 0.0), width, height, 50.0)


@pytest.fixture
def scene5():
    return random_scene(0, 5)


@pytest.fixture
def cam16():
    return front_camera()


@pytest.fixture
def rig8():
    return make_rig("hemisphere", 8, radius=3.5, seed=3, width=16, height=16)


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion_report():
    """Record one PASS/FAIL line per acceptance criterion for the run summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
