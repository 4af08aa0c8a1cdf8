import numpy as np
import pytest

from splatlab.geometry import simple_camera
from splatlab.splat import GaussianCloud


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_cloud(rng, n, camera, depth=(2.0, 6.0), alpha=(0.2, 0.95), scale=(0.05, 0.3), margin=0.0):
    """Gaussians whose centers project inside ``camera`` (expanded by ``margin`` pixels)."""
    k = camera.intrinsics
    z = rng.uniform(*depth, n)
    u = rng.uniform(-margin, camera.width + margin, n)
    v = rng.uniform(-margin, camera.height + margin, n)
    pc = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
    mu = camera.pose.inverse().apply(pc)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(mu, rng.uniform(*alpha, n), rng.uniform(*scale, (n, 3)), q, rng.uniform(0, 1, (n, 3)))


@pytest.fixture
def cam16():
    return simple_camera(16, 16, focal=16.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
