import numpy as np
import pytest

from latis.gradcheck import small_config
from latis.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_config():
    """Every block enabled, small enough for exhaustive checks."""
    return small_config()


def thermal_image(rng, height=64, width=64):
    """Synthetic thermal-like scene: warm gradient background, soft blobs and sharp hot objects."""
    y, x = np.mgrid[0:height, 0:width].astype(float)
    img = 0.25 + 0.1 * y / height
    for _ in range(rng.integers(3, 6)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sy, sx = rng.uniform(2, 8, 2)
        img += rng.uniform(0.2, 0.5) * np.exp(-((y - cy) ** 2 / (2 * sy ** 2) + (x - cx) ** 2 / (2 * sx ** 2)))
    for _ in range(rng.integers(4, 8)):
        y0, x0 = rng.integers(0, height - 12), rng.integers(0, width - 12)
        h, w = rng.integers(4, 14, 2)
        img[y0:y0 + h, x0:x0 + w] += rng.uniform(0.1, 0.3)
    return np.clip(img, 0, 1)


@pytest.fixture
def thermal(rng):
    return lambda height=64, width=64: thermal_image(rng, height, width)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome: ``criterion(number, passed, detail)``."""
    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
