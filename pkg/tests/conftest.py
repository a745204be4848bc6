import numpy as np
import pytest
from scipy import ndimage


def smooth_texture(shape, seed=0, wrap=True):
    """Periodic smooth random texture in [25, 225], uint8."""
    rng = np.random.default_rng(seed)
    mode = "wrap" if wrap else "reflect"
    img = ndimage.gaussian_filter(rng.normal(size=shape), 3, mode=mode)
    img = img + 2 * ndimage.gaussian_filter(rng.normal(size=shape), 6, mode=mode)
    img = (img - img.min()) / (img.max() - img.min()) * 200 + 25
    return np.floor(img + 0.5).astype(np.uint8)


@pytest.fixture
def texture():
    return smooth_texture((96, 128), seed=1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(ACCEPTANCE[key])
