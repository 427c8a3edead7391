import numpy as np
import pytest

from hyperyield.nn.network import ModelConfig
from hyperyield.raster import FieldRaster


def numeric_grad(f, arr, step=1e-4, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place, then restored)."""
    grad = np.zeros_like(arr)
    indices = index if index is not None else list(np.ndindex(arr.shape))
    for i in indices:
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def rel_error(a, b):
    """Norm-based relative error between two gradient arrays."""
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def small_config():
    def make(out_size=5, channels=3, dropout_rate=0.5):
        return ModelConfig(
            channels=channels,
            out_size=out_size,
            dropout_rate=dropout_rate,
            conv3d_filters=3,
            sep_filters=(6, 5, 4, 4, 3),
        )

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_raster(values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.shape[:2], dtype=bool)
    return FieldRaster(values, mask)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
