import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from se2mitosis.model import ModelConfig  # noqa: E402

FD_EPS = 1e-5
FD_TOL = 1e-4

# small but complete network: every layer type, 77 px receptive field
TINY = ModelConfig(widths=(2, 2, 2, 2, 3), hidden=4)


def numeric_grad(f, arrays, eps=FD_EPS):
    """Central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + eps
            fp = f()
            a[idx] = old - eps
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Max absolute deviation relative to the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """30-image synthetic dataset shared by data/training/CLI tests."""
    from se2mitosis.synthetic import SyntheticConfig, generate_synthetic_dataset

    out = tmp_path_factory.mktemp("synth_small")
    generate_synthetic_dataset(out, SyntheticConfig(n_images=30), seed=3)
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
