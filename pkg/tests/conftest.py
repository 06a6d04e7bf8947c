import numpy as np
import pytest

from virtualfl.data import write_idx

# (criterion number, passed, message) appended by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The 5000-image MNIST subset shipped with mlxtend, written as IDX files."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    x, y = mlxtend_data.mnist_data()
    out = tmp_path_factory.mktemp("mnist5k")
    write_idx(out / "mnist5k-images-idx3-ubyte", x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(out / "mnist5k-labels-idx1-ubyte", y.astype(np.uint8))
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, msg in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {msg}")
