import sys
from pathlib import Path

import pytest

from optbench import optimizers
from optbench.data import DownloadError, load_mnist_like

TESTS = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS))

PLUGIN_FILE = TESTS / "plugins" / "delayed_sgd.py"


@pytest.fixture(scope="session")
def mnist():
    """The MNIST dataset, or a skip when it cannot be obtained."""
    try:
        return load_mnist_like("mnist")
    except DownloadError as exc:  # pragma: no cover - offline machines
        pytest.skip(f"MNIST unavailable: {exc}")


@pytest.fixture
def temporary_optimizer():
    """Register descriptors for the duration of one test."""
    names = []

    def register(desc):
        optimizers.register_plugin(desc)
        names.append(desc.name)
        return desc

    yield register
    for name in names:
        optimizers.unregister(name)


@pytest.fixture
def delayed_sgd():
    import plugins.delayed_sgd as mod  # registers on import
    if "delayed_sgd" not in optimizers.names():
        optimizers.register_plugin(mod.DELAYED_SGD)
    return mod.DELAYED_SGD


# -- acceptance verdicts -------------------------------------------------------------------------

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
