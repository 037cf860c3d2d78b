import pytest

from rrlab.model import Architecture, init_params


def pytest_addoption(parser):
    parser.addoption(
        "--slow",
        action="store_true",
        default=False,
        help="Run multi-seed training experiments",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow flag")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy_arch():
    return Architecture(input_dim=4, widths=(8, 8), n_classes=3)


@pytest.fixture
def toy_model(toy_arch):
    return init_params(toy_arch, seed=0)
