import copy

import hypothesis
import numpy as np
import pytest
import yaml

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile("ci")


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run end-to-end scenarios"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end scenario")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY = {
    "schema": 1,
    "name": "tiny",
    "seed": 3,
    "dataset": {
        "kind": "blobs",
        "classes": 3,
        "dim": 16,
        "per_class": 40,
        "spread": 0.05,
        "image_shape": [4, 4],
        "test_fraction": 0.25,
        "clean_size": 5,
    },
    "model": {"kind": "mlp", "hidden": [8]},
    "federation": {
        "clients": 6,
        "sampled": 3,
        "mcr": 0.34,
        "rounds": 2,
        "training": {"lr": 0.1, "batch_size": 8, "epochs": 1},
    },
    "attack": {"victim": 0, "target": 1, "dpr": 0.1, "patch": 2},
    "defense": {"name": "fedavg"},
    "analysis": {
        "lambda": 0.5,
        "tau": 0.5,
        "grid": {"lr": [0.05, 0.1], "batch_size": [8], "epochs": [1]},
    },
}


@pytest.fixture
def tiny():
    """A config small enough to run a few rounds in well under a second"""
    return copy.deepcopy(TINY)


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="config.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        return str(path)

    return write
