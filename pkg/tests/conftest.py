import time

import numpy as np
import pytest

from flowstego import bench
from flowstego.cli import reflow_pair, train_pair
from flowstego.nn import save_checkpoint

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """1-RF and 2-RF nets on the default two-class mixture, trained once per session."""
    cfg = bench.resolve_config({"seed": 0})
    t0 = time.perf_counter()
    nets1 = train_pair(cfg)
    nets2 = reflow_pair(cfg, nets1)
    elapsed = time.perf_counter() - t0
    root = tmp_path_factory.mktemp("nets")
    paths = {}
    for tag, nets in (("1rf", nets1), ("2rf", nets2)):
        for name, net in nets.items():
            paths[f"{name}_{tag}"] = str(root / f"{name}_{tag}.ck")
            save_checkpoint(paths[f"{name}_{tag}"], net)
    return {"cfg": cfg, "nets1": nets1, "nets2": nets2, "paths": paths, "train_seconds": elapsed}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
