import numpy as np
import pytest

from mamba_va.data import generate_synthetic_dataset, load_dataset
from mamba_va.layers import MambaConfig, MambaVA, TcnConfig


def tiny_configs(in_dim=4, hidden=8, state=2, tcn_layers=2, mamba_layers=2, kernel=3, dropout=0.0):
    tcn = TcnConfig(in_dim=in_dim, hidden_dim=hidden, layers=tcn_layers, kernel_size=kernel,
                    dilations=tuple(2**i for i in range(tcn_layers)), dropout=dropout)
    return tcn, MambaConfig(d_model=hidden, n_layers=mamba_layers, state_dim=state)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    tcn, mamba = tiny_configs()
    return MambaVA.create(tcn, mamba, rng)


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    """Six short videos with 8-dim features; cheap enough for CLI and training tests."""
    root = tmp_path_factory.mktemp("syn_small")
    generate_synthetic_dataset(root, seed=3, n_videos=6, frames_range=(90, 130), dim=8)
    return root


@pytest.fixture(scope="session")
def small_videos(small_synthetic):
    return load_dataset(small_synthetic / "features", small_synthetic / "annotations")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
