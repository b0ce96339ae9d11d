import numpy as np
import pytest
import torch

from rvmde.data import SynthConfig, synth_generate
from rvmde.discretization import SidBins


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Eight noiseless synthetic samples at 64x128."""
    out = tmp_path_factory.mktemp("synth")
    synth_generate(SynthConfig(seed=7), out, 8)
    return out


@pytest.fixture(scope="session")
def small_bins():
    return SidBins(2.0, 40.0, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def tiny_items(synth_dir, small_bins):
    from rvmde.data import PreprocessConfig, load_manifest, load_sample, preprocess

    cfg = PreprocessConfig(bins=small_bins, radar_mode="height")
    return [preprocess(load_sample(p), cfg).train_item() for p, _ in load_manifest(synth_dir).entries]


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""

    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
