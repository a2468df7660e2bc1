import sys

import numpy as np
import pytest

from volcast import synth
from volcast.data import Dataset, contiguous_splits


def tiny_dataset(T=60, seed=0, n_cells=5, dims=(12, 12, 4)) -> Dataset:
    """A few-cell synthetic movie held in memory."""
    cfg = synth.SynthConfig(dims=(*dims, T), n_cells=n_cells, radius=(1.2, 1.8), z_radius=(1.0, 1.0),
                            coupling_range=(2.0, 10.0), coupling_density=0.5, burn_in=20, seed=seed)
    mask = synth.gen_mask(cfg)
    movie = synth.render_movie(mask, synth.gen_traces(cfg), cfg)
    return Dataset(movie, mask, contiguous_splits(T))


@pytest.fixture
def tiny():
    return tiny_dataset()


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
