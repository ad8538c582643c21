import os
import sys
from pathlib import Path

import numpy as np
import pytest

from tat.data import SyntheticConfig
from tat.experiments import ABLATION_CELLS, BASELINE_CELL, run_cells
from tat.train import TrainConfig

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark():
    """The 12-run synthetic benchmark: TAT, w/o GD, w/o LD, source-only x 3 seeds.

    Runs are cached as JSON under ``benchmarks/results/cache`` (override with
    ``TAT_BENCH_CACHE``); ``TAT_BENCH_JOBS`` sets the worker count for missing runs.
    """
    cache = Path(os.environ.get("TAT_BENCH_CACHE", ROOT / "benchmarks" / "results" / "cache"))
    jobs = int(os.environ.get("TAT_BENCH_JOBS", os.cpu_count() or 1))
    base = TrainConfig(dtype="float32")
    return run_cells(list(ABLATION_CELLS) + [BASELINE_CELL], SyntheticConfig(), base, (0, 1, 2), cache, jobs)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
