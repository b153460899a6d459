import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from geoproto.config import RunConfig  # noqa: E402
from geoproto.grid import GridSpec, SynthPattern, extract_samples, synth_generate  # noqa: E402
from geoproto.pipeline import Run, run_pipeline  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_ds():
    """9x9 grid, 4 intervals, one feature of each kind."""
    spec = GridSpec(m=9, n=9, T=4, f_t=1, f_s=1, f_st=1)
    return synth_generate(1, spec, SynthPattern(hotspot_prob=0.1))


@pytest.fixture(scope="session")
def corpus162(tiny_ds):
    return extract_samples(tiny_ds, d=9, t_in=2)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default config run end to end once per session."""
    work = tmp_path_factory.mktemp("default_run")
    cfg = RunConfig().validate()
    start = time.perf_counter()
    manifest = run_pipeline(cfg, work)
    manifest["elapsed_s"] = time.perf_counter() - start
    run = Run(cfg, work)
    run.stage_train()
    return run, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
