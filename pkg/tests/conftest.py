import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

from imagemt.config import RunConfig

TINY = {
    "data__n_diffusion": 64, "data__n_train": 24, "data__n_dev": 6, "data__n_test": 12,
    "diffusion__T": 8, "diffusion__hidden": 16, "diffusion__ctx_dim": 8, "diffusion__batch_size": 16,
    "diffusion__max_epochs": 3, "diffusion__n_val": 16,
    "ddpo__rl_steps": 3, "ddpo__contexts_per_step": 4, "ddpo__n_holdout": 8,
    "translator__epochs": 2, "translator__batch_size": 8, "translator__d_model": 16, "translator__n_heads": 2,
    "translator__d_ff": 32, "translator__n_visual": 2, "translator__capture_batches": 2,
    "translator__curve_points": 2, "translator__max_decode": 8,
}


def tiny_config(**overrides) -> RunConfig:
    """A seconds-scale config that still exercises every stage."""
    return RunConfig().replace(**{**TINY, **overrides})


@pytest.fixture
def tiny():
    return tiny_config


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
