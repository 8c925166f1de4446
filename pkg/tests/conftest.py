import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(int(os.environ.get("MUSESVS_NUM_THREADS", "1")))

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

from musesvs.config import CorpusConfig, ModelConfig  # noqa: E402
from musesvs.training.corpus import generate_synthetic_corpus  # noqa: E402


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig.preset("toy", duration_predictors=("crdp", "note_norm", "syllable"))


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(CorpusConfig(n_samples=8, phonemes_per_sample=(8, 14)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {crit}: {detail}")
