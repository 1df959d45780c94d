from __future__ import annotations

import time

import numpy as np
import pytest

from mcqa.data import Sample, SynthConfig, collate, generate_synthetic, load_manifest, load_split
from mcqa.network import ModelConfig, tiny_config
from mcqa.train import gradcheck

# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# widths of the default synthetic task, with small hidden sizes
SMALL = ModelConfig(d_text=8, d_audio=4, d_video=8, h_text=4, h_audio=2, h_video=4, h_query=2,
                    h_fusion=3, h_final=3, d_att=3, d_ffn=4, L=8)


@pytest.fixture(scope="session")
def small_config() -> ModelConfig:
    return SMALL


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(seed=3, n_train=64, n_val=16, n_test=32)
    path, truths = generate_synthetic(cfg, out)
    return path, truths


@pytest.fixture(scope="session")
def synth_batches(synth_dir):
    path, _ = synth_dir
    man = load_manifest(path)
    train = collate(load_split(man, "train", SMALL), SMALL.L)
    val = collate(load_split(man, "val", SMALL), SMALL.L)
    return train, val


@pytest.fixture(scope="session")
def timed_tiny_gradcheck():
    """The default whole-model gradient check and its wall time (shared: it takes ~30 s)."""
    start = time.perf_counter()
    report = gradcheck(tiny_config(), seed=0)
    return report, time.perf_counter() - start


@pytest.fixture(scope="session")
def tiny_gradcheck(timed_tiny_gradcheck):
    return timed_tiny_gradcheck[0]


def make_sample(config: ModelConfig, rng, lengths=None, n_candidates=2, sid="s0", correct=0) -> Sample:
    lengths = lengths or {}

    def seq(name, width):
        return rng.uniform(-1, 1, size=(lengths.get(name, config.L), width))

    return Sample(sid, seq("text", config.d_text), seq("audio", config.d_audio), seq("video", config.d_video),
                  seq("question", config.d_query),
                  [seq("answer", config.d_query) for _ in range(n_candidates)],
                  [int(k == correct) for k in range(n_candidates)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
