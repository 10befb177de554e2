import numpy as np
import pytest

from toyunlearn.datagen import Benchmark, DataConfig, Vocabulary
from toyunlearn.model import ToyMLLMConfig, init_model

SMALL_DATA = DataConfig(seed=1)


def tiny_config(**overrides) -> ToyMLLMConfig:
    base = dict(
        d_vision=8,
        vision_layers=1,
        vision_heads=2,
        d_model=16,
        n_layers=1,
        n_heads=2,
        mlp_ratio=2,
        vocab_size=Vocabulary(SMALL_DATA).size,
    )
    base.update(overrides)
    return ToyMLLMConfig(**base)


@pytest.fixture(scope="session")
def bench() -> Benchmark:
    return Benchmark.build(SMALL_DATA)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small enough to fine-tune in a few seconds yet still clear the learnability gate.
SMALL_RUN = """\
# toy pipeline config used by the pipeline and CLI tests
model.d_vision = 16
model.vision_layers = 1
model.d_model = 32
model.n_layers = 1
model.n_heads = 2
data.n_concepts = 6
data.forget_ratio = 0.2
data.n_general_vqa = 8
data.n_general_qa = 6
vanilla.epochs = 60
vanilla.lr = 0.005
unlearn.epochs = 2
"""


@pytest.fixture(scope="session")
def small_cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.cfg"
    p.write_text(SMALL_RUN)
    return p


@pytest.fixture(scope="session")
def small_run(tmp_path_factory, small_cfg_path):
    """A finished finetune -> saliency -> unlearn -> eval run on the small config."""
    from toyunlearn import pipeline
    from toyunlearn.config import load_config

    out = tmp_path_factory.mktemp("run")
    cfg = load_config(small_cfg_path)
    pipeline.run_all(cfg, out)
    return cfg, out


# ------------------------------------------------------------------ acceptance
# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
