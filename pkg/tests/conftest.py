import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from actrec3d.data import SynthConfig, synth_generate  # noqa: E402
from actrec3d.train_eval import TrainConfig, train  # noqa: E402
from actrec3d.optim import OptimConfig  # noqa: E402
from actrec3d.vision import PreprocessConfig  # noqa: E402

# 8 frames at 8 fps over 12x12: every clip is exactly one second long
TINY_SYNTH = SynthConfig(clips_per_class=4, T=8, H=12, W=12, fps=8.0, seed=1)
TINY_PRE = PreprocessConfig(S=1.0, N=8, size=(8, 8), bg_sub=True)

# the full-size synthetic set used by the acceptance runs
SYNTH = SynthConfig()
SYNTH_PRE = PreprocessConfig(S=2.0, N=16, size=(24, 24), bg_sub=True)


def tiny_train_config(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    kw.setdefault("preprocess", TINY_PRE)
    kw.setdefault("optim", OptimConfig(lr0=3e-3, decay=0.0))
    return TrainConfig(**kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return synth_generate(TINY_SYNTH, root)


@pytest.fixture(scope="session")
def tiny_trained(tiny_dataset):
    return train(tiny_dataset, tiny_train_config(epochs=3))


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return synth_generate(SYNTH, root)


@pytest.fixture(scope="session")
def synth_trained(synth_dataset):
    """Model 3 with background subtraction on the full synthetic set."""
    return train(synth_dataset, TrainConfig(model_id=3, epochs=12, preprocess=SYNTH_PRE))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
