import numpy as np
import pytest

from advner import autodiff as ad
from advner.model import ModelConfig, init_params


def small_config(**overrides):
    cfg = dict(vocab_size=40, n_tags=5, d_model=16, n_heads=4, n_layers=2, d_ff=32, max_len=64, dropout=0.0)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def random_batch(rng, b=3, length=6, vocab_size=40, n_tags=5, short_row=True):
    tokens = rng.integers(2, vocab_size, (b, length))
    mask = np.ones((b, length), dtype=np.int64)
    if short_row:
        mask[1, length // 2:] = 0
        tokens[1, length // 2:] = 0
    tags = rng.integers(0, n_tags, (b, length)) * mask
    return tokens, mask, tags


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def tiny_params(f64):
    return init_params(small_config(), seed=0)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
