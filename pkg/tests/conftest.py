import numpy as np
import pytest
import torch

from driftrec.data import InteractionLog, temporal_split
from driftrec.model import ModelConfig, RecModel

torch.set_num_threads(1)


def random_log(n_users=30, n_items=20, T=100, seed=0, active_share=0.5, lo=4, hi=9):
    """Random histories; a share of users also interacts after ``T``."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        n_pre = int(rng.integers(lo, hi + 1))
        n_post = int(rng.integers(1, 4)) if rng.random() < active_share else 0
        items = rng.choice(n_items, size=min(n_pre + n_post, n_items), replace=False)
        ts = list(np.sort(rng.integers(1, T + 1, size=n_pre))) + list(np.sort(rng.integers(T + 1, 2 * T, size=n_post)))
        rows.extend((f"u{u:03d}", f"i{i:03d}", int(t)) for i, t in zip(items, ts))
    return InteractionLog.from_records(rows)


def tiny_config(**kw):
    base = dict(n_items=20, n_layers=2, d_model=8, n_heads=2, d_ff=16, lora_rank=2, max_seq_len=10, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def toy_log():
    return random_log()


@pytest.fixture
def toy_split(toy_log):
    return temporal_split(toy_log, 100)


@pytest.fixture
def tiny_model():
    return RecModel(tiny_config())


def randomize_adapters(model, scale=0.3, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if model.is_adapter(n):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


# criterion number -> "criterion N: PASS|FAIL ..." line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
