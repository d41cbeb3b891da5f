import numpy as np
import pytest
import torch

from skilladapt.data import WindowBatch
from skilladapt.models import ModelConfig, ModelSet

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    """A model family small enough for finite-difference checks (under 200 parameters)."""
    base = dict(obs_dim=2, act_dim=1, H=2, z_dim=1, d_dim=1, encoder_hidden=3, prior_hidden=3,
                adapter_hidden=3, layers=1, time_dim=2, K=10)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, n: int, seed: int, domain=None) -> WindowBatch:
    rng = np.random.default_rng(seed)
    dom = np.zeros(n, dtype=np.int64) if domain is None else np.asarray(domain)
    return WindowBatch(rng.normal(size=(n, cfg.H + 1, cfg.obs_dim)), rng.normal(size=(n, cfg.H, cfg.act_dim)),
                       dom, np.zeros(n, dtype=np.int64), np.arange(n), np.zeros(n, dtype=np.int64))


@pytest.fixture
def tiny_models():
    torch.manual_seed(0)
    return ModelSet(tiny_config()).double()


ACCEPTANCE_LINES: list = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
