import numpy as np
import pytest
from hypothesis import settings

from duet import model as M

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Req:
    """Minimal stand-in for sim.Request in model-level tests."""

    def __init__(self, user_id, behavior, candidates, request_id=0):
        self.user_id = user_id
        self.behavior = list(behavior)
        self.candidates = list(candidates)
        self.request_id = request_id


def tiny_config(**kw):
    base = dict(n_items=9, n_users=4, embed_dim=4, user_dim=2, cross_dim=2, mlp_hidden=(5, 3), seed=3)
    base.update(kw)
    return M.ModelConfig(**base)


def spread_params(params, scale=40.0):
    """Embeddings at init are ~1e-2, which makes attention nearly uniform; widen them for tests."""
    return params.with_flat(np.concatenate([
        (a * scale if name.endswith("_table") else a).ravel() for name, a in params.items()]))


def tiny_requests(rng, n_req=2, m=4, n_max=4, cfg=None):
    cfg = cfg or tiny_config()
    out = []
    for r in range(n_req):
        hist = rng.integers(1, cfg.n_items, size=rng.integers(0, n_max + 1))
        cands = rng.integers(1, cfg.n_items, size=m)
        out.append(Req(int(rng.integers(1, cfg.n_users)), hist, cands, r))
    return out


# -- acceptance summary ---------------------------------------------------------

def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def accept(request):
    """``accept(number, ok, text)`` records one acceptance line and asserts ``ok``."""
    lines = request.config._acceptance_lines

    def record(number, ok, text):
        lines.append(f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {text}")
        assert ok, text

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
