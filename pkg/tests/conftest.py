import numpy as np
import pytest

from trajmerge.data import PreferenceExample
from trajmerge.policy import EOS, Family, ModelSpec, build_model

FD_STEP = 1e-5
FD_RTOL = 1e-6


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest coordinate error relative to the gradient's largest entry."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def tabular_spec(V=5, max_len=6):
    return ModelSpec(family=Family.TABULAR_BIGRAM, vocab_size=V, max_response_len=max_len)


def neural_spec(V=5, k=2, d=3, h=4, max_len=6):
    return ModelSpec(family=Family.TINY_NEURAL_LM, vocab_size=V, context_window=k, embed_dim=d,
                     hidden_dim=h, max_response_len=max_len)


def random_prompt(rng, V, max_len=3):
    return tuple(int(t) for t in rng.integers(1, V, size=rng.integers(1, max_len + 1)))


def random_response(rng, V, max_len):
    n = int(rng.integers(0, max_len))
    return tuple(int(t) for t in rng.integers(1, V, size=n)) + (EOS,)


def random_pair(rng, V, max_len):
    prompt = random_prompt(rng, V)
    while True:
        a, b = random_response(rng, V, max_len), random_response(rng, V, max_len)
        if a != b:
            return PreferenceExample(prompt=prompt, chosen=a, rejected=b)


def random_model(spec, seed, stddev=0.7):
    return build_model(spec, "seeded_normal", seed, stddev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
