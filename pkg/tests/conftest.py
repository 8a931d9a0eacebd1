import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def naive_stats(x, members):
    """Mean and biased variance over the (n, c, i, j) indices selected by
    ``members(n, c, i, j) -> key``, by explicit loops."""
    groups = {}
    N, C, H, W = x.shape
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    groups.setdefault(members(n, c, i, j), []).append(x[n, c, i, j])
    out = {}
    for k, vals in groups.items():
        m = sum(vals) / len(vals)
        out[k] = (m, sum((v - m) ** 2 for v in vals) / len(vals))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
