import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rxnflow.workbench.synth import SPECIALS, random_scaffold

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_graphs(count, seed=0, lo=6, hi=14):
    """Valence-valid scaffolds from the synthetic generator."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        k = int(rng.integers(1, 4))
        specials = list(rng.choice(SPECIALS, k, replace=False))
        try:
            out.append(random_scaffold(rng, int(rng.integers(max(lo, k + 2), hi + 1)), specials))
        except ValueError:
            continue
    return out


@pytest.fixture(scope="session")
def graphs():
    return random_graphs(100, seed=1)


# acceptance results, filled by test_acceptance.py and printed once at the end
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
