import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynbackdoor import datasets, graph, models

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded for all-zero gradients."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


@pytest.fixture(scope="session")
def community_seq():
    return graph.build_snapshots(datasets.community_toy(20, 60, seed=0), 60)


@pytest.fixture(scope="session")
def community_split(community_seq):
    return graph.split_train_test(graph.make_samples(community_seq, 10), 0.8)


@pytest.fixture(scope="session")
def trained_dynae(community_split):
    train, test = community_split
    spec = models.ArchSpec.default("dynae", 20, hidden=32)
    m = models.build_model(spec, 20, 10, seed=1)
    models.train_clean(m, train, 100, seed=0, batch_size=8)
    return m


@pytest.fixture
def small_samples():
    rng = np.random.default_rng(3)
    A = (rng.random((14, 8, 8)) < 0.3).astype(np.uint8)
    for k in range(len(A)):
        np.fill_diagonal(A[k], 0)
    seq = graph.SnapshotSequence(8, A, 1.0)
    return graph.make_samples(seq, 4)


# -------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (k.startswith("S"), int(k.lstrip("CS")))):
            terminalreporter.write_line(ACCEPTANCE[key])
