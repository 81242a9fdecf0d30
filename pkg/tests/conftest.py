import numpy as np
import pytest

from cobras import deps
from cobras.fom import lti_system, simulate, toy_model


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture(scope="session")
def toy():
    return toy_model().discretize()


@pytest.fixture(scope="session")
def toy_ode():
    return toy_model()


def _stable_matrix(rng, n, radius=0.8):
    A = rng.standard_normal((n, n))
    return A * (radius / np.max(np.abs(np.linalg.eigvals(A))))


@pytest.fixture
def stable_matrix():
    """Random matrix with spectral radius `radius`."""
    return _stable_matrix


@pytest.fixture
def small_lti(rng):
    """3-state, 1-input, 2-output stable LTI system with its matrices."""
    A = _stable_matrix(rng, 3)
    B = rng.standard_normal((3, 1))
    C = rng.standard_normal((2, 3))
    return lti_system(A, B, C, name="small-lti"), A, B, C


@pytest.fixture
def toy_impulses(toy):
    """The two training impulse responses of the toy study, 16 states each."""
    return [simulate(toy, np.full(3, u0), np.zeros((1, 15)), label=f"impulse-{u0:g}") for u0 in (0.5, 1.0)]


@pytest.fixture
def ledger(tmp_path):
    """Run ledger in a temporary SQLite file."""
    previous = deps.DATABASE_URL
    deps.configure(f"sqlite:///{tmp_path / 'runs.db'}")
    deps.init_db()
    yield
    deps.engine.dispose()
    deps.configure(previous)


@pytest.fixture
def output_env(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("COBRAS_OUTPUT_DIR", str(out))
    return out
