import numpy as np
import pytest

import database as db


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def registry(tmp_path, monkeypatch):
    """Point the run registry at a throwaway SQLite file."""
    monkeypatch.setattr(db, "DB_FILE", tmp_path / "registry.db")
    db.init_db()
    return tmp_path / "registry.db"


def finite_difference(fn, x, h=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        grad[idx] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return grad
