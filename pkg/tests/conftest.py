import numpy as np
import pytest


def rand_herm(n, rng):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (A + A.conj().T)


def rand_psi(n, rng):
    z = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return z / np.linalg.norm(z)


def half_expect(A, z):
    """Complex-arithmetic oracle for f_A(psi) = 1/2 <psi|A psi>."""
    return 0.5 * np.vdot(z, A @ z).real


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
