"""Shared test fixtures that need pdmpsim."""

import numpy as np

from pdmpsim.models import GaussianPotential


class FixedUniform:
    """Generator stand-in whose ``random`` always returns the same value."""

    def __init__(self, u=0.5):
        self.u = u

    def random(self, size=None):
        if size is None:
            return self.u
        return np.full(size, self.u)


class EqualTerms(GaussianPotential):
    """``N`` identical per-datum terms, each a standard Gaussian potential."""

    def __init__(self, N, d):
        super().__init__(d)
        self.N = N
        self.term_lipschitz = np.ones(N)

    def term_grad(self, x, j):
        return np.atleast_2d(x).copy()

    def all_term_grads(self, x):
        x = np.atleast_2d(x)
        return np.repeat(x[:, None, :], self.N, axis=1)


ACCEPTANCE = []


def record(criterion, ok, detail):
    """Keep a PASS/FAIL line for the terminal summary and return ``ok``."""
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
    return ok
