"""Shared fixtures and oracle helpers for the suite."""

import numpy as np
import pytest

import gexplab as gx


@pytest.fixture(scope="session")
def uset():
    return gx.UncertaintySet(0.5, 1.0)


@pytest.fixture(scope="session")
def g_fun(uset):
    return gx.GFunction(uset)


def smooth_bounded_payoff(rng, n_modes=3, max_freq=1.5):
    """Random trigonometric polynomial: smooth, bounded, modest Lipschitz."""
    a = rng.uniform(-1.0, 1.0, n_modes)
    w = rng.uniform(0.3, max_freq, n_modes)
    th = rng.uniform(0.0, 2.0 * np.pi, n_modes)

    def phi(x):
        x = np.asarray(x, dtype=float)
        return sum(ai * np.cos(wi * x + ti) for ai, wi, ti in zip(a, w, th))

    return phi


def classical_chain_expectation(lattice, terminal, gamma, steps):
    """Single-kernel linear backward recursion (classical Markov chain).

    Independent oracle for the degenerate lattice: plain conditional
    expectation with the one trinomial kernel of variance level ``gamma``,
    zero-curvature ghost nodes at the edges.
    """
    p_half = gamma * lattice.grid.dt / (2.0 * lattice.grid.dx**2)
    v = np.asarray(terminal, dtype=float).copy()
    for _ in range(steps):
        up = np.concatenate([v[1:], [2.0 * v[-1] - v[-2]]])
        dn = np.concatenate([[2.0 * v[0] - v[1]], v[:-1]])
        v = p_half * (up + dn) + (1.0 - 2.0 * p_half) * v
    return v
