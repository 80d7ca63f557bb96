"""Independent reference computations. None of these import pdmpsim."""

import numpy as np
from scipy import integrate, optimize, stats


def hinge_first_passage(c, a, g, E):
    """Root of ``int_0^t (c + a s)_+ + g ds = E`` by quadrature and Brent's method."""
    kink = -c / a if a > 0 else None

    def cum(t):
        pts = [kink] if kink is not None and 0 < kink < t else None
        return integrate.quad(lambda s: max(c + a * s, 0.0) + g, 0.0, t, points=pts, limit=200)[0] - E

    hi = 1.0
    while cum(hi) < 0:
        hi *= 2.0
    return optimize.brentq(cum, 0.0, hi, xtol=1e-14, rtol=1e-14)


def telegraph_mean_ode(T, lam, x0=0.0, v0=1.0):
    """``E[X_T]`` from the moment ODEs ``m' = w``, ``w' = -2 lam w``."""
    sol = integrate.solve_ivp(lambda t, y: [y[1], -2.0 * lam * y[1]], (0.0, T), [x0, v0],
                              rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1])


def telegraph_fd_mean(delta, T, lam):
    """FD frozen scheme on the telegraph process: one flip at the end of each step."""
    N = int(round(T / delta))
    r = 2.0 * np.exp(-lam * delta) - 1.0
    return delta * (1.0 - r ** N) / (1.0 - r)


def telegraph_pd_mean(delta, T, lam):
    """PD frozen scheme on the telegraph process: at most one mid-step flip."""
    N = int(round(T / delta))
    e = np.exp(-lam * delta)
    drift = delta * e + 2.0 * (1.0 - e * (1.0 + lam * delta)) / lam - delta * (1.0 - e)
    r = 2.0 * e - 1.0
    return drift * (1.0 - r ** N) / (1.0 - r)


def substep_two_event_probability(lam, delta, n=10**7, substeps=1000, seed=0):
    """``P(at least two events in [0, delta])`` by Bernoulli substeps of length ``delta/substeps``."""
    g = np.random.default_rng(seed)
    q = 1.0 - np.exp(-lam * delta / substeps)
    counts = g.binomial(substeps, q, size=n)
    return float(np.mean(counts >= 2))


def harmonic_rotation(q, p, t):
    """Flow of ``q' = p, p' = -q``."""
    return q * np.cos(t) + p * np.sin(t), -q * np.sin(t) + p * np.cos(t)


def leapfrog_energy_drift(s, periods=1.0):
    """Max energy error of kick-drift-kick on ``H = (q^2 + p^2)/2`` over the given periods."""
    q, p = 1.0, 0.0
    n = int(round(2 * np.pi * periods / s))
    worst = 0.0
    for _ in range(n):
        p -= 0.5 * s * q
        q += s * p
        p -= 0.5 * s * q
        worst = max(worst, abs(0.5 * (q * q + p * p) - 0.5))
    return worst


def capped_p1_separation(lam_jump, delta, cap):
    """Separation probability of the p = 1 order-p thinning coupling on a
    constant-rate process where exact and approximate rates coincide.

    Proposals arrive at rate ``2 lam + 1``; each is a joint accept with
    probability ``lam / (2 lam + 1)`` and a joint reject otherwise. The pair
    separates when ``cap`` proposals are all rejects, or when the exact side
    fires again after the joint accept.
    """
    rate = 2 * lam_jump + 1
    acc = lam_jump / rate
    p_cap = stats.poisson.sf(cap - 1, rate * delta) * (1 - acc) ** cap
    total = p_cap
    for k in range(1, cap + 1):
        dens = stats.gamma(k, scale=1 / rate).pdf
        inner = integrate.quad(lambda s: dens(s) * (1 - np.exp(-lam_jump * (delta - s))), 0.0, delta)[0]
        total += (1 - acc) ** (k - 1) * acc * inner
    return total


def zzs_step_drift_1d(x, v, delta, alpha, beta, scheme):
    """``E[G(next)] / G(x, v)`` for one frozen-rate step of the 1-d ZZS with
    ``psi = x^2 / 2`` and ``G = exp(alpha psi + beta delta v psi')``.

    FD flips at the step end; PD flips at the event time ``s`` and moves
    back for the rest of the step.
    """
    def G(y, w):
        return np.exp(alpha * y * y / 2 + beta * delta * w * y)

    lam = max(x * v, 0.0)
    stay = np.exp(-lam * delta) * G(x + v * delta, v)
    if scheme == "FD":
        flip = (1 - np.exp(-lam * delta)) * G(x + v * delta, -v)
    else:
        flip = integrate.quad(lambda s: lam * np.exp(-lam * s) * G(x + v * (2 * s - delta), -v), 0.0, delta)[0]
    return (stay + flip) / G(x, v)
