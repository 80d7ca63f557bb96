import numpy as np
import pytest

from pdmpsim.diagnostics import (exact_terminal, fit_loglog_order, forward_pde_oracle_1d, gaussian_truth,
                                 lyapunov_moment_trace, replica_map, stationary_bias_curve, tv_indicator_curve,
                                 wasserstein_proxy_curve, weak_error_sweep)
from pdmpsim.errors import GridTooCoarse, InsufficientSignal
from pdmpsim.models import GaussianPotential, TelegraphModel, ZzsModel, lyapunov_zzs_discrete
from pdmpsim.rng import Streams
from pdmpsim.schemes import SchemeConfig, rate_approx, scheme_step

import oracles
from test_couplings import two_event_probability
from test_oracles import FD_MEANS


def gaussian_zzs(d=1):
    return ZzsModel(GaussianPotential(d)).to_pdmp()


# ------------------------------------------------------------- order fit

def test_fit_exact_first_order():
    ds = np.array([0.2, 0.1, 0.05, 0.025])
    assert fit_loglog_order(ds, 3.0 * ds).slope == pytest.approx(1.0, abs=1e-12)


def test_fit_exact_second_order():
    ds = np.array([0.2, 0.1, 0.05])
    assert fit_loglog_order(ds, 0.7 * ds ** 2).slope == pytest.approx(2.0, abs=1e-12)


def test_fit_noisy_first_order():
    gen = np.random.default_rng(0)
    ds = np.array([0.4, 0.2, 0.1, 0.05, 0.025])
    for _ in range(50):
        err = 2.0 * ds * (1 + 0.05 * gen.standard_normal(ds.size))
        fit = fit_loglog_order(ds, err, 0.05 * 2.0 * ds)
        assert abs(fit.slope - 1.0) < 0.2
        assert fit.ci_low < fit.slope < fit.ci_high


@pytest.mark.parametrize("ds,err,se", [([0.2, 0.1], [0.2, 0.1], None),
                                       ([0.2, 0.15, 0.1], [0.2, 0.15, 0.1], None),
                                       ([0.2, 0.1, 0.05], [0.2, 0.1, 0.05], [0.01, 0.01, 0.03]),
                                       ([0.2, 0.1, 0.05], [0.2, 0.0, 0.05], None)])
def test_fit_insufficient_signal(ds, err, se):
    with pytest.raises(InsufficientSignal):
        fit_loglog_order(ds, err, se)


# ------------------------------------------------------------ PDE oracle

def test_oracle_pure_transport():
    pdmp = ZzsModel(GaussianPotential(1, precision=1e-300)).to_pdmp()
    res = forward_pde_oracle_1d(pdmp, [0.0, 1.0], 1.5, dx=1e-3,
                                g=[lambda x, v: np.ones_like(x), lambda x, v: x, lambda x, v: (x - 1.5) ** 2])
    mass, mean, spread = res.values
    assert mass == pytest.approx(1.0, abs=1e-12)
    assert mean == pytest.approx(1.5, abs=1e-9)
    # upwind diffusion: variance about dx * T * (1 - c) for Courant number c
    assert spread < 2e-3


def test_oracle_telegraph_mean():
    pdmp = TelegraphModel(1.0).to_pdmp()
    res = forward_pde_oracle_1d(pdmp, [0.0, 1.0], 2.0, dx=1e-3)
    assert abs(res.values[0] - oracles.telegraph_mean_ode(2.0, 1.0)) < 1e-3


def test_oracle_self_consistency():
    pdmp = gaussian_zzs()
    g = lambda x, v: x ** 2  # noqa: E731
    a = forward_pde_oracle_1d(pdmp, [0.5, 1.0], 1.0, dx=4e-3, g=g)
    b = forward_pde_oracle_1d(pdmp, [0.5, 1.0], 1.0, dx=2e-3, g=g)
    assert abs(b.values[0] - a.values[0]) < 4 * a.self_convergence[0]


def test_oracle_grid_too_coarse():
    with pytest.raises(GridTooCoarse):
        forward_pde_oracle_1d(gaussian_zzs(), [0.5, 1.0], 1.0, dx=1e-2, g=lambda x, v: x ** 2, tol=1e-8)


def test_oracle_rejects_other_dimensions():
    with pytest.raises(ValueError):
        forward_pde_oracle_1d(gaussian_zzs(2), [0.0, 0.0, 1.0, 1.0], 1.0)


# ---------------------------------------------------------------- curves

def test_wasserstein_zero_approximation_is_small():
    # constant rates make the frozen PD rates exact; only double events separate
    pdmp = TelegraphModel(1.0).to_pdmp()
    delta, T = 0.05, 1.0
    curve = wasserstein_proxy_curve(pdmp, SchemeConfig("PD", delta=delta, T=T), [0.0, 1.0], T, 4000, Streams(0))
    assert curve.mean[0] == 0.0
    # a double event leaves the synchronous clocks with opposite velocities, after
    # which the distance grows at rate 2; bound by every separation happening at 0
    steps = np.arange(len(curve.times))
    bound = steps * two_event_probability(1.0, delta) * (2 * curve.times + 2 * delta)
    assert np.all(curve.mean <= bound + 3 * curve.stderr)
    assert curve.mean[-1] > 0.25 * bound[-1]


def test_wasserstein_decreases_with_delta():
    pdmp = gaussian_zzs()
    finals = []
    for delta in (0.2, 0.1, 0.05):
        curve = wasserstein_proxy_curve(pdmp, SchemeConfig("FD", delta=delta), [0.0, 1.0], 5.0, 4000, Streams(1))
        finals.append(curve.mean[-1])
    assert finals[0] > finals[1] > finals[2]


def test_wasserstein_first_order_in_delta():
    pdmp = gaussian_zzs()
    ds = [0.2, 0.1, 0.05]
    finals, ses = [], []
    for k, delta in enumerate(ds):
        curve = wasserstein_proxy_curve(pdmp, SchemeConfig("FD", delta=delta), [0.0, 1.0], 5.0, 10_000,
                                        Streams(2 + k))
        finals.append(curve.mean[-1])
        ses.append(curve.stderr[-1])
    assert abs(fit_loglog_order(ds, finals, ses).slope - 1.0) < 0.3


def test_tv_curve_exact_rates_counts_double_events():
    # telegraph with exact rates: separation needs two exact events in one step
    pdmp = TelegraphModel(1.0).to_pdmp()
    delta = 0.2
    cfg = SchemeConfig("PD", rate_approx=rate_approx("exact"), delta=delta)
    n = 20_000
    curve = tv_indicator_curve(pdmp, cfg, [0.0, 1.0], 2.0, n, Streams(3))
    k = np.arange(len(curve.times))
    ref = 1 - (1 - two_event_probability(1.0, delta)) ** k
    se = np.sqrt(ref * (1 - ref) / n)
    assert np.all(np.abs(curve.mean - ref) <= 4 * se + 1e-12)
    assert np.all((curve.lower <= curve.mean) & (curve.mean <= curve.upper))


def test_tv_curve_monotone_and_shrinks_with_delta():
    pdmp = gaussian_zzs()
    last = []
    for delta in (0.2, 0.1, 0.05):
        curve = tv_indicator_curve(pdmp, SchemeConfig("PD", delta=delta), [0.0, 1.0], 3.0, 4000, Streams(4))
        assert np.all(np.diff(curve.mean) >= 0)
        last.append(curve.mean[-1])
    assert last[0] > last[1] > last[2]


def test_curves_deterministic():
    pdmp = gaussian_zzs()
    cfg = SchemeConfig("PD", delta=0.1)
    a = tv_indicator_curve(pdmp, cfg, [0.0, 1.0], 1.0, 500, Streams(5))
    b = tv_indicator_curve(pdmp, cfg, [0.0, 1.0], 1.0, 500, Streams(5))
    assert np.array_equal(a.mean, b.mean)


# ----------------------------------------------------------- replicas

def test_replica_map_worker_invariance():
    pdmp = gaussian_zzs()

    def task(n, st):
        return exact_terminal(pdmp, [0.0, 1.0], 1.0, n, st, lambda z: z[:, 0], block=n)

    a = replica_map(task, 1000, Streams(6), block=128, workers=1)
    b = replica_map(task, 1000, Streams(6), block=128, workers=3)
    assert np.array_equal(a, b)


def test_stderr_halves_when_reps_quadruple():
    pdmp = TelegraphModel(1.0).to_pdmp()
    cfg = SchemeConfig("FD", delta=0.1)
    kw = dict(T=2.0, rng=Streams(7), z0=[0.0, 1.0], reference=0.0, deltas=[0.1], fit=False)
    small = weak_error_sweep(pdmp, cfg, lambda z: z[:, 0], reps=5000, **kw)
    large = weak_error_sweep(pdmp, cfg, lambda z: z[:, 0], reps=20_000, **kw)
    assert small.stderrs[0] / large.stderrs[0] == pytest.approx(2.0, rel=0.2)


# ------------------------------------------------------------ moments

def test_moment_trace_of_constant_is_one():
    pdmp = gaussian_zzs(2)
    tr = lyapunov_moment_trace(pdmp, SchemeConfig("FD", delta=0.1), lambda z: np.ones(len(z)),
                               [0.0, 0.0, 1.0, 1.0], 1.0, 50, Streams(8))
    assert np.all(tr.exact_mean == 1.0) and np.all(tr.scheme_mean == 1.0)
    assert tr.sup_exact == 1.0 == tr.sup_scheme


@pytest.mark.parametrize("scheme", ["FD", "PD"])
@pytest.mark.parametrize("x,v", [(6.0, 1.0), (6.0, -1.0), (-8.0, -1.0), (-8.0, 1.0)])
def test_discrete_lyapunov_one_step_drift(scheme, x, v):
    alpha, beta, delta = 0.5, 1.0, 0.1
    kappa = oracles.zzs_step_drift_1d(abs(x), v * np.sign(x), delta, alpha, beta, scheme)
    assert kappa < 1.0
    pdmp = gaussian_zzs()
    n = 100_000
    z = np.tile([x, v], (n, 1))
    nxt, _ = scheme_step(SchemeConfig(scheme, delta=delta), pdmp, z, delta, Streams(9))
    ratio = lyapunov_zzs_discrete(alpha, beta, delta, nxt) / lyapunov_zzs_discrete(alpha, beta, delta, [x, v])
    assert abs(ratio.mean() - kappa) < 4 * ratio.std() / np.sqrt(n) + 1e-12


def test_discrete_lyapunov_domain():
    with pytest.raises(ValueError):
        lyapunov_zzs_discrete(0.5, 0.2, 0.1, [0.0, 1.0])


# --------------------------------------------------------------- bias

def test_gaussian_truth():
    pot = GaussianPotential(25)
    assert gaussian_truth(pot, "radius") == 25.0
    assert gaussian_truth(pot, "mean1") == 0.0
    shifted = GaussianPotential(2, precision=[2.0, 4.0], mean=[1.0, 0.0])
    assert gaussian_truth(shifted, "radius") == pytest.approx(0.5 + 0.25 + 1.0)


def test_exact_radius_error_falls_with_time():
    pdmp = gaussian_zzs(5)
    tr = stationary_bias_curve(pdmp, SchemeConfig("FD", delta=0.5), "radius", 200.0, 40, Streams(10))
    assert tr.truth == 5.0
    n = len(tr.times)
    early, late = tr.exact_error[n // 4 + 2], tr.exact_error[-1]
    assert late < early
    assert late < 0.05 * tr.truth


def test_bias_needs_truth_for_custom_statistic():
    with pytest.raises(ValueError):
        stationary_bias_curve(gaussian_zzs(), SchemeConfig("FD", delta=0.1), lambda z: z[:, 0], 1.0, 5,
                              Streams(0))


# ---------------------------------------------------------- weak error

def test_weak_error_of_constant_is_zero():
    pdmp = TelegraphModel(1.0).to_pdmp()
    res = weak_error_sweep(pdmp, SchemeConfig("FD", delta=0.1), lambda z: np.ones(len(z)), 1.0, 200,
                           Streams(11), [0.0, 1.0], reference=1.0, deltas=[0.2, 0.1, 0.05], fit=False)
    assert np.all(res.errors == 0.0) and res.reference_kind == "analytic"


def test_weak_error_estimates_match_scheme_means():
    pdmp = TelegraphModel(1.0).to_pdmp()
    ds = sorted(FD_MEANS, reverse=True)
    ref = oracles.telegraph_mean_ode(2.0, 1.0)
    res = weak_error_sweep(pdmp, SchemeConfig("FD", delta=0.1), lambda z: z[:, 0], 2.0, 40_000, Streams(12),
                           [0.0, 1.0], reference=ref, deltas=ds, fit=False)
    for est, se, d in zip(res.estimates, res.stderrs, ds):
        assert abs(est - FD_MEANS[d]) < 4 * se


def test_weak_error_pde_reference():
    pdmp = TelegraphModel(1.0).to_pdmp()
    res = weak_error_sweep(pdmp, SchemeConfig("FD", delta=0.1), lambda z: z[:, 0], 2.0, 100, Streams(13),
                           [0.0, 1.0], reference="pde", deltas=[0.2, 0.1, 0.05], fit=False)
    assert res.reference_kind == "pde"
    assert abs(res.reference - oracles.telegraph_mean_ode(2.0, 1.0)) < 1e-3


def test_weak_error_needs_reference():
    with pytest.raises(ValueError):
        weak_error_sweep(TelegraphModel(1.0).to_pdmp(), SchemeConfig("FD", delta=0.1), lambda z: z[:, 0], 1.0,
                         10, 0, [0.0, 1.0], deltas=[0.2, 0.1, 0.05])
