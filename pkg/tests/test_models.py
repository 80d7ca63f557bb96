import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from pdmpsim.core import advance_exact
from pdmpsim.errors import NoExactFlow, ZeroGradient
from pdmpsim.models import (BpsModel, CellSizeModel, GaussianPotential, LogisticRegressionPotential,
                            MorrisLecarModel, RhmcModel, ZzsModel, ZzsSubsamplingModel, bps_reflect,
                            custom_psi_exponent, linear_hinge_integral, linear_hinge_inverse, lyapunov_bps,
                            lyapunov_zzs, model_to_pdmp, subsampling_step, synthetic_logistic_data, zzs_flip,
                            zzs_rate)
from pdmpsim.rng import Streams

import oracles
from helpers import EqualTerms

ML_PARAMS = dict(C=20.0, g_leak=2.0, g_ca=4.4, g_k=8.0, V_leak=-60.0, V_ca=120.0, V_k=-84.0,
                 V1=-1.2, V2=18.0, V3=2.0, V4=30.0, lambda_k=0.04, N_k=10)

vec = arrays(float, 3, elements=st.floats(-10, 10))
signs = arrays(float, 3, elements=st.sampled_from([-1.0, 1.0]))


# ------------------------------------------------------------- potentials

def test_gaussian_gradient_matches_finite_differences():
    pot = GaussianPotential(3, precision=[1.0, 2.0, 0.5], mean=[0.1, -1.0, 2.0])
    x = np.array([0.3, 0.7, -1.2])
    h = 1e-6
    fd = [(pot.psi(x + h * e) - pot.psi(x - h * e)) / (2 * h) for e in np.eye(3)]
    assert np.allclose(pot.grad(x), fd, rtol=1e-6)


def test_logistic_gradient_and_terms():
    X, y, _ = synthetic_logistic_data(20, 2, seed=1)
    pot = LogisticRegressionPotential(X, y)
    x = np.array([0.4, -0.3])
    h = 1e-6
    fd = [(pot.psi(x + h * e) - pot.psi(x - h * e)) / (2 * h) for e in np.eye(2)]
    assert np.allclose(pot.grad(x), fd, rtol=1e-6)
    j = np.arange(pot.N)
    xs = np.tile(x, (pot.N, 1))
    assert np.mean(pot.term_psi(xs, j)) == pytest.approx(pot.psi(x), rel=1e-12)
    assert np.allclose(pot.term_grad(xs, j).mean(axis=0), pot.grad(x), rtol=1e-12)
    assert np.allclose(pot.all_term_grads(x)[0], pot.term_grad(xs, j))


def test_synthetic_data_is_seeded():
    a, b = synthetic_logistic_data(10, 3, seed=4), synthetic_logistic_data(10, 3, seed=4)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert set(np.unique(a[1])) <= {-1.0, 1.0}


# ------------------------------------------------------------------ hinge

@pytest.mark.parametrize("c,a,g,E", [(1.0, 1.0, 0.0, np.log(2)), (-2.0, 1.0, 0.0, 0.7),
                                     (-2.0, 1.0, 0.3, 0.2), (-2.0, 1.0, 0.3, 1.5), (0.5, 0.0, 0.2, 1.0)])
def test_hinge_inverse_matches_quadrature(c, a, g, E):
    t = linear_hinge_inverse(c, a, g, E)
    assert t == pytest.approx(oracles.hinge_first_passage(c, a, g, E), abs=1e-10)
    assert linear_hinge_integral(c, a, g, t) == pytest.approx(E, abs=1e-12)


def test_hinge_inverse_never_reached():
    assert linear_hinge_inverse(-1.0, 0.0, 0.0, 1.0) == np.inf


# -------------------------------------------------------------------- ZZS

def test_zzs_rate_examples():
    m = ZzsModel(GaussianPotential(2))
    z = [1.0, 2.0, 1.0, -1.0]
    assert zzs_rate(m, z, 0) == 1.0
    assert zzs_rate(m, z, 1) == 0.0


def test_smooth_rate_at_zero():
    m = ZzsModel(GaussianPotential(1), rate_style="smooth")
    assert zzs_rate(m, [0.0, 1.0], 0) == pytest.approx(np.log(2.0), abs=1e-15)


def test_constant_excess_rate():
    m = ZzsModel(GaussianPotential(1), gamma=0.3)
    assert zzs_rate(m, [2.0, -1.0], 0) == 0.3


def test_zzs_flip_examples():
    assert np.array_equal(zzs_flip([1.0, 1.0], 1), [1.0, -1.0])
    assert np.array_equal(zzs_flip([1.0], 0), [-1.0])


@given(v=signs, i=st.integers(0, 2))
def test_zzs_flip_involution(v, i):
    w = zzs_flip(v, i)
    assert np.array_equal(zzs_flip(w, i), v)
    assert np.sum(w != v) == 1


@given(x=vec, v=signs, style=st.sampled_from(["positive_part", "smooth"]))
def test_rates_nonnegative(x, v, style):
    m = ZzsModel(GaussianPotential(3, precision=[1.0, 3.0, 0.2]), rate_style=style)
    assert np.all(m.rates(np.concatenate([x, v])[None, :]) >= 0)


@given(x=arrays(float, 3, elements=st.floats(-20, 20)), v=signs, i=st.integers(0, 2))
def test_smooth_rate_identity(x, v, i):
    pot = GaussianPotential(3, precision=[1.0, 3.0, 0.2])
    m = ZzsModel(pot, rate_style="smooth")
    z = np.concatenate([x, v])
    zf = np.concatenate([x, zzs_flip(v, i)])
    diff = zzs_rate(m, z, i) - zzs_rate(m, zf, i)
    assert abs(diff - v[i] * pot.grad(x)[i]) < 1e-12


def test_finite_difference_rate_example():
    m = ZzsModel(GaussianPotential(1))
    assert m.finite_difference_rates(np.array([[1.0, 1.0]]), 0.1)[0, 0] == pytest.approx(1.05, abs=1e-12)


def test_finite_difference_clamps():
    m = ZzsModel(GaussianPotential(1))
    assert m.finite_difference_rates(np.array([[2.0, -1.0]]), 0.1)[0, 0] == 0.0


def test_zzs_pdmp_registers_inversion():
    pdmp = model_to_pdmp(ZzsModel(GaussianPotential(1)))
    assert pdmp.rates.inverse is not None and pdmp.m == 1
    smooth = model_to_pdmp(ZzsModel(GaussianPotential(1), rate_style="smooth"))
    assert smooth.rates.inverse is None and smooth.rates.bound is not None


@pytest.mark.parametrize("style", ["positive_part", "smooth"])
def test_zzs_two_dim_stationary(style):
    pdmp = ZzsModel(GaussianPotential(2), rate_style=style).to_pdmp()
    n = 4000
    end, _ = advance_exact(pdmp, np.tile([0.0, 0.0, 1.0, 1.0], (n, 1)), 30.0, Streams(2))
    for k in range(2):
        assert stats.kstest(end[:, k], "norm").pvalue > 0.01


# -------------------------------------------------------------------- BPS

def test_bps_reflect_example():
    assert np.array_equal(bps_reflect([1.0, 0.0], [1.0, 1.0]), [-1.0, 1.0])


def test_bps_reflect_orthogonal_unchanged():
    assert np.array_equal(bps_reflect([1.0, 0.0], [0.0, 2.0]), [0.0, 2.0])


def test_bps_reflect_zero_gradient():
    with pytest.raises(ZeroGradient):
        bps_reflect([0.0, 0.0], [1.0, 1.0])


@given(g=arrays(float, 3, elements=st.floats(-10, 10)).filter(lambda a: np.linalg.norm(a) > 1e-3), v=vec)
def test_bps_reflection_properties(g, v):
    r = bps_reflect(g, v)
    scale = 1.0 + np.linalg.norm(v)
    assert abs(np.linalg.norm(r) - np.linalg.norm(v)) < 1e-12 * scale
    assert abs(r @ g + v @ g) < 1e-12 * scale * (1 + np.linalg.norm(g))
    assert np.max(np.abs(bps_reflect(g, r) - v)) < 1e-12 * scale


def test_bps_has_two_kernels_and_sphere_refresh():
    model = BpsModel(GaussianPotential(3), refresh_rate=1.0, refresh_law="sphere")
    pdmp = model.to_pdmp()
    assert pdmp.m == 2
    v = model.stationary_velocity(Streams(0)["init"], 100)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


def test_bps_kernel_choice_frequency():
    # at a state with bounce rate 1 and refresh rate 1 each kernel fires half the time
    from pdmpsim.core import kernel_index_from_uniform
    model = BpsModel(GaussianPotential(2), refresh_rate=1.0)
    w = model.rates(np.array([[1.0, 0.0, 1.0, 0.0]]))
    assert np.array_equal(w, [[1.0, 1.0]])
    u = Streams(0)["kernel"].random(50_000)
    idx = kernel_index_from_uniform(np.tile(w, (len(u), 1)), u)
    assert abs(np.mean(idx == 0) - 0.5) < 4 * 0.5 / np.sqrt(len(u))


# -------------------------------------------------------------- Lyapunov

def test_lyapunov_zzs_critical_point():
    assert lyapunov_zzs(0.5, 0.1, [0.0, 1.0]) == 1.0
    pot = GaussianPotential(1, mean=2.0)
    assert lyapunov_zzs(0.5, 0.1, [2.0, -1.0], pot) == 1.0


def test_lyapunov_zzs_value():
    assert lyapunov_zzs(0.5, 0.1, [1.0, 1.0]) == pytest.approx(np.exp(0.25 + 0.5 * np.log(1.1)), rel=1e-14)
    assert lyapunov_zzs(0.5, 0.1, [1.0, 1.0]) == pytest.approx(1.346697218297469, rel=1e-14)


@given(x=vec, v=signs)
def test_lyapunov_zzs_positive(x, v):
    z = np.concatenate([x, v])
    val = lyapunov_zzs(0.3, 0.5, z)
    lower = np.exp(0.3 * 0.5 * x @ x - np.sum(np.log1p(0.5 * np.abs(x)) / 2))
    assert val > 0 and val >= lower * (1 - 1e-12)


def test_lyapunov_zzs_domain():
    with pytest.raises(ValueError):
        lyapunov_zzs(1.0, 0.1, [0.0, 1.0])


def test_lyapunov_bps_values():
    assert lyapunov_bps([1.0, 0.0, 0.0, 1.0], 2.0) == pytest.approx(np.exp(0.25) / np.sqrt(2.0))
    assert lyapunov_bps([1.0, 0.0, -1.0, 0.0], 1.0) == pytest.approx(0.9079430793557842, rel=1e-14)
    # reversing v moves the bounce rate into the denominator
    assert lyapunov_bps([1.0, 0.0, 1.0, 0.0], 1.0) == pytest.approx(np.exp(0.25))


def test_custom_psi_exponent():
    assert custom_psi_exponent(0.5, [2.0, 1.0]) == pytest.approx(np.exp(1.0))


# ------------------------------------------------------ other models

def test_rhmc_energy_preserved():
    model = RhmcModel(GaussianPotential(2, precision=[1.0, 4.0]))
    pdmp = model.to_pdmp()
    z = np.array([[1.0, 0.5, -0.2, 0.3]])
    from pdmpsim.core import evaluate_flow
    assert model.hamiltonian(evaluate_flow(pdmp.flow, z, 1.7)) == pytest.approx(model.hamiltonian(z), abs=1e-13)


def test_morris_lecar_requires_parameters():
    with pytest.raises(ValueError):
        MorrisLecarModel(C=1.0)


def test_morris_lecar_has_no_exact_flow():
    pdmp = MorrisLecarModel(**ML_PARAMS).to_pdmp()
    with pytest.raises(NoExactFlow):
        advance_exact(pdmp, np.array([[3.0, -20.0]]), 1.0, Streams(0))


@given(theta=st.integers(0, 10), nu=st.floats(-100, 100))
def test_morris_lecar_rates(theta, nu):
    m = MorrisLecarModel(**ML_PARAMS)
    lam = m.rates(np.array([[theta, nu]]))
    assert np.all(lam >= 0)
    assert lam.sum() == pytest.approx((10 - theta) * m.alpha(nu) + theta * m.beta(nu))
    if theta == 0:
        assert lam[0, 1] == 0
    if theta == 10:
        assert lam[0, 0] == 0


def test_morris_lecar_channel_count_stays_in_range():
    from pdmpsim.schemes import FlowApprox, SchemeConfig, simulate_scheme
    pdmp = MorrisLecarModel(**ML_PARAMS).to_pdmp()
    cfg = SchemeConfig("PD", flow_approx=FlowApprox("euler"), delta=0.05, T=20.0)
    path = simulate_scheme(cfg, pdmp, np.tile([5.0, -30.0], (200, 1)), 0)
    theta = np.array(path.states)[:, :, 0]
    assert theta.min() >= 0 and theta.max() <= 10
    assert np.array_equal(theta, np.round(theta))


def test_cell_size_halves():
    model = CellSizeModel(growth=lambda z: z, division_rate=lambda z: z[:, 0],
                          exact_flow=lambda z, t: z * np.exp(t)[:, None],
                          integrated_rate=lambda z, t: z[:, 0] * np.expm1(t))
    pdmp = model.to_pdmp()
    from pdmpsim.core import simulate_exact
    path = simulate_exact(pdmp, [1.0], 5.0, 0)
    assert path.n_events > 0
    assert np.allclose(path.post_jump_states, path.pre_jump_states / 2)


# ----------------------------------------------------------- subsampling

def test_subsampling_equal_terms_match_pooled_rate():
    model = ZzsSubsamplingModel(EqualTerms(5, 2))
    z = np.array([[0.7, -0.4, 1.0, 1.0]])
    assert np.allclose(model.rates(z), ZzsModel(GaussianPotential(2)).rates(z))


def test_subsampling_step_equal_terms_same_law():
    n = 40_000
    z = np.tile([0.5, 1.0], (n, 1))
    a, _ = subsampling_step(ZzsSubsamplingModel(EqualTerms(1, 1)), z, 0.5, Streams(0))
    b, _ = subsampling_step(ZzsSubsamplingModel(EqualTerms(7, 1)), z, 0.5, Streams(1))
    assert stats.ks_2samp(a[:, 0], b[:, 0]).pvalue > 0.001


def test_subsampling_updates():
    model = ZzsSubsamplingModel(EqualTerms(1, 1))
    z = np.tile([2.0, 1.0], (1000, 1))
    a, rec = subsampling_step(model, z, 0.5, Streams(0), update="displayed")
    b, _ = subsampling_step(model, z, 0.5, Streams(0), update="pd")
    fired = np.isfinite(rec["tau"])
    tau = rec["tau"][fired]
    assert np.allclose(a[fired, 0], 2.0 + (0.5 - tau) - tau)
    assert np.allclose(b[fired, 0], 2.0 + tau - (0.5 - tau))
    assert np.array_equal(a[~fired], b[~fired])


def test_subsampling_logistic_moments_bounded():
    X, y, _ = synthetic_logistic_data(100, 2, seed=0)
    model = ZzsSubsamplingModel(LogisticRegressionPotential(X, y))
    n, delta = 200, 0.01
    s = Streams(5)
    z = np.concatenate([np.zeros((n, 2)), model.stationary_velocity(s["init"], n)], axis=1)
    second = []
    for k in range(int(50 / delta)):
        z, _ = subsampling_step(model, z, delta, s)
        if k % 100 == 99:
            second.append(np.mean(np.sum(z[:, :2] ** 2, axis=1)))
    second = np.array(second)
    assert np.all(np.isfinite(second))
    stationary = second[len(second) // 2:].mean()
    assert second.max() < 10 * stationary
