"""Concrete PDMPs with their closed forms, bounds and Lyapunov functions.

State layouts (rows of a batch):
  ZZS, BPS, telegraph: ``[x_1..x_d, v_1..v_d]``
  RHMC: ``[q_1..q_d, p_1..p_d]``
  Morris-Lecar: ``[theta, nu]``
  cell size: ``[size]``
"""

import numpy as np

from .core import Flow, KernelFamily, PdmpSpec, RateFamily, as_batch
from .errors import ZeroGradient
from .rng import as_streams, exponentials


def softplus(r):
    return np.logaddexp(0.0, r)


# ---------------------------------------------------------------- potentials

class Potential:
    """Negative log-density ``psi`` with gradient; ``lipschitz`` bounds the
    gradient's Lipschitz constant and enables thinning for exact simulation."""

    def __init__(self, psi, grad, dim, lipschitz=None):
        self._psi = psi
        self._grad = grad
        self.dim = dim
        self.lipschitz = lipschitz

    def psi(self, x):
        return self._psi(np.asarray(x, dtype=float))

    def grad(self, x):
        return self._grad(np.asarray(x, dtype=float))


class GaussianPotential(Potential):
    """``psi(x) = sum_i prec_i (x_i - mean_i)^2 / 2``."""

    def __init__(self, dim, precision=1.0, mean=0.0):
        self.precision = np.broadcast_to(np.asarray(precision, dtype=float), (dim,)).copy()
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        if np.any(self.precision <= 0):
            raise ValueError("precision must be positive")
        super().__init__(self._gauss_psi, self._gauss_grad, dim, lipschitz=float(self.precision.max()))

    def _gauss_psi(self, x):
        return 0.5 * np.sum(self.precision * (x - self.mean) ** 2, axis=-1)

    def _gauss_grad(self, x):
        return self.precision * (x - self.mean)


class LogisticRegressionPotential(Potential):
    """Bayesian logistic regression with a Gaussian prior.

    ``psi(x) = sum_j log(1 + exp(-y_j a_j.x)) + prior |x|^2 / 2`` with labels
    ``y_j`` in ``{-1, +1}``. Per-datum terms are the unbiased estimators
    ``psi_j = N log(1 + exp(-y_j a_j.x)) + prior |x|^2 / 2`` whose average over
    ``j`` is ``psi``.
    """

    def __init__(self, features, labels, prior_precision=1.0):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.prior = float(prior_precision)
        self.N, dim = self.features.shape
        sq = np.sum(self.features ** 2, axis=1)
        self.term_lipschitz = self.N * sq / 4.0 + self.prior
        lip = float(np.sum(sq) / 4.0 + self.prior)
        super().__init__(self._lr_psi, self._lr_grad, dim, lipschitz=lip)

    def _margins(self, x):
        return (x @ self.features.T) * self.labels

    def _lr_psi(self, x):
        return np.sum(softplus(-self._margins(x)), axis=-1) + 0.5 * self.prior * np.sum(x * x, axis=-1)

    def _lr_grad(self, x):
        s = -self.labels / (1.0 + np.exp(self._margins(x)))
        return s @ self.features + self.prior * x

    def term_psi(self, x, j):
        """``psi_j(x)`` row-wise for index array ``j``."""
        x = np.atleast_2d(x)
        a = self.features[j]
        m = self.labels[j] * np.sum(a * x, axis=1)
        return self.N * softplus(-m) + 0.5 * self.prior * np.sum(x * x, axis=1)

    def term_grad(self, x, j):
        """``grad psi_j(x)`` row-wise for index array ``j``."""
        x = np.atleast_2d(x)
        a = self.features[j]
        y = self.labels[j]
        m = y * np.sum(a * x, axis=1)
        s = -self.N * y / (1.0 + np.exp(m))
        return s[:, None] * a + self.prior * x

    def all_term_grads(self, x):
        """``(n, N, d)`` array of every per-datum gradient."""
        x = np.atleast_2d(x)
        m = self._margins(x)
        s = -self.N * self.labels / (1.0 + np.exp(m))
        return s[:, :, None] * self.features[None, :, :] + self.prior * x[:, None, :]


def synthetic_logistic_data(N, dim, seed=0):
    """Seeded synthetic logistic-regression data ``(features, labels, truth)``."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    truth = gen.standard_normal(dim)
    features = gen.standard_normal((N, dim))
    p = 1.0 / (1.0 + np.exp(-features @ truth))
    labels = np.where(gen.random(N) < p, 1.0, -1.0)
    return features, labels, truth


# ------------------------------------------------- closed forms for (c + a s)_+

def linear_hinge_integral(c, a, g, t):
    """``int_0^t (c + a s)_+ + g ds`` elementwise, ``a >= 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = (np.maximum(c + a * t, 0.0) ** 2 - np.maximum(c, 0.0) ** 2) / (2.0 * a)
    flat = np.maximum(c, 0.0) * t
    return np.where(a > 0, quad, flat) + g * t


def linear_hinge_inverse(c, a, g, E):
    """First ``t`` with ``int_0^t (c + a s)_+ + g ds = E`` elementwise (``inf`` if never)."""
    c, a, g, E = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (c, a, g, E)))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        cg = np.maximum(c, 0.0) + g
        t_pos = 2.0 * E / (cg + np.sqrt(cg * cg + 2.0 * a * E))
        s0 = -c / a
        flat_part = g * s0
        t_flat = E / g
        rest = E - flat_part
        t_tail = s0 + 2.0 * rest / (g + np.sqrt(g * g + 2.0 * a * rest))
        t_neg = np.where((g > 0) & (flat_part >= E), t_flat, t_tail)
        t_lin = np.where(a > 0, np.where(c >= 0, t_pos, t_neg), E / cg)
    return np.where(np.isfinite(t_lin) & (t_lin >= 0), t_lin, np.inf)


# ------------------------------------------------------------------------ ZZS

def zzs_flip(v, i):
    """Negate coordinate ``i`` of the velocity."""
    out = np.array(v, dtype=float, copy=True)
    out[..., i] = -out[..., i]
    return out


def _split(z, d):
    return z[:, :d], z[:, d:]


def _transport_flow(d):
    def exact(z, t):
        out = z.copy()
        out[:, :d] += t[:, None] * z[:, d:]
        return out

    def field(z):
        return np.concatenate([z[:, d:], np.zeros_like(z[:, d:])], axis=1)

    return Flow(vector_field=field, exact=exact, lipschitz_hint=1.0, npos=d)


class ZzsModel:
    """Zig-Zag sampler for ``exp(-psi)``.

    ``rate_style`` is ``"positive_part"`` for ``(v_i d_i psi)_+ + gamma_i`` or
    ``"smooth"`` for ``softplus(v_i d_i psi) + gamma_i``. ``gamma`` is a
    constant (scalar or per coordinate) or a callable ``gamma(x, v) -> (n, d)``
    with ``gamma_max`` bounding it for thinning.
    """

    name = "zzs"

    def __init__(self, potential, gamma=0.0, rate_style="positive_part", gamma_max=None):
        if rate_style not in ("positive_part", "smooth"):
            raise ValueError(f"unknown rate_style {rate_style!r}")
        self.potential = potential
        self.d = potential.dim
        self.rate_style = rate_style
        self.gamma = gamma
        if callable(gamma):
            self.gamma_max = gamma_max
        else:
            g = np.broadcast_to(np.asarray(gamma, dtype=float), (self.d,)).copy()
            if np.any(g < 0):
                raise ValueError("gamma must be nonnegative")
            self.gamma = g
            self.gamma_max = float(g.max())

    def link(self, r):
        return np.maximum(r, 0.0) if self.rate_style == "positive_part" else softplus(r)

    def gamma_values(self, x, v):
        if callable(self.gamma):
            return np.asarray(self.gamma(x, v), dtype=float)
        return np.broadcast_to(self.gamma, x.shape)

    def rates(self, z):
        x, v = _split(z, self.d)
        return self.link(v * self.potential.grad(x)) + self.gamma_values(x, v)

    def finite_difference_rates(self, z, delta):
        """Gradient-free rates ``link((psi(x + v_i e_i delta) - psi(x)) / delta) + gamma_i``."""
        x, v = _split(z, self.d)
        base = self.potential.psi(x)
        out = np.empty_like(x)
        for i in range(self.d):
            xs = x.copy()
            xs[:, i] += v[:, i] * delta
            out[:, i] = (self.potential.psi(xs) - base) / delta
        return self.link(out) + self.gamma_values(x, v)

    def _gaussian_slopes(self, z):
        x, v = _split(z, self.d)
        pot = self.potential
        c = v * pot.precision * (x - pot.mean)
        a = np.broadcast_to(pot.precision * v * v, c.shape)
        return c, a

    def _closed_form(self):
        return (isinstance(self.potential, GaussianPotential)
                and self.rate_style == "positive_part" and not callable(self.gamma))

    def inverse(self, z, E, extra):
        c, a = self._gaussian_slopes(z)
        return linear_hinge_inverse(c, a, self.gamma + extra, E)

    def integrated(self, z, t):
        c, a = self._gaussian_slopes(z)
        return linear_hinge_integral(c, a, self.gamma, t[:, None])

    def bound(self, z, horizon):
        x, v = _split(z, self.d)
        d = self.d
        gmax = self.gamma_max if self.gamma_max is not None else 0.0
        if isinstance(self.potential, GaussianPotential):
            c, a = self._gaussian_slopes(z)
            return self.link(c).sum(axis=1) + d * gmax, np.full(len(z), a[0].sum())
        L = self.potential.lipschitz
        lead = self.link(v * self.potential.grad(x)).sum(axis=1) + d * gmax
        return lead, np.full(len(z), d * L * np.sqrt(d))

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        rows = np.arange(len(z))
        out[rows, self.d + idx] *= -1.0
        return out

    def to_pdmp(self):
        d = self.d
        closed = self._closed_form()
        can_bound = (isinstance(self.potential, GaussianPotential) or self.potential.lipschitz is not None) \
            and (not callable(self.gamma) or self.gamma_max is not None)
        rates = RateFamily(
            m=d,
            rates=self.rates,
            inverse=self.inverse if closed else None,
            integrated=self.integrated if closed else None,
            bound=self.bound if (can_bound and not closed) else None,
        )
        kernels = KernelFamily(m=d, apply=self.apply_kernel)
        hooks = {"finite_difference": self.finite_difference_rates, "potential": self.potential, "model": self}
        return PdmpSpec(_transport_flow(d), rates, kernels, dim=2 * d, npos=d, name="zzs", hooks=hooks)

    def stationary_velocity(self, gen, n):
        return np.where(gen.random((n, self.d)) < 0.5, -1.0, 1.0)


def zzs_rate(model, z, i):
    """Rate ``lambda_i`` of a ZZS model at a single state."""
    zb, _ = as_batch(z)
    if not 0 <= i < model.d:
        raise IndexError("kernel index out of range")
    return float(model.rates(zb)[0, i])


# ------------------------------------------------------------------------ BPS

def bps_reflect(grad, v):
    """Reflect ``v`` in the hyperplane orthogonal to ``grad`` (row-wise)."""
    grad = np.asarray(grad, dtype=float)
    v = np.asarray(v, dtype=float)
    sq = np.sum(grad * grad, axis=-1, keepdims=True)
    if np.any(np.sqrt(sq) < 1e-300):
        raise ZeroGradient("reflection undefined where the gradient vanishes")
    return v - 2.0 * np.sum(v * grad, axis=-1, keepdims=True) / sq * grad


class BpsModel:
    """Bouncy particle sampler: kernel 0 reflects, kernel 1 refreshes."""

    name = "bps"

    def __init__(self, potential, refresh_rate=1.0, refresh_law="gaussian"):
        if refresh_rate <= 0:
            raise ValueError("refresh_rate must be positive")
        if refresh_law not in ("gaussian", "sphere"):
            raise ValueError(f"unknown refresh_law {refresh_law!r}")
        self.potential = potential
        self.d = potential.dim
        self.refresh_rate = float(refresh_rate)
        self.refresh_law = refresh_law

    def rates(self, z):
        x, v = _split(z, self.d)
        bounce = np.maximum(np.sum(v * self.potential.grad(x), axis=1), 0.0)
        return np.stack([bounce, np.full(len(z), self.refresh_rate)], axis=1)

    def finite_difference_rates(self, z, delta):
        x, v = _split(z, self.d)
        diff = (self.potential.psi(x + delta * v) - self.potential.psi(x)) / delta
        return np.stack([np.maximum(diff, 0.0), np.full(len(z), self.refresh_rate)], axis=1)

    def _slopes(self, z):
        x, v = _split(z, self.d)
        pot = self.potential
        return np.sum(v * pot.precision * (x - pot.mean), axis=1), np.sum(pot.precision * v * v, axis=1)

    def inverse(self, z, E, extra):
        c, a = self._slopes(z)
        t0 = linear_hinge_inverse(c, a, extra[:, 0], E[:, 0])
        with np.errstate(divide="ignore"):
            t1 = E[:, 1] / (self.refresh_rate + extra[:, 1])
        return np.stack([t0, t1], axis=1)

    def integrated(self, z, t):
        c, a = self._slopes(z)
        return np.stack([linear_hinge_integral(c, a, 0.0, t), self.refresh_rate * t], axis=1)

    def bound(self, z, horizon):
        x, v = _split(z, self.d)
        lead = np.maximum(np.sum(v * self.potential.grad(x), axis=1), 0.0) + self.refresh_rate
        return lead, self.potential.lipschitz * np.sum(v * v, axis=1)

    def noise(self, gen, n):
        return gen.standard_normal((n, self.d))

    def refreshed_velocity(self, u):
        if self.refresh_law == "sphere":
            return u / np.linalg.norm(u, axis=1, keepdims=True)
        return u

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        d = self.d
        b = idx == 0
        if b.any():
            out[b, d:] = bps_reflect(self.potential.grad(z[b, :d]), z[b, d:])
        r = ~b
        if r.any():
            out[r, d:] = self.refreshed_velocity(u[r])
        return out

    def to_pdmp(self):
        gauss = isinstance(self.potential, GaussianPotential)
        rates = RateFamily(
            m=2,
            rates=self.rates,
            inverse=self.inverse if gauss else None,
            integrated=self.integrated if gauss else None,
            bound=self.bound if (not gauss and self.potential.lipschitz is not None) else None,
        )
        kernels = KernelFamily(m=2, apply=self.apply_kernel, noise_dim=self.d, noise=self.noise)
        hooks = {"finite_difference": self.finite_difference_rates, "potential": self.potential, "model": self}
        return PdmpSpec(_transport_flow(self.d), rates, kernels, dim=2 * self.d, npos=self.d, name="bps",
                        hooks=hooks)

    def stationary_velocity(self, gen, n):
        return self.refreshed_velocity(gen.standard_normal((n, self.d)))


# ----------------------------------------------------------------------- RHMC

class RhmcModel:
    """Randomised HMC: Hamiltonian flow with momentum refreshment at rate ``refresh_rate``."""

    name = "rhmc"

    def __init__(self, potential, refresh_rate=1.0):
        self.potential = potential
        self.d = potential.dim
        self.refresh_rate = float(refresh_rate)

    def hamiltonian(self, z):
        q, p = _split(np.atleast_2d(z), self.d)
        return self.potential.psi(q) + 0.5 * np.sum(p * p, axis=1)

    def _field(self, z):
        q, p = _split(z, self.d)
        return np.concatenate([p, -self.potential.grad(q)], axis=1)

    def _rotation(self, z, t):
        pot = self.potential
        q, p = _split(z, self.d)
        w = np.sqrt(pot.precision)
        wt = w * t[:, None]
        cos, sin = np.cos(wt), np.sin(wt)
        dq = q - pot.mean
        return np.concatenate([pot.mean + dq * cos + p / w * sin, -dq * w * sin + p * cos], axis=1)

    def rates(self, z):
        return np.full((len(z), 1), self.refresh_rate)

    def inverse(self, z, E, extra):
        with np.errstate(divide="ignore"):
            return E / (self.refresh_rate + extra)

    def integrated(self, z, t):
        return self.refresh_rate * t[:, None]

    def noise(self, gen, n):
        return gen.standard_normal((n, self.d))

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        out[:, self.d:] = u
        return out

    def to_pdmp(self):
        gauss = isinstance(self.potential, GaussianPotential)
        flow = Flow(vector_field=self._field, exact=self._rotation if gauss else None,
                    lipschitz_hint=self.potential.lipschitz, grad_potential=self.potential.grad, npos=self.d)
        rates = RateFamily(m=1, rates=self.rates, inverse=self.inverse, integrated=self.integrated)
        kernels = KernelFamily(m=1, apply=self.apply_kernel, noise_dim=self.d, noise=self.noise)
        return PdmpSpec(flow, rates, kernels, dim=2 * self.d, npos=self.d, name="rhmc",
                        hooks={"potential": self.potential, "model": self})

    def stationary_velocity(self, gen, n):
        return gen.standard_normal((n, self.d))


# ------------------------------------------------------------------ telegraph

class TelegraphModel:
    """One-dimensional velocity flips at constant rate."""

    name = "telegraph"

    def __init__(self, rate=1.0):
        self.rate = float(rate)
        self.d = 1

    def rates(self, z):
        return np.full((len(z), 1), self.rate)

    def inverse(self, z, E, extra):
        with np.errstate(divide="ignore"):
            return E / (self.rate + extra)

    def integrated(self, z, t):
        return self.rate * t[:, None]

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        out[:, 1] *= -1.0
        return out

    def to_pdmp(self):
        rates = RateFamily(m=1, rates=self.rates, inverse=self.inverse, integrated=self.integrated)
        kernels = KernelFamily(m=1, apply=self.apply_kernel)
        return PdmpSpec(_transport_flow(1), rates, kernels, dim=2, npos=1, name="telegraph",
                        hooks={"model": self, "finite_difference": lambda z, delta: self.rates(z)})

    def stationary_velocity(self, gen, n):
        return np.where(gen.random((n, 1)) < 0.5, -1.0, 1.0)

    def mean_position(self, t, x0=0.0, v0=1.0):
        """``E[X_t]`` from ``(x0, v0)``."""
        lam = self.rate
        return x0 + v0 * (1.0 - np.exp(-2.0 * lam * t)) / (2.0 * lam)


# --------------------------------------------------------------- Morris-Lecar

MORRIS_LECAR_PARAMETERS = ("C", "g_leak", "g_ca", "g_k", "V_leak", "V_ca", "V_k",
                           "V1", "V2", "V3", "V4", "lambda_k", "N_k")


class MorrisLecarModel:
    """Stochastic Morris-Lecar model on ``{0..N_k} x R``; every parameter is required."""

    name = "morris_lecar"

    def __init__(self, **params):
        missing = [k for k in MORRIS_LECAR_PARAMETERS if k not in params]
        unknown = [k for k in params if k not in MORRIS_LECAR_PARAMETERS]
        if missing or unknown:
            raise ValueError(f"missing parameters {missing}, unknown parameters {unknown}")
        self.p = {k: float(params[k]) for k in MORRIS_LECAR_PARAMETERS}
        self.N = int(params["N_k"])
        if self.N != params["N_k"] or self.N < 1:
            raise ValueError("N_k must be a positive integer")

    def m_inf(self, nu):
        p = self.p
        return 0.5 * (1.0 + np.tanh((nu - p["V1"]) / p["V2"]))

    def n_inf(self, nu):
        return 0.5 * (1.0 + np.tanh((nu - self.p["V3"]) / 4.0))

    def lambda_k(self, nu):
        p = self.p
        return p["lambda_k"] * np.cosh((nu - p["V3"]) / (2.0 * p["V4"]))

    def alpha(self, nu):
        return self.lambda_k(nu) * self.n_inf(nu)

    def beta(self, nu):
        return self.lambda_k(nu) * (1.0 - self.n_inf(nu))

    def field(self, z):
        p = self.p
        theta, nu = z[:, 0], z[:, 1]
        dnu = (1.0 - p["g_leak"] * (nu - p["V_leak"]) - p["g_ca"] * self.m_inf(nu) * (nu - p["V_ca"])
               - p["g_k"] * theta / self.N * (nu - p["V_k"])) / p["C"]
        return np.stack([np.zeros_like(nu), dnu], axis=1)

    def rates(self, z):
        theta, nu = z[:, 0], z[:, 1]
        return np.stack([(self.N - theta) * self.alpha(nu), theta * self.beta(nu)], axis=1)

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        out[:, 0] += np.where(idx == 0, 1.0, -1.0)
        return out

    def to_pdmp(self):
        flow = Flow(vector_field=self.field, exact=None, npos=2)
        rates = RateFamily(m=2, rates=self.rates)
        kernels = KernelFamily(m=2, apply=self.apply_kernel)
        return PdmpSpec(flow, rates, kernels, dim=2, npos=2, name="morris_lecar", hooks={"model": self})


# ------------------------------------------------------------------ cell size

class CellSizeModel:
    """Cell size growing along ``growth`` and halving at rate ``division_rate``.

    ``growth(z)`` and ``division_rate(z)`` act on ``(n, 1)`` batches and return
    ``(n, 1)`` and ``(n,)`` arrays. Optional closed forms enable exact simulation:
    ``exact_flow(z, t)``, ``integrated_rate(z, t) -> (n,)`` and
    ``rate_bound(z, horizon) -> (a, b)``.
    """

    name = "cell_size"

    def __init__(self, growth, division_rate, exact_flow=None, integrated_rate=None, rate_bound=None):
        self.growth = growth
        self.division_rate = division_rate
        self.exact_flow = exact_flow
        self.integrated_rate = integrated_rate
        self.rate_bound = rate_bound

    def rates(self, z):
        return np.asarray(self.division_rate(z), dtype=float).reshape(len(z), 1)

    def apply_kernel(self, z, idx, u):
        return z / 2.0

    def to_pdmp(self):
        flow = Flow(vector_field=self.growth, exact=self.exact_flow, npos=1)
        integrated = None
        if self.integrated_rate is not None:
            integrated = lambda z, t: np.asarray(self.integrated_rate(z, t), dtype=float).reshape(len(z), 1)
        rates = RateFamily(m=1, rates=self.rates, integrated=integrated, bound=self.rate_bound)
        kernels = KernelFamily(m=1, apply=self.apply_kernel)
        return PdmpSpec(flow, rates, kernels, dim=1, npos=1, name="cell_size", hooks={"model": self})


# --------------------------------------------------------------- subsampling

class ZzsSubsamplingModel:
    """ZZS whose events use one per-datum term ``psi_J``.

    ``potential`` must expose ``N``, ``term_grad(x, j)`` and ``all_term_grads(x)``
    with per-datum terms averaging to ``psi``. The exact process has rates
    ``mean_j (v_i d_i psi_j)_+``.
    """

    name = "zzs_subsampling"

    def __init__(self, potential):
        self.potential = potential
        self.d = potential.dim
        self.N = potential.N

    def term_rates(self, z, j):
        """``lambda_i^j(x, v)`` for each row and its datum index ``j``."""
        x, v = _split(z, self.d)
        return np.maximum(v * self.potential.term_grad(x, j), 0.0)

    def all_term_rates(self, z):
        """``(n, N, d)`` array of every per-datum rate."""
        x, v = _split(z, self.d)
        return np.maximum(v[:, None, :] * self.potential.all_term_grads(x), 0.0)

    def rates(self, z):
        return self.all_term_rates(z).mean(axis=1)

    def bound(self, z, horizon):
        x, v = _split(z, self.d)
        lead = self.rates(z).sum(axis=1)
        slope = self.d * np.sqrt(self.d) * float(np.mean(self.potential.term_lipschitz))
        return lead, np.full(len(z), slope)

    def apply_kernel(self, z, idx, u):
        out = z.copy()
        out[np.arange(len(z)), self.d + idx] *= -1.0
        return out

    def to_pdmp(self):
        rates = RateFamily(m=self.d, rates=self.rates, bound=self.bound)
        kernels = KernelFamily(m=self.d, apply=self.apply_kernel)
        return PdmpSpec(_transport_flow(self.d), rates, kernels, dim=2 * self.d, npos=self.d,
                        name="zzs_subsampling", hooks={"model": self, "potential": self.potential})

    def stationary_velocity(self, gen, n):
        return np.where(gen.random((n, self.d)) < 0.5, -1.0, 1.0)


def subsampling_step(model, z, delta, rng, update="displayed"):
    """One frozen-rate step using a single uniformly drawn datum ``J``.

    ``update="displayed"`` advances ``x + (delta - tau) v_old + tau v_new``;
    ``update="pd"`` advances ``x + tau v_old + (delta - tau) v_new``.
    Returns ``(state, record)`` with the datum, event time and flipped coordinate.
    """
    if update not in ("displayed", "pd"):
        raise ValueError(f"unknown update {update!r}")
    streams = as_streams(rng)
    zb, single = as_batch(z)
    n, d = len(zb), model.d
    J = streams["subsample"].integers(0, model.N, n)
    lam = model.term_rates(zb, J)
    E = exponentials(streams["clock"], (n, d))
    with np.errstate(divide="ignore"):
        clocks = np.where(lam > 0, E / lam, np.inf)
    tau = clocks.min(axis=1)
    idx = clocks.argmin(axis=1)
    fire = tau <= delta
    x, v = zb[:, :d], zb[:, d:]
    v_new = v.copy()
    rows = np.flatnonzero(fire)
    v_new[rows, idx[rows]] *= -1.0
    t_ev = np.where(fire, tau, delta)
    if update == "displayed":
        x_new = x + (delta - t_ev)[:, None] * v + t_ev[:, None] * v_new
    else:
        x_new = x + t_ev[:, None] * v + (delta - t_ev)[:, None] * v_new
    out = np.concatenate([x_new, v_new], axis=1)
    record = {"datum": J, "tau": np.where(fire, tau, np.inf), "kernel": np.where(fire, idx, -1)}
    if single:
        return out[0], {k: val[0] for k, val in record.items()}
    return out, record


# ------------------------------------------------------------------ Lyapunov

def _phi_eps(s, eps):
    return np.sign(s) * np.log1p(eps * np.abs(s)) / 2.0


def lyapunov_zzs(alpha, epsilon, z, potential=None):
    """``exp(alpha psi(x) + sum_i phi_eps(v_i d_i psi(x)))`` with a standard Gaussian default."""
    if not 0 < alpha < 1 or epsilon <= 0:
        raise ValueError("need alpha in (0, 1) and epsilon > 0")
    zb, single = as_batch(z)
    d = zb.shape[1] // 2
    pot = potential if potential is not None else GaussianPotential(d)
    x, v = _split(zb, d)
    out = np.exp(alpha * pot.psi(x) + np.sum(_phi_eps(v * pot.grad(x), epsilon), axis=1))
    return float(out[0]) if single else out


def lyapunov_zzs_discrete(alpha, beta, delta, z, potential=None):
    """``exp(alpha psi(x) + beta delta v . grad psi(x))``, the step-size dependent ZZS function."""
    if not 0 < alpha < 1 or beta <= 0 or alpha >= 2 * beta:
        raise ValueError("need alpha in (0, 1), beta > 0 and alpha < 2 beta")
    zb, single = as_batch(z)
    d = zb.shape[1] // 2
    pot = potential if potential is not None else GaussianPotential(d)
    x, v = _split(zb, d)
    out = np.exp(alpha * pot.psi(x) + beta * delta * np.sum(v * pot.grad(x), axis=1))
    return float(out[0]) if single else out


def lyapunov_bps(z, refresh_rate=1.0, potential=None):
    """``exp(psi(x) / 2) / sqrt(lambda(x, -v))`` with the refreshment included in the rate."""
    if refresh_rate <= 0:
        raise ValueError("refresh_rate must be positive")
    zb, single = as_batch(z)
    d = zb.shape[1] // 2
    pot = potential if potential is not None else GaussianPotential(d)
    x, v = _split(zb, d)
    rate = np.maximum(-np.sum(v * pot.grad(x), axis=1), 0.0) + refresh_rate
    out = np.exp(pot.psi(x) / 2.0) / np.sqrt(rate)
    return float(out[0]) if single else out


def custom_psi_exponent(beta, z, potential=None):
    """``exp(beta psi(x))`` for the position part of ``z``."""
    zb, single = as_batch(z)
    d = zb.shape[1] // 2
    pot = potential if potential is not None else GaussianPotential(d)
    out = np.exp(beta * pot.psi(zb[:, :d]))
    return float(out[0]) if single else out


def model_to_pdmp(model):
    """Assemble the ``PdmpSpec`` of any model in this module."""
    if isinstance(model, PdmpSpec):
        return model
    return model.to_pdmp()
