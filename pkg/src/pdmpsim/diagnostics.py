"""Estimators and oracles: distance and TV curves, moments, bias, weak-error orders.

Replicas are split into fixed-size blocks, each with its own random streams
``streams.block(b)``. Results therefore depend on the seed and block size only,
not on how many workers evaluate the blocks.
"""

import dataclasses
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import advance_exact, advance_exact_on_mesh
from .couplings import run_coupled
from .errors import GridTooCoarse, InsufficientSignal
from .models import GaussianPotential
from .rng import as_streams
from .schemes import simulate_scheme

BLOCK = 4096

# ------------------------------------------------------------------ replicas

_TASK = None


def _call_task(args):
    n, streams = args
    return _TASK(n, streams)


def default_workers():
    return max(1, int(os.environ.get("PDMP_WORKERS", "1")))


def replica_map(task, reps, rng, block=BLOCK, workers=None):
    """Evaluate ``task(n, streams)`` over blocks of replicas, in block order.

    ``task`` returns an array or a tuple of arrays with replicas on axis 0;
    the blocks are concatenated along that axis.
    """
    global _TASK
    streams = as_streams(rng)
    sizes = [block] * (reps // block) + ([reps % block] if reps % block else [])
    jobs = [(n, streams.block(b)) for b, n in enumerate(sizes)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(jobs) == 1:
        results = [task(n, s) for n, s in jobs]
    else:
        # fork inherits the task, so closures need not be picklable
        _TASK = task
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_call_task, jobs))
        finally:
            _TASK = None
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(parts, axis=0) for parts in zip(*results))
    return np.concatenate(results, axis=0)


def _initial(z0, streams, n, model=None):
    """Starting states: a fixed state, or a callable ``z0(gen, n)`` drawing from an initial law."""
    if callable(z0):
        return np.asarray(z0(streams["init"], n), dtype=float)
    z = np.asarray(z0, dtype=float)
    return np.tile(z, (n, 1)) if z.ndim == 1 else z


def _with_horizon(cfg, T):
    return cfg if T is None or cfg.mesh is not None else dataclasses.replace(cfg, T=T)


def _mean_se(samples):
    n = samples.shape[0]
    se = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(samples.shape[1:], np.nan)
    return samples.mean(axis=0), se


# -------------------------------------------------------------------- curves


@dataclass
class Curve:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None


def wasserstein_proxy_curve(pdmp, cfg, z0, T, reps, rng, norm="l1", block=BLOCK, workers=None):
    """Mean distance under the synchronous coupling at each mesh point.

    An upper bound proxy for the Wasserstein distance, not the distance itself.
    """
    cfg = _with_horizon(cfg, T)

    def task(n, streams):
        z = _initial(z0, streams, n)
        return run_coupled(pdmp, cfg, z, streams, kind="wasserstein", norm=norm, keep_states=False).distance.T

    dist = replica_map(task, reps, rng, block, workers)
    mean, se = _mean_se(dist)
    return Curve(cfg.mesh_times(), mean, se)


def _tv_kind(cfg):
    return "higher_order" if cfg.scheme == "order_p" and cfg.p > 1 else "tv"


def tv_indicator_curve(pdmp, cfg, z0, T, reps, rng, level=0.95, block=BLOCK, workers=None):
    """Frequency of ``Z_t != Zbar_t`` under the thinning coupling, with Wilson intervals."""
    cfg = _with_horizon(cfg, T)
    kind = _tv_kind(cfg)

    def task(n, streams):
        z = _initial(z0, streams, n)
        return ~run_coupled(pdmp, cfg, z, streams, kind=kind, keep_states=False).equality_flag.T

    neq = replica_map(task, reps, rng, block, workers)
    k = neq.sum(axis=0)
    p = k / reps
    lo, hi = np.empty_like(p), np.empty_like(p)
    for i, ki in enumerate(k):
        ci = stats.binomtest(int(ki), reps).proportion_ci(confidence_level=level, method="wilson")
        lo[i], hi[i] = ci.low, ci.high
    return Curve(cfg.mesh_times(), p, np.sqrt(p * (1.0 - p) / reps), lo, hi)


@dataclass
class MomentTrace:
    times: np.ndarray
    exact_mean: np.ndarray
    exact_stderr: np.ndarray
    scheme_mean: np.ndarray
    scheme_stderr: np.ndarray

    @property
    def sup_exact(self):
        return float(np.max(self.exact_mean))

    @property
    def sup_scheme(self):
        return float(np.max(self.scheme_mean))


def _paired_traces(pdmp, cfg, z0, reps, rng, observe, block, workers, exact=True):
    """Observations of independent exact and scheme runs at every mesh point, ``(reps, N+1)``."""
    mesh = cfg.mesh_times()

    def task(n, streams):
        z = _initial(z0, streams, n)
        sch = np.array(simulate_scheme(cfg, pdmp, z, streams.sub("scheme"), observer=observe,
                                       record_events=False).states).T
        if not exact:
            return sch
        _, obs = advance_exact_on_mesh(pdmp, z, mesh, streams.sub("exact"), observer=observe)
        return np.array(obs).T, sch

    return replica_map(task, reps, rng, block, workers)


def lyapunov_moment_trace(pdmp, cfg, G, init, T, reps, rng, block=BLOCK, workers=None):
    """Monte Carlo estimates of ``E[G]`` along the exact process and the scheme."""
    cfg = _with_horizon(cfg, T)
    ex, sch = _paired_traces(pdmp, cfg, init, reps, rng, lambda s: np.asarray(G(s), dtype=float),
                             block, workers)
    em, es = _mean_se(ex)
    sm, ss = _mean_se(sch)
    return MomentTrace(cfg.mesh_times(), em, es, sm, ss)


# ---------------------------------------------------------------- stationary


def stat_mean1(z, npos):
    return z[:, 0]


def stat_radius(z, npos):
    return np.sum(z[:, :npos] ** 2, axis=1)


STATISTICS = {"mean1": stat_mean1, "radius": stat_radius}


def gaussian_truth(potential, name):
    """Stationary value of a built-in statistic under a Gaussian target."""
    d = potential.dim
    mean = np.broadcast_to(potential.mean, (d,))
    var = 1.0 / np.broadcast_to(potential.precision, (d,))
    if name == "mean1":
        return float(mean[0])
    if name == "radius":
        return float(np.sum(var) + np.sum(mean ** 2))
    raise KeyError(name)


@dataclass
class BiasTrace:
    times: np.ndarray
    truth: float
    exact_error: np.ndarray
    exact_stderr: np.ndarray
    scheme_error: np.ndarray
    scheme_stderr: np.ndarray


def _running_average(obs, times, burn):
    keep = times >= burn
    csum = np.cumsum(np.where(keep[None, :], obs, 0.0), axis=1)
    count = np.cumsum(keep)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, csum / np.maximum(count, 1), np.nan)


def stationary_bias_curve(pdmp, cfg, statistic, T, reps, rng, init=None, truth=None, burn_in=0.2,
                          exact=True, block=BLOCK, workers=None):
    """``|time average of statistic - stationary value|`` against time.

    ``statistic`` is ``"mean1"``, ``"radius"`` or a callable on state batches.
    The first ``burn_in`` fraction of the horizon is discarded; the truth is
    filled in for Gaussian targets when not given.
    """
    cfg = _with_horizon(cfg, T)
    if isinstance(statistic, str):
        name, fn = statistic, STATISTICS[statistic]
        stat = lambda s: fn(s, pdmp.npos)  # noqa: E731
    else:
        name, stat = None, statistic
    if truth is None:
        pot = pdmp.hooks.get("potential")
        if name is None or not isinstance(pot, GaussianPotential):
            raise ValueError("no stationary value known for this statistic; pass truth=")
        truth = gaussian_truth(pot, name)
    if init is None:
        init = _default_init(pdmp)
    times = cfg.mesh_times()
    burn = burn_in * times[-1]
    traces = _paired_traces(pdmp, cfg, init, reps, rng, stat, block, workers, exact=exact)
    ex, sch = traces if exact else (None, traces)

    def err(obs):
        avg = _running_average(obs, times, burn)
        m, se = _mean_se(avg)
        return np.abs(m - truth), se

    se_, ss_ = err(sch)
    ee_, es_ = err(ex) if exact else (np.full_like(se_, np.nan), np.full_like(ss_, np.nan))
    return BiasTrace(times, float(truth), ee_, es_, se_, ss_)


def _default_init(pdmp):
    model = pdmp.hooks.get("model")
    d = pdmp.npos

    def init(gen, n):
        v = model.stationary_velocity(gen, n)
        return np.concatenate([np.zeros((n, d)), v], axis=1)

    return init


# --------------------------------------------------------------- weak error


@dataclass
class OrderFit:
    slope: float
    intercept: float
    slope_stderr: float
    ci_low: float
    ci_high: float


def fit_loglog_order(deltas, errors, stderrs=None, level=0.95):
    """Weighted least squares of ``log error`` on ``log delta``.

    Weights are ``(error / stderr)^2``, the inverse variances of the logged
    errors. The confidence interval uses the residual scale and Student t.
    """
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if deltas.size < 3 or deltas.max() / deltas.min() < 4.0:
        raise InsufficientSignal("need at least 3 step sizes spanning a factor of 4")
    if np.any(errors <= 0):
        raise InsufficientSignal("errors must be positive")
    if stderrs is None:
        w = np.ones_like(errors)
    else:
        stderrs = np.asarray(stderrs, dtype=float)
        if np.any(errors <= 2.0 * stderrs):
            raise InsufficientSignal("an error is within 2 standard errors of zero")
        with np.errstate(divide="ignore"):
            w = np.where(stderrs > 0, (errors / stderrs) ** 2, 1.0)
        if np.any(stderrs == 0):
            w = np.ones_like(errors)
    X = np.column_stack([np.ones_like(deltas), np.log(deltas)])
    y = np.log(errors)
    W = w / w.sum()
    A = X.T @ (W[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (W * y))
    resid = y - X @ coef
    dof = deltas.size - 2
    s2 = float(np.sum(W * resid ** 2)) / dof
    cov = s2 * np.linalg.inv(A)
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    q = stats.t.ppf(0.5 + level / 2.0, dof)
    slope = float(coef[1])
    return OrderFit(slope, float(coef[0]), se, slope - q * se, slope + q * se)


@dataclass
class SweepResult:
    deltas: np.ndarray
    errors: np.ndarray
    stderrs: np.ndarray
    estimates: np.ndarray
    reference: float
    reference_kind: str
    method: str
    fit: OrderFit = None

    @property
    def slope(self):
        return None if self.fit is None else self.fit.slope


def _coupling_kind(cfg):
    if cfg.scheme == "FD":
        return "wasserstein"
    return _tv_kind(cfg)


def weak_error_sweep(pdmp, cfgs, g, T, reps, rng, z0, reference=None, method="plain", deltas=None,
                     block=BLOCK, workers=None, fit=True):
    """Weak error of a family of schemes with a fitted order.

    ``cfgs`` is a list of configurations, or one configuration with ``deltas``.
    ``method="plain"`` compares ``mean g(Zbar_T)`` with ``reference`` (a number,
    ``"pde"`` or ``"fine"``); ``method="coupled"`` averages ``g(Zbar_T) - g(Z_T)``
    with the exact process run under a coupling and needs no reference.
    ``reps`` may be a list with one entry per step size.
    """
    if deltas is not None:
        cfgs = [dataclasses.replace(cfgs, delta=float(d), mesh=None) for d in deltas]
    cfgs = [_with_horizon(c, T) for c in cfgs]
    ds = np.array([c.delta for c in cfgs], dtype=float)
    reps_list = list(reps) if np.ndim(reps) else [int(reps)] * len(cfgs)
    streams = as_streams(rng)
    gfun = lambda s: np.asarray(g(s), dtype=float)  # noqa: E731

    ref_kind = "coupled" if method == "coupled" else None
    ref = None
    if method == "plain":
        if reference is None:
            raise ValueError("plain weak error needs a reference")
        if isinstance(reference, str) and reference == "pde":
            gxv = lambda x, v: np.asarray(g(np.column_stack([x, v])), dtype=float)  # noqa: E731
            ref = float(forward_pde_oracle_1d(pdmp, _initial(z0, streams, 1)[0], T, g=gxv).values[0])
            ref_kind = "pde"
        elif isinstance(reference, str) and reference == "fine":
            fine = dataclasses.replace(cfgs[0], delta=float(ds.min()) / 32.0, mesh=None)
            vals = _terminal(pdmp, fine, z0, max(reps_list), streams.sub("reference"), gfun, block, workers)
            ref = float(vals.mean())
            ref_kind = "fine"
        else:
            ref = float(reference)
            ref_kind = "analytic"
    elif method != "coupled":
        raise ValueError(f"unknown method {method!r}")

    est, err, se = [], [], []
    for k, (c, n) in enumerate(zip(cfgs, reps_list)):
        s = streams.sub(f"delta{k}")
        if method == "plain":
            vals = _terminal(pdmp, c, z0, n, s, gfun, block, workers)
            m, sd = vals.mean(), vals.std(ddof=1) / np.sqrt(n)
            est.append(m)
            err.append(abs(m - ref))
        else:
            kind = _coupling_kind(c)

            def task(nb, st, c=c, kind=kind):
                z = _initial(z0, st, nb)
                run = run_coupled(pdmp, c, z, st, kind=kind, keep_states=True)
                return gfun(run.approx_states[-1]) - gfun(run.exact_states[-1])

            diff = replica_map(task, n, s, block, workers)
            m, sd = diff.mean(), diff.std(ddof=1) / np.sqrt(n)
            est.append(m)
            err.append(abs(m))
        se.append(sd)
    result = SweepResult(ds, np.array(err), np.array(se), np.array(est), ref, ref_kind, method)
    if fit:
        result.fit = fit_loglog_order(ds, result.errors, result.stderrs)
    return result


def _terminal(pdmp, cfg, z0, reps, streams, gfun, block, workers):
    def task(n, st):
        z = _initial(z0, st, n)
        path = simulate_scheme(cfg, pdmp, z, st, record_events=False)
        return gfun(path.states[-1])

    return replica_map(task, reps, streams, block, workers)


def exact_terminal(pdmp, z0, T, reps, rng, g, block=BLOCK, workers=None):
    """``g(Z_T)`` for exact replicas."""
    def task(n, st):
        z = _initial(z0, st, n)
        zt, _ = advance_exact(pdmp, z, np.full(n, float(T)), st)
        return np.asarray(g(zt), dtype=float)

    return replica_map(task, reps, rng, block, workers)


# --------------------------------------------------------------- PDE oracle


@dataclass
class OracleResult:
    values: np.ndarray
    self_convergence: np.ndarray
    dx: float


def _solve_forward(pdmp, x0, v0, T, dx, cfl):
    """Upwind solve of the two-velocity forward equations; returns grid, ``p+``, ``p-`` densities."""
    nt = int(np.ceil(T / (cfl * dx)))
    dt = T / nt
    # upwind moves mass at most one cell per step, so nothing reaches the edges
    ncell = nt + 2
    x = x0 + dx * np.arange(-ncell, ncell + 1)
    ones = np.ones_like(x)
    lam_p = pdmp.rates.rates(np.column_stack([x, ones])).sum(axis=1)
    lam_m = pdmp.rates.rates(np.column_stack([x, -ones])).sum(axis=1)
    c = dt / dx
    pp = np.zeros_like(x)
    pm = np.zeros_like(x)
    (pp if v0 > 0 else pm)[ncell] = 1.0 / dx
    for _ in range(nt):
        # d/dt p+ = -d/dx p+ - lam+ p+ + lam- p-, d/dt p- = +d/dx p- - lam- p- + lam+ p+
        flux_p = pp - np.concatenate([[0.0], pp[:-1]])
        flux_m = pm - np.concatenate([pm[1:], [0.0]])
        swap = dt * (lam_m * pm - lam_p * pp)
        pp, pm = pp - c * flux_p + swap, pm - c * flux_m - swap
    return x, pp, pm


def forward_pde_oracle_1d(pdmp, z0, T, dx=1e-3, g=None, tol=None, cfl=0.5):
    """Expectations ``E g(X_T, V_T)`` of a 1-d two-velocity PDMP from its forward equations.

    ``g`` is a callable on ``(x, v)`` arrays or a list of them (default ``x``).
    The self-convergence estimate is the change when the grid is coarsened by 2;
    ``GridTooCoarse`` is raised when it exceeds ``tol``.
    """
    if pdmp.dim != 2 or pdmp.npos != 1:
        raise ValueError("the forward oracle handles 1-d position with velocity +-1")
    if not 0 < cfl <= 0.5:
        raise ValueError("CFL number must lie in (0, 0.5]")
    x0, v0 = float(z0[0]), float(z0[1])
    gs = [lambda x, v: x] if g is None else (list(g) if isinstance(g, (list, tuple)) else [g])

    def integrate(h):
        x, pp, pm = _solve_forward(pdmp, x0, v0, T, h, cfl)
        return np.array([h * np.sum(f(x, np.ones_like(x)) * pp + f(x, -np.ones_like(x)) * pm) for f in gs])

    fine = integrate(dx)
    coarse = integrate(2.0 * dx)
    selfc = np.abs(fine - coarse)
    if tol is not None and np.any(selfc > tol):
        raise GridTooCoarse(f"self-convergence estimate {selfc.max():.3g} exceeds tolerance {tol:.3g}")
    return OracleResult(fine, selfc, dx)
