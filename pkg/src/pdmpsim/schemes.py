"""Discretisation schemes with pluggable approximate flows, rates and kernels.

Fully discrete (FD) steps flow first and jump at the end of the step; partially
discrete (PD) steps jump at the sampled time inside the step; order-p steps
allow up to ``p`` events per step, lowering the approximation order after each.
All step functions act on batches of states.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import (as_batch, bisect_increasing, evaluate_flow, integrated_rates, kernel_index_from_uniform,
                   quadrature)
from .errors import NoExactFlow, NoVectorField
from .rng import as_streams, exponentials

# ------------------------------------------------------------ rate approximations


class RateApprox:
    """Approximate rate ``lambda_bar_i(z, s; delta, q)`` for ``0 <= s <= delta``.

    ``shape`` is ``"constant"``, ``"affine"`` or ``"general"``; it selects the
    inversion used for event times (exponential, quadratic root, bisection).
    """

    variant = "custom"
    shape = "general"

    def constant(self, ctx, z):
        raise NotImplementedError

    def affine(self, ctx, z):
        raise NotImplementedError

    def along(self, ctx, z, s):
        raise NotImplementedError

    def rates(self, ctx, z, s):
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(z),))
        if self.shape == "constant":
            return self.constant(ctx, z)
        if self.shape == "affine":
            b0, b1 = self.affine(ctx, z)
            return np.maximum(b0 + b1 * s[:, None], 0.0)
        return np.maximum(self.along(ctx, z, s), 0.0)

    def cumulative(self, ctx, z, t):
        """``int_0^t lambda_bar_i`` per kernel, ``t`` an ``(n,)`` array."""
        t = np.asarray(t, dtype=float)
        if self.shape == "constant":
            return self.constant(ctx, z) * t[:, None]
        if self.shape == "affine":
            b0, b1 = self.affine(ctx, z)
            tt = t[:, None]
            return b0 * tt + 0.5 * b1 * tt * tt
        return quadrature(lambda s: self.rates(ctx, z, s), t)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Frozen(RateApprox):
    variant, shape = "frozen", "constant"

    def constant(self, ctx, z):
        return ctx.pdmp.rates.rates(z)


class Endpoint(RateApprox):
    variant, shape = "endpoint", "constant"

    def constant(self, ctx, z):
        return ctx.pdmp.rates.rates(ctx.phi_delta(z))


class FiniteDifference(RateApprox):
    variant, shape = "finite_difference", "constant"

    def constant(self, ctx, z):
        hook = ctx.pdmp.hooks.get("finite_difference")
        if hook is None:
            raise ValueError(f"{ctx.pdmp.name}: no finite-difference rates registered")
        return np.maximum(hook(z, ctx.delta), 0.0)


class LinearSecondOrder(RateApprox):
    variant, shape = "linear_second_order", "affine"

    def affine(self, ctx, z):
        lam0 = ctx.pdmp.rates.rates(z)
        lam1 = ctx.pdmp.rates.rates(ctx.phi_delta(z))
        return lam0, (lam1 - lam0) / ctx.delta


class AlongIntegrator(RateApprox):
    variant, shape = "along_integrator", "general"

    def along(self, ctx, z, s):
        return ctx.pdmp.rates.rates(ctx.integ(z, s))


class Exact(RateApprox):
    variant, shape = "exact", "general"

    def along(self, ctx, z, s):
        return ctx.pdmp.rates.rates(evaluate_flow(ctx.pdmp.flow, z, s))

    def cumulative(self, ctx, z, t):
        return integrated_rates(ctx.pdmp, z, t)


RATE_VARIANTS = {cls.variant: cls for cls in
                 (Frozen, Endpoint, FiniteDifference, LinearSecondOrder, AlongIntegrator, Exact)}


def rate_approx(name):
    """Rate approximation by variant name."""
    try:
        return RATE_VARIANTS[name]()
    except KeyError:
        raise ValueError(f"unknown rate variant {name!r}; choose from {sorted(RATE_VARIANTS)}") from None


# ------------------------------------------------------------ flows and kernels


@dataclass
class FlowApprox:
    """Approximate flow. ``kind`` is ``exact``, ``euler``, ``leapfrog`` or ``custom``
    (then ``step(z, s, delta, p)`` is used)."""

    kind: str = "exact"
    step: object = None
    order: int = None
    flow: object = None

    @property
    def declared_order(self):
        if self.order is not None:
            return self.order
        return {"exact": np.inf, "euler": 1, "leapfrog": 2}.get(self.kind, 1)


@dataclass
class KernelApprox:
    """Approximate jump maps ``apply(z, idx, u, delta, q)``; ``None`` means exact kernels."""

    apply: object = None


def integrator_step(fa, z, s, delta=None, p=1, flow=None):
    """``phi_bar_s(z; delta, p)`` for the configured integrator."""
    flow = flow if flow is not None else fa.flow
    zb, single = as_batch(z)
    s = np.broadcast_to(np.asarray(s, dtype=float), (len(zb),))
    if fa.kind == "custom":
        out = fa.step(zb, s, delta, p)
    elif fa.kind == "exact":
        if flow is None:
            raise NoExactFlow("no flow bound to the integrator")
        out = evaluate_flow(flow, zb, s)
    elif fa.kind == "euler":
        if flow is None or flow.vector_field is None:
            raise NoVectorField("Euler needs a vector field")
        out = zb + s[:, None] * flow.vector_field(zb)
    elif fa.kind == "leapfrog":
        if flow is None or flow.grad_potential is None or flow.npos is None:
            raise NoVectorField("leapfrog needs a separable Hamiltonian flow")
        k = flow.npos
        q, mom = zb[:, :k], zb[:, k:]
        h = s[:, None]
        half = mom - 0.5 * h * flow.grad_potential(q)
        q_new = q + h * half
        out = np.concatenate([q_new, half - 0.5 * h * flow.grad_potential(q_new)], axis=1)
    else:
        raise ValueError(f"unknown integrator {fa.kind!r}")
    return out[0] if single else out


# ------------------------------------------------------------------- config


@dataclass
class SchemeConfig:
    """Scheme choice, approximations per order and the mesh.

    ``rate_approx`` / ``flow_approx`` / ``kernel_approx`` are single objects or
    dicts keyed by order; missing rate orders fall back to ``Frozen``. The mesh
    is ``mesh`` (explicit step sizes) or ``delta`` with horizon ``T``.
    """

    scheme: str = "PD"
    rate_approx: object = None
    flow_approx: object = None
    kernel_approx: object = None
    delta: float = None
    T: float = None
    mesh: object = None
    p: int = 1
    delta0: float = None

    def __post_init__(self):
        if self.scheme not in ("FD", "PD", "order_p"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.p < 1 or (self.scheme != "order_p" and self.p != 1):
            raise ValueError("order p >= 1 and only the order_p scheme takes p > 1")

    @classmethod
    def constant(cls, scheme, delta, T, **kw):
        return cls(scheme=scheme, delta=delta, T=T, **kw)

    def _pick(self, value, q, default):
        if isinstance(value, dict):
            return value.get(q, default)
        return value if value is not None else default

    def rate_for(self, q):
        if isinstance(self.rate_approx, dict):
            return self.rate_approx.get(q, Frozen())
        return self.rate_approx if self.rate_approx is not None else Frozen()

    def flow_for(self, q):
        fa = self._pick(self.flow_approx, q, None)
        if fa is None and isinstance(self.flow_approx, dict) and self.flow_approx:
            fa = self.flow_approx[min(self.flow_approx)]
        return fa if fa is not None else FlowApprox("exact")

    def kernel_for(self, q):
        return self._pick(self.kernel_approx, q, None)

    def steps(self):
        if self.mesh is not None:
            steps = np.asarray(self.mesh, dtype=float)
        else:
            if self.delta is None or self.T is None:
                raise ValueError("need either an explicit mesh or delta and T")
            n = int(np.floor(self.T / self.delta + 1e-9))
            steps = np.full(n, float(self.delta))
            rest = self.T - n * self.delta
            if rest > 1e-9 * self.delta:
                steps = np.append(steps, rest)
        if steps.size == 0 or np.any(steps <= 0):
            raise ValueError("mesh must contain positive step sizes")
        if self.delta0 is not None and np.any(steps > self.delta0):
            raise ValueError("step size above delta0")
        return steps

    def mesh_times(self):
        steps = self.steps()
        if self.mesh is not None:
            return np.concatenate([[0.0], np.cumsum(steps)])
        times = self.delta * np.arange(steps.size + 1, dtype=float)
        times[-1] = self.T
        return times

    def approximates_flow_or_kernels(self):
        flows = self.flow_approx.values() if isinstance(self.flow_approx, dict) else [self.flow_approx]
        kernels = self.kernel_approx.values() if isinstance(self.kernel_approx, dict) else [self.kernel_approx]
        flow_bad = any(fa is not None and fa.kind != "exact" for fa in flows)
        kern_bad = any(ka is not None and ka.apply is not None for ka in kernels)
        return flow_bad or kern_bad


class _Ctx:
    """Evaluation context of one order inside one step."""

    def __init__(self, cfg, pdmp, delta, q):
        self.cfg, self.pdmp, self.delta, self.q = cfg, pdmp, delta, q
        self.fa = cfg.flow_for(q)

    def integ(self, z, s):
        return integrator_step(self.fa, z, s, self.delta, self.q, flow=self.pdmp.flow)

    def phi_delta(self, z):
        if self.pdmp.flow.exact is not None:
            return self.pdmp.flow.exact(z, np.full(len(z), self.delta))
        return self.integ(z, self.delta)

    def jump(self, z, idx, u):
        ka = self.cfg.kernel_for(self.q)
        if ka is not None and ka.apply is not None:
            return ka.apply(z, idx, u, self.delta, self.q)
        return self.pdmp.kernels.apply(z, idx, u)


def make_ctx(cfg, pdmp, delta, q=1):
    return _Ctx(cfg, pdmp, delta, q)


# --------------------------------------------------------------- event times


def _affine_root(B0, B1, target):
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = B0 * B0 + 2.0 * B1 * target
        t = 2.0 * target / (B0 + np.sqrt(disc))
    return np.where((disc >= 0) & np.isfinite(t) & (t >= 0), t, np.inf)


def total_event_time(ra, ctx, z, E, offset, horizon):
    """Invert the total approximate hazard from ``offset``; ``inf`` past ``horizon``."""
    n = len(z)
    offset = np.broadcast_to(np.asarray(offset, dtype=float), (n,))
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (n,))
    if ra.shape == "constant":
        tot = ra.constant(ctx, z).sum(axis=1)
        with np.errstate(divide="ignore"):
            t = offset + np.where(tot > 0, E / tot, np.inf)
    elif ra.shape == "affine":
        b0, b1 = ra.affine(ctx, z)
        B0, B1 = b0.sum(axis=1), b1.sum(axis=1)
        target = B0 * offset + 0.5 * B1 * offset * offset + E
        t = _affine_root(B0, B1, target)
    else:
        def cum(tt):
            return ra.cumulative(ctx, z, tt).sum(axis=1)

        start = cum(offset)
        reach = cum(horizon) - start >= E
        t = np.full(n, np.inf)
        if reach.any():
            zr = z[reach]
            tr = bisect_increasing(lambda tt: ra.cumulative(ctx, zr, tt).sum(axis=1),
                                   start[reach] + E[reach], offset[reach], horizon[reach])
            t[reach] = tr
    return np.where(t <= horizon, t, np.inf)


def kernel_event_times(ra, ctx, z, E, offset, horizon):
    """Per-kernel clocks of the approximate rates, each inverted at its own ``E_i``."""
    n, m = E.shape
    off = np.broadcast_to(np.asarray(offset, dtype=float), (n,))[:, None]
    hor = np.broadcast_to(np.asarray(horizon, dtype=float), (n,))[:, None]
    if ra.shape == "constant":
        lam = ra.constant(ctx, z)
        with np.errstate(divide="ignore"):
            t = off + np.where(lam > 0, E / lam, np.inf)
    elif ra.shape == "affine":
        b0, b1 = ra.affine(ctx, z)
        t = _affine_root(b0, b1, b0 * off + 0.5 * b1 * off * off + E)
    else:
        t = np.full((n, m), np.inf)
        hh = np.repeat(hor, m, axis=1)
        oo = np.repeat(off, m, axis=1)

        def cum(tt):
            out = np.empty_like(tt)
            for i in range(m):
                out[:, i] = ra.cumulative(ctx, z, tt[:, i])[:, i]
            return out

        start = cum(oo)
        reach = cum(hh) - start >= E
        tb = bisect_increasing(cum, start + E, oo, hh)
        t = np.where(reach, tb, np.inf)
    return np.where(t <= hor, t, np.inf)


def _approx_event(ra, ctx, z, streams, offset=0.0, horizon=None):
    n = len(z)
    horizon = ctx.delta if horizon is None else horizon
    E = exponentials(streams["clock"], n)
    u = streams["kernel"].random(n)
    tau = total_event_time(ra, ctx, z, E, offset, horizon)
    idx = np.full(n, -1)
    hit = np.isfinite(tau)
    if hit.any():
        w = ra.rates(ctx, z[hit], tau[hit])
        ok = w.sum(axis=1) > 0
        w = np.where(ok[:, None], w, 1.0)
        idx[hit] = kernel_index_from_uniform(w, u[hit])
    return tau, idx


def rate_approx_eval(ra, pdmp, z, s, delta, q=1, cfg=None):
    """``lambda_bar_i(z, s; delta, q)`` for every kernel."""
    cfg = cfg if cfg is not None else SchemeConfig()
    zb, single = as_batch(z)
    out = ra.rates(_Ctx(cfg, pdmp, delta, q), zb, s)
    return out[0] if single else out


def sample_approx_event(ra, pdmp, z, delta, q, rng, cfg=None, offset=0.0):
    """Event time with hazard ``lambda_bar(z, .; delta, q)`` on ``[0, delta]`` and its kernel.

    Returns ``(None, None)`` for a single state without an event; batches get
    ``inf`` / ``-1`` instead.
    """
    cfg = cfg if cfg is not None else SchemeConfig()
    zb, single = as_batch(z)
    tau, idx = _approx_event(ra, _Ctx(cfg, pdmp, delta, q), zb, as_streams(rng), offset, delta)
    if single:
        if not np.isfinite(tau[0]):
            return None, None
        return float(tau[0]), int(idx[0])
    return tau, idx


# --------------------------------------------------------------------- steps


def _record(n):
    return {"n_events": np.zeros(n, dtype=np.int64), "tau": np.full(n, np.inf), "kernel": np.full(n, -1)}


def _fd_step(cfg, pdmp, z, delta, streams):
    ctx = _Ctx(cfg, pdmp, delta, 1)
    n = len(z)
    tilde = ctx.integ(z, delta)
    tau, idx = _approx_event(cfg.rate_for(1), ctx, z, streams, 0.0, delta)
    u = pdmp.kernels.draw(streams["noise"], n)
    ev = tau <= delta
    out = tilde.copy()
    if ev.any():
        out[ev] = ctx.jump(tilde[ev], idx[ev], u[ev])
    rec = _record(n)
    rec["n_events"][ev] = 1
    rec["tau"][ev] = tau[ev]
    rec["kernel"][ev] = idx[ev]
    return out, rec


def _pd_step(cfg, pdmp, z, delta, streams):
    ctx = _Ctx(cfg, pdmp, delta, 1)
    n = len(z)
    tau, idx = _approx_event(cfg.rate_for(1), ctx, z, streams, 0.0, delta)
    u = pdmp.kernels.draw(streams["noise"], n)
    ev = tau < delta
    out = np.empty_like(z)
    if (~ev).any():
        out[~ev] = ctx.integ(z[~ev], delta)
    if ev.any():
        te = tau[ev]
        post = ctx.jump(ctx.integ(z[ev], te), idx[ev], u[ev])
        out[ev] = ctx.integ(post, delta - te)
    rec = _record(n)
    rec["n_events"][ev] = 1
    rec["tau"][ev] = tau[ev]
    rec["kernel"][ev] = idx[ev]
    return out, rec


def resume_order_p(cfg, pdmp, anchor, offset, q, t_left, delta, streams, rec=None, clock=None):
    """Continue order-p steps from ``anchor`` after surviving ``offset`` time units.

    ``q`` holds the remaining number of allowed events per row and ``t_left``
    the time left in the step, counted from ``anchor + offset``. After the last
    allowed event the remainder is flowed with the order-1 integrator.
    """
    anchor = np.array(anchor, dtype=float, copy=True)
    n = len(anchor)
    offset = np.array(np.broadcast_to(offset, (n,)), dtype=float)
    q = np.array(np.broadcast_to(q, (n,)), dtype=np.int64)
    t_left = np.array(np.broadcast_to(t_left, (n,)), dtype=float)
    clock = np.zeros(n) if clock is None else np.array(clock, dtype=float)
    rec = _record(n) if rec is None else rec
    out = np.empty_like(anchor)
    act = np.arange(n)
    while act.size:
        keep = []
        q_now = q[act].copy()
        for qv in sorted(set(q_now.tolist()), reverse=True):
            g = act[q_now == qv]
            if qv == 0:
                ctx = _Ctx(cfg, pdmp, delta, 1)
                out[g] = ctx.integ(anchor[g], t_left[g])
                continue
            ctx = _Ctx(cfg, pdmp, delta, qv)
            horizon = offset[g] + t_left[g]
            tau, idx = _approx_event(cfg.rate_for(qv), ctx, anchor[g], streams, offset[g], horizon)
            u = pdmp.kernels.draw(streams["noise"], g.size)
            ev = tau < horizon
            quiet = g[~ev]
            if quiet.size:
                out[quiet] = ctx.integ(anchor[quiet], horizon[~ev])
            if ev.any():
                ge, te = g[ev], tau[ev]
                post = ctx.jump(ctx.integ(anchor[ge], te), idx[ev], u[ev])
                moved = te - offset[ge]
                clock[ge] += moved
                first = rec["n_events"][ge] == 0
                rec["tau"][ge[first]] = clock[ge[first]]
                rec["kernel"][ge[first]] = idx[ev][first]
                rec["n_events"][ge] += 1
                t_left[ge] -= moved
                anchor[ge] = post
                offset[ge] = 0.0
                q[ge] -= 1
                keep.append(ge)
        act = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=int)
    return out, rec


def _order_p_step(cfg, pdmp, z, delta, p, streams):
    return resume_order_p(cfg, pdmp, z, 0.0, p, delta, delta, streams)


def scheme_step(cfg, pdmp, z, delta, streams):
    """One step of the configured scheme on a batch."""
    if cfg.scheme == "FD":
        return _fd_step(cfg, pdmp, z, delta, streams)
    if cfg.scheme == "PD":
        return _pd_step(cfg, pdmp, z, delta, streams)
    return _order_p_step(cfg, pdmp, z, delta, cfg.p, streams)


def _public_step(fn, z, *args):
    zb, single = as_batch(z)
    out, rec = fn(zb, *args)
    if single:
        return out[0], {k: v[0] for k, v in rec.items()}
    return out, rec


def step_fd(cfg, pdmp, z, delta, rng):
    """One fully discrete step: flow, then jump at the end of the step if ``tau <= delta``."""
    return _public_step(lambda zb: _fd_step(cfg, pdmp, zb, delta, as_streams(rng)), z)


def step_pd(cfg, pdmp, z, delta, rng):
    """One partially discrete step: at most one jump, placed at ``tau < delta``."""
    return _public_step(lambda zb: _pd_step(cfg, pdmp, zb, delta, as_streams(rng)), z)


def step_order_p(cfg, pdmp, z, delta, p, rng):
    """One order-p step: at most ``p`` events, approximation order drops after each."""
    return _public_step(lambda zb: _order_p_step(cfg, pdmp, zb, delta, p, as_streams(rng)), z)


@dataclass
class DiscretePath:
    mesh_times: np.ndarray
    states: list
    n_events: np.ndarray = None
    event_tau: np.ndarray = None
    event_kernel: np.ndarray = None
    extra: dict = field(default_factory=dict)


def simulate_scheme(cfg, pdmp, z0, rng, observer=None, record_events=True):
    """Iterate the configured step over the mesh.

    With ``observer`` the path stores ``observer(states)`` at each mesh point
    instead of the states themselves.
    """
    streams = as_streams(rng)
    zb, single = as_batch(z0)
    z = zb.copy()
    steps = cfg.steps()
    observe = observer if observer is not None else (lambda s: s.copy())
    obs = [observe(z)]
    nev, taus, kers = [], [], []
    for delta in steps:
        z, rec = scheme_step(cfg, pdmp, z, delta, streams)
        obs.append(observe(z))
        if record_events:
            nev.append(rec["n_events"])
            taus.append(rec["tau"])
            kers.append(rec["kernel"])
    if single and observer is None:
        obs = [o[0] for o in obs]
    path = DiscretePath(mesh_times=cfg.mesh_times(), states=obs)
    if record_events:
        path.n_events = np.array(nev)
        path.event_tau = np.array(taus)
        path.event_kernel = np.array(kers)
        if single:
            path.n_events, path.event_tau, path.event_kernel = (a[:, 0] for a in
                                                                 (path.n_events, path.event_tau, path.event_kernel))
    return path
