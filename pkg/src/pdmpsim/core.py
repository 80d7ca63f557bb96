"""PDMP characteristics and exact simulation.

States are float arrays. A batch of states is an ``(n, D)`` array and every
model callable is written for batches; single states of shape ``(D,)`` are
accepted by the public functions and returned in the same shape.

Exact event times are generated, in order of preference, by per-kernel
closed-form inversion of the integrated rate, by bisection on a closed-form
integrated rate, or by Poisson thinning against an affine bound.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EventStorm, NoExactFlow, NoSimulationPath, ThinningBoundViolated, ZeroTotalRate
from .rng import as_streams, exponentials

MAX_EVENTS = 10**6
BISECT_TOL = 1e-12


@dataclass
class Flow:
    """Deterministic motion. ``vector_field(z)`` and ``exact(z, t)`` take batches,
    ``t`` being an ``(n,)`` array. ``grad_potential`` marks a separable
    Hamiltonian flow ``(q, p)`` with ``q`` the first ``npos`` coordinates."""

    vector_field: object = None
    exact: object = None
    lipschitz_hint: float = None
    grad_potential: object = None
    npos: int = None


@dataclass
class RateFamily:
    """Event rates ``rates(z) -> (n, m)``.

    Optional closed forms:
      ``inverse(z, E, extra)`` solves ``int_0^t lambda_i(phi_s z) ds + extra_i t = E_i``
      per kernel (``inf`` when never reached);
      ``integrated(z, t)`` returns ``int_0^t lambda_i(phi_s z) ds``;
      ``bound(z, horizon)`` returns ``(a, b)`` with total rate ``<= a + b s`` on the horizon.
    """

    m: int
    rates: object
    inverse: object = None
    integrated: object = None
    bound: object = None


@dataclass
class KernelFamily:
    """Jump maps. ``apply(z, idx, u)`` realises ``F_idx(z, u)`` row-wise and
    ``noise(gen, n)`` draws ``u`` with shape ``(n, noise_dim)``."""

    m: int
    apply: object
    noise_dim: int = 0
    noise: object = None

    def draw(self, gen, n):
        if self.noise is None:
            return np.zeros((n, 0))
        return self.noise(gen, n)


@dataclass
class PdmpSpec:
    flow: Flow
    rates: RateFamily
    kernels: KernelFamily
    dim: int
    npos: int
    name: str = "pdmp"
    hooks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rates.m != self.kernels.m:
            raise ValueError("rates.m and kernels.m differ")

    @property
    def m(self):
        return self.rates.m


@dataclass
class SkeletonPath:
    event_times: np.ndarray
    pre_jump_states: np.ndarray
    post_jump_states: np.ndarray
    kernel_indices: np.ndarray
    terminal_time: float
    terminal_state: np.ndarray
    initial_state: np.ndarray
    flow: Flow = None

    @property
    def n_events(self):
        return len(self.event_times)

    def state_at(self, t):
        """Evaluate the path at time ``t`` by flowing from the last event."""
        t = float(t)
        if t < 0 or t > self.terminal_time:
            raise ValueError("t outside [0, T]")
        k = np.searchsorted(self.event_times, t, side="right")
        if k == 0:
            t0, z = 0.0, self.initial_state
        else:
            t0, z = self.event_times[k - 1], self.post_jump_states[k - 1]
        return evaluate_flow(self.flow, z, t - t0)


def as_batch(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z[None, :], True
    return z, False


def _times(t, n):
    return np.broadcast_to(np.asarray(t, dtype=float), (n,)).astype(float)


def evaluate_flow(flow, z, t):
    """Exact flow ``phi_t(z)``."""
    if flow.exact is None:
        raise NoExactFlow("model provides no closed-form flow")
    zb, single = as_batch(z)
    out = flow.exact(zb, _times(t, len(zb)))
    return out[0] if single else out


def _flow(pdmp, z, t):
    if pdmp.flow.exact is None:
        raise NoExactFlow(f"{pdmp.name}: no closed-form flow")
    return pdmp.flow.exact(z, _times(t, len(z)))


def kernel_index_from_uniform(weights, u):
    """Inverse-CDF draw per row; zero-weight kernels are never selected."""
    weights = np.asarray(weights, dtype=float)
    cum = np.cumsum(weights, axis=-1)
    total = cum[..., -1]
    if np.any(total <= 0):
        raise ZeroTotalRate("all kernel weights are zero")
    target = np.asarray(u) * total
    idx = (cum <= target[..., None]).sum(axis=-1)
    return np.minimum(idx, weights.shape[-1] - 1)


def sample_kernel_index(weights, rng):
    """Draw index ``i`` with probability ``weights[i] / sum(weights)``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1:
        raise ValueError("weights must be a vector")
    gen = as_streams(rng)["kernel"]
    return int(kernel_index_from_uniform(w[None, :], gen.random(1))[0])


def bisect_increasing(func, target, lo, hi, tol=BISECT_TOL, maxiter=200):
    """Vectorised bisection for nondecreasing ``func`` with ``func(hi) >= target``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(maxiter):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        below = func(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def quadrature(fun, t, panels=8):
    """Composite Gauss-Legendre integral of ``fun(s) -> (n, m)`` over ``[0, t]``."""
    t = np.asarray(t, dtype=float)
    h = t / panels
    total = 0.0
    for k in range(panels):
        for node, weight in zip(_GL_NODES, _GL_WEIGHTS):
            s = h * (k + 0.5 + 0.5 * node)
            total = total + (0.5 * weight * h)[:, None] * fun(s)
    return total


def integrated_rates(pdmp, z, t):
    """``int_0^t lambda_i(phi_s z) ds`` per kernel, closed form when registered."""
    t = _times(t, len(z))
    if pdmp.rates.integrated is not None:
        return pdmp.rates.integrated(z, t)
    return quadrature(lambda s: pdmp.rates.rates(_flow(pdmp, z, s)), t)


def exact_kernel_clocks(pdmp, z, E, horizon, extra=None):
    """Per-kernel first times solving ``Lambda_i(t) + extra_i t = E_i``.

    Times beyond ``horizon`` come back as ``inf``.
    """
    n, m = E.shape
    horizon = _times(horizon, n)
    if extra is None:
        extra = np.zeros((n, m))
    if pdmp.rates.inverse is not None:
        t = pdmp.rates.inverse(z, E, extra)
    else:
        h = np.repeat(horizon[:, None], m, axis=1)

        def cum(tt):
            out = np.empty_like(tt)
            for i in range(m):
                out[:, i] = integrated_rates(pdmp, z, tt[:, i])[:, i]
            return out + extra * tt

        reach = cum(h) >= E
        t = bisect_increasing(cum, E, np.zeros_like(h), h)
        t = np.where(reach, t, np.inf)
    return np.where(t <= horizon[:, None], t, np.inf)


def _next_event(pdmp, z, horizon, streams):
    """Next event time and kernel for each row, ``(inf, -1)`` past the horizon."""
    n = len(z)
    horizon = _times(horizon, n)
    rates = pdmp.rates
    m = rates.m
    if pdmp.flow.exact is None:
        raise NoExactFlow(f"{pdmp.name}: no closed-form flow")
    if rates.inverse is not None:
        E = exponentials(streams["clock"], (n, m))
        t = rates.inverse(z, E, np.zeros((n, m)))
        tau = t.min(axis=1)
        idx = t.argmin(axis=1)
    elif rates.integrated is not None:
        E = exponentials(streams["clock"], n)

        def cum(tt):
            return rates.integrated(z, tt).sum(axis=1)

        reach = cum(horizon) >= E
        tau = np.full(n, np.inf)
        idx = np.full(n, -1)
        if reach.any():
            zr = z[reach]
            tr = bisect_increasing(lambda tt: rates.integrated(zr, tt).sum(axis=1), E[reach],
                                   np.zeros(reach.sum()), horizon[reach])
            tau[reach] = tr
            w = rates.rates(_flow(pdmp, zr, tr))
            w = np.where(w.sum(axis=1, keepdims=True) > 0, w, 1.0)
            idx[reach] = kernel_index_from_uniform(w, streams["kernel"].random(reach.sum()))
    elif rates.bound is not None:
        tau, idx = _thinning(pdmp, z, horizon, streams)
    else:
        raise NoSimulationPath(f"{pdmp.name}: no inversion and no thinning bound")
    fire = tau <= horizon
    return np.where(fire, tau, np.inf), np.where(fire, idx, -1)


def affine_hazard_inverse(a, b, E):
    """Smallest ``s >= 0`` with ``a s + b s^2 / 2 = E`` for ``a, b >= 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(a * a + 2.0 * b * E)
        s = 2.0 * E / (a + disc)
    return np.where(np.isfinite(s), s, np.inf)


def _thinning(pdmp, z, horizon, streams):
    n = len(z)
    tau = np.full(n, np.inf)
    idx = np.full(n, -1)
    s0 = np.zeros(n)
    act = np.arange(n)
    while act.size:
        zc = _flow(pdmp, z[act], s0[act])
        left = horizon[act] - s0[act]
        a, b = pdmp.rates.bound(zc, left)
        a = np.broadcast_to(a, act.shape).astype(float)
        b = np.broadcast_to(b, act.shape).astype(float)
        s = affine_hazard_inverse(a, b, exponentials(streams["clock"], act.size))
        inside = s <= left
        u_acc = streams["accept"].random(act.size)
        act, zc, s, a, b, u_acc = act[inside], zc[inside], s[inside], a[inside], b[inside], u_acc[inside]
        if not act.size:
            break
        lam = pdmp.rates.rates(_flow(pdmp, zc, s))
        tot = lam.sum(axis=1)
        bound = a + b * s
        if np.any(tot > bound * (1 + 1e-9) + 1e-12):
            raise ThinningBoundViolated(f"{pdmp.name}: rate {tot.max():.6g} above bound")
        acc = u_acc * bound <= tot
        acc &= tot > 0
        if acc.any():
            ia = act[acc]
            tau[ia] = s0[ia] + s[acc]
            idx[ia] = kernel_index_from_uniform(lam[acc], streams["kernel"].random(acc.sum()))
        s0[act[~acc]] += s[~acc]
        act = act[~acc]
    return tau, idx


def next_event_time_exact(pdmp, z, horizon, rng):
    """Next event ``(tau, kernel)`` of the exact process, ``(None, None)`` past the horizon."""
    zb, _ = as_batch(z)
    tau, idx = _next_event(pdmp, zb, horizon, as_streams(rng))
    if not np.isfinite(tau[0]):
        return None, None
    return float(tau[0]), int(idx[0])


@dataclass
class EventLog:
    replica: list = field(default_factory=list)
    time: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    kernel: list = field(default_factory=list)


def advance_exact(pdmp, z, horizon, streams, max_events=MAX_EVENTS, log=None, t0=0.0, counts=None):
    """Run each row of the batch ``z`` exactly for ``horizon`` time units.

    Returns the end states and the number of events per row. ``counts`` carries
    event totals across calls for the storm guard.
    """
    z = np.array(z, dtype=float, copy=True)
    n = len(z)
    remaining = _times(horizon, n).copy()
    elapsed = np.zeros(n)
    nev = np.zeros(n, dtype=np.int64)
    base = np.zeros(n, dtype=np.int64) if counts is None else counts
    act = np.flatnonzero(remaining > 0)
    while act.size:
        tau, idx = _next_event(pdmp, z[act], remaining[act], streams)
        fire = np.isfinite(tau)
        done = act[~fire]
        if done.size:
            z[done] = _flow(pdmp, z[done], remaining[done])
            remaining[done] = 0.0
        act, tau, idx = act[fire], tau[fire], idx[fire]
        if not act.size:
            break
        pre = _flow(pdmp, z[act], tau)
        post = pdmp.kernels.apply(pre, idx, pdmp.kernels.draw(streams["noise"], act.size))
        if log is not None:
            log.replica.extend(act.tolist())
            log.time.extend((t0 + elapsed[act] + tau).tolist())
            log.pre.extend(pre)
            log.post.extend(post)
            log.kernel.extend(idx.tolist())
        z[act] = post
        elapsed[act] += tau
        remaining[act] = np.maximum(remaining[act] - tau, 0.0)
        nev[act] += 1
        if np.any(base[act] + nev[act] > max_events):
            raise EventStorm(f"{pdmp.name}: more than {max_events} events on a path")
        act = act[remaining[act] > 0]
    if counts is not None:
        counts += nev
    return z, nev


def simulate_exact(pdmp, z0, T, rng, max_events=MAX_EVENTS):
    """Sample one exact path on ``[0, T]``."""
    if T <= 0:
        raise ValueError("T must be positive")
    zb, _ = as_batch(z0)
    log = EventLog()
    end, _ = advance_exact(pdmp, zb[:1], T, as_streams(rng), max_events=max_events, log=log)
    D = zb.shape[1]
    return SkeletonPath(
        event_times=np.asarray(log.time, dtype=float),
        pre_jump_states=np.asarray(log.pre, dtype=float).reshape(-1, D),
        post_jump_states=np.asarray(log.post, dtype=float).reshape(-1, D),
        kernel_indices=np.asarray(log.kernel, dtype=int),
        terminal_time=float(T),
        terminal_state=end[0],
        initial_state=zb[0].copy(),
        flow=pdmp.flow,
    )


def advance_exact_on_mesh(pdmp, z, mesh, streams, observer=None, max_events=MAX_EVENTS):
    """Evaluate the exact process at every mesh time; returns observer values per time."""
    z = np.array(z, dtype=float, copy=True)
    counts = np.zeros(len(z), dtype=np.int64)
    observe = observer if observer is not None else (lambda s: s.copy())
    out = [observe(z)]
    prev = 0.0
    for t in mesh[1:]:
        z, _ = advance_exact(pdmp, z, t - prev, streams, max_events=max_events, counts=counts)
        out.append(observe(z))
        prev = t
    return z, out
