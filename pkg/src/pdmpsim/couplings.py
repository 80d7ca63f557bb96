"""Exact process and scheme run jointly on shared randomness.

Three constructions:
  synchronous clocks (Wasserstein): both processes invert their per-kernel
  hazards at the same exponentials and share the kernel noise;
  thinning (total variation): candidates from the summed hazard
  ``lambda_bar_i + lambda_i + 1`` are accepted by each process with one shared
  uniform, so the two stay equal unless exactly one accepts;
  higher order: the thinning coupling repeated for up to ``p`` coupled jumps per step.

Once a thinning coupling separates the pair, the two marginals are simulated
independently for the rest of the run and never re-merged.
"""

from dataclasses import dataclass

import numpy as np

from .core import (_flow, advance_exact, as_batch, bisect_increasing, exact_kernel_clocks, integrated_rates,
                   kernel_index_from_uniform)
from .errors import InvalidConfig, NoExactFlow
from .models import linear_hinge_inverse, subsampling_step
from .rng import as_streams, exponentials
from .schemes import kernel_event_times, make_ctx, resume_order_p, scheme_step


def distance(z, zb, npos, norm="l1"):
    diff = z[:, :npos] - zb[:, :npos]
    if norm == "l1":
        return np.abs(diff).sum(axis=1)
    if norm == "l2":
        return np.sqrt((diff * diff).sum(axis=1))
    raise ValueError(f"unknown norm {norm!r}")


# --------------------------------------------------------- synchronous clocks


def wasserstein_step(pdmp, cfg, z, zb, delta, streams):
    """Batch form of the synchronous coupling for one step."""
    if cfg.scheme not in ("FD", "PD"):
        raise InvalidConfig("the synchronous coupling is defined for FD and PD schemes")
    n, m = len(z), pdmp.m
    E = exponentials(streams["clock"], (n, m))
    u = pdmp.kernels.draw(streams["noise"], n)

    t_ex = exact_kernel_clocks(pdmp, z, E, delta)
    tau, I = t_ex.min(axis=1), t_ex.argmin(axis=1)
    ev = np.isfinite(tau)
    z_new = np.empty_like(z)
    if (~ev).any():
        z_new[~ev] = _flow(pdmp, z[~ev], delta)
    if ev.any():
        post = pdmp.kernels.apply(_flow(pdmp, z[ev], tau[ev]), I[ev], u[ev])
        z_new[ev], _ = advance_exact(pdmp, post, delta - tau[ev], streams.sub("exact"))

    ctx = make_ctx(cfg, pdmp, delta, 1)
    t_ap = kernel_event_times(cfg.rate_for(1), ctx, zb, E, 0.0, delta)
    taub, Ib = t_ap.min(axis=1), t_ap.argmin(axis=1)
    zb_new = np.empty_like(zb)
    if cfg.scheme == "FD":
        tilde = ctx.integ(zb, delta)
        evb = taub <= delta
        zb_new[:] = tilde
        if evb.any():
            zb_new[evb] = ctx.jump(tilde[evb], Ib[evb], u[evb])
    else:
        evb = taub < delta
        if (~evb).any():
            zb_new[~evb] = ctx.integ(zb[~evb], delta)
        if evb.any():
            te = taub[evb]
            post = ctx.jump(ctx.integ(zb[evb], te), Ib[evb], u[evb])
            zb_new[evb] = ctx.integ(post, delta - te)
    return z_new, zb_new


def couple_wasserstein_step(pdmp, cfg, z, zb, delta, rng):
    """One step of the synchronous coupling; returns ``(exact, approx)``."""
    za, single = as_batch(z)
    zba, _ = as_batch(zb)
    out, outb = wasserstein_step(pdmp, cfg, za, zba, delta, as_streams(rng))
    return (out[0], outb[0]) if single else (out, outb)


# ------------------------------------------------------------ thinning coupling


def _check_tv(pdmp, cfg):
    if cfg.scheme == "FD":
        raise InvalidConfig("the thinning coupling pairs the exact process with PD or order-p schemes")
    if cfg.approximates_flow_or_kernels():
        raise InvalidConfig("the thinning coupling needs the exact flow and exact kernels in the scheme")
    if pdmp.flow.exact is None:
        raise NoExactFlow(f"{pdmp.name}: the thinning coupling needs a closed-form flow")


def _tot_clocks(pdmp, ra, ctx, w, anchor, offset, E, horizon):
    """Per-kernel first times of ``lambda_bar_i(anchor, offset + t) + lambda_i(phi_t w) + 1``."""
    n, m = E.shape
    const = None
    if ra.shape == "constant":
        const = ra.constant(ctx, anchor)
    elif ra.shape == "affine":
        b0, b1 = ra.affine(ctx, anchor)
        if not np.any(b1):
            const = b0
    if const is not None and pdmp.rates.inverse is not None:
        t = pdmp.rates.inverse(w, E, const + 1.0)
    else:
        hh = np.repeat(horizon[:, None], m, axis=1)
        if ra.shape == "affine":
            b0, b1 = ra.affine(ctx, anchor)

            def approx_cum(r, s):
                return b0[r] * s[:, None] + 0.5 * b1[r] * (s * s)[:, None]
        else:
            def approx_cum(r, s):
                return ra.cumulative(ctx, anchor[r], s)
        base = approx_cum(slice(None), offset)

        def cum(tt, r):
            out = np.empty_like(tt)
            for i in range(m):
                ap = approx_cum(r, offset[r] + tt[:, i])[:, i] - base[r, i]
                out[:, i] = ap + integrated_rates(pdmp, w[r], tt[:, i])[:, i] + tt[:, i]
            return out

        every = np.arange(n)
        reach = cum(hh, every) >= E
        t = np.full((n, m), np.inf)
        # bisect only the rows where some clock fires inside the horizon
        r = np.flatnonzero(reach.any(axis=1))
        if r.size:
            hit = bisect_increasing(lambda tt: cum(tt, r), E[r], np.zeros((r.size, m)), hh[r])
            t[r] = np.where(reach[r], hit, np.inf)
    return np.where(t <= horizon[:, None], t, np.inf)


def tv_coupled_step(pdmp, cfg, z, zb, equal, delta, streams, p=None, cap=None):
    """Thinning coupling (``p = 1``) or its order-p recursion for one step.

    Returns ``(exact, approx, still_equal)``. Rows already separated run
    independent marginals.
    """
    _check_tv(pdmp, cfg)
    p = cfg.p if p is None else p
    m = pdmp.m
    z_out = np.array(z, dtype=float, copy=True)
    zb_out = np.array(zb, dtype=float, copy=True)
    eq_out = np.array(equal, dtype=bool, copy=True)
    ex_streams, ap_streams = streams.sub("exact"), streams.sub("approx")

    apart = np.flatnonzero(~eq_out)
    if apart.size:
        z_out[apart], _ = advance_exact(pdmp, z[apart], delta, ex_streams)
        zb_out[apart] = _marginal_step(cfg, pdmp, zb[apart], delta, p, ap_streams)

    rows = np.flatnonzero(eq_out)
    w = z_out[rows].copy()
    anchor = w.copy()
    offset = np.zeros(rows.size)
    q = np.full(rows.size, p, dtype=np.int64)
    t_left = np.full(rows.size, float(delta))
    props = np.zeros(rows.size, dtype=np.int64)
    act = np.arange(rows.size)

    def separate(local, ex_state, ex_left, ap_anchor, ap_offset, ap_q, ap_left):
        g = rows[local]
        eq_out[g] = False
        z_out[g], _ = advance_exact(pdmp, ex_state, ex_left, ex_streams)
        zb_out[g], _ = resume_order_p(cfg, pdmp, ap_anchor, ap_offset, ap_q, ap_left, delta, ap_streams)

    while act.size:
        nxt = []
        q_now = q[act].copy()
        for qv in sorted(set(q_now.tolist()), reverse=True):
            g = act[q_now == qv]
            ra = cfg.rate_for(qv)
            ctx = make_ctx(cfg, pdmp, delta, qv)
            E = exponentials(streams["clock"], (g.size, m))
            ubar = streams["accept"].random(g.size)
            u = pdmp.kernels.draw(streams["noise"], g.size)
            t = _tot_clocks(pdmp, ra, ctx, w[g], anchor[g], offset[g], E, t_left[g])
            tstar, istar = t.min(axis=1), t.argmin(axis=1)
            props[g] += 1

            none = ~np.isfinite(tstar)
            if none.any():
                gn = g[none]
                end = _flow(pdmp, w[gn], t_left[gn])
                z_out[rows[gn]] = end
                zb_out[rows[gn]] = end
            cand = ~none
            if not cand.any():
                continue
            gc, tc, ic, uc, ub = g[cand], tstar[cand], istar[cand], u[cand], ubar[cand]
            ws = _flow(pdmp, w[gc], tc)
            lam_ex = pdmp.rates.rates(ws)[np.arange(gc.size), ic]
            lam_ap = ra.rates(ctx, anchor[gc], offset[gc] + tc)[np.arange(gc.size), ic]
            tot = lam_ex + lam_ap + 1.0
            scaled = ub * tot
            acc_ex, acc_ap = scaled < lam_ex, scaled < lam_ap
            left_after = t_left[gc] - tc

            both = acc_ex & acc_ap
            if both.any():
                gb = gc[both]
                post = pdmp.kernels.apply(ws[both], ic[both], uc[both])
                q[gb] -= 1
                done = q[gb] == 0
                if done.any():
                    gd = gb[done]
                    zb_out[rows[gd]] = _flow(pdmp, post[done], left_after[both][done])
                    z_out[rows[gd]], cnt = advance_exact(pdmp, post[done], left_after[both][done], ex_streams)
                    eq_out[rows[gd]] = cnt == 0
                more = ~done
                if more.any():
                    gm = gb[more]
                    w[gm] = post[more]
                    anchor[gm] = post[more]
                    offset[gm] = 0.0
                    t_left[gm] = left_after[both][more]
                    nxt.append(gm)

            one = acc_ex ^ acc_ap
            if one.any():
                sel = np.flatnonzero(one)
                ex_post = ws[sel].copy()
                jx = acc_ex[sel]
                if jx.any():
                    ex_post[jx] = pdmp.kernels.apply(ws[sel][jx], ic[sel][jx], uc[sel][jx])
                ja = acc_ap[sel]
                ap_anchor = anchor[gc][sel].copy()
                if ja.any():
                    ap_anchor[ja] = pdmp.kernels.apply(ws[sel][ja], ic[sel][ja], uc[sel][ja])
                ap_offset = np.where(ja, 0.0, offset[gc][sel] + tc[sel])
                ap_q = np.where(ja, qv - 1, qv)
                separate(gc[sel], ex_post, left_after[sel], ap_anchor, ap_offset, ap_q, left_after[sel])

            neither = ~(acc_ex | acc_ap)
            if neither.any():
                gr = gc[neither]
                w[gr] = ws[neither]
                offset[gr] += tc[neither]
                t_left[gr] = left_after[neither]
                nxt.append(gr)

        act = np.sort(np.concatenate(nxt)) if nxt else np.array([], dtype=int)
        if cap is not None and act.size:
            over = act[props[act] >= cap]
            if over.size:
                separate(over, w[over], t_left[over], anchor[over], offset[over], q[over], t_left[over])
                act = act[props[act] < cap]
    return z_out, zb_out, eq_out


def _marginal_step(cfg, pdmp, zb, delta, p, streams):
    if p == 1 and cfg.scheme == "PD":
        return scheme_step(cfg, pdmp, zb, delta, streams)[0]
    return resume_order_p(cfg, pdmp, zb, 0.0, p, delta, delta, streams)[0]


def couple_tv_step(pdmp, cfg, z, delta, rng):
    """One step of the thinning coupling from equal states; returns ``(exact, approx, still_equal)``."""
    za, single = as_batch(z)
    out, outb, eq = tv_coupled_step(pdmp, cfg, za, za, np.ones(len(za), bool), delta, as_streams(rng), p=1)
    return (out[0], outb[0], bool(eq[0])) if single else (out, outb, eq)


def couple_higher_order_step(pdmp, cfg, z, zb, delta, p, rng, cap=None):
    """One step of the order-p thinning coupling; returns ``(exact, approx)``.

    Rows where ``z`` and ``zb`` differ run independent marginals. Beyond
    ``cap`` proposals (default ``p + 2``) the pair continues independently.
    """
    za, single = as_batch(z)
    zba, _ = as_batch(zb)
    equal = np.all(za == zba, axis=1)
    out, outb, _ = tv_coupled_step(pdmp, cfg, za, zba, equal, delta, as_streams(rng), p=p,
                                   cap=p + 2 if cap is None else cap)
    return (out[0], outb[0]) if single else (out, outb)


# ------------------------------------------------------------- subsampling


def subsampling_coupled_step(model, pdmp, z, zb, equal, delta, streams):
    """Thinning coupling between exact subsampled ZZS and its frozen-rate step, sharing ``J``."""
    n, d = len(z), model.d
    z_out = np.array(z, dtype=float, copy=True)
    zb_out = np.array(zb, dtype=float, copy=True)
    eq_out = np.array(equal, dtype=bool, copy=True)
    ex_streams, ap_streams = streams.sub("exact"), streams.sub("approx")
    J = streams["subsample"].integers(0, model.N, n)

    apart = np.flatnonzero(~eq_out)
    if apart.size:
        z_out[apart], _ = advance_exact(pdmp, z[apart], delta, ex_streams)
        zb_out[apart], _ = subsampling_step(model, zb[apart], delta, ap_streams, update="pd")

    rows = np.flatnonzero(eq_out)
    anchor = z_out[rows].copy()
    w = anchor.copy()
    lam_ap_all = model.term_rates(anchor, J[rows])
    sum_anchor = model.all_term_rates(anchor).sum(axis=1)
    slope = float(np.sum(model.potential.term_lipschitz)) * np.sqrt(d)
    elapsed = np.zeros(rows.size)
    first = np.ones(rows.size, dtype=bool)
    act = np.arange(rows.size)

    def approx_rest(local, state, start):
        """Frozen-rate PD continuation after surviving until ``start``."""
        lam = lam_ap_all[local]
        tot = lam.sum(axis=1)
        E = exponentials(ap_streams["clock"], local.size)
        uk = ap_streams["kernel"].random(local.size)
        with np.errstate(divide="ignore"):
            tau = start + np.where(tot > 0, E / tot, np.inf)
        out = _flow(pdmp, state, delta - start)
        ev = tau < delta
        if ev.any():
            k = kernel_index_from_uniform(lam[ev], uk[ev])
            mid = _flow(pdmp, state[ev], tau[ev] - start[ev])
            mid = model.apply_kernel(mid, k, None)
            out[ev] = _flow(pdmp, mid, delta - tau[ev])
        return out

    while act.size:
        E = exponentials(streams["clock"], (act.size, d))
        ubar = streams["accept"].random(act.size)
        uthin = streams["thin"].random(act.size)
        fresh = streams["subsample"].integers(0, model.N, act.size)
        left = delta - elapsed[act]
        lead = model.all_term_rates(w[act]).sum(axis=1) + sum_anchor[act] + 1.0
        t = linear_hinge_inverse(lead, slope, 0.0, E)
        t = np.where(t <= left[:, None], t, np.inf)
        tstar, istar = t.min(axis=1), t.argmin(axis=1)
        none = ~np.isfinite(tstar)
        if none.any():
            gn = act[none]
            end = _flow(pdmp, w[gn], delta - elapsed[gn])
            z_out[rows[gn]] = end
            zb_out[rows[gn]] = end
        c = ~none
        gc, tc, ic = act[c], tstar[c], istar[c]
        ar = np.arange(gc.size)
        ws = _flow(pdmp, w[gc], tc)
        bound_i = lead[c][ar, ic] + slope * tc
        all_ws = model.all_term_rates(ws)
        tot_i = all_ws.sum(axis=1)[ar, ic] + sum_anchor[gc][ar, ic] + 1.0
        real = uthin[c] * bound_i < tot_i
        elapsed[gc] += tc
        w[gc] = ws
        nxt = [gc[~real]]
        if real.any():
            gr, ir, wr = gc[real], ic[real], ws[real]
            jx = np.where(first[gr], J[rows[gr]], fresh[c][real])
            first[gr] = False
            lam_ex = np.maximum(wr[:, d:] * model.potential.term_grad(wr[:, :d], jx), 0.0)[np.arange(gr.size), ir]
            lam_ap = lam_ap_all[gr][np.arange(gr.size), ir]
            scaled = ubar[c][real] * tot_i[real]
            acc_ex, acc_ap = scaled < lam_ex, scaled < lam_ap
            rest = delta - elapsed[gr]
            flipped = model.apply_kernel(wr, ir, None)
            both = acc_ex & acc_ap
            if both.any():
                gb = gr[both]
                zb_out[rows[gb]] = _flow(pdmp, flipped[both], rest[both])
                z_out[rows[gb]], cnt = advance_exact(pdmp, flipped[both], rest[both], ex_streams)
                eq_out[rows[gb]] = cnt == 0
            one = acc_ex ^ acc_ap
            if one.any():
                go = gr[one]
                eq_out[rows[go]] = False
                ex_state = np.where(acc_ex[one][:, None], flipped[one], wr[one])
                z_out[rows[go]], _ = advance_exact(pdmp, ex_state, rest[one], ex_streams)
                ja = acc_ap[one]
                ap = np.empty_like(ex_state)
                if ja.any():
                    ap[ja] = _flow(pdmp, flipped[one][ja], rest[one][ja])
                if (~ja).any():
                    ap[~ja] = approx_rest(go[~ja], wr[one][~ja], elapsed[go[~ja]])
                zb_out[rows[go]] = ap
            nxt.append(gr[~(acc_ex | acc_ap)])
        act = np.sort(np.concatenate(nxt))
    return z_out, zb_out, eq_out


def couple_subsampling_step(model, pdmp, z, delta, rng):
    """One step of the subsampling coupling from equal states; ``(exact, approx, still_equal)``.

    ``pdmp`` is the exact subsampled process, ``model.to_pdmp()`` if ``None``.
    """
    pdmp = pdmp if pdmp is not None else model.to_pdmp()
    za, single = as_batch(z)
    out, outb, eq = subsampling_coupled_step(model, pdmp, za, za, np.ones(len(za), bool), delta,
                                             as_streams(rng))
    return (out[0], outb[0], bool(eq[0])) if single else (out, outb, eq)


# ------------------------------------------------------------------ runs


@dataclass
class CoupledRun:
    mesh_times: np.ndarray
    exact_states: np.ndarray
    approx_states: np.ndarray
    distance: np.ndarray
    equality_flag: np.ndarray
    decoupling_time: np.ndarray


def run_coupled(pdmp, cfg, z0, rng, kind="wasserstein", zb0=None, norm="l1", keep_states=True, model=None,
                cap=None):
    """Run a coupling over the mesh of ``cfg`` for a batch of starting states.

    ``kind`` is ``wasserstein``, ``tv``, ``higher_order`` or ``subsampling``.
    Distances and equality flags are recorded at every mesh point; the
    decoupling time is the first mesh time with unequal states (``nan`` if none).
    ``cap`` bounds proposals per step for ``higher_order`` (default ``p + 2``;
    ``inf`` disables it).
    """
    streams = as_streams(rng)
    z, single = as_batch(z0)
    z = z.copy()
    zb = z.copy() if zb0 is None else as_batch(zb0)[0].copy()
    steps = cfg.steps()
    times = cfg.mesh_times()
    eq = np.all(z == zb, axis=1)
    if kind in ("tv", "higher_order"):
        _check_tv(pdmp, cfg)
    dist = [distance(z, zb, pdmp.npos, norm)]
    flags = [eq.copy()]
    ex_states = [z.copy()] if keep_states else None
    ap_states = [zb.copy()] if keep_states else None
    for delta in steps:
        if kind == "wasserstein":
            z, zb = wasserstein_step(pdmp, cfg, z, zb, delta, streams)
            eq = np.all(z == zb, axis=1)
        elif kind == "tv":
            z, zb, eq = tv_coupled_step(pdmp, cfg, z, zb, eq, delta, streams, p=1)
        elif kind == "higher_order":
            z, zb, eq = tv_coupled_step(pdmp, cfg, z, zb, eq, delta, streams, p=cfg.p,
                                            cap=cfg.p + 2 if cap is None else cap)
        elif kind == "subsampling":
            z, zb, eq = subsampling_coupled_step(model, pdmp, z, zb, eq, delta, streams)
        else:
            raise ValueError(f"unknown coupling {kind!r}")
        dist.append(distance(z, zb, pdmp.npos, norm))
        flags.append(eq.copy())
        if keep_states:
            ex_states.append(z.copy())
            ap_states.append(zb.copy())
    flags = np.array(flags)
    broke = ~flags
    first = np.where(broke.any(axis=0), times[np.argmax(broke, axis=0)], np.nan)
    run = CoupledRun(
        mesh_times=times,
        exact_states=np.array(ex_states) if keep_states else None,
        approx_states=np.array(ap_states) if keep_states else None,
        distance=np.array(dist),
        equality_flag=flags,
        decoupling_time=first,
    )
    if single:
        run.distance, run.equality_flag = run.distance[:, 0], run.equality_flag[:, 0]
        run.decoupling_time = run.decoupling_time[0]
        if keep_states:
            run.exact_states, run.approx_states = run.exact_states[:, 0], run.approx_states[:, 0]
    return run
