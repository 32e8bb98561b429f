"""Compiled inner loops for simulation and online training.

Every function mirrors a pure-Python counterpart elsewhere in the package
(``queueing.sample_transition``, ``policy.action_probabilities``,
``learner.sgs_step``); the test-suite runs both paths on the same random
draws and compares them.
"""

import math

import numpy as np
from numba import njit

OK, DIVERGED, RESTRAINT_BROKEN = 0, 1, 2
FLOOR_TOL = 1e-12  # same as learner.FLOOR_TOL
PROB_FLOOR = 2.2250738585072014e-308  # same as policy.PROB_FLOOR


@njit(cache=True)
def basis_value(code, c, p, x):
    if code == 0:
        return x**p
    if code == 1:
        return c + x**p
    return math.log(x + c)


@njit(cache=True)
def features(x, a, bcode, bp0, bp1, out):
    N, P = bcode.shape
    for n in range(N):
        y = float(x[n] + (1 if n == a else 0))
        for j in range(P):
            out[n * P + j] = basis_value(bcode[n, j], bp0[n, j], bp1[n, j], y)


@njit(cache=True)
def scores(x, w, bcode, bp0, bp1, out):
    N, P = bcode.shape
    for n in range(N):
        lo = float(x[n])
        s = 0.0
        for j in range(P):
            d = basis_value(bcode[n, j], bp0[n, j], bp1[n, j], lo + 1.0) - basis_value(
                bcode[n, j], bp0[n, j], bp1[n, j], lo
            )
            s += w[n * P + j] * d
        out[n] = s


@njit(cache=True)
def choose_action(x, w, u, pkind, iota, psplit, bcode, bp0, bp1, work):
    N = x.shape[0]
    if pkind == 2:  # JSQ, lowest index on ties
        best = 0
        for n in range(1, N):
            if x[n] < x[best]:
                best = n
        return best
    if pkind == 3:
        c = 0.0
        last = 0
        for n in range(N):
            if psplit[n] > 0:
                last = n
                c += psplit[n]
                if u < c:
                    return n
        return last
    scores(x, w, bcode, bp0, bp1, work)
    best = 0
    for n in range(1, N):
        if work[n] < work[best]:
            best = n
    if pkind == 1:
        return best
    smin = work[best]
    tot = 0.0
    for n in range(N):
        work[n] = max(math.exp(-(work[n] - smin) / iota), PROB_FLOOR)
        tot += work[n]
    c = 0.0
    last = 0
    for n in range(N):
        p = work[n] / tot
        if p > 0:
            last = n
            c += p
            if u < c:
                return n
    return last


@njit(cache=True)
def state_cost(x, ckind, ccode, cp0, cp1):
    if ckind == 1:
        tot = 0
        for n in range(x.shape[0]):
            tot += x[n]
        return math.log(tot) if tot > 1 else 0.0
    s = 0.0
    for n in range(x.shape[0]):
        s += basis_value(ccode[n], cp0[n], cp1[n], float(x[n]))
    return s


@njit(cache=True)
def run_chunk(
    x, a_cur, w, k, t0, steps,
    lam, mu, bcode, bp0, bp1, H,
    ckind, ccode, cp0, cp1,
    pkind, iota, psplit,
    learn, gamma, w_l, alpha0, tau,
    expected_holding, w_ceiling,
    ev_u, hold_e, act_u,
    out_states, out_actions, out_events, out_dt, out_cost, out_balpha, out_minwh,
    snap_every, out_snaps, out_snap_t,
):
    """Advance ``steps`` epochs in place; returns (status, done, action, k, n_snaps)."""
    N, P = bcode.shape
    D = N * P
    fx = np.empty(D)
    fnext = np.empty(D)
    work = np.empty(N)
    n_snaps = 0
    for i in range(steps):
        rate = lam
        for n in range(N):
            if x[n] > 0:
                rate += mu[n]
        target = ev_u[i] * rate
        ev = 0
        if target < lam:
            ev = a_cur + 1
        else:
            acc = lam
            last_busy = -1
            for n in range(N):
                if x[n] > 0:
                    last_busy = n
                    acc += mu[n]
                    if target < acc:
                        ev = -(n + 1)
                        break
            if ev == 0:
                ev = -(last_busy + 1) if last_busy >= 0 else a_cur + 1
        dt = 1.0 / rate if expected_holding else hold_e[i] / rate
        if learn:
            features(x, a_cur, bcode, bp0, bp1, fx)
        if ev > 0:
            x[ev - 1] += 1
        else:
            x[-ev - 1] -= 1
        c = state_cost(x, ckind, ccode, cp0, cp1) * dt
        a_next = choose_action(x, w, act_u[i], pkind, iota, psplit, bcode, bp0, bp1, work)

        b_alpha = 1.0
        if learn:
            features(x, a_next, bcode, bp0, bp1, fnext)
            q_now = 0.0
            q_next = 0.0
            for d in range(D):
                q_now += w[d] * fx[d]
                q_next += w[d] * fnext[d]
            delta = c + gamma * q_next - q_now
            alpha = alpha0 * tau / (tau + k)
            scale = alpha * delta
            for n in range(N):
                h = n * P + H
                num = scale * fx[h]
                gap = w_l - w[h]
                if num < 0.0 and gap < -FLOOR_TOL:
                    r = num / gap
                    if r > b_alpha:
                        b_alpha = r
            step = scale / b_alpha
            for d in range(D):
                w[d] += step * fx[d]
            bad = False
            for n in range(N):
                h = n * P + H
                if w[h] < w_l + FLOOR_TOL:
                    # boundary case (w_h on the floor with a downward step) and rounding
                    w[h] = w_l
            for d in range(D):
                if not math.isfinite(w[d]) or abs(w[d]) > w_ceiling:
                    bad = True
            if bad:
                return DIVERGED, i, a_cur, k, n_snaps
        minwh = np.inf
        for n in range(N):
            v = w[n * P + H]
            if v < minwh:
                minwh = v
        if learn and minwh < w_l:
            return RESTRAINT_BROKEN, i, a_cur, k, n_snaps

        for n in range(N):
            out_states[i, n] = x[n]
        out_actions[i] = a_next
        out_events[i] = ev
        out_dt[i] = dt
        out_cost[i] = c
        out_balpha[i] = b_alpha
        out_minwh[i] = minwh
        a_cur = a_next
        k += 1
        if snap_every > 0 and (t0 + i + 1) % snap_every == 0:
            for d in range(D):
                out_snaps[n_snaps, d] = w[d]
            out_snap_t[n_snaps] = t0 + i + 1
            n_snaps += 1
    return OK, steps, a_cur, k, n_snaps
