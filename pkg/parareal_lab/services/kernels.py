"""
Compiled force and time-stepping kernels.

Systems are dispatched by an integer kind plus a parameter vector so the
loops stay inside numba's nopython mode. Every integrator in this package is
a partitioned splitting method: a table of kick sizes b_i h and drift sizes
a_i h applied as kick, drift, kick, drift, ... and repeated `nsteps` times.
A zero drift ends a stage without a new force evaluation.

Double-double values are carried as separate (hi, lo) float64 arrays and use
the usual error-free transformations (Dekker split, two-sum), so nothing
depends on the FPU rounding mode or on FMA contraction.
"""
import numpy as np
from numba import njit

SYSTEM_FPU = 0
SYSTEM_HARMONIC = 1
SYSTEM_FREE = 2

_SPLITTER = 134217729.0  # 2^27 + 1


@njit(cache=True)
def potential(kind, params, q):
    n = q.shape[0]
    if kind == SYSTEM_FPU:
        m = n // 2
        w2 = params[0] * params[0]
        stiff = 0.0
        for i in range(m):
            s = q[2 * i + 1] - q[2 * i]
            stiff += s * s
        soft = 0.0
        for i in range(m + 1):
            left = q[2 * i - 1] if i > 0 else 0.0
            right = q[2 * i] if i < m else 0.0
            r = right - left
            r2 = r * r
            soft += r2 * r2
        return 0.25 * w2 * stiff + soft
    if kind == SYSTEM_HARMONIC:
        total = 0.0
        for i in range(n):
            total += q[i] * q[i]
        return 0.5 * params[0] * total
    return 0.0


@njit(cache=True)
def grad_potential(kind, params, q, out):
    n = q.shape[0]
    for i in range(n):
        out[i] = 0.0
    if kind == SYSTEM_FPU:
        m = n // 2
        half_w2 = 0.5 * params[0] * params[0]
        for i in range(m):
            f = half_w2 * (q[2 * i + 1] - q[2 * i])
            out[2 * i + 1] += f
            out[2 * i] -= f
        #q_0 = q_{2m+1} = 0 are not state entries
        for i in range(m + 1):
            left = q[2 * i - 1] if i > 0 else 0.0
            right = q[2 * i] if i < m else 0.0
            r = right - left
            g = 4.0 * r * r * r
            if i < m:
                out[2 * i] += g
            if i > 0:
                out[2 * i - 1] -= g
    elif kind == SYSTEM_HARMONIC:
        k = params[0]
        for i in range(n):
            out[i] = k * q[i]


@njit(cache=True)
def advance_double(kind, params, inv_mass, p0, q0, kicks, drifts, nsteps):
    p = p0.copy()
    q = q0.copy()
    n = p.shape[0]
    g = np.empty(n)
    grad_potential(kind, params, q, g)
    for _ in range(nsteps):
        for s in range(kicks.shape[0]):
            b = kicks[s]
            for i in range(n):
                p[i] -= b * g[i]
            a = drifts[s]
            if a != 0.0:
                for i in range(n):
                    q[i] += a * inv_mass[i] * p[i]
                grad_potential(kind, params, q, g)
    return p, q


#double-double building blocks

@njit(cache=True)
def two_sum(a, b):
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


@njit(cache=True)
def quick_two_sum(a, b):
    s = a + b
    err = b - (s - a)
    return s, err


@njit(cache=True)
def split(a):
    c = _SPLITTER * a
    abig = c - a
    hi = c - abig
    return hi, a - hi


@njit(cache=True)
def two_prod(a, b):
    p = a * b
    ahi, alo = split(a)
    bhi, blo = split(b)
    err = ((ahi * bhi - p) + ahi * blo + alo * bhi) + alo * blo
    return p, err


@njit(cache=True)
def dd_add(ahi, alo, bhi, blo):
    s, e = two_sum(ahi, bhi)
    t, f = two_sum(alo, blo)
    e += t
    s, e = quick_two_sum(s, e)
    e += f
    return quick_two_sum(s, e)


@njit(cache=True)
def dd_sub(ahi, alo, bhi, blo):
    return dd_add(ahi, alo, -bhi, -blo)


@njit(cache=True)
def dd_mul(ahi, alo, bhi, blo):
    p, e = two_prod(ahi, bhi)
    e += ahi * blo + alo * bhi
    return quick_two_sum(p, e)


@njit(cache=True)
def dd_mul_d(ahi, alo, b):
    p, e = two_prod(ahi, b)
    e += alo * b
    return quick_two_sum(p, e)


@njit(cache=True)
def grad_potential_dd(kind, params, qh, ql, gh, gl):
    n = qh.shape[0]
    for i in range(n):
        gh[i] = 0.0
        gl[i] = 0.0
    if kind == SYSTEM_FPU:
        m = n // 2
        half_w2 = 0.5 * params[0] * params[0]
        for i in range(m):
            sh, sl = dd_sub(qh[2 * i + 1], ql[2 * i + 1], qh[2 * i], ql[2 * i])
            fh, fl = dd_mul_d(sh, sl, half_w2)
            gh[2 * i + 1], gl[2 * i + 1] = dd_add(gh[2 * i + 1], gl[2 * i + 1], fh, fl)
            gh[2 * i], gl[2 * i] = dd_sub(gh[2 * i], gl[2 * i], fh, fl)
        for i in range(m + 1):
            lh = qh[2 * i - 1] if i > 0 else 0.0
            ll = ql[2 * i - 1] if i > 0 else 0.0
            rh = qh[2 * i] if i < m else 0.0
            rl = ql[2 * i] if i < m else 0.0
            dh, dl = dd_sub(rh, rl, lh, ll)
            sqh, sql = dd_mul(dh, dl, dh, dl)
            cuh, cul = dd_mul(sqh, sql, dh, dl)
            #scaling by 4 is exact
            cuh *= 4.0
            cul *= 4.0
            if i < m:
                gh[2 * i], gl[2 * i] = dd_add(gh[2 * i], gl[2 * i], cuh, cul)
            if i > 0:
                gh[2 * i - 1], gl[2 * i - 1] = dd_sub(gh[2 * i - 1], gl[2 * i - 1], cuh, cul)
    elif kind == SYSTEM_HARMONIC:
        k = params[0]
        for i in range(n):
            gh[i], gl[i] = dd_mul_d(qh[i], ql[i], k)


@njit(cache=True)
def advance_dd(kind, params, inv_mass, ph0, pl0, qh0, ql0, kick_hi, kick_lo, drift_hi, drift_lo, nsteps):
    ph = ph0.copy()
    pl = pl0.copy()
    qh = qh0.copy()
    ql = ql0.copy()
    n = ph.shape[0]
    gh = np.empty(n)
    gl = np.empty(n)
    grad_potential_dd(kind, params, qh, ql, gh, gl)
    for _ in range(nsteps):
        for s in range(kick_hi.shape[0]):
            bh = kick_hi[s]
            bl = kick_lo[s]
            for i in range(n):
                th, tl = dd_mul(bh, bl, gh[i], gl[i])
                ph[i], pl[i] = dd_sub(ph[i], pl[i], th, tl)
            ah = drift_hi[s]
            al = drift_lo[s]
            if ah != 0.0:
                for i in range(n):
                    th, tl = dd_mul(ah, al, ph[i], pl[i])
                    th, tl = dd_mul_d(th, tl, inv_mass[i])
                    qh[i], ql[i] = dd_add(qh[i], ql[i], th, tl)
                grad_potential_dd(kind, params, qh, ql, gh, gl)
    return ph, pl, qh, ql
