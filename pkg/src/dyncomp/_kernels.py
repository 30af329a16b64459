"""Hot numeric kernels for the continuous and step-controlled backends.

Two interchangeable implementations live here: numba-compiled loops (the
default) and a pure-numpy/python fallback selected by setting the
environment flag ``DYNCOMP_NO_NUMBA=1``.  Both evaluate the same structured
factorization of the compiled polynomial field; ``benchmarks/bench_kernels.py``
compares them.

The structured field layout, shared with the compiler in ``ode_backend``:

    y = (c1, c2, u, v, r_0..r_{G-1}, w_0..w_{m-1}, z_0..z_{Z-1}, s_0..s_{S-1})

with clock ``c1' = -c2, c2' = c1``, driver variables ``u,v = (1 +- c2)/2``,
comparators and samplers driven during the latch half (driver monomial u^K)
and holds driven during the move half (driver v^K):

    r_g' = rate * u^K * (psi_g(w, z) - r_g)        comparator
    s_i' = rate * u^K * (y[src_i] - s_i)           sampler (latched copy)
    w_k' = rate * v^K * (target_k(s, r) - w_k)     hold
    z_j' = rate * v^K * (s_zj * (1 + sum gamma_g r_g) - z_j)   shadow code

Comparator targets are either ``1 - D(z_j)`` with ``D(t) = smoothstep^Jz(t^2)``
(register zero test via a shadow code) or a product of per-bit cleaners
``smoothstep^Jb(b)`` over control bits.  Every hold target reads latched
coordinates only, so each half-cycle is a genuine converge-then-freeze step.
All intermediates stay bounded, so float64 evaluation is stable.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = ["use_numba", "field_eval", "euler_iterate", "rk4_sampled"]


def use_numba() -> bool:
    return os.environ.get("DYNCOMP_NO_NUMBA", "") not in ("1", "true", "yes")


def _field_eval_py(y, out, rate, K, Jz, Jb,
                   comp_kind, comp_z, comp_fac_ptr, comp_fac_coord, comp_fac_neg,
                   hold_base_ptr, hold_base_coord, hold_base_coef, hold_base_off,
                   hold_g_ptr, hold_g_idx, hold_g_coef,
                   z_samp, z_ptr, z_gidx, z_gamma,
                   samp_src):
    G = comp_kind.shape[0]
    m = hold_base_off.shape[0]
    Z = z_samp.shape[0]
    S = samp_src.shape[0]
    w_off = 4 + G
    z_off = w_off + m
    samp_off = z_off + Z
    c1, c2, u, v = y[0], y[1], y[2], y[3]
    out[0] = -c2
    out[1] = c1
    out[2] = 0.5 * c1
    out[3] = -0.5 * c1
    hA = rate * u**K
    hB = rate * v**K
    for g in range(G):
        if comp_kind[g] == 0:
            t = y[z_off + comp_z[g]]
            t = t * t
            for _ in range(Jz):
                t = t * t * (3.0 - 2.0 * t)
            psi = 1.0 - t
        else:
            psi = 1.0
            for j in range(comp_fac_ptr[g], comp_fac_ptr[g + 1]):
                b = y[comp_fac_coord[j]]
                if comp_fac_neg[j]:
                    b = 1.0 - b
                for _ in range(Jb):
                    b = b * b * (3.0 - 2.0 * b)
                psi *= b
        out[4 + g] = hA * (psi - y[4 + g])
    for k in range(m):
        t = hold_base_off[k]
        for j in range(hold_base_ptr[k], hold_base_ptr[k + 1]):
            t += hold_base_coef[j] * y[hold_base_coord[j]]
        for j in range(hold_g_ptr[k], hold_g_ptr[k + 1]):
            t += hold_g_coef[j] * y[4 + hold_g_idx[j]]
        out[w_off + k] = hB * (t - y[w_off + k])
    for zi in range(Z):
        sz = y[z_samp[zi]]
        t = sz
        for j in range(z_ptr[zi], z_ptr[zi + 1]):
            t += z_gamma[j] * y[4 + z_gidx[j]] * sz
        out[z_off + zi] = hB * (t - y[z_off + zi])
    for i in range(S):
        out[samp_off + i] = hA * (y[samp_src[i]] - y[samp_off + i])
    return out


def _euler_iterate_py(y0, h, n_steps, snap, *args):
    y = y0.copy()
    f = np.zeros_like(y)
    for _ in range(n_steps):
        _field_eval_py(y, f, *args)
        for i in range(y.shape[0]):
            y[i] = math.floor((y[i] + h * f[i]) * snap) / snap
    return y


def _rk4_sampled_py(y0, sample_times, h_target, *args):
    n_samples = sample_times.shape[0]
    M = y0.shape[0]
    samples = np.zeros((n_samples, M))
    y = y0.copy()
    k1 = np.zeros(M)
    k2 = np.zeros(M)
    k3 = np.zeros(M)
    k4 = np.zeros(M)
    tmp = np.zeros(M)
    t = 0.0
    idx = 0
    if sample_times[0] == 0.0:
        samples[0] = y
        idx = 1
    while idx < n_samples:
        t1 = sample_times[idx]
        n_sub = max(1, int(math.ceil((t1 - t) / h_target - 1e-12)))
        h = (t1 - t) / n_sub
        for _ in range(n_sub):
            _field_eval_py(y, k1, *args)
            for i in range(M):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            _field_eval_py(tmp, k2, *args)
            for i in range(M):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            _field_eval_py(tmp, k3, *args)
            for i in range(M):
                tmp[i] = y[i] + h * k3[i]
            _field_eval_py(tmp, k4, *args)
            for i in range(M):
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        t = t1
        samples[idx] = y
        idx += 1
    return samples


_njit_cache = {}


def _get_njit(name):
    """Compile the numba twins of the python kernels on first use."""
    if _njit_cache:
        return _njit_cache[name]
    from numba import njit

    field_nb = njit(cache=True, fastmath=False, nogil=True)(_field_eval_py)

    def _euler(y0, h, n_steps, snap, *args):
        y = y0.copy()
        f = np.zeros_like(y)
        for _ in range(n_steps):
            field_nb(y, f, *args)
            for i in range(y.shape[0]):
                y[i] = math.floor((y[i] + h * f[i]) * snap) / snap
        return y

    def _rk4(y0, sample_times, h_target, *args):
        n_samples = sample_times.shape[0]
        M = y0.shape[0]
        samples = np.zeros((n_samples, M))
        y = y0.copy()
        k1 = np.zeros(M)
        k2 = np.zeros(M)
        k3 = np.zeros(M)
        k4 = np.zeros(M)
        tmp = np.zeros(M)
        t = 0.0
        idx = 0
        if sample_times[0] == 0.0:
            samples[0] = y
            idx = 1
        while idx < n_samples:
            t1 = sample_times[idx]
            n_sub = max(1, int(math.ceil((t1 - t) / h_target - 1e-12)))
            h = (t1 - t) / n_sub
            for _ in range(n_sub):
                field_nb(y, k1, *args)
                for i in range(M):
                    tmp[i] = y[i] + 0.5 * h * k1[i]
                field_nb(tmp, k2, *args)
                for i in range(M):
                    tmp[i] = y[i] + 0.5 * h * k2[i]
                field_nb(tmp, k3, *args)
                for i in range(M):
                    tmp[i] = y[i] + h * k3[i]
                field_nb(tmp, k4, *args)
                for i in range(M):
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            t = t1
            samples[idx] = y
            idx += 1
        return samples

    _njit_cache["field"] = field_nb
    _njit_cache["euler"] = njit(cache=True, fastmath=False, nogil=True)(_euler)
    _njit_cache["rk4"] = njit(cache=True, fastmath=False, nogil=True)(_rk4)
    return _njit_cache[name]


def field_eval(y, out, args):
    if use_numba():
        return _get_njit("field")(y, out, *args)
    return _field_eval_py(y, out, *args)


def euler_iterate(y0, h, n_steps, snap, args):
    if use_numba():
        return _get_njit("euler")(y0, h, n_steps, snap, *args)
    return _euler_iterate_py(y0, h, n_steps, snap, *args)


def rk4_sampled(y0, sample_times, h_target, args):
    if use_numba():
        return _get_njit("rk4")(y0, sample_times, h_target, *args)
    return _rk4_sampled_py(y0, sample_times, h_target, *args)
