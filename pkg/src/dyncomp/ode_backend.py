"""Polynomial ODE realization of the normal form.

The compiled vector field is assembled from five gadget families:

* a harmonic clock ``c1' = -c2, c2' = c1`` from (1, 0), with driver
  variables ``u, v = (1 +- c2)/2`` so the two half-period drivers are the
  monomials u^K (latch half) and v^K (move half);
* one comparator coordinate per normal-form gate, driven toward a
  polynomial threshold target during the latch half of each cycle;
* one sampler coordinate per self-referenced state coordinate, latching
  its current value during the same half (the sample of sample-and-hold);
* one hold coordinate per normal-form state coordinate, driven during the
  move half toward the gated affine target rebuilt from samplers and
  comparators (never from the live state, which would chase its own tail);
* one shadow-code coordinate per zero-tested register, maintaining 2^-R by
  gated scaling of its sampler, so every comparator input lives in fixed,
  separated regions no matter how large registers grow.

One clock cycle performs one normal-form step (two cycles per machine
micro-step).  Comparator targets use iterated smoothstep polynomials, which
keep every intermediate bounded: the expanded sparse polynomial is the
serialization and audit artifact, while evaluation uses the factored form
(numerically stable, and exactly the same polynomial - the test suite
checks the two routes against each other in exact rational arithmetic).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels
from .errors import (
    ContractViolated,
    GadgetBudgetUnsatisfiable,
    StepUnstable,
    UnsupportedForm,
    WindowInconsistent,
)
from .normal_form import NormalForm, Trace, _rat_str, nf_run_auto

KAPPA0 = 2.0 * math.pi  # clock period


# --- sparse multivariate polynomials (exact) ---

@dataclass
class PolyField:
    """Sparse polynomial vector field with rational coefficients.

    ``terms[i]`` lists the ``(coefficient, exponent_vector)`` pairs of
    coordinate i's derivative.  ``structured`` (when present) is the
    factored evaluation form this field was compiled from.
    """

    M: int
    terms: list
    roles: dict
    structured: object = field(default=None, repr=False, compare=False)

    def degree(self) -> int:
        return max((sum(e) for coord in self.terms for _, e in coord), default=0)

    def num_terms(self) -> int:
        return sum(len(coord) for coord in self.terms)

    def eval_exact(self, y):
        y = [Fraction(v) for v in y]
        out = []
        for coord in self.terms:
            acc = Fraction(0)
            for c, e in coord:
                t = c
                for j, p in enumerate(e):
                    if p:
                        t *= y[j] ** p
                acc += t
            out.append(acc)
        return out

    def eval_float(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(self.M)
        for i, coord in enumerate(self.terms):
            acc = 0.0
            for c, e in coord:
                t = float(c)
                for j, p in enumerate(e):
                    if p:
                        t *= y[j] ** p
                acc += t
            out[i] = acc
        return out


def _poly_mul(a: dict, b: dict) -> dict:
    out = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0) + ca * cb
    return {e: c for e, c in out.items() if c}


def _uni_mul(a: list, b: list) -> list:
    out = [0] * (len(a) + len(b) - 1)
    for i, ca in enumerate(a):
        if not ca:
            continue
        for j, cb in enumerate(b):
            if cb:
                out[i + j] += ca * cb
    return out


def smoothstep_coeffs(iterations: int) -> list:
    """Coefficients of the n-fold iterate of 3t^2 - 2t^3 (ascending powers)."""
    p = [0, 1]
    for _ in range(iterations):
        sq = _uni_mul(p, p)
        cube = _uni_mul(sq, p)
        out = [0] * max(len(sq), len(cube))
        for i, c in enumerate(sq):
            out[i] += 3 * c
        for i, c in enumerate(cube):
            out[i] -= 2 * c
        p = out
    return p


def _uni_subst_affine(coeffs: list, scale: int, shift: int) -> list:
    """p(scale*t + shift) for integer scale/shift, ascending coefficients."""
    out = [0]
    power = [1]
    base = [shift, scale]
    for c in coeffs:
        if c:
            if len(out) < len(power):
                out += [0] * (len(power) - len(out))
            for i, pc in enumerate(power):
                out[i] += c * pc
        power = _uni_mul(power, base)
    return out


# --- gadget parameters ---

@dataclass(frozen=True)
class GadgetParams:
    """Driver sharpness K, comparator/hold rate, and step-polynomial sharpness."""

    driver_K: int = 12
    rate: Fraction = Fraction(9)
    ztest_iters: int = 6  # smoothstep iterations for shadow-code tests
    bit_iters: int = 2  # smoothstep iterations for bit cleaners

    def __post_init__(self):
        if self.driver_K % 2 != 0 or self.driver_K <= 0:
            raise ValueError("driver sharpness K must be a positive even integer")
        if self.ztest_iters % 2 != 0 or self.bit_iters % 2 != 0:
            raise ValueError("step polynomial sharpness must be even")


# --- structured (factored) field ---

@dataclass
class StructuredField:
    """Kernel-ready factored form of the compiled field."""

    M: int
    n_comp: int
    n_hold: int
    n_shadow: int
    n_samp: int
    rate: Fraction
    driver_K: int
    ztest_iters: int
    bit_iters: int
    comp_kind: np.ndarray
    comp_z: np.ndarray
    comp_fac_ptr: np.ndarray
    comp_fac_coord: np.ndarray
    comp_fac_neg: np.ndarray
    hold_base_ptr: np.ndarray
    hold_base_coord: np.ndarray
    hold_base_coef: np.ndarray
    hold_base_off: np.ndarray
    hold_g_ptr: np.ndarray
    hold_g_idx: np.ndarray
    hold_g_coef: np.ndarray
    z_samp: np.ndarray  # absolute index of each shadow's sampler
    z_ptr: np.ndarray
    z_gidx: np.ndarray
    z_gamma_num: np.ndarray
    z_gamma_den: np.ndarray
    samp_src: np.ndarray  # absolute index each sampler latches

    @property
    def w_off(self):
        return 4 + self.n_comp

    @property
    def z_off(self):
        return self.w_off + self.n_hold

    @property
    def samp_off(self):
        return self.z_off + self.n_shadow

    def kernel_args(self):
        return (
            float(self.rate),
            self.driver_K,
            self.ztest_iters,
            self.bit_iters,
            self.comp_kind,
            self.comp_z,
            self.comp_fac_ptr,
            self.comp_fac_coord,
            self.comp_fac_neg,
            self.hold_base_ptr,
            self.hold_base_coord,
            self.hold_base_coef,
            self.hold_base_off,
            self.hold_g_ptr,
            self.hold_g_idx,
            self.hold_g_coef,
            self.z_samp,
            self.z_ptr,
            self.z_gidx,
            (self.z_gamma_num / self.z_gamma_den).astype(float),
            self.samp_src,
        )

    def eval_exact(self, y):
        """Exact rational evaluation of the factored field (mirrors the kernel)."""
        y = [Fraction(v) for v in y]
        out = [Fraction(0)] * self.M
        c1, c2 = y[0], y[1]
        u, v = y[2], y[3]
        out[0] = -c2
        out[1] = c1
        out[2] = c1 / 2
        out[3] = -c1 / 2
        hA = self.rate * u**self.driver_K
        hB = self.rate * v**self.driver_K
        for g in range(self.n_comp):
            if self.comp_kind[g] == 0:
                t = y[self.z_off + self.comp_z[g]]
                psi = 1 - _smoothstep_exact(t * t, self.ztest_iters)
            else:
                psi = Fraction(1)
                for j in range(self.comp_fac_ptr[g], self.comp_fac_ptr[g + 1]):
                    b = y[self.comp_fac_coord[j]]
                    if self.comp_fac_neg[j]:
                        b = 1 - b
                    psi *= _smoothstep_exact(b, self.bit_iters)
            out[4 + g] = hA * (psi - y[4 + g])
        for k in range(self.n_hold):
            t = Fraction(int(self.hold_base_off[k]))
            for j in range(self.hold_base_ptr[k], self.hold_base_ptr[k + 1]):
                t += int(self.hold_base_coef[j]) * y[self.hold_base_coord[j]]
            for j in range(self.hold_g_ptr[k], self.hold_g_ptr[k + 1]):
                t += int(self.hold_g_coef[j]) * y[4 + self.hold_g_idx[j]]
            out[self.w_off + k] = hB * (t - y[self.w_off + k])
        for zi in range(self.n_shadow):
            sz = y[self.z_samp[zi]]
            t = sz
            for j in range(self.z_ptr[zi], self.z_ptr[zi + 1]):
                gamma = Fraction(int(self.z_gamma_num[j]), int(self.z_gamma_den[j]))
                t += gamma * y[4 + self.z_gidx[j]] * sz
            out[self.z_off + zi] = hB * (t - y[self.z_off + zi])
        for i in range(self.n_samp):
            out[self.samp_off + i] = hA * (y[self.samp_src[i]] - y[self.samp_off + i])
        return out


def _smoothstep_exact(t, n):
    for _ in range(n):
        t = t * t * (3 - 2 * t)
    return t


# --- the compiled program ---

@dataclass
class OdeProgram:
    """A fixed polynomial field plus the recipes to run and read it."""

    structured: StructuredField
    params: GadgetParams
    nf: NormalForm
    shadow_registers: tuple  # normal-form coordinates carrying shadow codes
    num_inputs: int
    output_indices: tuple  # absolute field coordinates of the outputs
    cycles_per_machine_step: int = 2
    _field: PolyField = field(default=None, repr=False, compare=False)

    @property
    def M(self):
        return self.structured.M

    @property
    def field_poly(self) -> PolyField:
        if self._field is None:
            self._field = expand_polyfield(self)
        return self._field

    def roles(self) -> dict:
        s = self.structured
        return {
            "clock": [0, 1],
            "driver": [2, 3],
            "comparators": list(range(4, 4 + s.n_comp)),
            "holds": list(range(s.w_off, s.w_off + s.n_hold)),
            "shadow": list(range(s.z_off, s.z_off + s.n_shadow)),
            "samplers": list(range(s.samp_off, s.samp_off + s.n_samp)),
        }

    def reference_trace(self, x) -> Trace:
        return nf_run_auto(self.nf, x)

    def tau(self, x, ref: Trace | None = None) -> int:
        """Observation time: ceil(kappa0 * (halt_cycle + 1))."""
        if ref is None:
            ref = self.reference_trace(x)
        return math.ceil(KAPPA0 * (ref.halted_at + 1))

    def safety_bound(self, x, ref: Trace | None = None) -> int:
        if ref is None:
            ref = self.reference_trace(x)
        return int(ref.max_norm()) + 2

    def initial_state(self, x) -> np.ndarray:
        """Clock at (1,0), drivers at 1/2, holds at (x,0,...,0), samplers
        latching those values, shadow codes at 2^-value of their register
        (1 for every machine-generated one)."""
        return np.asarray([float(v) for v in self.initial_state_exact(x)])

    def initial_state_exact(self, x):
        s = self.structured
        y = [Fraction(0)] * s.M
        y[0] = Fraction(1)
        y[2] = Fraction(1, 2)
        y[3] = Fraction(1, 2)
        for i, v in enumerate(x):
            y[s.w_off + i] = Fraction(int(v))
        for zi, reg in enumerate(self.shadow_registers):
            val = int(x[reg]) if reg < self.num_inputs else 0
            y[s.z_off + zi] = Fraction(1, 2**val)
        for i in range(s.n_samp):
            y[s.samp_off + i] = y[s.samp_src[i]]
        return y


def _classify_nf_gate(nf: NormalForm, q):
    ctrl = nf.control_indices()
    terms = [(j, c) for j, c in enumerate(q.matrix[0]) if c]
    off = q.offset[0]
    if len(terms) == 1 and terms[0][1] == 1 and off == 0 and terms[0][0] not in ctrl:
        return "reg_test", terms[0][0]
    if all(j in ctrl and c in (-1, 1) for j, c in terms):
        n_pos = sum(1 for _, c in terms if c == 1)
        if off != 1 - n_pos:
            raise UnsupportedForm(
                f"control gate offset {off} does not make a conjunction over bits"
            )
        return "control", terms
    raise UnsupportedForm("gate argument mixes registers and control bits")


def compile_nf_to_ode(nf: NormalForm, params: GadgetParams | None = None) -> OdeProgram:
    """Assemble the fixed polynomial field for a translation-gated normal form."""
    if params is None:
        params = GadgetParams()
    if not nf.is_translation_gated():
        raise UnsupportedForm("normal form is not translation-gated")
    ctrl = nf.control_indices()
    m = nf.m
    G = nf.num_gates

    gate_info = [_classify_nf_gate(nf, q) for q, _ in nf.gated]
    tested = sorted({data for kind, data in gate_info if kind == "reg_test"})
    shadow_of = {r: zi for zi, r in enumerate(tested)}
    Z = len(tested)
    w_off = 4 + G
    z_off = w_off + m

    # samplers: one per self-referenced hold coordinate, plus one per shadow
    referenced = sorted(
        {j for k in range(m) for j, c in enumerate(nf.base.matrix[k]) if c}
    )
    samp_of = {}
    samp_src = []
    samp_off = z_off + Z
    for j in referenced:
        samp_of[("w", j)] = samp_off + len(samp_src)
        samp_src.append(w_off + j)
    for zi in range(Z):
        samp_of[("z", zi)] = samp_off + len(samp_src)
        samp_src.append(z_off + zi)
    S = len(samp_src)

    comp_kind = np.zeros(G, dtype=np.int8)
    comp_z = np.full(G, -1, dtype=np.int32)
    fac_ptr = [0]
    fac_coord = []
    fac_neg = []
    for g, (kind, data) in enumerate(gate_info):
        if kind == "reg_test":
            comp_kind[g] = 0
            comp_z[g] = shadow_of[data]
        else:
            comp_kind[g] = 1
            for j, c in data:
                fac_coord.append(w_off + j)
                fac_neg.append(0 if c == 1 else 1)
        fac_ptr.append(len(fac_coord))

    hb_ptr = [0]
    hb_coord = []
    hb_coef = []
    hb_off = np.zeros(m)
    hg_ptr = [0]
    hg_idx = []
    hg_coef = []
    for k in range(m):
        for j, c in enumerate(nf.base.matrix[k]):
            if c:
                hb_coord.append(samp_of[("w", j)])
                hb_coef.append(float(c))
        hb_off[k] = float(nf.base.offset[k])
        hb_ptr.append(len(hb_coord))
        for g, (_, a) in enumerate(nf.gated):
            c = a.offset[k]
            if c:
                hg_idx.append(g)
                hg_coef.append(float(c))
        hg_ptr.append(len(hg_idx))

    z_ptr = [0]
    z_gidx = []
    z_gnum = []
    z_gden = []
    for r in tested:
        for g, (_, a) in enumerate(nf.gated):
            c = a.offset[r]
            if c == 0:
                continue
            if c == 1:
                z_gidx.append(g)
                z_gnum.append(-1)
                z_gden.append(2)
            elif c == -1:
                z_gidx.append(g)
                z_gnum.append(1)
                z_gden.append(1)
            else:
                raise UnsupportedForm(f"tested register {r} is translated by {c}, not +-1")
        z_ptr.append(len(z_gidx))

    structured = StructuredField(
        M=4 + G + m + Z + S,
        n_comp=G,
        n_hold=m,
        n_shadow=Z,
        n_samp=S,
        rate=Fraction(params.rate),
        driver_K=params.driver_K,
        ztest_iters=params.ztest_iters,
        bit_iters=params.bit_iters,
        comp_kind=comp_kind,
        comp_z=comp_z,
        comp_fac_ptr=np.asarray(fac_ptr, dtype=np.int32),
        comp_fac_coord=np.asarray(fac_coord, dtype=np.int32),
        comp_fac_neg=np.asarray(fac_neg, dtype=np.int8),
        hold_base_ptr=np.asarray(hb_ptr, dtype=np.int32),
        hold_base_coord=np.asarray(hb_coord, dtype=np.int32),
        hold_base_coef=np.asarray(hb_coef, dtype=float),
        hold_base_off=hb_off,
        hold_g_ptr=np.asarray(hg_ptr, dtype=np.int32),
        hold_g_idx=np.asarray(hg_idx, dtype=np.int32),
        hold_g_coef=np.asarray(hg_coef, dtype=float),
        z_samp=np.asarray(
            [samp_of[("z", zi)] for zi in range(Z)], dtype=np.int32
        ),
        z_ptr=np.asarray(z_ptr, dtype=np.int32),
        z_gidx=np.asarray(z_gidx, dtype=np.int32),
        z_gamma_num=np.asarray(z_gnum, dtype=np.int64),
        z_gamma_den=np.asarray(z_gden, dtype=np.int64),
        samp_src=np.asarray(samp_src, dtype=np.int32),
    )
    return OdeProgram(
        structured=structured,
        params=params,
        nf=nf,
        shadow_registers=tuple(tested),
        num_inputs=len(nf.layout.get("inputs", [])),
        output_indices=tuple(w_off + i for i in nf.output_indices),
    )


# --- expansion to the sparse polynomial artifact ---

def _unit(M, j, p=1):
    e = [0] * M
    if j is not None:
        e[int(j)] = p
    return tuple(e)


def _bump(e, j, p):
    e = list(e)
    e[j] += p
    return tuple(e)


def expand_polyfield(prog: OdeProgram) -> PolyField:
    """Multiply out the factored field into explicit sparse terms."""
    s = prog.structured
    M = s.M
    rate = s.rate
    K = s.driver_K

    terms = [[] for _ in range(M)]
    terms[0] = [(Fraction(-1), _unit(M, 1))]
    terms[1] = [(Fraction(1), _unit(M, 0))]
    terms[2] = [(Fraction(1, 2), _unit(M, 0))]
    terms[3] = [(Fraction(-1, 2), _unit(M, 0))]

    zcoeffs = smoothstep_coeffs(s.ztest_iters)
    bcoeffs = smoothstep_coeffs(s.bit_iters)

    for g in range(s.n_comp):
        if s.comp_kind[g] == 0:
            zj = s.z_off + int(s.comp_z[g])
            psi = {_unit(M, None): Fraction(1)}
            for p, c in enumerate(zcoeffs):
                if c:
                    e = _unit(M, zj, 2 * p)
                    psi[e] = psi.get(e, Fraction(0)) - c
        else:
            psi = {_unit(M, None): Fraction(1)}
            for j in range(s.comp_fac_ptr[g], s.comp_fac_ptr[g + 1]):
                coord = int(s.comp_fac_coord[j])
                coeffs = (
                    bcoeffs if not s.comp_fac_neg[j]
                    else _uni_subst_affine(bcoeffs, -1, 1)
                )
                factor = {
                    _unit(M, coord, p): Fraction(c)
                    for p, c in enumerate(coeffs) if c
                }
                psi = _poly_mul(psi, factor)
        e_self = _unit(M, 4 + g)
        psi[e_self] = psi.get(e_self, Fraction(0)) - 1
        terms[4 + g] = [(rate * c, _bump(e, 2, K)) for e, c in sorted(psi.items()) if c]

    for k in range(s.n_hold):
        tgt = {}
        off = Fraction(int(s.hold_base_off[k]))
        if off:
            tgt[_unit(M, None)] = off
        for j in range(s.hold_base_ptr[k], s.hold_base_ptr[k + 1]):
            e = _unit(M, int(s.hold_base_coord[j]))
            tgt[e] = tgt.get(e, Fraction(0)) + int(s.hold_base_coef[j])
        for j in range(s.hold_g_ptr[k], s.hold_g_ptr[k + 1]):
            e = _unit(M, 4 + int(s.hold_g_idx[j]))
            tgt[e] = tgt.get(e, Fraction(0)) + int(s.hold_g_coef[j])
        e_self = _unit(M, s.w_off + k)
        tgt[e_self] = tgt.get(e_self, Fraction(0)) - 1
        terms[s.w_off + k] = [(rate * c, _bump(e, 3, K)) for e, c in sorted(tgt.items()) if c]

    for zi in range(s.n_shadow):
        zj = s.z_off + zi
        sj = int(s.z_samp[zi])
        tgt = {_unit(M, sj): Fraction(1), _unit(M, zj): Fraction(-1)}
        for j in range(s.z_ptr[zi], s.z_ptr[zi + 1]):
            gamma = Fraction(int(s.z_gamma_num[j]), int(s.z_gamma_den[j]))
            e = _bump(_unit(M, 4 + int(s.z_gidx[j])), sj, 1)
            tgt[e] = tgt.get(e, Fraction(0)) + gamma
        terms[zj] = [(rate * c, _bump(e, 3, K)) for e, c in sorted(tgt.items()) if c]

    for i in range(s.n_samp):
        src = int(s.samp_src[i])
        own = s.samp_off + i
        terms[own] = [
            (rate, _bump(_unit(M, src), 2, K)),
            (-rate, _bump(_unit(M, own), 2, K)),
        ]

    return PolyField(M=M, terms=terms, roles=prog.roles(), structured=s)


# --- generic integration of a PolyField (reference/verification role) ---

@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step integration settings.

    method "rk4" or "euler"; arithmetic "float" or "exact" (exact rational
    fixed-step on small problems).  ``check_halving`` re-integrates at half
    the step and raises StepUnstable when any sample moves by more than
    ``tolerance``.
    """

    method: str = "rk4"
    step: Fraction = Fraction(1, 64)
    arithmetic: str = "float"
    check_halving: bool = False
    tolerance: float = 1e-6


def integrate(field: PolyField, y0, t_end, cfg: IntegratorConfig,
              sample_times=None) -> Trace:
    """Fixed-step integration with dense samples at the requested times."""
    if sample_times is None:
        n = 100
        sample_times = [Fraction(t_end) * k / n for k in range(n + 1)]

    def run(step):
        if cfg.arithmetic == "exact":
            return _integrate_exact(field, y0, sample_times, step, cfg.method)
        return _integrate_float(field, y0, sample_times, float(step), cfg.method)

    states = run(cfg.step)
    if cfg.check_halving:
        finer = run(Fraction(cfg.step) / 2)
        diff = max(
            abs(float(a) - float(b))
            for sa, sb in zip(states, finer)
            for a, b in zip(sa, sb)
        )
        if diff > cfg.tolerance:
            raise StepUnstable(f"halving the step moved samples by {diff} > {cfg.tolerance}")
    return Trace(states=states, roles=field.roles, halted_at=None,
                 times=list(sample_times))


def _integrate_float(field: PolyField, y0, sample_times, step, method):
    y = np.asarray([float(v) for v in y0], dtype=float)
    if field.structured is not None and method == "rk4":
        samples = _kernels.rk4_sampled(
            y, np.asarray([float(t) for t in sample_times]), step,
            field.structured.kernel_args(),
        )
        return [tuple(row) for row in samples]
    out = []
    t = 0.0
    for target in sample_times:
        target = float(target)
        while t < target - 1e-12:
            h = min(step, target - t)
            y = _step_generic(field, y, h, method)
            t += h
        out.append(tuple(y))
    return out


def _step_generic(field, y, h, method):
    if method == "euler":
        return y + h * field.eval_float(y)
    k1 = field.eval_float(y)
    k2 = field.eval_float(y + h / 2 * k1)
    k3 = field.eval_float(y + h / 2 * k2)
    k4 = field.eval_float(y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate_exact(field: PolyField, y0, sample_times, step, method):
    y = [Fraction(v) for v in y0]
    out = []
    t = Fraction(0)
    step = Fraction(step)
    for target in sample_times:
        target = Fraction(target)
        while t < target:
            h = min(step, target - t)
            if method == "euler":
                f = field.eval_exact(y)
                y = [a + h * b for a, b in zip(y, f)]
            else:
                k1 = field.eval_exact(y)
                k2 = field.eval_exact([a + h / 2 * b for a, b in zip(y, k1)])
                k3 = field.eval_exact([a + h / 2 * b for a, b in zip(y, k2)])
                k4 = field.eval_exact([a + h * b for a, b in zip(y, k3)])
                y = [
                    a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
                    for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
                ]
            t += h
        out.append(tuple(y))
    return out


# --- running a compiled program ---

@dataclass
class OdeRunResult:
    x: tuple
    halt_cycle: int
    tau: int
    safety_bound: int
    cycle_samples: np.ndarray  # (halt_cycle + 2) x M at t = n * kappa0
    window_times: list
    window_samples: np.ndarray  # >= 11 samples inside [tau, tau + 1]
    steps_per_cycle: int
    reference: Trace


def ode_run(prog: OdeProgram, x, steps_per_cycle: int = 256,
            ref: Trace | None = None) -> OdeRunResult:
    """Integrate one trajectory, sampling cycle boundaries and the window."""
    if ref is None:
        ref = prog.reference_trace(x)
    H = ref.halted_at
    tau = prog.tau(x, ref)
    cycle_times = [KAPPA0 * n for n in range(H + 2)]
    window_times = [tau + j / 10.0 for j in range(11)]
    times = np.asarray(cycle_times + window_times)
    y0 = prog.initial_state(x)
    h_target = KAPPA0 / steps_per_cycle
    samples = _kernels.rk4_sampled(y0, times, h_target, prog.structured.kernel_args())
    return OdeRunResult(
        x=tuple(int(v) for v in x),
        halt_cycle=H,
        tau=tau,
        safety_bound=prog.safety_bound(x, ref),
        cycle_samples=samples[: H + 2],
        window_times=window_times,
        window_samples=samples[H + 2:],
        steps_per_cycle=steps_per_cycle,
        reference=ref,
    )


def run_to_trace(prog: OdeProgram, run: OdeRunResult) -> Trace:
    """Sampled trajectory as a Trace; cycle-boundary samples are flagged."""
    states = [tuple(row) for row in run.cycle_samples]
    times = [KAPPA0 * n for n in range(len(states))]
    flags = ["cycle"] * len(states)
    for t, row in zip(run.window_times, run.window_samples):
        states.append(tuple(row))
        times.append(t)
        flags.append("window")
    return Trace(states=states, roles=prog.roles(), halted_at=run.halt_cycle,
                 times=times, flags=flags)


def read_output(prog: OdeProgram, run: OdeRunResult, x=None) -> tuple:
    """Round the output coordinates; all window samples must agree."""
    rounded = set()
    for row in run.window_samples:
        rounded.add(tuple(int(math.floor(row[i] + 0.5)) for i in prog.output_indices))
    if len(rounded) != 1:
        raise WindowInconsistent(f"window samples round differently: {sorted(rounded)}")
    return rounded.pop()


@dataclass
class ContractionReport:
    lam: float
    eta: float
    ratio: float  # eta / (1 - lam)
    cycle_errors: list
    max_cycle_error: float
    z_max_error: float
    window_spread: float
    halving_change: float | None
    steps_per_cycle: int

    def as_tuple(self):
        return (self.lam, self.eta)


def extended_reference_states(prog: OdeProgram, ref: Trace, upto: int):
    """The NF orbit continued past the halt step.

    The halt state self-loops on data and program counter, but its threshold
    bits refresh once more, so the true fixed point is P(y_H), reached one
    step after halted_at.
    """
    from .normal_form import nf_step

    states = list(ref.states)
    while len(states) <= upto:
        states.append(nf_step(prog.nf, states[-1]))
    return states


def _cycle_errors(prog: OdeProgram, run: OdeRunResult):
    s = prog.structured
    H = run.halt_cycle
    states = extended_reference_states(prog, run.reference, H + 1)
    errs = []
    z_err = 0.0
    for n in range(H + 2):
        y_n = states[n]
        row = run.cycle_samples[n]
        e = max(abs(row[s.w_off + k] - y_n[k]) for k in range(s.n_hold))
        errs.append(float(e))
        for zi, reg in enumerate(prog.shadow_registers):
            z_true = 2.0 ** (-y_n[reg])
            z_err = max(z_err, float(abs(row[s.z_off + zi] - z_true)))
    return errs, z_err


def measure_cycle_contraction(prog: OdeProgram, nf: NormalForm, x,
                              steps_per_cycle: int = 256,
                              check_halving: bool = True) -> ContractionReport:
    """Fit the per-cycle affine error recursion and enforce its budget.

    The sampled cycle-boundary error must stay below 1/4 at every cycle,
    the fitted contraction must satisfy lam < 1 and eta/(1-lam) < 1/4, and
    halving the integrator step must move the samples by less than 10% of
    the remaining margin.
    """
    run = ode_run(prog, x, steps_per_cycle)
    errs, z_err = _cycle_errors(prog, run)
    for n, e in enumerate(errs):
        if not (e < 0.25):  # catches NaN from a diverged integration too
            raise ContractViolated(f"cycle error {e} >= 1/4", cycle=n)

    best = None
    for k in range(20):
        lam = k / 20.0
        eta = max(errs[n + 1] - lam * errs[n] for n in range(len(errs) - 1))
        eta = max(eta, 1e-15)
        ratio = eta / (1.0 - lam)
        if best is None or ratio < best[2]:
            best = (lam, eta, ratio)
    lam, eta, ratio = best
    if ratio >= 0.25:
        raise ContractViolated(
            f"eta/(1-lambda) = {ratio} >= 1/4 (lambda={lam}, eta={eta})"
        )
    # soundness of the fit: e_n <= eta * sum_{k<n} lam^k at every cycle
    bound = 0.0
    for n in range(1, len(errs)):
        bound = lam * bound + eta
        if errs[n] > bound + 1e-12:
            raise ContractViolated(f"fit violated at cycle {n}", cycle=n)

    ref_state = run.reference.states[run.reference.halted_at]
    f = [float(ref_state[i]) for i in prog.nf.output_indices]
    spread = float(max(
        abs(row[i] - fv)
        for row in run.window_samples
        for i, fv in zip(prog.output_indices, f)
    ))

    halving_change = None
    if check_halving:
        run2 = ode_run(prog, x, steps_per_cycle * 2, ref=run.reference)
        halving_change = float(
            max(
                np.max(np.abs(run2.cycle_samples - run.cycle_samples)),
                np.max(np.abs(run2.window_samples - run.window_samples)),
            )
        )
        margin = 0.25 - max(errs)
        if halving_change >= 0.1 * margin:
            raise StepUnstable(
                f"step halving moved samples by {halving_change}, "
                f"over 10% of the remaining margin {margin}"
            )
    return ContractionReport(
        lam=lam,
        eta=eta,
        ratio=ratio,
        cycle_errors=errs,
        max_cycle_error=max(errs),
        z_max_error=z_err,
        window_spread=spread,
        halving_change=halving_change,
        steps_per_cycle=steps_per_cycle,
    )


def search_gadget_params(nf: NormalForm, probe_x, grid=None) -> GadgetParams:
    """First parameter set in the grid meeting the contraction budget."""
    if grid is None:
        grid = [
            GadgetParams(rate=Fraction(9)),
            GadgetParams(rate=Fraction(12)),
            GadgetParams(rate=Fraction(7), driver_K=14),
            GadgetParams(rate=Fraction(15), driver_K=10),
        ]
    for params in grid:
        prog = compile_nf_to_ode(nf, params)
        try:
            measure_cycle_contraction(prog, nf, probe_x, check_halving=False)
            return params
        except (ContractViolated, WindowInconsistent, StepUnstable):
            continue
    raise GadgetBudgetUnsatisfiable(
        f"no parameter choice in the {len(grid)}-point grid meets the budget"
    )


# --- serialization ---

def polyfield_to_json_dict(pf: PolyField) -> dict:
    return {
        "M": pf.M,
        "terms": [
            [{"c": _rat_str(c), "e": list(e)} for c, e in coord]
            for coord in pf.terms
        ],
        "roles": {k: list(v) for k, v in sorted(pf.roles.items())},
    }


def polyfield_from_json_dict(d: dict) -> PolyField:
    return PolyField(
        M=int(d["M"]),
        terms=[
            [(Fraction(t["c"]), tuple(t["e"])) for t in coord]
            for coord in d["terms"]
        ],
        roles={k: list(v) for k, v in d["roles"].items()},
    )


def polyfield_dumps(pf: PolyField) -> str:
    return json.dumps(polyfield_to_json_dict(pf), sort_keys=True)


def polyfield_loads(text: str) -> PolyField:
    return polyfield_from_json_dict(json.loads(text))
