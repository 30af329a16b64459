"""Cross-model verification: integer-faithful shadowing, the discrete
Gronwall bound, impossibility witness searches, the continuous-rounder
demo, and the all-backends agreement table.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath

from ._mp import fraction_from_mpf, iv_prec
from .errors import (
    BoundViolated,
    DecodeDiverged,
    Mismatch,
    NotFound,
    NotLatticePreserving,
    TubeViolated,
)
from .loop_lang import LoopProgram, interpret
from .normal_form import ThetaMode, compile_to_nf, default_step_cap, nf_outputs, nf_run
from .relu_backend import compile_nf_to_relu, relu_run
from .rho_backend import compile_nf_to_rho, make_hard_sigmoid, nu_decode, rho_run


def _round_half_up(v):
    return math.floor(Fraction(v) + Fraction(1, 2))


# --- integer-faithful shadowing ---

def check_integer_faithful(f_tilde, f, points) -> dict:
    """Max deviation of f_tilde from f over integer points, against the 1/2 bar.

    ``f`` must send the sampled lattice points to lattice points; that
    hypothesis is checked, not assumed.
    """
    worst = Fraction(0)
    witness = None
    for y in points:
        y = tuple(Fraction(int(v)) for v in y)
        fy = tuple(Fraction(v) for v in f(y))
        if any(v.denominator != 1 for v in fy):
            raise NotLatticePreserving(f"F({y}) = {fy} is not a lattice point")
        dev = max(abs(a - b) for a, b in zip(f_tilde(y), fy))
        if dev > worst:
            worst = dev
            witness = y
    return {
        "pass": worst < Fraction(1, 2),
        "max_deviation": worst,
        "witness": None if worst < Fraction(1, 2) else witness,
    }


def decoded_shadow_run(f_tilde, y0, steps: int, reference=None):
    """Round-and-iterate: y_{n+1} = round(f_tilde(y_n)).

    When a reference orbit is supplied, the decoded orbit must match it
    step by step; the first divergence raises DecodeDiverged.
    """
    state = tuple(int(v) for v in y0)
    states = [state]
    for n in range(steps):
        nxt = tuple(_round_half_up(v) for v in f_tilde(state))
        states.append(nxt)
        if reference is not None and tuple(reference[n + 1]) != nxt:
            raise DecodeDiverged(
                f"decoded orbit left the reference at step {n + 1}", step=n + 1
            )
        state = nxt
    return states


@dataclass
class ShadowReport:
    errors: list  # per-step sup-norm errors, exact
    bounds: list  # eps * sum_{k<n} L^k
    radius: Fraction
    verdict: bool


def gronwall_verify(reference, phi, L, eps, r) -> ShadowReport:
    """Run z_{n+1} = phi(z_n) from y_0 and check e_n <= eps * sum L^k <= r.

    The tube condition eps * sum_{k<T} L^k <= r is a precondition; its
    failure raises TubeViolated before anything runs.
    """
    L = Fraction(L)
    eps = Fraction(eps)
    r = Fraction(r)
    T = len(reference) - 1
    tube = eps * sum(L**k for k in range(T))
    if tube > r:
        raise TubeViolated(f"eps * sum L^k = {tube} > r = {r}")
    z = tuple(Fraction(v) for v in reference[0])
    errors = [Fraction(0)]
    bounds = [Fraction(0)]
    bound = Fraction(0)
    for n in range(T):
        z = tuple(Fraction(v) for v in phi(z))
        bound = L * bound + eps
        e = max(abs(a - Fraction(b)) for a, b in zip(z, reference[n + 1]))
        errors.append(e)
        bounds.append(bound)
        if e > bound:
            raise BoundViolated(
                f"step {n + 1}: error {e} exceeds bound {bound}", step=n + 1
            )
    return ShadowReport(errors=errors, bounds=bounds, radius=r, verdict=True)


# --- impossibility witnesses ---

@dataclass
class Witness:
    point: tuple
    description: str
    values: dict
    check: object = field(repr=False, default=None)

    def revalidate(self) -> bool:
        return self.check() if self.check is not None else True


def _poly_eval(coeffs, x):
    acc = Fraction(0)
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def _poly_iterate(coeffs, x, n):
    for _ in range(n):
        x = _poly_eval(coeffs, x)
    return x


def rounder_witness(coeffs, N: int, delta, eps, m_range=None) -> Witness:
    """A point u = m +- delta with |p^[N](u) - m| > eps.

    ``coeffs`` are ascending polynomial coefficients.  The search covers
    integers |m| <= deg*N + 2 by default; an empty search is a grid defect
    (NotFound), never a refutation of the impossibility.
    """
    delta = Fraction(delta)
    eps = Fraction(eps)
    if not 0 < eps < delta < Fraction(1, 2):
        raise ValueError("need 0 < eps < delta < 1/2")
    deg = max((i for i, c in enumerate(coeffs) if c), default=0)
    if m_range is None:
        bound = max(deg, 1) * max(N, 1) + 2
        m_range = sorted(range(-bound, bound + 1), key=lambda m: (abs(m), m < 0))
    for m in m_range:
        for u in (Fraction(m) + delta, Fraction(m) - delta):
            val = _poly_iterate(coeffs, u, N)
            dev = abs(val - m)
            if dev > eps:
                return Witness(
                    point=(u,),
                    description=f"|p^[{N}]({u}) - {m}| = {dev} > {eps}",
                    values={"u": u, "m": m, "value": val, "deviation": dev, "eps": eps},
                    check=lambda u=u, m=m: abs(_poly_iterate(coeffs, u, N) - m) > eps,
                )
    raise NotFound("no rounding violation on the searched grid (grid too small)")


def selector_witness(step_fn, output_index: int, C_max: int, n_max: int,
                     dimension: int) -> Witness:
    """A pair (C, n) violating the phase-selector contract
    pi(P^[n](C,0,...,0)) = 1 for n < C and 0 for n >= C."""
    if C_max < 1 or n_max < 1:
        raise ValueError("bounds must be at least 1")
    for C in range(C_max + 1):
        state = tuple([Fraction(C)] + [Fraction(0)] * (dimension - 1))
        for n in range(n_max + 1):
            required = 1 if n < C else 0
            got = state[output_index]
            if got != required:
                return Witness(
                    point=(C, n),
                    description=(
                        f"pi(P^[{n}]({C},0,...)) = {got}, selector requires {required}"
                    ),
                    values={"C": C, "n": n, "value": got, "required": Fraction(required)},
                    check=lambda got=got, required=required: got != required,
                )
            state = tuple(Fraction(v) for v in step_fn(state))
    raise NotFound("no selector violation within the searched bounds")


# --- the continuous rounder sigma ---

def _precision_bits() -> int:
    return int(os.environ.get("DYNCOMP_PRECISION_BITS", "120"))


def continuous_rounder_iterate(x, k: int):
    """k-fold iterate of sigma(x) = x - sin(2 pi x) / (2 pi) at working precision."""
    with mpmath.workprec(_precision_bits()):
        v = mpmath.mpf(Fraction(x).numerator) / mpmath.mpf(Fraction(x).denominator)
        for _ in range(k):
            v = v - mpmath.sin(2 * mpmath.pi * v) / (2 * mpmath.pi)
        return fraction_from_mpf(v)


def sigma_enclosure(x):
    """Interval enclosure of sigma(x) for rational x."""
    x = Fraction(x)
    with iv_prec(_precision_bits()):
        xi = mpmath.iv.mpf(x.numerator) / mpmath.iv.mpf(x.denominator)
        two_pi = 2 * mpmath.iv.pi
        out = xi - mpmath.iv.sin(two_pi * xi) / two_pi
        return fraction_from_mpf(out.a), fraction_from_mpf(out.b)


def sigma_contraction_report(offsets=None, centers=range(-2, 3)) -> dict:
    """Measured contraction of sigma toward the integers.

    Certified by interval enclosures: lambda is an upper bound on
    |sigma(m + d) - m| / |d| over the grid, and the integer fixed points
    are enclosed to width < 2^-40.
    """
    if offsets is None:
        offsets = [Fraction(k, 40) for k in range(1, 17)]  # up to 0.4
    lam = Fraction(0)
    for m in centers:
        lo, hi = sigma_enclosure(m)
        if not (lo <= m <= hi) or hi - lo > Fraction(1, 2**40):
            return {"pass": False, "reason": f"fixed point at {m} not certified"}
        for d in offsets:
            for signed in (d, -d):
                lo, hi = sigma_enclosure(m + signed)
                ratio = max(abs(lo - m), abs(hi - m)) / abs(signed)
                lam = max(lam, ratio)
    return {"pass": lam < 1, "lambda_upper": lam}


# --- cross-model agreement ---

@dataclass
class CrossCheckRow:
    x: tuple
    interp: tuple
    nf: tuple
    relu: tuple
    rho: tuple
    ode: tuple
    euler: tuple
    euler_s: int
    all_equal: bool


def cross_check(prog: LoopProgram, inputs, gadget_params=None,
                activation=None, euler_s_max: int = 16, nf=None) -> dict:
    """Six-way agreement table: interpreter, NF, ReLU, rho-decoded,
    ODE-rounded, Euler-rounded at the empirical threshold.

    A caller may supply the normal form explicitly (e.g. one loaded from a
    file); by default it is compiled fresh from the program.
    """
    from . import euler_backend as eb
    from .ode_backend import compile_nf_to_ode, ode_run, read_output

    if nf is None:
        nf = compile_to_nf(prog)
    block = compile_nf_to_relu(nf)
    act = activation or make_hard_sigmoid()
    rho_sys = compile_nf_to_rho(nf, act)
    ode_prog = compile_nf_to_ode(nf, gadget_params)
    euler_sys = eb.from_ode(ode_prog)

    rows = []
    bundle = []
    for x in inputs:
        x = tuple(int(v) for v in x)
        res = interpret(prog, x)
        cap = default_step_cap(prog, x)
        ref = nf_run(nf, x, cap)
        nf_out = nf_outputs(nf, ref)
        relu_tr = relu_run(block, x, ref.halted_at // 2)
        relu_out = tuple(
            int(relu_tr.states[ref.halted_at // 2][i]) for i in block.output_indices
        )
        rho_tr = rho_run(rho_sys, x, ref.halted_at)
        rho_out = tuple(
            nu_decode(rho_tr.states[ref.halted_at][i]) for i in rho_sys.output_indices
        )
        run = ode_run(ode_prog, x, ref=ref)
        ode_out = read_output(ode_prog, run)
        s_star, (erun, _) = eb.empirical_threshold(
            euler_sys, x, s_max=euler_s_max, ref=ref
        )
        euler_out = erun.rounded
        outs = [tuple(res.outputs), nf_out, relu_out, rho_out, ode_out, euler_out]
        equal = all(o == outs[0] for o in outs)
        row = CrossCheckRow(
            x=x,
            interp=tuple(res.outputs),
            nf=nf_out,
            relu=relu_out,
            rho=rho_out,
            ode=ode_out,
            euler=euler_out,
            euler_s=s_star,
            all_equal=equal,
        )
        rows.append(row)
        if not equal:
            bundle.append({"x": x, "outputs": outs, "nf_trace_tail": ref.states[-3:]})
    report = {"program": prog.name, "rows": rows, "all_equal": all(r.all_equal for r in rows)}
    if bundle:
        raise Mismatch(f"{len(bundle)} disagreeing inputs for {prog.name}", bundle=bundle)
    return report
