"""Step-size-controlled polynomial simulation: Euler discretization of the
compiled field with the step size stored as a state register.

The simulator map is ``E_F(Y, h) = (Y + h F(Y), h)``; the step register is
the appended last coordinate.  The theoretical step threshold comes from the
global Euler error bound ``C(R,T) = L(R) M(R) T e^(L(R) T)`` with
coefficient-norm majorants L, M; it is astronomically conservative, so runs
use the measured (empirical) threshold, while the theoretical one is
computed exactly as an integer and reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import mpmath
import numpy as np

from . import _kernels
from ._mp import fraction_from_mpf, iv_prec
from .errors import NotReached
from .normal_form import Trace
from .ode_backend import OdeProgram, PolyField

DEFAULT_SNAP_BITS = 40


@dataclass
class EulerSystem:
    """An Euler simulator over a polynomial field.

    For compiled programs the field carries its structured twin and the
    source program supplies the observation recipe; toy fields (tests,
    experiments) may have no recipe at all.
    """

    field: PolyField
    source: OdeProgram | None = None

    @property
    def M(self):
        return self.field.M

    def tau(self, x, ref=None) -> int:
        if self.source is None:
            raise ValueError("this system has no observation recipe")
        return self.source.tau(x, ref)

    def output_indices(self):
        return self.source.output_indices


def from_ode(prog: OdeProgram) -> EulerSystem:
    """The Euler backend consumes the very field the ODE backend integrates."""
    return EulerSystem(field=prog.field_poly, source=prog)


def euler_step(sys: EulerSystem, state):
    """One exact simulator step: (Y, h) -> (Y + h F(Y), h), in rationals."""
    state = [Fraction(v) for v in state]
    y, h = state[:-1], state[-1]
    if len(y) != sys.field.M:
        raise ValueError(f"state must have dimension {sys.field.M} + 1")
    f = (
        sys.field.structured.eval_exact(y)
        if sys.field.structured is not None
        else sys.field.eval_exact(y)
    )
    return tuple(a + h * b for a, b in zip(y, f)) + (h,)


# --- majorants and thresholds ---

@dataclass
class MajorantReport:
    """Coefficient-norm bounds of the field on the box [-R, R]^M."""

    R: int
    M_sharp: int
    L_sharp: int

    def log2_C_upper(self, T) -> Fraction:
        """Certified upper bound on log2 of C(R,T) = L M T e^(L T)."""
        T = Fraction(T)
        lt = Fraction(self.L_sharp) * T
        with iv_prec(max(80, _frac_bits(lt) + 64)):
            log2e_hi = fraction_from_mpf((1 / mpmath.iv.log(2)).b)
        head = Fraction(self.M_sharp * self.L_sharp) * T
        return _log2_upper(head) + lt * log2e_hi


def _frac_bits(q: Fraction) -> int:
    return q.numerator.bit_length() + q.denominator.bit_length()


def _log2_upper(q: Fraction) -> Fraction:
    """A rational upper bound on log2(q) for q >= 1."""
    if q <= 0:
        raise ValueError("positive value required")
    n = q.numerator.bit_length()
    d = q.denominator.bit_length()
    return Fraction(n - d + 1)


def majorants(field: PolyField, R: int) -> MajorantReport:
    """Integer-valued size and Lipschitz bounds from coefficient norms:
    M_sharp = max_i sum_t |c| R^deg, L_sharp = max_i sum_t |c| deg R^(deg-1)."""
    if R < 1:
        raise ValueError("R must be at least 1")
    m_sharp = 0
    l_sharp = 0
    for coord in field.terms:
        msum = Fraction(0)
        lsum = Fraction(0)
        for c, e in coord:
            deg = sum(e)
            msum += abs(c) * Fraction(R) ** deg
            if deg >= 1:
                lsum += abs(c) * deg * Fraction(R) ** (deg - 1)
        m_sharp = max(m_sharp, msum)
        l_sharp = max(l_sharp, lsum)
    return MajorantReport(R=R, M_sharp=int(math.ceil(m_sharp)), L_sharp=int(math.ceil(l_sharp)))


def spot_check_majorants(field: PolyField, report: MajorantReport,
                         n_pairs: int = 100, seed: int = 0) -> bool:
    """Random pairs in the box must respect both bounds."""
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        y = rng.uniform(-report.R, report.R, field.M)
        z = rng.uniform(-report.R, report.R, field.M)
        fy = field.eval_float(y)
        fz = field.eval_float(z)
        if np.max(np.abs(fy)) > report.M_sharp + 1e-9:
            return False
        dy = np.max(np.abs(y - z))
        if dy > 0 and np.max(np.abs(fy - fz)) > report.L_sharp * dy + 1e-9:
            return False
    return True


def threshold_for_constant(C) -> int:
    """Smallest s with 2^-s C < 1/4, for an explicitly rational C."""
    C = Fraction(C)
    if C <= 0:
        return 0
    s = 0
    bound = 4 * C
    pow2 = Fraction(1)
    while pow2 <= bound:
        pow2 *= 2
        s += 1
    return s


def theoretical_threshold(sys: EulerSystem, x, ref=None) -> int:
    """Smallest s with 2^-s C(R, T) < 1/4 for R = safety bound + 1, T = tau + 1.

    The constant involves e^(L T), so the comparison runs on a certified
    rational upper bound of log2 C; the result is an exact integer.
    """
    if sys.source is None:
        raise ValueError("this system has no observation recipe")
    if ref is None:
        ref = sys.source.reference_trace(x)
    R = sys.source.safety_bound(x, ref) + 1
    T = Fraction(sys.source.tau(x, ref) + 1)
    rep = majorants(sys.field, R)
    if rep.M_sharp == 0 or rep.L_sharp == 0:
        return 0
    # smallest s with s > 2 + log2(C); use the certified upper bound
    log2_4c = 2 + rep.log2_C_upper(T)
    return int(math.floor(log2_4c)) + 1


def observation_count(sys: EulerSystem, x, s: int, ref=None) -> int:
    """N(x, s) = ceil(tau(x) * 2^s)."""
    return int(math.ceil(Fraction(sys.tau(x, ref)) * 2**s))


# --- running ---

@dataclass
class EulerRunResult:
    x: tuple
    s: int
    N: int
    pre_rounding: tuple
    rounded: tuple
    deviation: float
    final_state: object
    bounded: bool = True  # iterates stayed inside the safety box


def euler_run(sys: EulerSystem, x, s: int, arithmetic: str = "float",
              snap_bits: int = DEFAULT_SNAP_BITS, ref=None) -> EulerRunResult:
    """Iterate N(x, s) simulator steps from the raw initial state and round.

    The float path truncates every coordinate to ``snap_bits`` dyadic bits
    after each step (directed, toward minus infinity), so every iterate is a
    dyadic rational and repeated runs are bit-identical; the truncation is
    part of the measured error budget.  The exact path keeps full rationals
    and is only feasible for small step counts.
    """
    if sys.source is None:
        raise ValueError("this system has no observation recipe")
    prog = sys.source
    if ref is None:
        ref = prog.reference_trace(x)
    N = observation_count(sys, x, s, ref)
    h = Fraction(1, 2**s)
    if arithmetic == "exact":
        y = prog.initial_state_exact(x)
        for _ in range(N):
            f = prog.structured.eval_exact(y)
            y = [a + h * b for a, b in zip(y, f)]
        final = tuple(y)
        pre = tuple(y[i] for i in prog.output_indices)
    else:
        y0 = prog.initial_state(x)
        snap = float(2**snap_bits)
        y = _kernels.euler_iterate(y0, float(h), N, snap,
                                   prog.structured.kernel_args())
        final = tuple(y)
        pre = tuple(float(y[i]) for i in prog.output_indices)
    ref_out = tuple(
        int(ref.states[ref.halted_at][i]) for i in prog.nf.output_indices
    )
    rounded = tuple(int(math.floor(float(v) + 0.5)) for v in pre)
    deviation = max(abs(float(p) - r) for p, r in zip(pre, ref_out))
    box = prog.safety_bound(x, ref) + 1
    return EulerRunResult(
        x=tuple(int(v) for v in x),
        s=s,
        N=N,
        pre_rounding=pre,
        rounded=rounded,
        deviation=deviation,
        final_state=final,
        bounded=bool(max(abs(float(v)) for v in final) <= box),
    )


def empirical_threshold(sys: EulerSystem, x, s_max: int = 16,
                        s_min: int = 4, expected=None, ref=None):
    """Smallest s <= s_max whose run and the run at s+1 both round correctly
    with iterates inside the safety box (the global error bound assumes it;
    a diverged trajectory whose output coordinate happens to round right
    does not qualify).

    Returns (s_star, (run_at_s, run_at_s_plus_1)).
    """
    if sys.source is None:
        raise ValueError("this system has no observation recipe")
    if ref is None:
        ref = sys.source.reference_trace(x)
    if expected is None:
        expected = tuple(
            int(ref.states[ref.halted_at][i]) for i in sys.source.nf.output_indices
        )
    expected = tuple(int(v) for v in expected)
    runs = {}

    def at(s):
        if s not in runs:
            runs[s] = euler_run(sys, x, s, ref=ref)
        return runs[s]

    def good(s):
        run = at(s)
        return run.bounded and run.rounded == expected

    for s in range(s_min, s_max + 1):
        if good(s) and good(s + 1):
            return s, (at(s), at(s + 1))
    raise NotReached(f"no threshold at or below s_max={s_max} for input {x}")


def halving_deviation_ratio(sys: EulerSystem, x, s_base: int,
                            flow_steps_per_cycle: int = 512,
                            cycles: float = 2.0):
    """Measure the first-order step response of the discretization error.

    The deviation is taken against the continuous flow (fine-step RK4, whose
    own error sits orders of magnitude below) at a dyadic time about two
    clock cycles in, where the trajectory still carries a live transient;
    at the far observation time a short program has fully settled onto the
    truncation grid and no step signal remains.  The global error bound is
    first order in h, so halving the step should roughly halve the
    deviation.  Returns (ratio, dev, dev_half).
    """
    from .ode_backend import KAPPA0

    prog = sys.source
    t_star = math.ceil(cycles * KAPPA0 * 2**s_base) / 2.0**s_base
    y0 = prog.initial_state(x)
    flow = _kernels.rk4_sampled(
        y0, np.asarray([0.0, t_star]), KAPPA0 / flow_steps_per_cycle,
        prog.structured.kernel_args(),
    )[-1]
    devs = []
    snap = float(2**DEFAULT_SNAP_BITS)
    for s in (s_base, s_base + 1):
        n_steps = round(t_star * 2**s)
        state = _kernels.euler_iterate(y0, 2.0**-s, n_steps, snap,
                                       prog.structured.kernel_args())
        devs.append(float(np.max(np.abs(state - flow))))
    return devs[1] / devs[0], devs[0], devs[1]


def step_register_trace(sys: EulerSystem, x, s: int, steps: int = 8) -> Trace:
    """A short exact run exposing (Y, h) states; the last coordinate is h."""
    state = tuple(sys.source.initial_state_exact(x)) + (Fraction(1, 2**s),)
    states = [state]
    for _ in range(steps):
        state = euler_step(sys, state)
        states.append(state)
    roles = dict(sys.source.roles())
    roles["step_register"] = [sys.field.M]
    return Trace(states=states, roles=roles, halted_at=None)
