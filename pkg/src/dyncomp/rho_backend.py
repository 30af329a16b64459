"""Recurrent computation over [0,1]^m with a bounded activation.

Registers are carried as dyadic codes ``nu(n) = 2^-n`` while control
coordinates stay raw bits.  The one-step update is the gated sum

    R(z) = base(z) + sum_j Z(detector_input_j(z)) * addend_j(z)

where ``Z`` is the activation's detector: near 1 on [7/8, 1], near 0 on
[0, 5/8], with margin eta < 1/8.  In the translation-gated subclass every
register update is +/-1, so its coded form is a pure scaling by 2 or 1/2 and
the addends stay affine.

With the default hard sigmoid the detector is exact (eta = 0) and the coded
orbit reproduces the normal-form orbit exactly: register coordinates equal
``nu(R)`` at every step and bits are exactly 0/1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath

from ._mp import fraction_from_mpf as _fraction_from_mpf
from ._mp import iv_from_fraction, iv_prec
from .errors import (
    BasinViolation,
    DomainEscape,
    InadmissibleParameters,
    Unreadable,
    UnsupportedForm,
)
from .normal_form import NormalForm, Trace, _rat_str

ONE = Fraction(1)
HALF = Fraction(1, 2)


def nu_encode(n: int) -> Fraction:
    """nu(n) = 2^-n, exactly."""
    if n < 0:
        raise ValueError("codes are defined for naturals")
    return Fraction(1, 2**n)


def nu_decode(q) -> int:
    """Recover n from any point of the readable basin |q - nu(n)| < nu(n)/4.

    The candidate is the least k with 2^k * q >= 3/4; the basin condition is
    then verified, and failing it is an error, never a silent answer.
    """
    q = Fraction(q)
    if q <= 0 or q > Fraction(5, 4):
        raise Unreadable(f"{q} is in no readable basin")
    k = 0
    scaled = q
    while scaled < Fraction(3, 4):
        scaled *= 2
        k += 1
    if abs(q - nu_encode(k)) < nu_encode(k) / 4:
        return k
    raise Unreadable(f"{q} is in no readable basin")


@dataclass(frozen=True)
class Activation:
    """A bounded activation with its zero-detector and certified margin.

    ``eval(u, s)`` returns a rational within 2^-s of rho(u); ``modulus(s)``
    is a modulus of uniform continuity; the detector Z is rho itself, with
    |Z| <= eta on [0, 5/8] and |Z - 1| <= eta on [7/8, 1].
    """

    name: str
    eta: Fraction
    params: dict = field(default_factory=dict)
    exact: bool = True

    def eval(self, u, s: int = 64) -> Fraction:
        u = Fraction(u)
        if self.name == "hard_sigmoid":
            return min(ONE, max(Fraction(0), 4 * u - Fraction(5, 2)))
        if self.name == "logistic":
            k = self.params["steepness"]
            t = -k * (u - Fraction(3, 4))
            prec = max(s + 16, 50)
            while True:
                with iv_prec(prec):
                    val = mpmath.iv.mpf(1) / (mpmath.iv.mpf(1) + mpmath.iv.exp(iv_from_fraction(t)))
                    if val.delta < mpmath.mpf(2) ** (-s - 1):
                        return min(ONE, max(Fraction(0), _fraction_from_mpf(val.mid)))
                prec *= 2
        raise ValueError(f"unknown activation {self.name}")

    def modulus(self, s: int) -> int:
        """m with |u-v| <= 2^-m implying |rho(u)-rho(v)| <= 2^-s."""
        lip = self.lipschitz()
        return s + max(0, math.ceil(math.log2(float(lip)))) if lip > 1 else s

    def lipschitz(self) -> Fraction:
        if self.name == "hard_sigmoid":
            return Fraction(4)
        return self.params["steepness"] / 4

    def z_eval(self, u, s: int = 64) -> Fraction:
        return self.eval(u, s)

    def detector_description(self) -> str:
        return "Z(u) = rho(u)  (depth-1 block, identity affines)"


def make_hard_sigmoid() -> Activation:
    """rho(u) = min(1, max(0, 4u - 5/2)); exact detector with eta = 0."""
    return Activation(name="hard_sigmoid", eta=Fraction(0), exact=True)


def make_logistic(steepness) -> Activation:
    """Steep logistic centered at 3/4, rescaled into [0,1].

    eta is a certified upper bound on 1/(1 + e^(steepness/8)); parameters
    with eta >= 1/8 are rejected.
    """
    k = Fraction(steepness)
    if k <= 0:
        raise InadmissibleParameters("steepness must be positive")
    with iv_prec(80):
        lo = mpmath.iv.mpf(1) / (mpmath.iv.mpf(1) + mpmath.iv.exp(iv_from_fraction(k / 8)))
        eta = _fraction_from_mpf(lo.b) + Fraction(1, 2**70)
    if eta >= Fraction(1, 8):
        raise InadmissibleParameters(
            f"detector margin {float(eta):.4f} >= 1/8 at steepness {k}"
        )
    return Activation(name="logistic", eta=eta, params={"steepness": k}, exact=False)


# gate kinds
_REG_TEST = "reg_test"  # argument is a register: fires iff R >= 1
_CONTROL = "control"  # affine over control bits with values in {-1,0,1}


@dataclass
class RhoSystem:
    """Coded one-step update of a translation-gated normal form."""

    m: int
    base_rows: tuple  # per coordinate: (terms, offset) over the coded state
    gates: tuple  # (kind, detector_terms, detector_offset, contributions)
    coded_registers: tuple
    raw_bits: tuple
    layout: dict
    output_indices: tuple
    activation: Activation
    num_inputs: int

    @property
    def num_gates(self):
        return len(self.gates)


def _classify_gate(nf: NormalForm, q, ctrl) -> str:
    terms = [(j, c) for j, c in enumerate(q.matrix[0]) if c]
    if (
        len(terms) == 1
        and terms[0][1] == 1
        and q.offset[0] == 0
        and terms[0][0] not in ctrl
    ):
        return _REG_TEST
    if all(j in ctrl and c in (-1, 1) for j, c in terms):
        return _CONTROL
    raise UnsupportedForm(f"gate argument {terms} + {q.offset[0]} mixes registers and bits")


def compile_nf_to_rho(nf: NormalForm, act: Activation) -> RhoSystem:
    """Transport the normal form to the coded domain.

    Register zero tests become the detector read on the coded register
    (nu(R) = 1 iff R = 0); Boolean gates on control bits go through
    Z((q+1)/2); gated +/-1 register updates become gated scalings.
    """
    if not nf.is_translation_gated():
        raise UnsupportedForm("normal form is not translation-gated")
    ctrl = nf.control_indices()
    regs = [i for i in range(nf.m) if i not in ctrl]

    base_rows = []
    for i in range(nf.m):
        row = nf.base.matrix[i]
        terms = [(j, c) for j, c in enumerate(row) if c]
        if i in ctrl:
            base_rows.append((tuple((j, Fraction(c)) for j, c in terms), Fraction(nf.base.offset[i])))
        else:
            if terms != [(i, 1)] or nf.base.offset[i] != 0:
                raise UnsupportedForm("register base row must be the identity")
            base_rows.append((((i, ONE),), Fraction(0)))

    gates = []
    for q, a in nf.gated:
        kind = _classify_gate(nf, q, ctrl)
        if kind == _REG_TEST:
            reg = next(j for j, c in enumerate(q.matrix[0]) if c)
            det_terms = ((reg, ONE),)
            det_off = Fraction(0)
        else:
            det_terms = tuple(
                (j, Fraction(c, 2)) for j, c in enumerate(q.matrix[0]) if c
            )
            det_off = Fraction(q.offset[0] + 1, 2)
        contributions = []
        for i, c in enumerate(a.offset):
            if not c:
                continue
            if i in ctrl:
                contributions.append(("bit", i, Fraction(c)))
            else:
                if c == 1:
                    contributions.append(("scale", i, Fraction(-1, 2)))
                elif c == -1:
                    contributions.append(("scale", i, ONE))
                else:
                    raise UnsupportedForm(f"register translation by {c} is not codable")
        gates.append((kind, det_terms, det_off, tuple(contributions)))

    layout = dict(nf.layout)
    return RhoSystem(
        m=nf.m,
        base_rows=tuple(base_rows),
        gates=tuple(gates),
        coded_registers=tuple(regs),
        raw_bits=tuple(sorted(ctrl)),
        layout=layout,
        output_indices=nf.output_indices,
        activation=act,
        num_inputs=len(nf.layout.get("inputs", nf.layout.get("data", []))),
    )


def rho_initial_state(sys: RhoSystem, x) -> tuple:
    """Coded registers start at nu(value) (nu(0)=1 padding); bits start raw 0."""
    state = [Fraction(0)] * sys.m
    for i in sys.coded_registers:
        state[i] = ONE
    for i, v in enumerate(x):
        state[i] = nu_encode(int(v))
    return tuple(state)


def rho_step(sys: RhoSystem, z, prec: int = 64):
    act = sys.activation
    gate_vals = []
    for kind, det_terms, det_off, _ in sys.gates:
        u = sum(c * z[j] for j, c in det_terms) + det_off
        zval = act.z_eval(u, prec)
        if kind == _REG_TEST:
            gate_vals.append(ONE - zval)
        else:
            gate_vals.append(zval)
    out = [sum(c * z[j] for j, c in terms) + b for terms, b in sys.base_rows]
    for g, (_, _, _, contributions) in zip(gate_vals, sys.gates):
        if not g:
            continue
        for kind, i, coef in contributions:
            if kind == "bit":
                out[i] += g * coef
            else:
                out[i] += g * coef * z[i]
    # the gated sum may overshoot [0,1] by a detector-margin sliver before
    # the codomain clamp; anything beyond that budget is a real escape
    slack = 4 * sys.m * sys.activation.eta
    for i, v in enumerate(out):
        if v < -slack or v > 1 + slack:
            raise DomainEscape(f"coordinate {i} left [0,1]: {v}")
        if v < 0 or v > 1:
            out[i] = min(ONE, max(Fraction(0), v))
    return tuple(out)


def rho_run(sys: RhoSystem, x, T: int, precision: int = 2) -> Trace:
    """Iterate T coded steps from the raw encoded input.

    ``precision`` is the requested output precision s >= 2; activation
    evaluations run with comfortable extra bits so that approximation error
    stays far inside the 2^-s relative budget on the bundled corpus scale.
    """
    if precision < 2:
        raise ValueError("output precision must be at least 2")
    prec = precision + 32 + max(0, T).bit_length() * 2
    state = rho_initial_state(sys, x)
    states = [state]
    halt = sys.layout.get("halt")
    halted_at = None
    for n in range(T):
        state = rho_step(sys, state, prec)
        states.append(state)
        if halt and halted_at is None and state[halt[0]] >= Fraction(3, 4):
            halted_at = n + 1
    return Trace(states=states, roles=sys.layout, halted_at=halted_at)


def rho_outputs(sys: RhoSystem, trace: Trace, at: int | None = None):
    n = at if at is not None else (trace.halted_at or len(trace.states) - 1)
    return tuple(trace.states[n][i] for i in sys.output_indices)


def rho_decode_outputs(sys: RhoSystem, trace: Trace, at: int | None = None):
    return tuple(nu_decode(v) for v in rho_outputs(sys, trace, at))


def code_state(sys: RhoSystem, y) -> tuple:
    """nu-code an integer normal-form state (bits stay raw)."""
    state = []
    for i, v in enumerate(y):
        if i in set(sys.raw_bits):
            state.append(Fraction(v))
        else:
            state.append(nu_encode(int(v)))
    return tuple(state)


def per_program_constant(sys: RhoSystem) -> int:
    """Per-system constant from coefficient norms, sized so one coded step
    maps an epsilon-basin into the successor state's epsilon-basin."""
    maxc = 1
    for terms, _ in sys.base_rows:
        for _, c in terms:
            maxc = max(maxc, abs(c))
    c_a = 2 * sys.m * maxc
    c_q = c_a
    c_r = (sys.num_gates + 1) * c_a
    return max(1, math.ceil(math.log2(float(max(8 * c_q, 4 * c_q, 2 * c_r)))))


def s0_for_input(sys: RhoSystem, trace_bound: int) -> int:
    """Output precision s0(x) = max(c(P) * beta(x), 2)."""
    return max(2, per_program_constant(sys) * max(1, trace_bound))


def basin_epsilon_bound(sys: RhoSystem) -> Fraction:
    """Largest radius the one-step basin containment is certified for."""
    c = per_program_constant(sys)
    return min(Fraction(1, 2**c), Fraction(1, 16))


def basin_step_check(sys: RhoSystem, y, epsilon, samples: int = 0, nf: NormalForm = None):
    """Check R(B_eps(y)) inside B_eps(P(y)) on corners and random points.

    ``y`` must be a reference-orbit state with integer gate arguments; the
    image of the coded basin must land in the basin of the successor state.
    Returns a report dict with the max relative register error observed.
    """
    epsilon = Fraction(epsilon)
    if epsilon >= Fraction(1, 8):
        raise BasinViolation(f"radius {epsilon} is not below 1/8")
    if nf is None:
        raise ValueError("the source normal form is required to compute P(y)")
    from .normal_form import nf_step

    target = code_state(sys, nf_step(nf, y))
    center = code_state(sys, y)
    reg_set = [i for i in sys.coded_registers]

    points = [center]
    if epsilon > 0:
        for corner in range(1, min(2 ** len(reg_set), 2**12)):
            pt = list(center)
            for b, i in enumerate(reg_set):
                if corner >> b & 1:
                    pt[i] = min(ONE, pt[i] * (1 + epsilon))
                else:
                    pt[i] = pt[i] * (1 - epsilon)
            points.append(tuple(pt))
            if len(points) > samples > 0:
                break

    worst = Fraction(0)
    for pt in points:
        img = rho_step(sys, pt)
        for i in range(sys.m):
            if i in set(sys.raw_bits):
                err = abs(img[i] - target[i])
                if err > epsilon:
                    raise BasinViolation(
                        f"bit {i} missed target by {err}", witness=pt
                    )
            else:
                rel = abs(img[i] - target[i]) / target[i]
                worst = max(worst, rel)
                if rel > epsilon:
                    raise BasinViolation(
                        f"register {i} relative error {rel} > {epsilon}", witness=pt
                    )
    return {"points": len(points), "max_relative_error": worst, "epsilon": epsilon}


# --- serialization ---

def rho_to_json_dict(sys: RhoSystem) -> dict:
    act = {"name": sys.activation.name}
    if sys.activation.params:
        act["params"] = {k: _rat_str(v) for k, v in sys.activation.params.items()}
    return {
        "m": sys.m,
        "base": [
            {"terms": [[j, _rat_str(c)] for j, c in terms], "offset": _rat_str(b)}
            for terms, b in sys.base_rows
        ],
        "gates": [
            {
                "kind": kind,
                "detector": {
                    "terms": [[j, _rat_str(c)] for j, c in det_terms],
                    "offset": _rat_str(det_off),
                },
                "contributions": [[k, i, _rat_str(c)] for k, i, c in contribs],
            }
            for kind, det_terms, det_off, contribs in sys.gates
        ],
        "coded_registers": list(sys.coded_registers),
        "raw_bits": list(sys.raw_bits),
        "layout": {k: list(v) for k, v in sorted(sys.layout.items())},
        "outputs": list(sys.output_indices),
        "activation": act,
        "num_inputs": sys.num_inputs,
    }


def activation_from_json(d: dict) -> Activation:
    if d["name"] == "hard_sigmoid":
        return make_hard_sigmoid()
    if d["name"] == "logistic":
        return make_logistic(Fraction(d["params"]["steepness"]))
    raise ValueError(f"unknown activation {d['name']}")


def rho_from_json_dict(d: dict) -> RhoSystem:
    return RhoSystem(
        m=int(d["m"]),
        base_rows=tuple(
            (tuple((j, Fraction(c)) for j, c in row["terms"]), Fraction(row["offset"]))
            for row in d["base"]
        ),
        gates=tuple(
            (
                g["kind"],
                tuple((j, Fraction(c)) for j, c in g["detector"]["terms"]),
                Fraction(g["detector"]["offset"]),
                tuple((k, i, Fraction(c)) for k, i, c in g["contributions"]),
            )
            for g in d["gates"]
        ),
        coded_registers=tuple(d["coded_registers"]),
        raw_bits=tuple(d["raw_bits"]),
        layout={k: list(v) for k, v in d["layout"].items()},
        output_indices=tuple(d["outputs"]),
        activation=activation_from_json(d["activation"]),
        num_inputs=int(d["num_inputs"]),
    )


def rho_dumps(sys: RhoSystem) -> str:
    return json.dumps(rho_to_json_dict(sys), indent=2, sort_keys=True)


def rho_loads(text: str) -> RhoSystem:
    return rho_from_json_dict(json.loads(text))
