"""Threshold-affine normal form: the hinge IR between LOOP and the dynamical backends.

One step of the normal form is ``P(y) = A0(y) + sum_j Theta(q_j(y)) * A_j(y)``
with integer-coefficient affine maps.  On the reference orbit from
``(x, 0, ..., 0)`` every state is integral and every gate argument is an
integer, so the threshold is never evaluated inside its ambiguous region.

The compiler lowers each LOOP instruction to counter-machine micro-code in
which every gated data update is a gated +/-1 translation (the
"translation-gated" subclass).  Each machine micro-step costs two NF steps:
an even test step writing threshold bits for every tested register, then an
odd move step gating program-counter and register updates on those bits.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import AmbiguousGate, CapExceeded
from .loop_lang import Clear, Copy, For, IncrCopy, LoopProgram


class ThetaMode(enum.Enum):
    STRICT = "strict"
    UNIFORM_MARGIN = "uniform_margin"


def theta(u, mode: ThetaMode = ThetaMode.STRICT) -> int:
    """Threshold gate: 0 below, 1 above, error inside the undefined region."""
    u = Fraction(u)
    if mode is ThetaMode.STRICT:
        lo, hi = Fraction(0), Fraction(1)
    else:
        lo, hi = Fraction(1, 4), Fraction(3, 4)
    if u <= lo:
        return 0
    if u >= hi:
        return 1
    raise AmbiguousGate(u)


def zero_gate(u, mode: ThetaMode = ThetaMode.STRICT) -> int:
    """Exact zero test on integers: 1 - Theta(u) - Theta(-u)."""
    u = Fraction(u)
    return 1 - theta(u, mode) - theta(-u, mode)


@dataclass(frozen=True)
class IntAffine:
    """y -> matrix @ y + offset, all entries integers."""

    matrix: tuple  # rows x cols, tuple of tuples of int
    offset: tuple  # length rows

    def __post_init__(self):
        rows = len(self.matrix)
        if rows != len(self.offset):
            raise ValueError("matrix/offset row mismatch")
        if rows:
            cols = len(self.matrix[0])
            for row in self.matrix:
                if len(row) != cols:
                    raise ValueError("ragged matrix")
        for row in self.matrix:
            for v in row:
                if not isinstance(v, int):
                    raise ValueError("coefficients must be integers")
        for v in self.offset:
            if not isinstance(v, int):
                raise ValueError("offsets must be integers")

    @property
    def rows(self) -> int:
        return len(self.matrix)

    @property
    def cols(self) -> int:
        return len(self.matrix[0]) if self.matrix else 0

    def apply(self, y):
        return tuple(
            sum(c * y[j] for j, c in enumerate(row) if c) + b
            for row, b in zip(self.matrix, self.offset)
        )

    def is_constant(self) -> bool:
        return all(all(c == 0 for c in row) for row in self.matrix)


def _sparse_rows(aff: IntAffine):
    return [
        ([(j, c) for j, c in enumerate(row) if c], b)
        for row, b in zip(aff.matrix, aff.offset)
    ]


@dataclass
class NormalForm:
    """The threshold-affine IR of a compiled LOOP program."""

    m: int
    base: IntAffine
    gated: tuple  # of (q: IntAffine m->1, A: IntAffine m->m)
    layout: dict  # role -> list of coordinate indices
    output_indices: tuple
    phase_period: int = 2
    _prepared: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.base.rows != self.m or self.base.cols != self.m:
            raise ValueError("base dimension mismatch")
        for q, a in self.gated:
            if q.rows != 1 or q.cols != self.m:
                raise ValueError("gate argument must map m -> 1")
            if a.rows != self.m or a.cols != self.m:
                raise ValueError("gated addend dimension mismatch")

    @property
    def num_gates(self) -> int:
        return len(self.gated)

    def control_indices(self) -> set:
        ctrl = set()
        for role in ("pc", "test", "start", "halt"):
            ctrl.update(self.layout.get(role, ()))
        return ctrl

    def is_translation_gated(self) -> bool:
        """True when every gated addend is a constant translation vector."""
        return all(a.is_constant() for _, a in self.gated)

    def prepared(self):
        if self._prepared is None:
            self._prepared = _PreparedNF(self)
        return self._prepared


class _PreparedNF:
    """Sparse evaluation form of a NormalForm."""

    def __init__(self, nf: NormalForm):
        self.nf = nf
        self.base_rows = _sparse_rows(nf.base)
        self.gates = []
        for q, a in nf.gated:
            q_terms = [(j, c) for j, c in enumerate(q.matrix[0]) if c]
            q_off = q.offset[0]
            if a.is_constant():
                addend = ("const", [(i, c) for i, c in enumerate(a.offset) if c])
            else:
                addend = ("affine", _sparse_rows(a))
            self.gates.append((q_terms, q_off, addend))
        halt = nf.layout.get("halt")
        self.halt_index = halt[0] if halt else None

    def step(self, y, mode: ThetaMode):
        out = [
            sum(c * y[j] for j, c in terms) + b if terms or b else 0
            for terms, b in self.base_rows
        ]
        for gi, (q_terms, q_off, addend) in enumerate(self.gates):
            u = sum(c * y[j] for j, c in q_terms) + q_off
            try:
                fire = theta(u, mode)
            except AmbiguousGate:
                raise AmbiguousGate(u, gate_index=gi) from None
            if not fire:
                continue
            kind, data = addend
            if kind == "const":
                for i, c in data:
                    out[i] += c
            else:
                for i, (terms, b) in enumerate(data):
                    if terms or b:
                        out[i] += sum(c * y[j] for j, c in terms) + b
        return tuple(out)


def nf_step(nf: NormalForm, y, mode: ThetaMode = ThetaMode.STRICT):
    """One application of P; raises AmbiguousGate with the offending gate index."""
    if len(y) != nf.m:
        raise ValueError(f"state has dimension {len(y)}, expected {nf.m}")
    return nf.prepared().step(tuple(y), mode)


@dataclass
class Trace:
    """Time-indexed state sequence with role-annotated coordinates."""

    states: list
    roles: dict
    halted_at: int | None = None
    times: list | None = None  # set by continuous backends
    flags: list | None = None  # per-sample markers, e.g. "cycle" / "window"

    def __len__(self):
        return len(self.states)

    def max_norm(self):
        return max(abs(v) for state in self.states for v in state)

    def to_csv(self) -> str:
        index_role = {}
        for role, idxs in self.roles.items():
            for k, i in enumerate(idxs):
                index_role[i] = f"{role}[{k}]"
        buf = io.StringIO()
        w = csv.writer(buf)
        header = ["step", "time", "coordinate", "role", "value"]
        if self.flags is not None:
            header.append("flag")
        w.writerow(header)
        for n, state in enumerate(self.states):
            t = self.times[n] if self.times is not None else n
            for i, v in enumerate(state):
                row = [n, t, i, index_role.get(i, ""), _rat_str(v)]
                if self.flags is not None:
                    row.append(self.flags[n])
                w.writerow(row)
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        d = {
            "states": [[_rat_str(v) for v in s] for s in self.states],
            "roles": {k: list(v) for k, v in self.roles.items()},
            "halted_at": self.halted_at,
        }
        if self.times is not None:
            d["times"] = [_rat_str(t) for t in self.times]
        if self.flags is not None:
            d["flags"] = list(self.flags)
        return d


def _rat_str(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    f = Fraction(v)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


# --- micro-code ---

@dataclass(frozen=True)
class _Inc:
    reg: int
    next: int


@dataclass(frozen=True)
class _Drain:
    reg: int
    next: int


@dataclass(frozen=True)
class _Transfer:
    src: int
    dsts: tuple
    next: int


@dataclass(frozen=True)
class _LoopTest:
    counter: int
    body: int
    exit: int


@dataclass(frozen=True)
class _Halt:
    pass


class _MicroBuilder:
    def __init__(self, prog: LoopProgram):
        self.prog = prog
        self.n_regs = prog.num_registers
        self.counters = {}
        self.tmp = None
        self.ops = []

    def new_counter(self, site) -> int:
        idx = self.n_regs + len(self.counters)
        self.counters[site] = idx
        return idx

    def get_tmp(self) -> int:
        if self.tmp is None:
            self.tmp = -1  # placeholder, fixed up after counters are allocated
        return self.tmp

    def emit(self, op) -> int:
        self.ops.append(op)
        return len(self.ops) - 1

    def placeholder(self) -> int:
        self.ops.append(None)
        return len(self.ops) - 1

    def build(self):
        self._compile_body(self.prog.body)
        self.emit(_Halt())
        n_counters = len(self.counters)
        tmp_index = self.n_regs + n_counters
        fixed = []
        for op in self.ops:
            if isinstance(op, _Transfer):
                dsts = tuple(tmp_index if d == -1 else d for d in op.dsts)
                src = tmp_index if op.src == -1 else op.src
                op = _Transfer(src, dsts, op.next)
            elif isinstance(op, _Drain) and op.reg == -1:
                op = _Drain(tmp_index, op.next)
            fixed.append(op)
        self.ops = fixed
        uses_tmp = self.tmp is not None
        return self.ops, self.counters, (tmp_index if uses_tmp else None)

    def _compile_body(self, body):
        for instr in body:
            self._compile_instr(instr)

    def _compile_instr(self, instr):
        here = len(self.ops)
        if isinstance(instr, Clear):
            self.emit(_Drain(instr.reg, here + 1))
        elif isinstance(instr, Copy):
            if instr.dst == instr.src:
                return
            self._emit_copy(instr.dst, instr.src)
        elif isinstance(instr, IncrCopy):
            if instr.dst != instr.src:
                self._emit_copy(instr.dst, instr.src)
            at = len(self.ops)
            self.emit(_Inc(instr.dst, at + 1))
        elif isinstance(instr, For):
            self._compile_for(instr)
        else:
            raise TypeError(instr)

    def _emit_copy(self, dst, src):
        tmp = self.get_tmp()
        at = len(self.ops)
        self.emit(_Drain(dst, at + 1))
        at = len(self.ops)
        self.emit(_Transfer(src, (dst, tmp), at + 1))
        at = len(self.ops)
        self.emit(_Transfer(tmp, (src,), at + 1))

    def _compile_for(self, instr: For):
        counter = self.new_counter(len(self.ops))
        tmp = self.get_tmp()
        at = len(self.ops)
        self.emit(_Transfer(instr.reg, (counter, tmp), at + 1))
        at = len(self.ops)
        self.emit(_Transfer(tmp, (instr.reg,), at + 1))
        test_at = self.placeholder()
        self._compile_body(instr.body)
        after_body = len(self.ops)
        body_entry = test_at if after_body == test_at + 1 else test_at + 1
        # every fall-through out of the body loops back to the test
        for i in range(test_at + 1, after_body):
            self.ops[i] = _retarget(self.ops[i], after_body, test_at)
        self.ops[test_at] = _LoopTest(counter, body_entry, after_body)


def _retarget(op, old_next, new_next):
    """Point an op's fall-through successor at new_next instead of old_next."""
    if isinstance(op, _Inc) and op.next == old_next:
        return _Inc(op.reg, new_next)
    if isinstance(op, _Drain) and op.next == old_next:
        return _Drain(op.reg, new_next)
    if isinstance(op, _Transfer) and op.next == old_next:
        return _Transfer(op.src, op.dsts, new_next)
    if isinstance(op, _LoopTest):
        body = new_next if op.body == old_next else op.body
        exit_ = new_next if op.exit == old_next else op.exit
        return _LoopTest(op.counter, body, exit_)
    return op


def compile_to_nf(prog: LoopProgram) -> NormalForm:
    """Lower a LOOP program to the translation-gated normal form.

    The reference orbit from ``(x, 0, ..., 0)`` reproduces
    ``interpret(prog, x)``: output registers at the halt step equal ``f(x)``.
    Machine state 0 is the all-zero implicit start; a bootstrap gate
    ``Theta(1 - started)`` fires exactly once to enter the program.
    """
    ops, counters, tmp_index = _MicroBuilder(prog).build()
    n_ops = len(ops)
    n_regs_total = prog.num_registers + len(counters) + (1 if tmp_index is not None else 0)

    tested = sorted(
        {op.reg for op in ops if isinstance(op, _Drain)}
        | {op.src for op in ops if isinstance(op, _Transfer)}
        | {op.counter for op in ops if isinstance(op, _LoopTest)}
    )

    # coordinate layout
    reg_base = 0
    pc_start_b = n_regs_total
    pc_a = {k: pc_start_b + 1 + 2 * k for k in range(n_ops)}
    pc_b = {k: pc_start_b + 2 + 2 * k for k in range(n_ops)}
    test_base = pc_start_b + 1 + 2 * n_ops
    test_of = {r: test_base + i for i, r in enumerate(tested)}
    start_flag = test_base + len(tested)
    halt_bit = start_flag + 1
    m = halt_bit + 1

    pc_indices = [pc_start_b] + [pc_a[k] for k in range(n_ops)] + [pc_b[k] for k in range(n_ops)]
    layout = {
        "inputs": list(range(prog.in_arity)),
        "data": list(range(prog.num_registers)),
        "counters": sorted(counters.values()),
        "temps": [tmp_index] if tmp_index is not None else [],
        "pc": sorted(pc_indices),
        "test": [test_of[r] for r in tested],
        "start": [start_flag],
        "halt": [halt_bit],
    }

    # base map: identity on registers and start flag, zero elsewhere
    base_matrix = [[0] * m for _ in range(m)]
    for i in range(n_regs_total):
        base_matrix[i][i] = 1
    base_matrix[start_flag][start_flag] = 1

    gates = []

    def gate(q_terms, q_off, addend_terms):
        q_row = [0] * m
        for j, c in q_terms:
            q_row[j] += c
        a_off = [0] * m
        for i, c in addend_terms:
            a_off[i] += c
        gates.append(
            (
                IntAffine((tuple(q_row),), (q_off,)),
                IntAffine(tuple(tuple(0 for _ in range(m)) for _ in range(m)), tuple(a_off)),
            )
        )

    # bootstrap: fires only at step 0, when no pc bit is set yet
    gate([(start_flag, -1)], 1, [(pc_start_b, 1), (start_flag, 1)])
    # threshold bits, written every step for every tested register
    for r in tested:
        gate([(r, 1)], 0, [(test_of[r], 1)])
    # start_b hands over to the first op's test step
    first = pc_a[0] if n_ops else halt_bit
    gate([(pc_start_b, 1)], 0, [(first, 1)])
    # test step of each op simply advances to its move step
    for k in range(n_ops):
        gate([(pc_a[k], 1)], 0, [(pc_b[k], 1)])

    def goto(target, extra=()):
        if isinstance(ops[target], _Halt):
            return [(pc_b[target], 1), (halt_bit, 1), *extra]
        return [(pc_a[target], 1), *extra]

    for k, op in enumerate(ops):
        b = pc_b[k]
        if isinstance(op, _Inc):
            gate([(b, 1)], 0, goto(op.next, [(op.reg, 1)]))
        elif isinstance(op, _Drain):
            t = test_of[op.reg]
            gate([(b, 1), (t, 1)], -1, [(pc_a[k], 1), (op.reg, -1)])
            gate([(b, 1), (t, -1)], 0, goto(op.next))
        elif isinstance(op, _Transfer):
            t = test_of[op.src]
            bumps = [(d, 1) for d in op.dsts]
            gate([(b, 1), (t, 1)], -1, [(pc_a[k], 1), (op.src, -1), *bumps])
            gate([(b, 1), (t, -1)], 0, goto(op.next))
        elif isinstance(op, _LoopTest):
            t = test_of[op.counter]
            gate([(b, 1), (t, 1)], -1, goto(op.body, [(op.counter, -1)]))
            gate([(b, 1), (t, -1)], 0, goto(op.exit))
        elif isinstance(op, _Halt):
            gate([(b, 1)], 0, [(b, 1), (halt_bit, 1)])
        else:
            raise TypeError(op)

    return NormalForm(
        m=m,
        base=IntAffine(tuple(tuple(row) for row in base_matrix), tuple([0] * m)),
        gated=tuple(gates),
        layout=layout,
        output_indices=tuple(prog.output_registers),
    )


def initial_state(nf: NormalForm, x) -> tuple:
    x = tuple(int(v) for v in x)
    state = [0] * nf.m
    state[: len(x)] = x
    return tuple(state)


def default_step_cap(prog: LoopProgram, x) -> int:
    """8*(machine_steps+1)*(space_bound+2): a generous static cap; exceeding it is a bug."""
    from .loop_lang import interpret

    res = interpret(prog, x)
    return 8 * (res.machine_steps + 1) * (res.max_register + 2)


def nf_run(nf: NormalForm, x, max_steps: int, mode: ThetaMode = ThetaMode.STRICT) -> Trace:
    """Iterate the normal form from the raw initial state until the halt bit rises."""
    prepared = nf.prepared()
    halt = prepared.halt_index
    state = initial_state(nf, x)
    states = [state]
    for n in range(max_steps):
        if halt is not None and state[halt] == 1:
            return Trace(states=states, roles=nf.layout, halted_at=n)
        state = prepared.step(state, mode)
        states.append(state)
    if halt is not None and state[halt] == 1:
        return Trace(states=states, roles=nf.layout, halted_at=max_steps)
    raise CapExceeded(f"no halt within {max_steps} steps")


def nf_outputs(nf: NormalForm, trace: Trace) -> tuple:
    return tuple(trace.states[trace.halted_at][i] for i in nf.output_indices)


def nf_run_auto(nf: NormalForm, x, mode: ThetaMode = ThetaMode.STRICT,
                hard_cap: int = 10**7) -> Trace:
    """nf_run with a doubling step budget, for callers without the source program."""
    cap = 1 << 10
    while True:
        try:
            return nf_run(nf, x, cap, mode)
        except CapExceeded:
            cap *= 4
            if cap > hard_cap:
                raise


# --- serialization (integers as decimal strings, unbounded) ---

def _affine_to_json(aff: IntAffine) -> dict:
    return {
        "matrix": [[str(v) for v in row] for row in aff.matrix],
        "offset": [str(v) for v in aff.offset],
    }


def _affine_from_json(d: dict) -> IntAffine:
    return IntAffine(
        tuple(tuple(int(v) for v in row) for row in d["matrix"]),
        tuple(int(v) for v in d["offset"]),
    )


def nf_to_json_dict(nf: NormalForm) -> dict:
    return {
        "m": nf.m,
        "base": _affine_to_json(nf.base),
        "gated": [{"q": _affine_to_json(q), "A": _affine_to_json(a)} for q, a in nf.gated],
        "layout": {k: list(v) for k, v in sorted(nf.layout.items())},
        "outputs": list(nf.output_indices),
    }


def nf_from_json_dict(d: dict) -> NormalForm:
    return NormalForm(
        m=int(d["m"]),
        base=_affine_from_json(d["base"]),
        gated=tuple((_affine_from_json(g["q"]), _affine_from_json(g["A"])) for g in d["gated"]),
        layout={k: list(v) for k, v in d["layout"].items()},
        output_indices=tuple(d["outputs"]),
    )


def nf_dumps(nf: NormalForm) -> str:
    return json.dumps(nf_to_json_dict(nf), indent=2, sort_keys=True)


def nf_loads(text: str) -> NormalForm:
    return nf_from_json_dict(json.loads(text))
