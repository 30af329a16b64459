"""Recurrent ReLU realization of the normal form.

Each threshold gate becomes the two-ReLU gadget ``gate(t) = relu(t) - relu(t-1)``,
which agrees with the threshold on every integer argument.  One recurrent
application of the compiled block performs two consecutive NF steps (the test
phase and the move phase), so block iteration n reproduces NF step 2n exactly,
in exact rational arithmetic.

State coordinates of the compiled forms are nonnegative along every reference
orbit (registers are naturals, control coordinates are bits), so the hidden
layer passes them through ReLU unchanged; only the gate arguments, which may
be negative, go through the gadget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import CapExceeded, UnsupportedForm
from .normal_form import NormalForm, Trace, _rat_str


def relu(t):
    """max(t, 0), exact on rationals."""
    return t if t > 0 else t * 0


def gate(u):
    """relu(u) - relu(u - 1): equals the threshold gate on every integer."""
    return relu(u) - relu(u - 1)


@dataclass(frozen=True)
class RationalAffine:
    """y -> matrix @ y + offset with rational entries."""

    matrix: tuple
    offset: tuple

    @property
    def rows(self):
        return len(self.matrix)

    @property
    def cols(self):
        return len(self.matrix[0]) if self.matrix else 0

    def apply(self, y):
        return tuple(
            sum(c * y[j] for j, c in enumerate(row) if c) + b
            for row, b in zip(self.matrix, self.offset)
        )


@dataclass
class ReluBlock:
    """Fixed-depth alternation of rational affine layers and coordinatewise ReLU."""

    m: int
    layers: tuple  # L+1 RationalAffine maps; ReLU applied between consecutive ones
    layout: dict
    output_indices: tuple
    _sparse: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("at least one affine layer required")
        if self.layers[0].cols != self.m or self.layers[-1].rows != self.m:
            raise ValueError("outer widths must equal m")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.cols != a.rows:
                raise ValueError("consecutive layer widths must match")

    @property
    def depth(self):
        return len(self.layers) - 1

    @property
    def widths(self):
        return (self.m,) + tuple(a.rows for a in self.layers)

    def apply(self, y):
        if self._sparse is None:
            self._sparse = [
                [
                    ([(j, c) for j, c in enumerate(row) if c], b)
                    for row, b in zip(a.matrix, a.offset)
                ]
                for a in self.layers
            ]
        v = tuple(y)
        last = len(self._sparse) - 1
        for li, rows in enumerate(self._sparse):
            v = tuple(sum(c * v[j] for j, c in terms) + b for terms, b in rows)
            if li != last:
                v = tuple(relu(t) for t in v)
        return v


def _nf_phase_layers(nf: NormalForm):
    """Hidden+output affine pair computing one NF step with gates as ReLU pairs.

    Hidden layer emits [state passthrough; q_j; q_j - 1].  The output layer
    recombines: base(state) + sum_j (relu(q_j) - relu(q_j - 1)) * addend_j.
    """
    m = nf.m
    s = nf.num_gates
    hidden_rows = []
    hidden_off = []
    for i in range(m):
        row = [0] * m
        row[i] = 1
        hidden_rows.append(tuple(row))
        hidden_off.append(0)
    for q, a in nf.gated:
        if not a.is_constant():
            raise UnsupportedForm(
                "gated addend is not a constant translation; "
                "gating an unbounded affine addend has no exact fixed ReLU form"
            )
        hidden_rows.append(tuple(q.matrix[0]))
        hidden_off.append(q.offset[0])
        hidden_rows.append(tuple(q.matrix[0]))
        hidden_off.append(q.offset[0] - 1)
    out_rows = []
    out_off = []
    for i in range(m):
        row = [0] * (m + 2 * s)
        for j, c in enumerate(nf.base.matrix[i]):
            row[j] = c
        for gi, (_, a) in enumerate(nf.gated):
            c = a.offset[i]
            if c:
                row[m + 2 * gi] = c
                row[m + 2 * gi + 1] = -c
        out_rows.append(tuple(row))
        out_off.append(nf.base.offset[i])
    hidden = RationalAffine(tuple(hidden_rows), tuple(hidden_off))
    out = RationalAffine(tuple(out_rows), tuple(out_off))
    return hidden, out


def _fuse(a: RationalAffine, b: RationalAffine) -> RationalAffine:
    """b after a, as a single affine map."""
    rows = []
    off = []
    for i in range(b.rows):
        brow = b.matrix[i]
        row = [
            sum(brow[k] * a.matrix[k][j] for k in range(a.rows) if brow[k])
            for j in range(a.cols)
        ]
        rows.append(tuple(row))
        off.append(sum(brow[k] * a.offset[k] for k in range(a.rows) if brow[k]) + b.offset[i])
    return RationalAffine(tuple(rows), tuple(off))


def compile_nf_to_relu(nf: NormalForm) -> ReluBlock:
    """Compile a translation-gated normal form into a depth-2 recurrent block.

    One block application = two NF phase maps, so iteration n of the block
    equals NF step 2n on the reference orbit, as exact rationals.
    """
    hidden1, out1 = _nf_phase_layers(nf)
    hidden2, out2 = _nf_phase_layers(nf)
    middle = _fuse(out1, hidden2)
    return ReluBlock(
        m=nf.m,
        layers=(hidden1, middle, out2),
        layout=nf.layout,
        output_indices=nf.output_indices,
    )


def relu_run(block: ReluBlock, x, iterations: int, cap: int | None = None) -> Trace:
    """Iterate the block from (x, 0, ..., 0); the trace holds exact rationals."""
    if cap is not None and iterations > cap:
        raise CapExceeded(f"{iterations} iterations exceed cap {cap}")
    state = [Fraction(0)] * block.m
    for i, v in enumerate(x):
        state[i] = Fraction(v)
    state = tuple(state)
    states = [state]
    halt = block.layout.get("halt")
    halted_at = None
    for n in range(iterations):
        state = block.apply(state)
        states.append(state)
        if halt and halted_at is None and state[halt[0]] == 1:
            halted_at = n + 1
    return Trace(states=states, roles=block.layout, halted_at=halted_at)


def relu_outputs(block: ReluBlock, trace: Trace):
    at = trace.halted_at if trace.halted_at is not None else len(trace.states) - 1
    return tuple(trace.states[at][i] for i in block.output_indices)


# --- serialization ---

def _rat_affine_to_json(a: RationalAffine) -> dict:
    return {
        "matrix": [[_rat_str(v) for v in row] for row in a.matrix],
        "offset": [_rat_str(v) for v in a.offset],
    }


def _parse_rat(s: str):
    f = Fraction(s)
    return int(f) if f.denominator == 1 else f


def _rat_affine_from_json(d: dict) -> RationalAffine:
    return RationalAffine(
        tuple(tuple(_parse_rat(v) for v in row) for row in d["matrix"]),
        tuple(_parse_rat(v) for v in d["offset"]),
    )


def relu_to_json_dict(block: ReluBlock) -> dict:
    return {
        "m": block.m,
        "widths": list(block.widths),
        "layers": [_rat_affine_to_json(a) for a in block.layers],
        "layout": {k: list(v) for k, v in sorted(block.layout.items())},
        "outputs": list(block.output_indices),
    }


def relu_from_json_dict(d: dict) -> ReluBlock:
    return ReluBlock(
        m=int(d["m"]),
        layers=tuple(_rat_affine_from_json(a) for a in d["layers"]),
        layout={k: list(v) for k, v in d["layout"].items()},
        output_indices=tuple(d["outputs"]),
    )


def relu_dumps(block: ReluBlock) -> str:
    return json.dumps(relu_to_json_dict(block), indent=2, sort_keys=True)


def relu_loads(text: str) -> ReluBlock:
    return relu_from_json_dict(json.loads(text))
