import itertools
from fractions import Fraction

import pytest

from dyncomp.errors import AmbiguousGate, CapExceeded
from dyncomp.loop_lang import interpret, parse_loop
from dyncomp.normal_form import (
    IntAffine,
    NormalForm,
    ThetaMode,
    compile_to_nf,
    default_step_cap,
    nf_dumps,
    nf_loads,
    nf_outputs,
    nf_run,
    nf_step,
    theta,
    zero_gate,
)


def test_theta_strict():
    assert theta(0) == 0
    assert theta(3) == 1
    assert theta(-7) == 0
    with pytest.raises(AmbiguousGate):
        theta(Fraction(1, 2))


def test_theta_uniform_margin():
    assert theta(Fraction(1, 4), ThetaMode.UNIFORM_MARGIN) == 0
    assert theta(Fraction(3, 4), ThetaMode.UNIFORM_MARGIN) == 1
    with pytest.raises(AmbiguousGate):
        theta(Fraction(1, 2), ThetaMode.UNIFORM_MARGIN)


def test_zero_gate():
    assert zero_gate(0) == 1
    assert zero_gate(5) == 0
    assert zero_gate(-2) == 0


def test_compile_succ(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    tr = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    assert nf_outputs(nf, tr) == (4,)


def test_orbit_integral_with_integer_gate_args(corpus, compiled_nf):
    prog, _ = corpus["add"]
    nf = compiled_nf["add"]
    tr = nf_run(nf, (2, 3), default_step_cap(prog, (2, 3)))
    assert tr.halted_at is not None
    assert nf_outputs(nf, tr) == (5,)
    prepared = nf.prepared()
    for state in tr.states:
        assert all(isinstance(v, int) for v in state)
        for q_terms, q_off, _ in prepared.gates:
            u = sum(c * state[j] for j, c in q_terms) + q_off
            assert isinstance(u, int)


def test_modes_agree_on_reference_orbit(corpus, compiled_nf):
    prog, _ = corpus["pred"]
    nf = compiled_nf["pred"]
    cap = default_step_cap(prog, (4,))
    a = nf_run(nf, (4,), cap)
    b = nf_run(nf, (4,), cap, ThetaMode.UNIFORM_MARGIN)
    assert a.states == b.states


def test_gateless_nf_is_base_map():
    base = IntAffine(((2, 0), (0, 1)), (1, 0))
    nf = NormalForm(m=2, base=base, gated=(), layout={}, output_indices=(0,))
    assert nf_step(nf, (3, 4)) == (7, 4)


def test_one_hot_pc(corpus, compiled_nf):
    prog, _ = corpus["triangular"]
    nf = compiled_nf["triangular"]
    tr = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    pc = nf.layout["pc"]
    for n, state in enumerate(tr.states):
        assert sum(state[i] for i in pc) == (0 if n == 0 else 1)


def test_boundedness_and_monotonicity(corpus, compiled_nf):
    for name in ("add", "mul"):
        prog, _ = corpus[name]
        nf = compiled_nf[name]
        norms = {}
        for x in itertools.product(range(5), repeat=2):
            tr = nf_run(nf, x, default_step_cap(prog, x))
            b = tr.max_norm()
            assert b >= interpret(prog, x).max_register
            norms[x] = b
        for (x, y), b in norms.items():
            if x + 1 <= 4:
                assert norms[(x + 1, y)] >= b
            if y + 1 <= 4:
                assert norms[(x, y + 1)] >= b


def test_orbit_fixed_one_step_past_halt(corpus, compiled_nf):
    # the halt state self-loops on data and pc, but its threshold bits
    # refresh once more; the state after that is a true fixed point
    for name in ("zero", "succ"):
        prog, _ = corpus[name]
        nf = compiled_nf[name]
        tr = nf_run(nf, (0,), default_step_cap(prog, (0,)))
        settled = nf_step(nf, tr.states[tr.halted_at])
        assert nf_step(nf, settled) == settled
        halt = nf.layout["halt"][0]
        assert settled[halt] == 1


def test_cap_exceeded(compiled_nf):
    with pytest.raises(CapExceeded):
        nf_run(compiled_nf["mul"], (3, 3), 4)


def test_ambiguous_gate_reports_index():
    q = IntAffine(((1,),), (0,))
    add1 = IntAffine(((0,),), (1,))
    nf = NormalForm(
        m=1,
        base=IntAffine(((1,),), (0,)),
        gated=((q, add1),),
        layout={},
        output_indices=(0,),
    )
    with pytest.raises(AmbiguousGate) as err:
        nf_step(nf, (Fraction(1, 2),))
    assert err.value.gate_index == 0


def test_general_integer_nf_supported():
    # a gated affine (non-translation) addend: evaluator fine, flag reports it
    q = IntAffine(((1, 0),), (0,))
    a = IntAffine(((0, 2), (0, 0)), (0, 0))
    nf = NormalForm(
        m=2,
        base=IntAffine(((1, 0), (0, 1)), (0, 0)),
        gated=((q, a),),
        layout={},
        output_indices=(0,),
    )
    assert not nf.is_translation_gated()
    assert nf_step(nf, (1, 3)) == (7, 3)
    assert nf_step(nf, (0, 3)) == (0, 3)


def test_serialization_roundtrip(compiled_nf):
    nf = compiled_nf["add"]
    clone = nf_loads(nf_dumps(nf))
    assert clone.m == nf.m
    assert clone.base == nf.base
    assert clone.gated == nf.gated
    assert clone.output_indices == nf.output_indices
    tr1 = nf_run(nf, (1, 2), 200)
    tr2 = nf_run(clone, (1, 2), 200)
    assert tr1.states == tr2.states


def test_trace_csv_export(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    tr = nf_run(nf, (1,), default_step_cap(prog, (1,)))
    csv_text = tr.to_csv()
    assert csv_text.splitlines()[0] == "step,time,coordinate,role,value"
    assert len(csv_text.splitlines()) == 1 + len(tr.states) * nf.m
