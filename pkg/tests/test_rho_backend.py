from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncomp.errors import (
    BasinViolation,
    DomainEscape,
    InadmissibleParameters,
    Unreadable,
)
from dyncomp.normal_form import default_step_cap, nf_run
from dyncomp.rho_backend import (
    basin_epsilon_bound,
    basin_step_check,
    code_state,
    compile_nf_to_rho,
    make_hard_sigmoid,
    make_logistic,
    nu_decode,
    nu_encode,
    rho_decode_outputs,
    rho_dumps,
    rho_loads,
    rho_run,
    rho_step,
    s0_for_input,
)


def test_nu_encode():
    assert nu_encode(0) == 1
    assert nu_encode(3) == Fraction(1, 8)
    with pytest.raises(ValueError):
        nu_encode(-1)


def test_nu_decode_examples():
    assert nu_decode(Fraction(27, 100)) == 2
    # 0.6 sits inside nu(1)'s readable basin: |0.6 - 1/2| = 0.1 < 1/8
    assert nu_decode(Fraction(3, 5)) == 1
    with pytest.raises(Unreadable):
        nu_decode(Fraction(13, 20))  # 0.65 misses both candidate basins
    with pytest.raises(Unreadable):
        nu_decode(Fraction(0))
    with pytest.raises(Unreadable):
        nu_decode(Fraction(3, 2))


@given(st.integers(min_value=0, max_value=40),
       st.fractions(min_value=Fraction(-24, 100), max_value=Fraction(24, 100),
                    max_denominator=1000))
@settings(max_examples=200, deadline=None)
def test_nu_roundtrip_within_basin(n, rel):
    q = nu_encode(n) * (1 + rel)
    assert nu_decode(q) == n


def test_hard_sigmoid_detector():
    act = make_hard_sigmoid()
    assert act.eta == 0
    assert act.eval(Fraction(5, 8)) == 0
    assert act.eval(Fraction(7, 8)) == 1
    assert act.eval(Fraction(1, 2)) == 0


def test_detector_low_region_bound():
    for act in (make_hard_sigmoid(), make_logistic(64)):
        assert act.z_eval(Fraction(1, 2)) <= act.eta


def test_logistic_admissibility():
    act = make_logistic(64)
    assert 0 < act.eta < Fraction(1, 8)
    with pytest.raises(InadmissibleParameters):
        make_logistic(10)
    with pytest.raises(InadmissibleParameters):
        make_logistic(-3)


def test_succ_hard_sigmoid_exact(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    sys_r = compile_nf_to_rho(nf, make_hard_sigmoid())
    ref = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    tr = rho_run(sys_r, (3,), ref.halted_at)
    out = tr.states[ref.halted_at][sys_r.output_indices[0]]
    assert out == nu_encode(4)
    assert rho_decode_outputs(sys_r, tr, ref.halted_at) == (4,)
    s0 = s0_for_input(sys_r, ref.max_norm())
    assert s0 >= 2
    assert abs(out - nu_encode(4)) <= Fraction(1, 2**s0) * nu_encode(4)


def test_coded_orbit_equals_nf_codes(corpus, compiled_nf):
    prog, _ = corpus["add"]
    nf = compiled_nf["add"]
    sys_r = compile_nf_to_rho(nf, make_hard_sigmoid())
    ref = nf_run(nf, (2, 3), default_step_cap(prog, (2, 3)))
    tr = rho_run(sys_r, (2, 3), ref.halted_at)
    for n in range(ref.halted_at + 1):
        assert tr.states[n] == code_state(sys_r, ref.states[n])
    assert rho_decode_outputs(sys_r, tr, ref.halted_at) == (5,)


def test_monus_anchor_at_one(corpus, compiled_nf):
    prog, _ = corpus["monus"]
    nf = compiled_nf["monus"]
    sys_r = compile_nf_to_rho(nf, make_hard_sigmoid())
    ref = nf_run(nf, (5, 5), default_step_cap(prog, (5, 5)))
    tr = rho_run(sys_r, (5, 5), ref.halted_at)
    out = tr.states[ref.halted_at][sys_r.output_indices[0]]
    assert out == 1  # nu(0)
    assert nu_decode(out) == 0


def test_basin_step_check(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    sys_r = compile_nf_to_rho(nf, make_hard_sigmoid())
    ref = nf_run(nf, (2,), default_step_cap(prog, (2,)))
    y = ref.states[4]
    # zero radius: the image is exactly the coded successor state
    rep0 = basin_step_check(sys_r, y, 0, nf=nf)
    assert rep0["max_relative_error"] == 0
    eps = min(basin_epsilon_bound(sys_r), Fraction(1, 2**10))
    rep = basin_step_check(sys_r, y, eps, nf=nf)
    assert rep["points"] > 1
    assert rep["max_relative_error"] <= eps
    with pytest.raises(BasinViolation):
        basin_step_check(sys_r, y, Fraction(1, 4), nf=nf)


def test_domain_escape(compiled_nf):
    nf = compiled_nf["succ"]
    sys_r = compile_nf_to_rho(nf, make_hard_sigmoid())
    from dyncomp.rho_backend import rho_initial_state

    state = list(rho_initial_state(sys_r, (1,)))
    state[sys_r.coded_registers[0]] = Fraction(3)
    with pytest.raises(DomainEscape):
        rho_step(sys_r, tuple(state))


def test_logistic_small_case_contract(corpus, compiled_nf):
    prog, _ = corpus["pred"]
    nf = compiled_nf["pred"]
    sys_r = compile_nf_to_rho(nf, make_logistic(64))
    ref = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    s = 4
    tr = rho_run(sys_r, (3,), ref.halted_at, precision=s)
    out = tr.states[ref.halted_at][sys_r.output_indices[0]]
    assert abs(out - nu_encode(2)) <= Fraction(1, 2**s) * nu_encode(2)
    assert nu_decode(out) == 2


def test_serialization_roundtrip(compiled_nf):
    sys_r = compile_nf_to_rho(compiled_nf["succ"], make_hard_sigmoid())
    clone = rho_loads(rho_dumps(sys_r))
    assert clone.m == sys_r.m
    assert clone.gates == sys_r.gates
    a = rho_run(sys_r, (2,), 10)
    b = rho_run(clone, (2,), 10)
    assert a.states == b.states
    sys_l = compile_nf_to_rho(compiled_nf["succ"], make_logistic(64))
    clone_l = rho_loads(rho_dumps(sys_l))
    assert clone_l.activation.name == "logistic"
    assert clone_l.activation.params["steepness"] == Fraction(64)
