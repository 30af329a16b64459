import itertools
from fractions import Fraction

import pytest

from dyncomp.errors import (
    BoundViolated,
    DecodeDiverged,
    Mismatch,
    NotFound,
    NotLatticePreserving,
    TubeViolated,
)
from dyncomp.normal_form import default_step_cap, nf_run
from dyncomp.verify import (
    ShadowReport,
    check_integer_faithful,
    continuous_rounder_iterate,
    cross_check,
    decoded_shadow_run,
    gronwall_verify,
    rounder_witness,
    selector_witness,
    sigma_contraction_report,
    sigma_enclosure,
)

F = Fraction


def base_map(y):
    return (y[0] + 1, 2 * y[1])


def test_integer_faithful_identity():
    rep = check_integer_faithful(base_map, base_map, [(0, 0), (5, 3)])
    assert rep["pass"] and rep["max_deviation"] == 0


def test_integer_faithful_shift_04_passes():
    tilde = lambda y: (y[0] + 1 + F(4, 10), 2 * y[1])
    rep = check_integer_faithful(tilde, base_map, [(0, 0), (2, 7)])
    assert rep["pass"] and rep["max_deviation"] == F(2, 5)


def test_integer_faithful_shift_06_fails():
    tilde = lambda y: (y[0] + 1 + F(6, 10), 2 * y[1])
    rep = check_integer_faithful(tilde, base_map, [(0, 0)])
    assert not rep["pass"]
    assert rep["witness"] == (0, 0)


def test_integer_faithful_rejects_nonlattice_reference():
    bad = lambda y: (y[0] + F(1, 2),)
    with pytest.raises(NotLatticePreserving):
        check_integer_faithful(bad, bad, [(0,)])


def _noisy_nf_step(nf, amplitude):
    """The NF map plus a deterministic non-integer nudge on data registers."""
    prepared = nf.prepared()
    data = nf.layout["data"]

    def step(y):
        out = list(prepared.step(tuple(int(v) for v in y), mode=_strict()))
        for k, i in enumerate(data):
            sign = 1 if k % 2 == 0 else -1
            out[i] += sign * amplitude
        return tuple(out)

    return step


def _strict():
    from dyncomp.normal_form import ThetaMode

    return ThetaMode.STRICT


def test_decoded_shadowing_recovers_orbit(corpus, compiled_nf):
    prog, _ = corpus["add"]
    nf = compiled_nf["add"]
    ref = nf_run(nf, (2, 3), default_step_cap(prog, (2, 3)))
    noisy = _noisy_nf_step(nf, F(3, 10))
    states = decoded_shadow_run(noisy, ref.states[0], ref.halted_at, ref.states)
    assert states[-1] == ref.states[ref.halted_at]


def test_decoded_shadowing_zero_noise(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    ref = nf_run(nf, (2,), default_step_cap(prog, (2,)))
    states = decoded_shadow_run(_noisy_nf_step(nf, F(0)), ref.states[0],
                                ref.halted_at, ref.states)
    assert states == list(map(tuple, ref.states))


def test_decoded_shadowing_diverges_past_half(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    ref = nf_run(nf, (2,), default_step_cap(prog, (2,)))
    with pytest.raises(DecodeDiverged):
        decoded_shadow_run(_noisy_nf_step(nf, F(51, 100)), ref.states[0],
                           ref.halted_at, ref.states)


def test_gronwall_tube_arithmetic():
    # L = 1/2, eps = 1/8, T = 3: bound sequence 1/8, 3/16, 7/32 <= r = 1/4
    ref = [(0,)] * 4
    rep = gronwall_verify(ref, lambda z: (z[0] / 2,), F(1, 2), F(1, 8), F(1, 4))
    assert rep.bounds == [0, F(1, 8), F(3, 16), F(7, 32)]
    assert rep.verdict


def test_gronwall_exact_map_zero_error(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    ref = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    phi = lambda z: nf.prepared().step(tuple(int(v) for v in z), _strict())
    rep = gronwall_verify(ref.states, phi, F(1, 2), F(1, 100), F(1, 4))
    assert all(e == 0 for e in rep.errors)


def test_gronwall_double_entry(corpus, compiled_nf):
    # when the check passes, independently recomputing e_n from the replayed
    # orbit satisfies the bound sequence
    prog, _ = corpus["pred"]
    nf = compiled_nf["pred"]
    ref = nf_run(nf, (3,), default_step_cap(prog, (3,)))
    phi = lambda z: tuple(
        v + (F(1, 16) if i == 0 else 0)
        for i, v in enumerate(nf.prepared().step(tuple(int(v) for v in z), _strict()))
    )
    rep = gronwall_verify(ref.states, phi, F(1, 2), F(1, 8), F(1, 4))
    assert rep.verdict
    z = tuple(F(v) for v in ref.states[0])
    for n in range(len(ref.states) - 1):
        z = phi(z)
        e = max(abs(a - b) for a, b in zip(z, ref.states[n + 1]))
        assert e == rep.errors[n + 1]
        assert e <= rep.bounds[n + 1]


def test_gronwall_tube_violated():
    ref = [(0,)] * 10
    with pytest.raises(TubeViolated):
        gronwall_verify(ref, lambda z: z, F(2), F(1, 8), F(1, 4))


def test_gronwall_bound_violated():
    ref = [(0,)] * 4
    phi = lambda z: (z[0] + F(2, 10),)
    with pytest.raises(BoundViolated) as err:
        gronwall_verify(ref, phi, F(1, 2), F(1, 10), F(1, 4))
    assert err.value.step == 1  # first step already exceeds eps = 1/10


def test_gronwall_on_measured_ode_contraction(corpus, compiled_nf):
    from dyncomp.ode_backend import compile_nf_to_ode, measure_cycle_contraction, ode_run

    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    ode = compile_nf_to_ode(nf)
    rep = measure_cycle_contraction(ode, nf, (3,), check_halving=False)
    run = ode_run(ode, (3,))
    w_off = ode.structured.w_off
    samples = [tuple(F(v).limit_denominator(10**12)
                     for v in row[w_off:w_off + nf.m])
               for row in run.cycle_samples]
    counter = {"n": 0}

    def replay(_z):
        counter["n"] += 1
        return samples[counter["n"]]

    import math

    from dyncomp.ode_backend import extended_reference_states

    ref_states = [
        tuple(s) for s in extended_reference_states(ode, run.reference,
                                                    run.halt_cycle + 1)
    ]
    lam_up = F(math.ceil(rep.lam * 128), 128)
    shadow = gronwall_verify(
        ref_states, replay, lam_up,
        F(rep.eta).limit_denominator(10**9) * 2,
        F(1, 4),
    )
    assert shadow.verdict


def test_rounder_witness_identity():
    w = rounder_witness([0, 1], 1, F(2, 5), F(1, 10))
    assert w.point == (F(2, 5),)
    assert w.values["m"] == 0
    assert w.revalidate()


def test_rounder_witness_shifted_iterate():
    # p(x) = x + 1, so p^[2] = id + 2: both offsets fail at any m
    w = rounder_witness([1, 1], 2, F(2, 5), F(1, 10))
    assert w.values["deviation"] > F(1, 10)
    assert w.revalidate()


def test_rounder_witness_cubic_contractor_deeper_iterates():
    # u - u(1-u)(1+u) = u^3 genuinely contracts offsets near 0, so the
    # witness must come from larger |m|, still within deg*N + 2
    for N in (1, 2, 3):
        w = rounder_witness([0, 0, 0, 1], N, F(2, 5), F(1, 10))
        assert abs(w.values["m"]) <= 3 * N + 2
        assert w.revalidate()


def test_rounder_witness_family_subset():
    found = 0
    for c3 in (-2, 0, 1):
        for c2 in (-1, 2):
            for N in (1, 2):
                w = rounder_witness([0, 1, c2, c3], N, F(2, 5), F(1, 10))
                assert w.revalidate()
                found += 1
    assert found == 12


def test_rounder_witness_not_found_on_tiny_grid():
    # p(x) = x - x(1-x)(1+x) = x^3 contracts [-0.4, 0.4] onto 0, so a grid
    # restricted to m = 0 finds nothing; NotFound blames the grid, not the
    # proposition
    with pytest.raises(NotFound):
        rounder_witness([0, 0, 0, 1], 1, F(2, 5), F(1, 10), m_range=[0])


def test_rounder_witness_validates_epsilon_delta():
    with pytest.raises(ValueError):
        rounder_witness([0, 1], 1, F(1, 10), F(2, 5))


def test_selector_witness_identity():
    w = selector_witness(lambda s: s, 0, 4, 4, dimension=1)
    assert w.point == (1, 1)
    assert w.values["value"] == 1 and w.values["required"] == 0


def test_selector_witness_counter_shift():
    def shift(state):
        return (state[0] - 1, F(1))

    w = selector_witness(shift, 1, 4, 4, dimension=2)
    C, n = w.point
    assert n >= C  # the constant-1 output violates the n >= C requirement
    assert w.values["value"] == 1 and w.values["required"] == 0


def test_selector_witness_sampled_maps():
    import random

    rng = random.Random(7)
    found = 0
    for _ in range(5):
        a, b, c = rng.randint(-2, 2), rng.randint(-2, 2), rng.randint(0, 2)

        def poly_map(state, a=a, b=b, c=c):
            x, y = state
            return (x + a, b * x + c * y * y)

        w = selector_witness(poly_map, 1, 8, 8, dimension=2)
        assert w.revalidate()
        found += 1
    assert found == 5


def test_sigma_fixes_integers():
    for n in range(-2, 3):
        lo, hi = sigma_enclosure(n)
        assert lo <= n <= hi and hi - lo < F(1, 2**40)


def test_sigma_quarter_value():
    v = continuous_rounder_iterate(F(1, 4), 1)
    assert abs(v - F(908, 10000)) < F(1, 1000)  # 0.25 - 1/(2 pi) = 0.0908...


def test_sigma_contraction_measured():
    rep = sigma_contraction_report()
    assert rep["pass"]
    assert rep["lambda_upper"] < 1


def test_sigma_five_iterations_land():
    for m in range(-2, 3):
        for d in (F(2, 5), F(-2, 5), F(1, 4), F(-1, 10)):
            v = continuous_rounder_iterate(m + d, 5)
            assert abs(v - m) <= F(1, 1000)


def test_cross_check_zero_program(corpus):
    prog, _ = corpus["zero"]
    report = cross_check(prog, [(0,), (3,)])
    assert report["all_equal"]
    for row in report["rows"]:
        assert row.interp == (0,)


def test_cross_check_detects_corruption(corpus, compiled_nf):
    from dyncomp.cli import _corrupt_nf

    prog, _ = corpus["zero"]
    with pytest.raises(Mismatch) as err:
        cross_check(prog, [(1,)], nf=_corrupt_nf(compiled_nf["zero"]))
    assert err.value.bundle
