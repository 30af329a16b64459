import math
import random
from fractions import Fraction

import numpy as np
import pytest

from dyncomp.errors import (
    ContractViolated,
    GadgetBudgetUnsatisfiable,
    StepUnstable,
    UnsupportedForm,
    WindowInconsistent,
)
from dyncomp.normal_form import IntAffine, NormalForm, default_step_cap, nf_run
from dyncomp.ode_backend import (
    GadgetParams,
    IntegratorConfig,
    KAPPA0,
    PolyField,
    compile_nf_to_ode,
    integrate,
    measure_cycle_contraction,
    ode_run,
    polyfield_dumps,
    polyfield_loads,
    read_output,
    search_gadget_params,
    smoothstep_coeffs,
)


def clock_field():
    return PolyField(
        M=2,
        terms=[[(Fraction(-1), (0, 1))], [(Fraction(1), (1, 0))]],
        roles={"clock": [0, 1]},
    )


def test_zero_field_constant():
    field = PolyField(M=1, terms=[[]], roles={})
    tr = integrate(field, [7], 2, IntegratorConfig(step=Fraction(1, 8)))
    assert all(s[0] == 7 for s in tr.states)


def test_clock_stays_on_unit_circle():
    tr = integrate(clock_field(), [1, 0], 7, IntegratorConfig(step=Fraction(1, 128)))
    for c1, c2 in tr.states:
        assert abs(c1 * c1 + c2 * c2 - 1) < 1e-9


def test_clock_period():
    times = [0, 2 * math.pi]
    tr = integrate(clock_field(), [1, 0], None,
                   IntegratorConfig(step=Fraction(1, 256)), sample_times=times)
    c1, c2 = tr.states[-1]
    assert abs(c1 - 1) < 1e-9 and abs(c2) < 1e-9


def test_riccati_blowup_sample():
    field = PolyField(M=1, terms=[[(Fraction(1), (2,))]], roles={})
    tr = integrate(field, [1], Fraction(1, 2), IntegratorConfig(step=Fraction(1, 512)))
    # closed form 1/(1-t) at t = 1/2
    assert abs(tr.states[-1][0] - 2) < 1e-5


def test_exact_arithmetic_euler_integration():
    field = PolyField(M=1, terms=[[(Fraction(1), (1,))]], roles={})
    cfg = IntegratorConfig(method="euler", step=Fraction(1, 4), arithmetic="exact")
    tr = integrate(field, [Fraction(1)], 1, cfg, sample_times=[0, 1])
    assert tr.states[-1][0] == Fraction(5, 4) ** 4


def test_step_halving_unstable_detection():
    field = PolyField(M=1, terms=[[(Fraction(1), (2,))]], roles={})
    cfg = IntegratorConfig(method="euler", step=Fraction(1, 4),
                           check_halving=True, tolerance=1e-9)
    with pytest.raises(StepUnstable):
        integrate(field, [1], Fraction(1, 2), cfg,
                  sample_times=[Fraction(0), Fraction(1, 2)])


def test_compile_roles_and_shape(compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["succ"])
    roles = ode.roles()
    for key in ("clock", "driver", "comparators", "holds", "shadow", "samplers"):
        assert key in roles
    assert roles["clock"] == [0, 1]
    assert ode.cycles_per_machine_step == 2
    assert ode.M == ode.structured.samp_off + ode.structured.n_samp


def test_succ_window_within_quarter(corpus, compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["succ"])
    run = ode_run(ode, (3,))
    assert read_output(ode, run) == (4,)
    out_idx = ode.output_indices[0]
    for row in run.window_samples:
        assert abs(row[out_idx] - 4) < 0.25


def test_add_rounded_output(compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["add"])
    run = ode_run(ode, (2, 3))
    assert read_output(ode, run) == (5,)


def test_contraction_report(corpus, compiled_nf):
    prog, _ = corpus["add"]
    nf = compiled_nf["add"]
    ode = compile_nf_to_ode(nf)
    rep = measure_cycle_contraction(ode, nf, (2, 3))
    assert rep.lam < 1
    assert rep.ratio < 0.25
    assert rep.max_cycle_error < 0.25
    # zero-perturbation start: e_n <= eta * sum lam^k at every cycle
    bound = 0.0
    for n in range(1, len(rep.cycle_errors)):
        bound = rep.lam * bound + rep.eta
        assert rep.cycle_errors[n] <= bound + 1e-12
    assert rep.halving_change is not None


def test_rate_sweep_eta_decreases(corpus, compiled_nf):
    prog, _ = corpus["succ"]
    nf = compiled_nf["succ"]
    etas = []
    for rate in (5, 7, 9):
        ode = compile_nf_to_ode(nf, GadgetParams(rate=Fraction(rate)))
        rep = measure_cycle_contraction(ode, nf, (3,), check_halving=False)
        etas.append(rep.eta)
    assert etas[0] > etas[1] > etas[2]


def test_window_inconsistent_detection(compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["succ"])
    run = ode_run(ode, (3,))
    doctored = run.window_samples.copy()
    doctored[-1, ode.output_indices[0]] += 0.7
    run.window_samples = doctored
    with pytest.raises(WindowInconsistent):
        read_output(ode, run)


def test_unsupported_forms():
    q = IntAffine(((1, 0),), (0,))
    a = IntAffine(((0, 1), (0, 0)), (0, 0))
    nf = NormalForm(
        m=2,
        base=IntAffine(((1, 0), (0, 1)), (0, 0)),
        gated=((q, a),),
        layout={},
        output_indices=(0,),
    )
    with pytest.raises(UnsupportedForm):
        compile_nf_to_ode(nf)


def test_gadget_budget_unsatisfiable(corpus, compiled_nf):
    nf = compiled_nf["succ"]
    hopeless = [GadgetParams(rate=Fraction(1, 2)), GadgetParams(rate=Fraction(1, 4))]
    with pytest.raises(GadgetBudgetUnsatisfiable):
        search_gadget_params(nf, (3,), grid=hopeless)


def test_search_finds_default(compiled_nf):
    nf = compiled_nf["zero"]
    params = search_gadget_params(nf, (1,))
    assert params.rate >= 1


def test_polyfield_expansion_dual_route(compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["succ"])
    pf = ode.field_poly
    assert pf.M == ode.M
    rng = random.Random(1)
    for _ in range(2):
        y = [Fraction(rng.randint(0, 8), 8) for _ in range(pf.M)]
        assert pf.eval_exact(y) == ode.structured.eval_exact(y)


def test_polyfield_serialization(compiled_nf):
    ode = compile_nf_to_ode(compiled_nf["zero"])
    pf = ode.field_poly
    clone = polyfield_loads(polyfield_dumps(pf))
    assert clone.M == pf.M
    assert clone.terms == pf.terms
    assert clone.roles == pf.roles


def test_smoothstep_coeffs():
    # one iteration is 3t^2 - 2t^3
    assert smoothstep_coeffs(1) == [0, 0, 3, -2]
    p = smoothstep_coeffs(2)
    val = sum(c * Fraction(1, 2) ** i for i, c in enumerate(p))
    assert val == Fraction(1, 2)  # 1/2 is the unstable fixed point


def test_register_drift_during_frozen_half(corpus, compiled_nf):
    # while the comparators latch, register-role holds are frozen: their
    # per-cycle movement stays below the measured eta
    import numpy as np

    from dyncomp import _kernels

    nf = compiled_nf["add"]
    ode = compile_nf_to_ode(nf)
    rep = measure_cycle_contraction(ode, nf, (2, 3), check_halving=False)
    s = ode.structured
    times = []
    for n in range(20):
        times += [n * KAPPA0, n * KAPPA0 + math.pi]
    samples = _kernels.rk4_sampled(
        ode.initial_state((2, 3)), np.asarray(times), KAPPA0 / 512,
        s.kernel_args(),
    )
    regs = [s.w_off + k
            for k in nf.layout["data"] + nf.layout["counters"] + nf.layout["temps"]]
    for n in range(20):
        a, b = samples[2 * n], samples[2 * n + 1]
        assert max(abs(b[i] - a[i]) for i in regs) < rep.eta


def test_safety_bound_holds(corpus, compiled_nf):
    prog, _ = corpus["mul"]
    nf = compiled_nf["mul"]
    ode = compile_nf_to_ode(nf)
    run = ode_run(ode, (2, 2))
    bound = run.safety_bound
    assert np.max(np.abs(run.cycle_samples)) <= bound
    assert np.max(np.abs(run.window_samples)) <= bound
