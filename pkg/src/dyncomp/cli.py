"""Command-line entry point: compile, run, verify, bounds, witness.

JSON is the canonical output; tables are derived views.  All verification
output is deterministic (sorted rows, no timestamps), so repeated runs of
``dyncomp verify`` on the same suite are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from importlib import resources

from .errors import DyncompError, Mismatch
from .loop_lang import interpret, parse_loop
from .normal_form import (
    ThetaMode,
    compile_to_nf,
    default_step_cap,
    nf_dumps,
    nf_outputs,
    nf_run,
)
from .relu_backend import compile_nf_to_relu, relu_dumps, relu_run
from .rho_backend import (
    compile_nf_to_rho,
    make_hard_sigmoid,
    make_logistic,
    nu_decode,
    rho_dumps,
    rho_run,
    s0_for_input,
)


def _corpus_root():
    return resources.files("dyncomp") / "corpus"


def _load_program(path: str):
    try:
        if path.startswith("corpus:"):
            text = (_corpus_root() / (path.split(":", 1)[1] + ".loop")).read_text()
        else:
            with open(path) as f:
                text = f.read()
    except (FileNotFoundError, OSError) as e:
        print(f"error: cannot read program {path}: {e}", file=sys.stderr)
        raise SystemExit(2)
    return parse_loop(text)


def _gadget_params(args):
    from .ode_backend import GadgetParams

    kwargs = {}
    if getattr(args, "gadget_K", None):
        kwargs["driver_K"] = args.gadget_K
    if getattr(args, "gadget_rate", None):
        kwargs["rate"] = Fraction(args.gadget_rate)
    return GadgetParams(**kwargs) if kwargs else None


def _activation(args):
    name = getattr(args, "activation", None) or "hard_sigmoid"
    if name == "hard_sigmoid":
        return make_hard_sigmoid()
    if name.startswith("logistic"):
        steep = Fraction(name.split(":", 1)[1]) if ":" in name else Fraction(64)
        return make_logistic(steep)
    print(f"error: unknown activation {name}", file=sys.stderr)
    raise SystemExit(2)


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        print(text)


def cmd_compile(args) -> int:
    prog = _load_program(args.program)
    nf = compile_to_nf(prog)
    if args.backend == "nf":
        _emit(nf_dumps(nf), args.out)
    elif args.backend == "relu":
        _emit(relu_dumps(compile_nf_to_relu(nf)), args.out)
    elif args.backend == "rho":
        _emit(rho_dumps(compile_nf_to_rho(nf, _activation(args))), args.out)
    elif args.backend in ("ode", "euler"):
        from .ode_backend import compile_nf_to_ode, polyfield_dumps

        ode = compile_nf_to_ode(nf, _gadget_params(args))
        _emit(polyfield_dumps(ode.field_poly), args.out)
    else:
        print(f"error: backend {args.backend} has no compiled form", file=sys.stderr)
        return 2
    return 0


def _run_one(backend, prog, nf, x, args):
    cap = default_step_cap(prog, x)
    ref = nf_run(nf, x, cap)
    if backend == "interp":
        res = interpret(prog, x)
        return list(res.outputs), {"T": res.machine_steps, "B": res.max_register}
    if backend == "nf":
        return list(nf_outputs(nf, ref)), {
            "T_nf": ref.halted_at,
            "B_trace": ref.max_norm(),
        }
    if backend == "relu":
        block = compile_nf_to_relu(nf)
        iters = ref.halted_at // 2
        tr = relu_run(block, x, iters)
        return (
            [int(tr.states[iters][i]) for i in block.output_indices],
            {"iterations": iters},
        )
    if backend == "rho":
        sysr = compile_nf_to_rho(nf, _activation(args))
        tr = rho_run(sysr, x, ref.halted_at, precision=max(2, args.s or 2))
        outs = [nu_decode(tr.states[ref.halted_at][i]) for i in sysr.output_indices]
        return outs, {"s0": s0_for_input(sysr, ref.max_norm()), "T": ref.halted_at}
    if backend == "ode":
        from .ode_backend import compile_nf_to_ode, measure_cycle_contraction, ode_run, read_output

        ode = compile_nf_to_ode(nf, _gadget_params(args))
        run = ode_run(ode, x, ref=ref)
        rep = measure_cycle_contraction(ode, nf, x, check_halving=False)
        return list(read_output(ode, run)), {
            "tau": run.tau,
            "B_tilde": run.safety_bound,
            "lambda": rep.lam,
            "eta": rep.eta,
        }
    if backend == "euler":
        from . import euler_backend as eb
        from .ode_backend import compile_nf_to_ode

        ode = compile_nf_to_ode(nf, _gadget_params(args))
        sys_e = eb.from_ode(ode)
        if args.s:
            run = eb.euler_run(sys_e, x, args.s, ref=ref)
            s_used = args.s
        else:
            s_used, (run, _) = eb.empirical_threshold(sys_e, x, ref=ref)
        return list(run.rounded), {
            "s": s_used,
            "N": run.N,
            "pre_rounding": [float(v) for v in run.pre_rounding],
        }
    raise SystemExit(2)


def cmd_run(args) -> int:
    prog = _load_program(args.program)
    x = tuple(int(v) for v in args.inputs)
    nf = compile_to_nf(prog)
    backends = (
        ["interp", "nf", "relu", "rho", "ode", "euler"]
        if args.backend == "all"
        else [args.backend]
    )
    results = {}
    for b in backends:
        outs, cert = _run_one(b, prog, nf, x, args)
        results[b] = {"outputs": outs, **cert}
    doc = {"program": prog.name, "input": list(x), "results": results}
    if args.format == "json":
        _emit(json.dumps(doc, indent=2, sort_keys=True, default=str), args.out)
    else:
        lines = [f"{prog.name}{x}"]
        for b in backends:
            r = results[b]
            cert = {k: v for k, v in r.items() if k != "outputs"}
            lines.append(f"  {b:6s} -> {r['outputs']}   {cert}")
        _emit("\n".join(lines), args.out)
    values = {tuple(r["outputs"]) for r in results.values()}
    return 0 if len(values) == 1 else 1


def cmd_verify(args) -> int:
    from .verify import cross_check

    root = _corpus_root()
    manifest = json.loads((root / "manifest.json").read_text())
    wanted = set(args.programs.split(",")) if args.programs else None
    grid_max = args.grid_max
    lines = []
    failures = 0
    for entry in sorted(manifest["programs"], key=lambda e: e["name"]):
        if wanted and entry["name"] not in wanted:
            continue
        prog = parse_loop((root / entry["file"]).read_text())
        inputs = sorted(
            tuple(int(v) for v in key.split(","))
            for key in entry["expected"]
            if all(int(v) <= grid_max for v in key.split(","))
        )
        expected = {
            tuple(int(v) for v in key.split(",")): tuple(vals)
            for key, vals in entry["expected"].items()
        }
        nf_override = None
        if args.inject_fault:
            # simulate a corrupted normal-form artifact: outputs read from
            # the wrong coordinate (the halt bit)
            nf = compile_to_nf(prog)
            nf_override = _corrupt_nf(nf)
        nf = nf_override or compile_to_nf(prog)
        try:
            report = cross_check(prog, inputs, nf=nf)
            rows = report["rows"]
        except Mismatch as e:
            lines.append(f"{entry['name']}: MISMATCH {e}")
            failures += 1
            continue
        bad = 0
        for row in rows:
            hard_ok = _hard_invariants(prog, nf, row.x)
            man_ok = row.interp == expected[row.x]
            ok = row.all_equal and hard_ok and man_ok
            bad += 0 if ok else 1
            lines.append(
                f"{entry['name']}{row.x}: interp={list(row.interp)} nf={list(row.nf)} "
                f"relu={list(row.relu)} rho={list(row.rho)} ode={list(row.ode)} "
                f"euler={list(row.euler)}@s={row.euler_s} "
                f"{'ok' if ok else 'FAIL'}"
            )
        failures += bad
    if not lines:
        lines.append("warning: empty suite")
    lines.append(f"verdict: {'PASS' if failures == 0 else f'FAIL ({failures})'}")
    _emit("\n".join(lines), args.out)
    return 0 if failures == 0 else 1


def _corrupt_nf(nf):
    from dataclasses import replace

    return replace(nf, output_indices=tuple(nf.layout["halt"]), _prepared=None)


def _hard_invariants(prog, nf, x) -> bool:
    """Strict/margin agreement and lattice integrality on one input."""
    cap = default_step_cap(prog, x)
    a = nf_run(nf, x, cap)
    b = nf_run(nf, x, cap, ThetaMode.UNIFORM_MARGIN)
    if a.states != b.states:
        return False
    return all(isinstance(v, int) for state in a.states for v in state)


def cmd_bounds(args) -> int:
    from . import euler_backend as eb
    from .ode_backend import compile_nf_to_ode

    prog = _load_program(args.program)
    x = tuple(int(v) for v in args.inputs)
    res = interpret(prog, x)
    nf = compile_to_nf(prog)
    ref = nf_run(nf, x, default_step_cap(prog, x))
    ode = compile_nf_to_ode(nf, _gadget_params(args))
    sys_e = eb.from_ode(ode)
    rho = compile_nf_to_rho(nf, _activation(args))
    R = ode.safety_bound(x, ref) + 1
    maj = eb.majorants(sys_e.field, R)
    S = eb.theoretical_threshold(sys_e, x, ref=ref)
    doc = {
        "program": prog.name,
        "input": list(x),
        "machine_steps": res.machine_steps,
        "space_bound": res.max_register,
        "T_nf": ref.halted_at,
        "B_trace": ref.max_norm(),
        "s0": s0_for_input(rho, ref.max_norm()),
        "tau": ode.tau(x, ref),
        "B_tilde": ode.safety_bound(x, ref),
        "majorants": {"R": maj.R, "M_sharp": str(maj.M_sharp), "L_sharp": str(maj.L_sharp)},
        "theoretical_S": str(S),
        "theoretical_S_digits": len(str(S)),
    }
    if args.empirical:
        s_star, (run, _) = eb.empirical_threshold(sys_e, x, ref=ref)
        doc["empirical_S"] = s_star
        doc["N_at_empirical"] = run.N
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.out)
    return 0


def cmd_witness(args) -> int:
    from .verify import rounder_witness, selector_witness

    if args.kind == "rounder":
        coeffs = [Fraction(c) for c in args.coeffs.split(",")]
        w = rounder_witness(coeffs, args.N, Fraction(args.delta), Fraction(args.eps))
    else:
        dim = 2

        def shift_down(state):
            return (state[0] - 1, Fraction(1))

        w = selector_witness(shift_down, 1, args.C_max, args.n_max, dimension=dim)
    doc = {
        "kind": args.kind,
        "point": [str(v) for v in w.point],
        "description": w.description,
        "revalidates": w.revalidate(),
    }
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dyncomp",
        description="LOOP programs as ReLU, coded-sigmoid, polynomial-ODE and Euler dynamics",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inputs=False):
        sp.add_argument("--backend", default="all",
                        choices=["interp", "nf", "relu", "rho", "ode", "euler", "all"])
        sp.add_argument("--activation", default=None,
                        help="hard_sigmoid or logistic[:steepness]")
        sp.add_argument("--s", type=int, default=None, help="Euler precision parameter")
        sp.add_argument("--gadget-K", dest="gadget_K", type=int, default=None)
        sp.add_argument("--gadget-rate", dest="gadget_rate", default=None)
        sp.add_argument("--integrator", default="rk4", choices=["rk4", "euler"])
        sp.add_argument("--format", default="table", choices=["table", "json", "csv"])
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("compile", help="write a backend's compiled form as JSON")
    sp.add_argument("program")
    common(sp)
    sp.set_defaults(fn=cmd_compile)

    sp = sub.add_parser("run", help="run a program on one input")
    sp.add_argument("program")
    sp.add_argument("inputs", nargs="*", type=int)
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("verify", help="cross-check all backends over the bundled suite")
    sp.add_argument("--programs", default=None, help="comma-separated subset")
    sp.add_argument("--grid-max", dest="grid_max", type=int, default=4)
    sp.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                    help="corrupt the compiled normal form (tests the failure path)")
    common(sp)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("bounds", help="report time/space/precision certificates")
    sp.add_argument("program")
    sp.add_argument("inputs", nargs="*", type=int)
    sp.add_argument("--empirical", action="store_true")
    common(sp)
    sp.set_defaults(fn=cmd_bounds)

    sp = sub.add_parser("witness", help="search impossibility witnesses")
    sp.add_argument("kind", choices=["rounder", "selector"])
    sp.add_argument("--coeffs", default="0,1", help="ascending polynomial coefficients")
    sp.add_argument("--N", type=int, default=1)
    sp.add_argument("--delta", default="2/5")
    sp.add_argument("--eps", default="1/10")
    sp.add_argument("--C-max", dest="C_max", type=int, default=8)
    sp.add_argument("--n-max", dest="n_max", type=int, default=8)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_witness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DyncompError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
