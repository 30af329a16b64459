"""Compare the numba kernels against the pure-python/numpy fallback.

Run: python benchmarks/bench_kernels.py [--steps 200000] [--program add]

The fallback is the same code numba compiles (selected at call time by the
DYNCOMP_NO_NUMBA environment flag), so the comparison is apples to apples.
"""

import argparse
import os
import time
from importlib import resources

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--program", default="add")
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--fallback-steps", type=int, default=4_000)
    args = ap.parse_args()

    os.environ.pop("DYNCOMP_NO_NUMBA", None)
    from dyncomp import _kernels
    from dyncomp.loop_lang import parse_loop
    from dyncomp.normal_form import compile_to_nf
    from dyncomp.ode_backend import compile_nf_to_ode

    src = (resources.files("dyncomp") / "corpus" / f"{args.program}.loop").read_text()
    ode = compile_nf_to_ode(compile_to_nf(parse_loop(src)))
    x = tuple([2] * ode.num_inputs)
    y0 = ode.initial_state(x)
    kargs = ode.structured.kernel_args()
    h, snap = 2.0**-10, 2.0**40

    print(f"program={args.program}  M={ode.M}  comparators={ode.structured.n_comp}")

    _kernels.euler_iterate(y0, h, 10, snap, kargs)  # warm the JIT
    t0 = time.perf_counter()
    _kernels.euler_iterate(y0, h, args.steps, snap, kargs)
    dt_nb = time.perf_counter() - t0
    print(f"numba euler : {args.steps} steps in {dt_nb:.3f}s "
          f"({args.steps / dt_nb / 1e6:.2f} Msteps/s)")

    os.environ["DYNCOMP_NO_NUMBA"] = "1"
    t0 = time.perf_counter()
    _kernels.euler_iterate(y0, h, args.fallback_steps, snap, kargs)
    dt_py = time.perf_counter() - t0
    os.environ.pop("DYNCOMP_NO_NUMBA")
    rate_py = args.fallback_steps / dt_py
    print(f"python euler: {args.fallback_steps} steps in {dt_py:.3f}s "
          f"({rate_py / 1e6:.3f} Msteps/s)")
    print(f"speedup: {args.steps / dt_nb / rate_py:.0f}x")

    times = np.array([0.0, 2 * np.pi])
    _kernels.rk4_sampled(y0, times, 0.02, kargs)
    t0 = time.perf_counter()
    n_cycles = 40
    times = np.arange(n_cycles + 1) * 2 * np.pi
    _kernels.rk4_sampled(y0, times, 2 * np.pi / 256, kargs)
    dt = time.perf_counter() - t0
    print(f"numba rk4   : {n_cycles} cycles at 256 steps/cycle in {dt:.3f}s")


if __name__ == "__main__":
    main()
