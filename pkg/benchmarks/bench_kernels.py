"""Time the compiled and numpy kernels on the same networks.

    python benchmarks/bench_kernels.py [--max-area 0.005] [--steps 2000]

Both backends start from the zero state with the same seed; the script checks
that they end in the same state before reporting ns per neuron-step.
"""

from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from neurofem.fem import poisson_disk_system
from neurofem.kernels import get_backend
from neurofem.network import SnnParams, build_network, quantize_network
from neurofem.sim_fixed import FixedSimulator
from neurofem.sim_float import FloatSimulator


def _time(fn) -> float:
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def bench_float(net, steps: int, backend: str, noise: str):
    sim = FloatSimulator(net, seed=1, backend=backend, noise=noise)
    dt = _time(lambda: sim.advance(steps))
    return dt, sim.state


def bench_fixed(fnet, steps: int, backend: str):
    sim = FixedSimulator(fnet, seed=1, backend=backend)
    dt = _time(lambda: sim.advance(steps))
    return dt, sim.state


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-area", type=float, default=0.005)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--npm", type=int, default=8)
    args = ap.parse_args()
    logging.disable(logging.WARNING)

    try:
        get_backend("compiled")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return

    system = poisson_disk_system(args.max_area)
    net = build_network(system, SnnParams(npm=args.npm, gamma_mag=2.0**-6))
    fnet = quantize_network(net)
    work = net.n_neurons * args.steps
    print(f"{system.n} unknowns, {net.n_neurons} neurons, {args.steps} steps")
    print(f"{'kernel':<22}{'compiled ns':>12}{'python ns':>12}{'speedup':>10}  same")
    cases = [
        ("float, no noise", lambda b: bench_float(net, args.steps, b, "none")),
        ("float, gaussian", lambda b: bench_float(net, args.steps, b, "gauss")),
        ("float, uniform24", lambda b: bench_float(net, args.steps, b, "uniform24")),
        ("fixed", lambda b: bench_fixed(fnet, args.steps, b)),
    ]
    for name, fn in cases:
        tc, sc = fn("compiled")
        tp, sp = fn("python")
        same = all(np.array_equal(getattr(sc, k), getattr(sp, k)) for k in ("v", "s"))
        print(f"{name:<22}{1e9 * tc / work:>12.1f}{1e9 * tp / work:>12.1f}{tp / tc:>10.1f}  {same}")


if __name__ == "__main__":
    main()
