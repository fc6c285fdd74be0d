"""Trajectory throughput of the compiled kernel versus its pure twin.

Both backends walk identical sample paths, so the comparison is pure
implementation overhead. Run from the repository root:

    python3 benchmarks/bench_backends.py --n-traj 400
"""

import argparse
import time

import numpy as np

from flashsim import _kernels_py
from flashsim.model import (
    GaussianProfile,
    HamiltonianSpec,
    Lattice,
    basis_state,
    build_fock_model,
    build_grw_model,
)
from flashsim.sampler import SamplerConfig, _run_raw, propagator_ladder

try:
    from flashsim import _kernels
except ImportError:
    _kernels = None


def build(name: str):
    if name == "grw":
        lat = Lattice(shape=(4,), spacing=1.0)
        model = build_grw_model(
            1, lat, GaussianProfile(strength=0.8, width=1.2), h=HamiltonianSpec(hopping=1.0)
        )
    elif name == "grw2":
        lat = Lattice(shape=(3,), spacing=1.0)
        model = build_grw_model(
            2, lat, GaussianProfile(strength=0.5, width=1.0), h=HamiltonianSpec(hopping=0.6)
        )
    elif name == "fock":
        lat = Lattice(shape=(3,), spacing=1.0)
        model = build_fock_model(
            lat, GaussianProfile(strength=0.6, width=1.0), parity=1, n_max=2,
            h=HamiltonianSpec(hopping=0.9),
        )
    else:
        raise SystemExit(f"unknown model {name!r}")
    return model, basis_state(model, min(1, model.dim - 1))


def run_backend(kernel, model, psi0, cfg, n_traj):
    flashes = 0
    t0 = time.perf_counter()
    for i in range(n_traj):
        flashes += _run_raw(model, psi0, cfg, i, kernel=kernel).times.size
    return time.perf_counter() - t0, flashes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="grw", choices=("grw", "grw2", "fock"))
    ap.add_argument("--n-traj", type=int, default=400)
    ap.add_argument("--t-max", type=float, default=6.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model, psi0 = build(args.model)
    cfg = SamplerConfig(t_max=args.t_max, seed=args.seed)
    propagator_ladder(model, cfg.coarse_step())  # shared one-time setup
    print(f"model={args.model} dim={model.dim} n_traj={args.n_traj} t_max={args.t_max}")

    backends = [("pure", _kernels_py.run_trajectory_kernel)]
    if _kernels is not None:
        backends.append(("compiled", _kernels.run_trajectory_kernel))
    else:
        print("compiled extension not importable; timing the pure backend only")

    rows = []
    for name, kernel in backends:
        run_backend(kernel, model, psi0, cfg, min(20, args.n_traj))  # warm up
        elapsed, flashes = run_backend(kernel, model, psi0, cfg, args.n_traj)
        rows.append((name, elapsed, flashes))
        print(
            f"{name:>8}: {elapsed:8.3f} s  "
            f"{args.n_traj / elapsed:9.1f} traj/s  {flashes / elapsed:10.1f} flashes/s"
        )
    if len(rows) == 2:
        (_, t_pure, f_pure), (_, t_comp, f_comp) = rows
        if f_pure != f_comp:
            raise SystemExit("backends disagree on total flash count; do not trust the timing")
        print(f"speedup: {t_pure / t_comp:.1f}x")


if __name__ == "__main__":
    main()
