"""Calibrate the K tolerance constant c_K on null experiments.

A null experiment has a degenerate volatility interval, so every exact K is zero and any
negative increment is discretization noise. c_K is 3 times the 99th percentile of those
negative increments per (dt + dx^2), floored at the value passed with --floor.
"""
import argparse

from twobsde.engine import assemble_solution, calibrate_c_k
from twobsde.generators import affine_generator, sqrt_generator, zero_generator
from twobsde.grid import Grid
from twobsde.hjb import solve_hjb
from twobsde.scenarios import VolatilityBounds, enumerate_family
from twobsde.terminals import make_terminal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--floor", type=float, default=0.1)
    ap.add_argument("--n-paths", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    grid = Grid(1.0, 200, -6.0, 6.0, 121)
    reports = []
    drivers = {"zero": zero_generator(), "affine": affine_generator(c0=0.2, cy=-0.5, cz=0.3),
               "signed_sqrt": sqrt_generator(signed=True)}
    for a in (0.5, 1.0, 1.5):
        bounds = VolatilityBounds(a, a)
        for name, f in drivers.items():
            for preset in ("cos", "square", "abs"):
                g = make_terminal(preset)
                hjb = solve_hjb(f, g, grid, bounds)
                sol = assemble_solution(hjb, enumerate_family(bounds, 1), g, n_paths=args.n_paths,
                                        seed=args.seed)
                reports.extend(sol.k_reports.values())
    c_k, q = calibrate_c_k(reports, grid, floor=args.floor)
    print(f"99th percentile of negative dK: {q:.3e}")
    print(f"c_K = {c_k:.4g}  (tol_K = {c_k * (grid.dt + grid.dx**2):.3e} on a {grid.n_t}x{grid.n_x} grid)")


if __name__ == "__main__":
    main()
