"""Compare the exponential, Peano-Baker and Magnus-2 routes on shipped scenarios.

Prints one line per scenario, then a Magnus step-size sweep on a
non-commuting two-piece generator.
"""

import argparse

import numpy as np

from cmclab.core import FactorPath, MixtureIntensity, TimeGrid
from cmclab.kolmogorov import magnus2, route_agreement, transition_field
from cmclab.scenario import shipped_names, shipped_scenario
from cmclab.simulate import sample_factor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    print(f"{'scenario':<14} {'exp-PB':>10} {'exp-Magnus':>11} {'PB-Magnus':>10} {'PB order':>9}")
    for name in shipped_names("continuous"):
        sc = shipped_scenario(name)
        worst = np.zeros(3)
        order = 0
        for seed in range(args.seeds):
            rep = route_agreement(sc.model, sample_factor(sc.driver, sc.grid, seed))
            worst = np.maximum(worst, [rep["exp_vs_pb"], rep["exp_vs_magnus"], rep["pb_vs_magnus"]])
            order = max(order, rep["max_order"])
        print(f"{name:<14} {worst[0]:>10.2e} {worst[1]:>11.2e} {worst[2]:>10.2e} {order:>9d}")

    G1 = np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]])
    G2 = np.array([[-2.0, 0.0, 2.0], [0.5, -0.5, 0.0], [0.0, 1.5, -1.5]])
    grid = TimeGrid(1.0, 2048)
    f = FactorPath(grid, np.where(np.arange(2049) < 1025, -1.0, 1.0))
    model = MixtureIntensity(G1, G2, link="step")
    exact = transition_field(model, f, grid).P(0.0, 1.0)
    print("\nMagnus-2 step sweep (piece switch inside a step)")
    print(f"{'step':>10} {'max error':>11}")
    for span in (0.5, 0.125, 2 ** -5, 2 ** -7, 2 ** -9):
        err = np.abs(magnus2(model, f, 0.0, 1.0, max_span=span) - exact).max()
        print(f"{span:>10.5f} {err:>11.3e}")


if __name__ == "__main__":
    main()
