"""Exact oracle checks and discrete-to-continuous convergence."""

import argparse

import numpy as np

from cmclab.oracle import convergence_errors, discrete_from_dict, loglog_slope, verify_all
from cmclab.scenario import shipped_doc, shipped_names


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=float, default=0.2)
    ap.add_argument("--steps", default="2,4,8")
    args = ap.parse_args()

    for name in shipped_names("discrete"):
        out = verify_all(discrete_from_dict(shipped_doc(name)))
        print(f"{name:<18} max discrepancy {max(out.values()):.2e}")

    G = np.array([[-1.0, 1.0], [1.0, -1.0]])
    steps = tuple(int(s) for s in args.steps.split(","))
    errs = convergence_errors(G, args.T, steps)
    print(f"\n{'dt':>8} {'error':>11}")
    for dt, err in errs:
        print(f"{dt:>8.4f} {err:>11.3e}")
    print(f"log-log slope {loglog_slope(errs):.3f}")


if __name__ == "__main__":
    main()
