"""Power of the residual tests against a scaled intensity.

For each scale c the shipped ensemble is scored against c * Lambda;
c = 1 is the correct model.
"""

import argparse

from cmclab.core import ScaledIntensity
from cmclab.diagnostics import RESIDUALS, Z_THRESHOLD, cmc_conditional_test, path_functionals
from cmclab.scenario import shipped_scenario
from cmclab.simulate import build_weighted_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="two_state")
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scales", default="1.0,1.05,1.1,1.25,1.5,2.0")
    args = ap.parse_args()

    sc = shipped_scenario(args.scenario)
    e = build_weighted_ensemble(sc, args.n, args.seed)
    names = list(RESIDUALS) + ["CMC"]
    print(f"{args.scenario}, n={args.n}, threshold {Z_THRESHOLD}")
    print(f"{'scale':>6} " + " ".join(f"{k:>7}" for k in names))
    for c in (float(s) for s in args.scales.split(",")):
        model = sc.model if c == 1.0 else ScaledIntensity(sc.model, c)
        pf = path_functionals(e, model)
        z = [RESIDUALS[k](e, model, pf=pf).max_abs_z for k in RESIDUALS]
        z.append(cmc_conditional_test(e, model, pf=pf).max_abs_z)
        print(f"{c:>6.2f} " + " ".join(f"{v:>7.2f}" for v in z))


if __name__ == "__main__":
    main()
