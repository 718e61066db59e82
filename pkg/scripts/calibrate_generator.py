"""Fit the synthetic generator's constants to the reference statistics.

Prints PERCENT_PARAMS (location/scale of the scaled logit-normal
percentages, matched to the reference mean and std) and DEFAULT_CUTPOINTS
(severity cutpoints matched to the target marginals). Paste the output into
cfx/synthbench.py.

    python scripts/calibrate_generator.py --n 400000
"""
import argparse
import dataclasses

import numpy as np
from scipy.optimize import brentq, fsolve

from cfx.dataset import DEFAULT_SCHEMA
from cfx.propensity import sigmoid
from cfx.synthbench import PERCENT_PARAMS, SEVERITY_TARGETS, SynthConfig, generate_synthetic


def percent_params():
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    weights = weights / weights.sum()
    out = {}
    for v in DEFAULT_SCHEMA:
        if v.alias not in PERCENT_PARAMS:
            continue

        def moments(p):
            x = np.clip(100 * sigmoid(p[0] + p[1] * nodes), *v.bounds)
            m = weights @ x
            return [m - v.mean, np.sqrt(weights @ (x - m) ** 2) - v.std]

        guess = [np.log(v.mean / (100 - v.mean)), 0.5]
        loc, scale = fsolve(moments, guess)
        out[v.alias] = (round(float(loc), 4), round(float(scale), 4))
    return out


def cutpoints(n, seed, pparams):
    cfg = SynthConfig(n=n, seed=seed, percent_params=pparams)
    ds, truth = generate_synthetic(cfg)
    eta = truth.eta(ds.record_ids, ds.treatments)
    cum = np.cumsum(SEVERITY_TARGETS)[:-1]
    return tuple(round(brentq(lambda c: sigmoid(c - eta).mean() - target, -20, 20), 4) for target in cum)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=400_000)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()
    pp = percent_params()
    print("PERCENT_PARAMS =", pp)
    cuts = cutpoints(args.n, args.seed, pp)
    print("DEFAULT_CUTPOINTS =", cuts)
    ds, _ = generate_synthetic(SynthConfig(n=50_000, seed=0, percent_params=pp, cutpoints=cuts))
    print("marginals at n=50000:", np.bincount(ds.outcome, minlength=4) / ds.n)
    print("confounder means:", ds.confounders.mean(axis=0).round(2))
    print("confounder stds: ", ds.confounders.std(axis=0).round(2))
    print("treatment means: ", ds.treatments.mean(axis=0).round(3))
    print("treatment stds:  ", ds.treatments.std(axis=0).round(3))


if __name__ == "__main__":
    main()
