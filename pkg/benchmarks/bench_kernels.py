"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from treeagg import kernels
from treeagg.admm import FitConfig, Problem
from treeagg.experiments import ExperimentSpec, gen_scenario
from treeagg.tree import pairwise_distances


def cases():
    sc = gen_scenario(ExperimentSpec.preset("high-dim", k=10), seed=0)
    prob = Problem(sc.X, sc.y, sc.tree)
    cfg = FitConfig(0.01, 0.5)
    scale = 1.0 / (prob.d2 + prob.n * cfg.rho)
    rng = np.random.default_rng(0)
    b, g = rng.normal(size=prob.p), rng.normal(size=prob.T)
    D = pairwise_distances(rng.normal(size=(300, 5)))
    Xf = np.asfortranarray(sc.X)
    w = np.ones(prob.p)

    def admm(mod):
        mod.admm_run(prob.xty, prob.V, scale, prob.projector.parent, prob.projector.inv,
                     prob.root, 0.005, 0.005, 1.0, float(prob.n), 1e-12, 1e-12, 200,
                     prob.fresh_state())

    def project(mod):
        mod.tree_project(prob.projector.parent, prob.projector.inv, prob.p, b, g)

    def agglo(mod):
        mod.agglomerate(D, "complete")

    def lasso(mod):
        mod.cd_lasso(Xf, sc.y, 0.05, w, np.zeros(prob.p), 200, 1e-14)

    return [("admm_run (200 iters, p=200)", admm), ("tree_project (p=200)", project),
            ("agglomerate (300 points)", agglo), ("cd_lasso (200 sweeps, p=200)", lasso)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = kernels.backends()
    print(f"{'kernel':32s}" + "".join(f"{m:>12s}" for m in mods) + "     speedup")
    for name, fn in cases():
        times = {}
        for m, mod in mods.items():
            number = 1 if m == "python" and "project" not in name else 20
            t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            times[m] = t
        sp = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:32s}" + "".join(f"{times[m] * 1e3:10.3f}ms" for m in mods)
              + f"{sp:11.1f}x")


if __name__ == "__main__":
    main()
