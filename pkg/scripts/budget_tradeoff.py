"""Stage-2 accuracy against swarm budget, and decoupled vs joint-space PSO.

Every configuration refines the same Stage-1 estimate of the same seeded
trials, so differences come from the search alone.
"""
import argparse
import sys
import time

import numpy as np

from tsge.pipeline import ExperimentPlan, TSGEOptions, delay_half_width, refine_pso, rmse, run_stage1, simulate_trial
from tsge.refined import PSOOptions, RefinedObjective, run_pso_joint, search_space_from_coarse

BUDGETS = [(500, 100), (200, 50), (100, 20), (50, 10)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--snr-db", type=float, default=7.0)
    p.add_argument("--seed", type=int, default=20240917)
    args = p.parse_args(argv)

    plan = ExperimentPlan(values=[args.snr_db], trials=args.trials, seed=args.seed)
    base = TSGEOptions()
    err = {f"pso {i}x{q}": [] for i, q in BUDGETS}
    err["joint 500x100"] = []
    secs = {k: 0.0 for k in err}
    for t in range(args.trials):
        ch, obs, seeds = simulate_trial(plan, args.snr_db, t)
        coarse = run_stage1(obs, base)
        for i, q in BUDGETS:
            opts = TSGEOptions(pso=PSOOptions(n_particles=q, max_iters=i), polish=False)
            t0 = time.perf_counter()
            est = refine_pso(obs, coarse, opts, seeds["swarm"])
            secs[f"pso {i}x{q}"] += time.perf_counter() - t0
            err[f"pso {i}x{q}"].append(abs(est.los_delay - ch.los_delay))
        obj = RefinedObjective.from_observation(obs, coarse.K, base.refine_noise_floor)
        space = search_space_from_coarse(coarse, delay_half_width(obs, base), obs.sigma_p, 3 * obs.sigma_p)
        t0 = time.perf_counter()
        est = run_pso_joint(obj, space, PSOOptions(n_particles=100, max_iters=500, max_evals=50_000), seeds["swarm"])
        secs["joint 500x100"] += time.perf_counter() - t0
        err["joint 500x100"].append(abs(est.los_delay - ch.los_delay))
    print(f"{'configuration':16s} {'rmse (ns)':>10s} {'median (ns)':>12s} {'s/trial':>8s}")
    for k, e in err.items():
        print(f"{k:16s} {rmse(e) * 1e9:10.4f} {np.median(e) * 1e9:12.4f} {secs[k] / args.trials:8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
