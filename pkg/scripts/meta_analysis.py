"""Meta-analysis over a simulated cohort: train the stopping policy, compare it with every baseline.

Writes ``report.csv``/``report.txt``, the trained ``policy.json`` and three
policy slices (weeks 1 to 3) under ``--out``.

    python3 scripts/meta_analysis.py --out runs/meta --seed 0
"""

import argparse
import os
import time

import numpy as np

from abstop.dqn import TrainingConfig, save_policy, train
from abstop.env import BeliefState
from abstop.harness import (DGPConfig, MethodSpec, compute_metrics, continue_trend_ok, default_reps, format_table,
                            generate_cohort, policy_slice, report, run_method, simulate_paths, stop_trend_ok)
from abstop.rng import stream

METHODS = (
    MethodSpec("ffht"), MethodSpec("alpha_spending"), MethodSpec("bfht"), MethodSpec("bfhod"),
    MethodSpec("bf", {"threshold": 3}), MethodSpec("bf", {"threshold": 10}), MethodSpec("bf", {"threshold": 30}),
    MethodSpec("pos", {"threshold": 3}), MethodSpec("pos", {"threshold": 10}), MethodSpec("pos", {"threshold": 30}),
    MethodSpec("avp"), MethodSpec("rl"),
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/meta")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--experiments", type=int, default=3000)
    ap.add_argument("--episodes", type=int, default=20000)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    cohort = generate_cohort(DGPConfig(n_experiments=args.experiments, seed=args.seed))
    start = time.perf_counter()
    policy = train(TrainingConfig(episodes=args.episodes, seed=args.seed), [e.ctx for e in cohort],
                   stream(args.seed, "train"))
    print(f"trained on {len(cohort)} experiments in {time.perf_counter() - start:.0f} s")
    save_policy(policy, os.path.join(args.out, "policy.json"))

    n_reps = default_reps(len(cohort))
    paths = simulate_paths(cohort, n_reps, args.seed)
    rows = [compute_metrics(run_method(m, cohort, n_reps, args.seed, policy=policy, paths=paths)) for m in METHODS]
    report(rows, os.path.join(args.out, "report.csv"))
    print(format_table(rows))

    totals = np.array([e.ctx.n_total for e in cohort])
    ctx = cohort[int(np.argsort(totals)[len(totals) // 2])].ctx
    for week in (1, 2, 3):
        grid = policy_slice(policy, ctx, BeliefState(0.1, 0.1, week), ("delta_mean", np.linspace(-6, 6, 13)),
                            ("weekly_cost", np.linspace(0, 2 * ctx.weekly_cost, 9)))
        with open(os.path.join(args.out, f"slice_week{week}.csv"), "w") as fh:
            fh.write(grid.to_csv())
        print(f"week {week}: stop trend ok {stop_trend_ok(grid)}, continue trend ok {continue_trend_ok(grid)}")


if __name__ == "__main__":
    main()
