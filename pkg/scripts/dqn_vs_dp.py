"""Compare the trained Q-network policy with the tabular dynamic-programming optimum on small contexts.

    python3 scripts/dqn_vs_dp.py --episodes 20000
"""

import argparse
import time

from abstop.dp import dp_solve
from abstop.dqn import TrainingConfig, act, train
from abstop.env import ExperimentContext
from abstop.harness import evaluate_policy_value
from abstop.rng import stream

CONTEXTS = (
    ExperimentContext(0.3, 0.2, 0.0, 0.2, 5.0, 5.0, (100,) * 4, (100,) * 4, 100.0, 0.0, 4, 52),
    ExperimentContext(0.5, 0.3, 0.0, 0.3, 5.0, 5.0, (50,) * 4, (50,) * 4, 100.0, 0.0, 4, 52),
    ExperimentContext(0.2, 0.2, 0.0, 0.1, 4.0, 4.0, (80, 60, 40, 20), (80, 60, 40, 20), 30.0, 0.0, 4, 26),
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=20000)
    ap.add_argument("--learning-rate", type=float, default=1e-3)
    ap.add_argument("--eval-episodes", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for i, ctx in enumerate(CONTEXTS):
        optimum = dp_solve(ctx).initial_value
        start = time.perf_counter()
        cfg = TrainingConfig(episodes=args.episodes, learning_rate=args.learning_rate, seed=args.seed)
        policy = train(cfg, [ctx], stream(args.seed, "dqn-vs-dp", i))
        secs = time.perf_counter() - start
        value, se = evaluate_policy_value(lambda s: act(policy, s, ctx), ctx, args.eval_episodes, args.seed + 1)
        print(f"context {i}: optimum {optimum:.1f}  policy {value:.1f} +- {se:.1f}  "
              f"ratio {value / optimum:.4f}  training {secs:.0f} s")


if __name__ == "__main__":
    main()
