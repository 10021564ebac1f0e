"""Command-line workflows: simulate a cohort, train, evaluate, slice and recommend.

Every command reads a JSON run configuration or explicit input files, checks
them completely and only then writes outputs.  Exit status is 0 on success,
1 for invalid input and 2 for runtime or numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from abstop.conjugate import state_delta_posterior
from abstop.dqn import (DivergenceError, PolicyFormatError, TrainingConfig, featurize, legal_mask, load_policy,
                        masked_argmax, policy_to_text, q_forward, train)
from abstop.env import Action, BeliefState, ContractError, ExperimentContext
from abstop.harness import (SLICE_FIELDS, CohortExperiment, DGPConfig, MethodSpec, compute_metrics, default_reps,
                            policy_slice, report, run_method, simulate_paths, generate_cohort)
from abstop.rng import stream

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InputError(ValueError):
    """Invalid user input; the message names the offending field or file."""


def _from_fields(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise InputError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise InputError(f"{where}: unknown field(s) {', '.join(unknown)}; valid: {', '.join(sorted(names))}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    """One reproducible run: cohort recipe, training setup, methods and master seed."""

    seed: int
    dgp: DGPConfig = field(default_factory=DGPConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    methods: tuple[MethodSpec, ...] = ()
    out_dir: str = "."
    n_reps: int | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        if not isinstance(doc, dict):
            raise InputError("config must be a JSON object")
        allowed = {"seed", "dgp", "training", "methods", "out_dir", "n_reps"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise InputError(f"config: unknown field(s) {', '.join(unknown)}; valid: {', '.join(sorted(allowed))}")
        if "seed" not in doc:
            raise InputError("config: field 'seed' is required")
        seed = doc["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise InputError("config: 'seed' must be a nonnegative integer")
        dgp = _from_fields(DGPConfig, {**doc.get("dgp", {}), "seed": seed}, "config.dgp")
        training = _from_fields(TrainingConfig, {**doc.get("training", {}), "seed": seed}, "config.training")
        methods = []
        for i, m in enumerate(doc.get("methods", [])):
            where = f"config.methods[{i}]"
            if not isinstance(m, dict) or "id" not in m:
                raise InputError(f"{where}: expected an object with an 'id'")
            extra = sorted(set(m) - {"id", "params"})
            if extra:
                raise InputError(f"{where}: unknown field(s) {', '.join(extra)}")
            try:
                methods.append(MethodSpec(m["id"], dict(m.get("params", {}))))
            except ValueError as exc:
                raise InputError(f"{where}.id: {exc}") from None
        n_reps = doc.get("n_reps")
        if n_reps is not None and (not isinstance(n_reps, int) or n_reps < 1):
            raise InputError("config: 'n_reps' must be a positive integer")
        return cls(seed, dgp, training, tuple(methods), str(doc.get("out_dir", ".")), n_reps)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=seed, dgp=dataclasses.replace(self.dgp, seed=seed),
                                   training=dataclasses.replace(self.training, seed=seed))


def _read_json(path: str, what: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed {what} {path}: {exc.msg} at line {exc.lineno} column {exc.colno}") from None


def load_config(path: str, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(path, "config"))
    return cfg.with_seed(seed) if seed is not None else cfg


def load_cohort(path: str) -> list[CohortExperiment]:
    doc = _read_json(path, "cohort")
    try:
        cohort = [CohortExperiment.from_dict(d) for d in doc["experiments"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid cohort {path}: {exc}") from None
    if not cohort:
        raise InputError(f"cohort {path} has no experiments")
    return cohort


def _load_policy(path: str):
    try:
        return load_policy(path)
    except OSError as exc:
        raise InputError(f"cannot read policy {path}: {exc.strerror}") from None
    except PolicyFormatError as exc:
        raise InputError(f"invalid policy {path}: {exc}") from None


def _load_context(path: str) -> ExperimentContext:
    try:
        return ExperimentContext.from_dict(_read_json(path, "context"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"invalid context {path}: {exc}") from None


def _out_dir(args, cfg: RunConfig | None = None) -> str:
    return args.out or (cfg.out_dir if cfg else ".")


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _emit(args, payload: dict, lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    cohort = generate_cohort(cfg.dgp, stream(cfg.seed, "cohort"))
    doc = {"seed": cfg.seed, "experiments": [e.to_dict() for e in cohort]}
    path = os.path.join(_out_dir(args, cfg), "cohort.json")
    _write(path, json.dumps(doc, indent=1) + "\n")
    _emit(args, {"cohort": path, "n_experiments": len(cohort)}, [f"wrote {len(cohort)} experiments to {path}"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    cohort = load_cohort(args.cohort)
    out = _out_dir(args, cfg)
    curve = []
    policy = train(cfg.training, [e.ctx for e in cohort], stream(cfg.seed, "train"),
                   on_episode=lambda ep, i, ret: curve.append((ep, i, ret)))
    ckpt = os.path.join(out, "policy.json")
    curve_path = os.path.join(out, "training_curve.csv")
    _write(ckpt, policy_to_text(policy))
    _write(curve_path, "episode,experiment,return\n" + "".join(f"{e},{i},{r:.17g}\n" for e, i, r in curve))
    _emit(args, {"policy": ckpt, "curve": curve_path, "episodes": len(curve)},
          [f"wrote policy to {ckpt}", f"wrote {len(curve)} episode returns to {curve_path}"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg.methods:
        raise InputError("config: 'methods' is empty")
    cohort = load_cohort(args.cohort)
    policy = None
    if any(m.id == "rl" for m in cfg.methods):
        if not args.policy:
            raise InputError("method 'rl' is configured but no --policy was given")
        policy = _load_policy(args.policy)
        T = cohort[0].ctx.horizon_t
        if policy.horizon != T:
            raise InputError(f"policy horizon {policy.horizon} does not match cohort horizon {T}")
    n_reps = cfg.n_reps or default_reps(len(cohort))
    paths = simulate_paths(cohort, n_reps, cfg.seed)
    rows = [compute_metrics(run_method(m, cohort, n_reps, cfg.seed, policy=policy, paths=paths)) for m in cfg.methods]
    out = _out_dir(args, cfg)
    os.makedirs(out, exist_ok=True)
    csv_path, txt_path = report(rows, os.path.join(out, "report.csv"))
    with open(txt_path, encoding="utf-8") as fh:
        table = fh.read().rstrip("\n").splitlines()
    _emit(args, {"report": csv_path, "table": txt_path, "rows": [dataclasses.asdict(r) for r in rows]}, table)
    return EXIT_OK


def _parse_axis(doc, where: str) -> tuple[str, list[float]]:
    if not isinstance(doc, dict) or "field" not in doc or "values" not in doc:
        raise InputError(f"{where}: expected {{'field': name, 'values': [...]}}")
    name = doc["field"]
    if name not in SLICE_FIELDS:
        raise InputError(f"{where}: unknown field {name!r}; valid fields: {', '.join(SLICE_FIELDS)}")
    try:
        values = [float(v) for v in doc["values"]]
    except (TypeError, ValueError):
        raise InputError(f"{where}.values must be a list of numbers") from None
    if not values:
        raise InputError(f"{where}.values is empty")
    return name, values


def _parse_state(doc, ctx: ExperimentContext, where: str) -> BeliefState:
    if not isinstance(doc, dict):
        raise InputError(f"{where} must be a JSON object")
    allowed = {"week", "w_bar_tr", "w_bar_c", "terminated"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InputError(f"{where}: unknown field(s) {', '.join(unknown)}; valid: {', '.join(sorted(allowed))}")
    try:
        week = doc["week"]
        if not isinstance(week, int) or isinstance(week, bool):
            raise InputError(f"{where}.week must be an integer")
        w_tr, w_c = float(doc["w_bar_tr"]), float(doc["w_bar_c"])
    except KeyError as exc:
        raise InputError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise InputError(f"{where}: w_bar_tr and w_bar_c must be numbers") from None
    terminated = doc.get("terminated", False)
    if not isinstance(terminated, bool):
        raise InputError(f"{where}.terminated must be true or false")
    if not 1 <= week <= ctx.horizon_t:
        raise InputError(f"{where}.week must lie in 1..{ctx.horizon_t}")
    if not (np.isfinite(w_tr) and np.isfinite(w_c)):
        raise InputError(f"{where}: cumulative means must be finite")
    return BeliefState(w_tr, w_c, week, terminated)


def cmd_slice(args) -> int:
    policy = _load_policy(args.policy)
    ctx = _load_context(args.context)
    spec = _read_json(args.axes, "axes spec")
    if not isinstance(spec, dict):
        raise InputError("axes spec must be a JSON object")
    unknown = sorted(set(spec) - {"axis1", "axis2", "state"})
    if unknown:
        raise InputError(f"axes spec: unknown field(s) {', '.join(unknown)}")
    ax1 = _parse_axis(spec.get("axis1"), "axes.axis1")
    ax2 = _parse_axis(spec.get("axis2"), "axes.axis2")
    if ax1[0] == ax2[0]:
        raise InputError("axes spec: axis1 and axis2 must use different fields")
    state = _parse_state(spec.get("state", {"week": 1, "w_bar_tr": ctx.mu0_tr, "w_bar_c": ctx.mu0_c}),
                         ctx, "axes.state")
    if state.terminated:
        raise InputError("axes.state must not be terminated")
    if policy.horizon != ctx.horizon_t:
        raise InputError(f"policy horizon {policy.horizon} does not match context horizon {ctx.horizon_t}")
    try:
        grid = policy_slice(policy, ctx, state, ax1, ax2)
    except (ValueError, ContractError) as exc:
        raise InputError(f"slice: {exc}") from None
    path = os.path.join(_out_dir(args), "slice.csv")
    _write(path, grid.to_csv())
    _emit(args, {"grid": path, "field1": grid.field1, "values1": list(grid.values1), "field2": grid.field2,
                 "values2": list(grid.values2), "actions": [[Action(int(a)).name for a in row] for row in grid.actions]},
          [grid.to_csv().rstrip("\n")])
    return EXIT_OK


def cmd_recommend(args) -> int:
    policy = _load_policy(args.policy)
    ctx = _load_context(args.context)
    state = _parse_state(_read_json(args.observations, "observations"), ctx, "observations")
    if policy.horizon != ctx.horizon_t:
        raise InputError(f"policy horizon {policy.horizon} does not match context horizon {ctx.horizon_t}")
    post = state_delta_posterior(state, ctx)
    q = q_forward(policy, featurize(state, ctx, policy.feature_norm))
    action = Action(int(masked_argmax(q, legal_mask(state.week, ctx.horizon_t))))
    note = "experiment already terminated; no further action applies" if state.terminated else ""
    payload = {"action": action.name, "week": state.week, "delta_mean": post.mean, "delta_variance": post.variance,
               "q_values": {a.name: float(q[int(a)]) for a in Action}, "terminated": state.terminated}
    if note:
        payload["note"] = note
    lines = [f"action: {action.name}" + (f" ({note})" if note else ""),
             f"effect posterior: mean {post.mean:.6g}, variance {post.variance:.6g}"]
    lines += [f"Q[{a.name}] = {q[int(a)]:.6g}" for a in Action]
    _emit(args, payload, lines)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abstop", description="Optimal early stopping for A/B tests.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config out_dir or current directory)")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a cohort of experiments")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train the stopping policy on a cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--cohort", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate configured methods on a cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--policy")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("slice", parents=[common], help="grid of policy actions over two fields")
    s.add_argument("--policy", required=True)
    s.add_argument("--context", required=True)
    s.add_argument("--axes", required=True)
    s.set_defaults(func=cmd_slice)

    s = sub.add_parser("recommend", parents=[common], help="recommend an action for one experiment")
    s.add_argument("--policy", required=True)
    s.add_argument("--context", required=True)
    s.add_argument("--observations", required=True)
    s.set_defaults(func=cmd_recommend)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
