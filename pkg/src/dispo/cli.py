"""Command-line front end: training, evaluation, oracle checks, artifacts.

Subcommands: train, eval, verify, varmeasure, gen-data, count-ops.  Every
run writes its artifacts under --out (or $DISPO_OUT_ROOT, or ./runs) with
a manifest recording the exact config, seed, and a content hash.  Exit
codes: 0 success, 1 runtime failure or a FAIL verdict, 2 invalid config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigurationError
from .streams import stream
from .tasks import make_task, save_instances
from .trainer import (
    RunConfig,
    build_schedule,
    build_task,
    config_from_dict,
    config_to_dict,
    count_ops,
    evaluate,
    init_policy,
    load_checkpoint,
    predict_run_totals,
    train,
    write_manifest,
)
from .verify import (
    VarianceCondition,
    build_oracle_problem,
    collect_states,
    perturb_params,
    prop1_check,
    prop2_check,
    theorem1_check,
    theorem2_check,
    trcov_protocol,
)


def _read_config_dict(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror or exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: config root must be a JSON object")
    return d


def _apply_overrides(d: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "task", None) is not None:
        d["task"] = args.task
    if getattr(args, "alpha_step", None) is not None:
        d["alpha_step"] = args.alpha_step
    if getattr(args, "z", None) is not None:
        d["n_branches"] = args.z
    if getattr(args, "sampler", None) is not None:
        d.setdefault("sampler", {})
        if not isinstance(d["sampler"], dict):
            raise ConfigurationError("config section 'sampler' must be an object")
        d["sampler"]["law"] = args.sampler
    return d


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    return config_from_dict(_apply_overrides(_read_config_dict(args.config), args))


def _out_dir(args: argparse.Namespace, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("DISPO_OUT_ROOT", "runs")
    return Path(root) / default_name


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, f"train-{config.task}-seed{config.seed}")
    result = train(config, out_dir=out, resume_from=args.resume)
    last = result.metrics[-1]
    print(f"trained {config.n_updates} updates on {config.task} (seed {config.seed})")
    print(f"final mean terminal reward: {last['mean_terminal_reward']:.4f}")
    print(f"artifacts in {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.run:
        params, _, _, _, config, _ = load_checkpoint(args.run)
        if args.seed is not None:
            config = config_from_dict({**config_to_dict(config), "seed": args.seed})
    else:
        config = _load_run_config(args)
        params = init_policy(config, build_task(config))
    task = build_task(config)
    schedule = build_schedule(config, task)
    result = evaluate(
        params, task, config.n_denoising_steps, schedule, workers=args.workers
    )
    print(f"task            {config.task}")
    print(f"instances       {len(task.instances)}")
    print(f"accuracy        {result.accuracy:.4f}")
    print(f"mean reward     {result.mean_reward:.4f}")
    if result.mean_first_violation is not None:
        print(f"first violation {result.mean_first_violation:.3f} (clean = {config.n_denoising_steps + 1})")
    return 0


def _report_line(report) -> str:
    status = "PASS" if report.passed else "FAIL"
    return (
        f"{status} {report.name}: max|z|={report.max_abs_z:.3f} "
        f"rel_l2={report.rel_l2:.4f} (n={report.n_samples})"
    )


def _cmd_verify(args: argparse.Namespace) -> int:
    problem, params = build_oracle_problem(seed=args.seed if args.seed is not None else 7)
    old = perturb_params(params, stream(11, "verify-perturb"), scale=0.01)
    n = args.samples
    reports = []
    for z in (2, 4):
        reports.append(theorem1_check(params, problem, z, n, seed=101 + z))
        reports.append(
            theorem1_check(params, problem, z, n, seed=201 + z, old_params=old)
        )
    for a_step, a_term in ((1.0, 0.0), (0.0, 1.0), (0.1, 1.0)):
        reports.append(
            theorem2_check(
                params,
                problem,
                alpha_step=a_step,
                alpha_term=a_term,
                n_samples=n,
                seed=307,
            )
        )
    lines = [_report_line(r) for r in reports]

    p1 = prop1_check(16, 4, n_samples=n, seed=401)
    lines.append(
        f"{'PASS' if p1.passed else 'FAIL'} subset-variance ratio: "
        f"{p1.ratio:.4f} vs {p1.expected} (tol {p1.tol})"
    )
    state = problem.step_states[1].states[0]
    p2 = prop2_check(params, state, problem.reward, problem.surrogate, seed=402)
    lines.append(
        f"{'PASS' if p2.passed else 'FAIL'} group-size variance decay: "
        f"slope {p2.slope:.3f} in [{p2.slope_bounds[0]}, {p2.slope_bounds[1]}]"
    )

    for line in lines:
        print(line)
    all_passed = all(r.passed for r in reports) and p1.passed and p2.passed
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "checks": [r.to_dict() for r in reports] + [p1.to_dict(), p2.to_dict()],
            "passed": all_passed,
        }
        (out / "verify.json").write_text(json.dumps(payload, indent=2) + "\n")
        print(f"report written to {out / 'verify.json'}")
    return 0 if all_passed else 1


def _cmd_varmeasure(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    task = build_task(config)
    schedule = build_schedule(config, task)
    base = init_policy(config, task)
    params = perturb_params(base, stream(config.seed, "varmeasure-theta"), scale=0.5)
    old = perturb_params(params, stream(config.seed, "varmeasure-old"), scale=0.5)
    # Collect under a policy independent of both measured parameter sets:
    # confidence commits make a trajectory's visible tokens high-likelihood
    # under whichever policy rolled it out, which would bias the all-token
    # arm's likelihood ratios downward at every harvested state.
    collector = perturb_params(base, stream(config.seed, "varmeasure-collect"), scale=0.5)
    late = tuple(
        t for t in range(1, config.n_denoising_steps + 1) if t > config.n_denoising_steps // 2
    )
    candidates = collect_states(
        collector, task, config.n_denoising_steps, schedule, late, seed=config.seed
    )
    conditions = [
        VarianceCondition("action-z2", "action", 2),
        VarianceCondition("all-z2", "all", 2),
        VarianceCondition("action-z4", "action", 4),
    ]
    report = trcov_protocol(
        params,
        old,
        candidates,
        conditions,
        n_trials=args.trials,
        surr_cfg=config.surrogate,
        seed=config.seed,
    )
    print(
        f"states: {report.n_candidates} candidates, {report.n_maskable} with masks, "
        f"{report.n_retained} retained"
    )
    for name in report.condition_names:
        extra = ""
        if name in report.diff_point:
            lo, hi = report.diff_ci[name]
            extra = f"  diff vs {report.reference}: {report.diff_point[name]:+.5g} CI [{lo:.5g}, {hi:.5g}]"
        print(f"trCov[{name}] = {report.estimates[name]:.5g}{extra}")
    out = _out_dir(args, f"varmeasure-{config.task}-seed{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "variance_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    write_manifest(out, config, ["variance_report.json"])
    print(f"report written to {out / 'variance_report.json'}")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    task = build_task(config)
    out = _out_dir(args, f"data-{config.task}-seed{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "instances.json"
    save_instances(path, task)
    print(f"{len(task.instances)} {config.task} instances written to {path}")
    return 0


def _cmd_count_ops(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    per_prompt = count_ops(config)
    totals = predict_run_totals(config)
    k = config.n_rollouts
    t = config.n_denoising_steps
    s = k * config.n_timesteps if config.alpha_step > 0 else 0
    nm = config.surrogate.n_mc
    z = config.n_branches
    print(f"per prompt (K={k}, T={t}, |S|={s}, Z={z}, Nm={nm}):")
    print(f"  rollout_forward_passes   = K*T       = {k}*{t} = {per_prompt.rollout_forward_passes}")
    print(f"  reward_evals             = K + |S|*Z = {k} + {s}*{z} = {per_prompt.reward_evals}")
    print(
        f"  surrogate_terminal_calls = 2*Nm*K    = 2*{nm}*{k} = {per_prompt.surrogate_terminal_calls}"
    )
    print(
        f"  surrogate_step_calls     = 2*Nm*|S|  = 2*{nm}*{s} = {per_prompt.surrogate_step_calls}"
    )
    if per_prompt.surrogate_kl_calls:
        print(f"  surrogate_kl_calls       = {per_prompt.surrogate_kl_calls}")
    print(f"run totals ({config.n_updates} updates x {config.batch_size} prompts):")
    for name, value in totals.as_dict().items():
        print(f"  {name} = {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dispo",
        description="Masked-diffusion policy optimization laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (default $DISPO_OUT_ROOT or ./runs)")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--task", help="task name override (sudoku, countdown, stringmatch)")
        p.add_argument("--alpha-step", type=float, dest="alpha_step", help="step-loss weight")
        p.add_argument("--z", type=int, help="branch group size override")
        p.add_argument("--sampler", help="timestep sampler law (uniform, poly_late, poly_early)")
        p.add_argument("--workers", type=int, default=1, help="worker threads where applicable")

    p_train = sub.add_parser("train", help="run a training loop")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint directory to resume from")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="greedy-decode a policy over its task pool")
    common(p_eval)
    p_eval.add_argument("--run", help="training output directory holding the checkpoint")
    p_eval.set_defaults(func=_cmd_eval)

    p_verify = sub.add_parser("verify", help="run the gradient and variance oracles")
    common(p_verify)
    p_verify.add_argument(
        "--samples", type=int, default=100_000, help="Monte Carlo samples per check"
    )
    p_verify.set_defaults(func=_cmd_verify)

    p_var = sub.add_parser("varmeasure", help="measure gradient variance across conditions")
    common(p_var)
    p_var.add_argument("--trials", type=int, default=32, help="branch trials per state")
    p_var.set_defaults(func=_cmd_varmeasure)

    p_gen = sub.add_parser("gen-data", help="generate and save task instances")
    common(p_gen)
    p_gen.set_defaults(func=_cmd_gen_data)

    p_ops = sub.add_parser("count-ops", help="predict operation counts for a config")
    common(p_ops)
    p_ops.set_defaults(func=_cmd_count_ops)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
