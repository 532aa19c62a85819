"""Command-line entry point: ``jointrl {train, verify, plot, eval}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, from_dict, load_config
from .scenarios import ScenarioKind


def _cmd_train(args) -> int:
    from .training import train

    config = load_config(args.config)
    if args.output_dir:
        config = config.replace(output_dir=args.output_dir)
    result = train(config, resume_from=args.resume, metrics_path=args.metrics)
    print(f"metrics: {result.metrics_path}")
    if result.records:
        last = result.records[-1]
        print(f"step {last['step']}: mean_reward={last['mean_reward']:.4f}")
    if result.status:
        print(f"halted: {result.records[-1].get('reason', 'non-finite update')}", file=sys.stderr)
    return result.status


def _cmd_verify_sde(args) -> int:
    from .verify import verify_sde

    report = verify_sde(seed=args.seed, wrong_dt=args.wrong_dt)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def _cmd_verify_grad(args) -> int:
    from .models import freeze
    from .verify import gradient_test_model, verify_grad

    model = gradient_test_model()
    if args.detach_connector:
        model.connector.detach_params = True
    if args.freeze_lm:
        freeze(model, "lm")
    report = verify_grad(model, h=args.h, tol=args.tol, seed=args.seed)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def _cmd_verify_marginals(args) -> int:
    from .verify import verify_marginals

    report = verify_marginals(steps=args.steps, seed=args.seed)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def _cmd_plot(args) -> int:
    from .plotting import UnknownKeyError, plot_file

    keys = [k for part in args.keys for k in part.split(",") if k]
    out = args.out or str(Path(args.metrics).with_suffix(".svg"))
    try:
        path = plot_file(args.metrics, keys, out)
    except UnknownKeyError as err:
        print(str(err), file=sys.stderr)
        return 2
    print(path)
    return 0


def _eval_config(args, extra: dict) -> RunConfig:
    if args.config:
        config = load_config(args.config)
    elif "config" in extra:
        config = from_dict(extra["config"])
    else:
        config = RunConfig(scenario=args.scenario)
    config = config.replace(scenario=args.scenario)
    if args.size is not None:
        config = config.replace(data__eval_size=args.size)
    return config


def _cmd_eval(args) -> int:
    from .models import load_checkpoint
    from .training import evaluate

    ckpt = Path(args.checkpoint)
    model_dir = ckpt / "model" if (ckpt / "model").is_dir() else ckpt
    model, extra = load_checkpoint(model_dir)
    config = _eval_config(args, extra)
    result = evaluate(model, config, guidance=args.guidance)
    print(json.dumps({"scenario": config.scenario, "checkpoint": str(ckpt), **result}, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointrl", description="Joint token/denoising GRPO on a toy unified model.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run GRPO training from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--metrics", help="metrics JSONL path (default: <output_dir>/metrics.jsonl)")
    t.add_argument("--output-dir")
    t.set_defaults(func=_cmd_train)

    v = sub.add_parser("verify", help="numerical self-checks")
    vs = v.add_subparsers(dest="check", required=True)
    s = vs.add_parser("sde", help="compare the two SDE step parameterisations over a grid")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--wrong-dt", action="store_true", help="negative control with a mis-scaled Dt")
    s.set_defaults(func=_cmd_verify_sde)
    g = vs.add_parser("grad", help="finite-difference check of the full GRPO loss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--detach-connector", action="store_true", help="negative control: cut the connector's parameters out of the graph")
    g.add_argument("--freeze-lm", action="store_true")
    g.set_defaults(func=_cmd_verify_grad)
    m = vs.add_parser("marginals", help="flow-match a 2-D mixture, then sample it at several noise levels")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--steps", type=int, default=5000)
    m.set_defaults(func=_cmd_verify_marginals)

    pl = sub.add_parser("plot", help="SVG line charts from a metrics stream")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--keys", required=True, nargs="+", help="metric names, dotted for nested (eval.mean_reward)")
    pl.add_argument("--out")
    pl.set_defaults(func=_cmd_plot)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a scenario")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenario", required=True, choices=[k.value for k in ScenarioKind])
    e.add_argument("--config")
    e.add_argument("--size", type=int)
    e.add_argument("--guidance", type=float)
    e.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
