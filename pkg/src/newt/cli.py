"""Command line entry point: ``newt <subcommand> ...``.

Stage commands (``pretrain``, ``bc``, ``train``, ``finetune``) write a
checkpoint and append to ``metrics.jsonl`` inside ``--out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import TrainConfig, load_config
from .replay import read_demos, write_demos
from .tasks import REGISTRY, TRAIN_TASKS, make_task
from .trainer import (Agent, DemoCollectionError, MetricsLog, TrainingDiverged, bc_train,
                      collect_all_demos, evaluate, finetune, load_checkpoint, pretrain,
                      read_metrics, save_checkpoint, train)


def _config(path, profile=None) -> TrainConfig:
    if path:
        return load_config(path)
    return TrainConfig.for_profile(profile or "desk")


def _tasks_arg(text, default):
    if not text:
        return tuple(default)
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    for n in names:
        if n not in REGISTRY:
            raise SystemExit(f"unknown task {n!r}; see `newt tasks`")
    return names


def _demos_for(cfg, path):
    if path:
        names, eps = read_demos(path)
        return eps, names
    eps = collect_all_demos(cfg.tasks, cfg.demos_per_task, cfg.model, cfg.seed, cfg.min_quality)
    return eps, list(cfg.tasks)


def _out(path):
    os.makedirs(path, exist_ok=True)
    return MetricsLog(os.path.join(path, "metrics.jsonl"))


def cmd_tasks(args):
    print(f"{'name':22s} {'T':>5s} {'gamma':>6s} {'state':>5s} {'act':>3s} {'score':8s} "
          "instruction")
    for name in REGISTRY:
        _, spec = make_task(name)
        kind = "success" if spec.success_scored else "return"
        tag = "" if name in TRAIN_TASKS else "  (held out)"
        print(f"{name:22s} {spec.episode_len:5d} {spec.gamma:6.3f} {spec.state_dim_native:5d} "
              f"{spec.action_dim_native:3d} {kind:8s} {spec.instruction}{tag}")


def cmd_collect(args):
    cfg = _config(args.config)
    names = _tasks_arg(args.task, cfg.tasks)
    n = args.n or cfg.demos_per_task
    quality = cfg.min_quality if args.min_quality is None else args.min_quality
    eps = collect_all_demos(names, n, cfg.model, args.seed, quality)
    write_demos(args.out, list(names), eps)
    print(f"wrote {len(eps)} episodes for {len(names)} task(s) to {args.out}")


def _offline_cmd(args, kind):
    cfg = _config(args.config)
    metrics = _out(args.out)
    demos, names = _demos_for(cfg, args.demos)
    agent = Agent(cfg)
    agent.load_demos(demos, names)
    stage = pretrain if kind == "pretrain" else bc_train
    stage(agent, args.iters, metrics, eval_every=args.eval_every)
    report = evaluate(agent.model, agent.specs, cfg.eval_episodes, policy="prior", seed=cfg.seed)
    metrics.write("eval", stage=kind, mode="prior", score=report["mean"],
                  per_task=report["per_task"])
    path = os.path.join(args.out, f"{kind}.ckpt")
    save_checkpoint(path, agent)
    _print_report(report)
    print(f"checkpoint: {path}")


def cmd_pretrain(args):
    _offline_cmd(args, "pretrain")


def cmd_bc(args):
    _offline_cmd(args, "bc")


def cmd_train(args):
    cfg = _config(args.config) if args.config else None
    if args.resume:
        agent = load_checkpoint(args.resume, cfg)
    else:
        cfg = cfg or TrainConfig.desk()
        agent = Agent(cfg)
        demos, names = _demos_for(cfg, args.demos)
        agent.load_demos(demos, names)
    metrics = _out(args.out)
    ckpt = os.path.join(args.out, "train.ckpt")
    steps = args.steps if args.steps is not None else agent.cfg.total_env_steps
    train(agent, steps, metrics, checkpoint_path=ckpt,
          checkpoint_every=args.checkpoint_every, dump_path=os.path.join(args.out, "diverged.ckpt"))
    save_checkpoint(ckpt, agent)
    print(json.dumps(agent.counters(), sort_keys=True))
    print(f"checkpoint: {ckpt}")


def cmd_eval(args):
    agent = load_checkpoint(args.ckpt)
    cfg = agent.cfg
    names = _tasks_arg(args.tasks, agent.tasks)
    specs = [s for s in agent.specs if s.name in names]
    specs += [make_task(n, cfg.model.state_dim, cfg.model.action_dim, cfg.model.lang_dim)[1]
              for n in names if n not in agent.tasks]
    report = evaluate(agent.model, specs, args.episodes, args.mode, args.horizon,
                      policy=args.policy, planner_cfg=cfg.planner, seed=args.seed)
    if args.mode == "open":
        closed = evaluate(agent.model, specs, args.episodes, planner_cfg=cfg.planner,
                          seed=args.seed)
        report["fraction"] = {k: (v / closed["per_task"][k] if closed["per_task"][k] > 0
                                  else float("nan")) for k, v in report["per_task"].items()}
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        _print_report(report)


def cmd_finetune(args):
    agent = load_checkpoint(args.ckpt, _config(args.config) if args.config else None)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "finetune")
    metrics = _out(out)
    steps = args.steps if args.steps is not None else agent.cfg.total_env_steps
    ft, report = finetune(agent, args.task, steps, metrics, scratch=args.scratch)
    tag = "scratch" if args.scratch else "pretrained"
    save_checkpoint(os.path.join(out, f"finetune-{args.task}-{tag}.ckpt"), ft)
    print(f"{args.task} ({tag}): zero-shot {report['zero_shot']:.3f} -> "
          f"finetuned {report['final']:.3f}")


def cmd_plot(args):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise SystemExit("`newt plot` needs matplotlib (pip install 'artifact[plot]')") from None
    recs = read_metrics(args.metrics)
    os.makedirs(args.out_dir, exist_ok=True)
    written = []

    eps = [r for r in recs if r["event"] == "episode"]
    if eps:
        fig, ax = plt.subplots(figsize=(6, 4))
        for task in sorted({r["task"] for r in eps}):
            pts = [(r["step"], r["score"]) for r in eps if r["task"] == task]
            ax.plot(*zip(*pts), ".", ms=3, label=task)
        ax.set(xlabel="env steps", ylabel="normalised score", ylim=(-0.05, 1.05))
        ax.legend(fontsize=7)
        written.append(_save(fig, args.out_dir, "episode_scores.png"))

    ups = [r for r in recs if r["event"] in ("update", "pretrain", "bc")]
    if ups:
        keys = [k for k in ("loss", "self_pred", "reward", "value", "pi_bc", "bc")
                if any(k in r for r in ups)]
        fig, axes = plt.subplots(len(keys), 1, figsize=(6, 2 * len(keys)), squeeze=False)
        for ax, k in zip(axes[:, 0], keys):
            for ev in ("pretrain", "bc", "update"):
                pts = [(r.get("updates", r.get("iter")), r[k]) for r in ups
                       if r["event"] == ev and k in r]
                if pts:
                    ax.plot(*zip(*pts), label=ev)
            ax.set_ylabel(k)
            ax.legend(fontsize=7)
        axes[-1, 0].set_xlabel("update")
        written.append(_save(fig, args.out_dir, "losses.png"))

    evs = [r for r in recs if r["event"] == "eval"]
    if evs:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [f"{r['stage']}:{r.get('step', r.get('iter', ''))}" for r in evs]
        ax.bar(range(len(evs)), [r["score"] for r in evs])
        ax.set_xticks(range(len(evs)), labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("mean normalised score")
        written.append(_save(fig, args.out_dir, "evals.png"))

    for p in written:
        print(p)
    if not written:
        print("no plottable records found", file=sys.stderr)


def _save(fig, d, name):
    path = os.path.join(d, name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def _print_report(report):
    frac = report.get("fraction", {})
    for task, score in report["per_task"].items():
        extra = f"  fraction {frac[task]:.3f}" if task in frac else ""
        print(f"{task:22s} {report['mode']:>6s} {score:.3f}{extra}")
    print(f"{'mean':22s} {report['mode']:>6s} {report['mean']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="newt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tasks", help="list registered toy tasks")
    s.set_defaults(func=cmd_tasks)

    s = sub.add_parser("collect-demos", help="roll the scripted expert and write a NEWTDEMO file")
    s.add_argument("--task", help="comma-separated task names (default: config tasks)")
    s.add_argument("--n", type=int, help="accepted episodes per task")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-quality", type=float)
    s.set_defaults(func=cmd_collect)

    for name, func, hlp in (("pretrain", cmd_pretrain, "model-based pretraining on demos"),
                            ("bc", cmd_bc, "behaviour-cloning baseline")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--demos", help="NEWTDEMO file (default: collect fresh demos)")
        s.add_argument("--iters", type=int)
        s.add_argument("--eval-every", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("train", help="online multitask RL")
    s.add_argument("--config")
    s.add_argument("--resume", help="checkpoint to continue from (e.g. pretrain.ckpt)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--demos")
    s.add_argument("--steps", type=int, help="total env steps (default: config)")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tasks")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--mode", choices=("closed", "open"), default="closed")
    s.add_argument("--horizon", type=int, help="open-loop window length")
    s.add_argument("--policy", choices=("planner", "prior"), default="planner")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("finetune", help="single-task online RL without demos")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--scratch", action="store_true", help="re-initialise the model first")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("plot", help="render static plots from a metrics file")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and args.mode == "open" and not args.horizon:
        raise SystemExit("--mode open needs --horizon")
    try:
        args.func(args)
    except (DemoCollectionError, TrainingDiverged, ValueError, KeyError, OSError) as exc:
        print(f"newt {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
