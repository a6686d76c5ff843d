# %% [markdown]
# # The desk experiment
#
# Demonstrations, a behaviour-cloning baseline, model-based pretraining and
# online RL on the five toy tasks, followed by an open-loop sweep.
#
# The full desk budget takes the better part of an hour on one core. Set
# `NEWT_SCALE` to a fraction to shrink every budget proportionally; the
# default of 0.05 finishes in a few minutes.

# %%
import os

import numpy as np

from newt.config import TrainConfig
from newt.tasks import REGISTRY
from newt.trainer import finetune, load_checkpoint, open_loop_fraction, run_suite

scale = float(os.environ.get("NEWT_SCALE", "0.05"))
base = TrainConfig.desk()
cfg = TrainConfig.desk(total_env_steps=int(base.total_env_steps * scale),
                       pretrain_iters=int(base.pretrain_iters * scale),
                       anneal_start=int(base.anneal_start * scale),
                       anneal_end=int(base.anneal_end * scale) + 1)
out = os.environ.get("NEWT_OUT", "runs/notebook")
summary = run_suite(cfg, out)

# %%
print(f"{'task':14s} {'bc':>6s} {'pretrain':>9s} {'rl':>6s}")
for task in cfg.tasks:
    row = [summary[k]["per_task"][task] for k in ("bc", "pretrain", "rl")]
    print(f"{task:14s} {row[0]:6.3f} {row[1]:9.3f} {row[2]:6.3f}")
print({k: round(v) for k, v in summary["times"].items()})

# %% [markdown]
# Open-loop control: plan once per window and execute it blind. Longer
# windows drift further from the true state.

# %%
agent = load_checkpoint(os.path.join(out, "final.ckpt"))
spec = agent.specs[agent.tasks.index("point-reach")]
sweep = open_loop_fraction(agent.model, spec, 5, (1, 4, 8, 16), agent.cfg.planner)
for h, f in sweep["fraction"].items():
    print(f"window {h:2d}: {f:.2f} of closed-loop score")

# %% [markdown]
# Finetuning on a held-out variant with the goal region moved.

# %%
held_out = [n for n in REGISTRY if n not in cfg.tasks][0]
_, rep = finetune(agent, held_out, max(500, cfg.total_env_steps // 10), eval_episodes=5)
print(rep)

# %%
try:
    import matplotlib
    matplotlib.use("Agg")
    from newt.cli import main
    main(["plot", "--metrics", os.path.join(out, "metrics.jsonl"), "--out-dir",
          os.path.join(out, "plots")])
except ImportError:
    print("matplotlib not installed; skipping plots")
