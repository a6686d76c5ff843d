# %% [markdown]
# # A tour of the world model
#
# Build the desk-sized model, look at what each component holds, then fit
# it on a handful of scripted demonstrations and watch the losses move.

# %%
import numpy as np

from newt.config import TrainConfig
from newt.discretizer import DiscretizerSpec, decode, symlog, two_hot
from newt.trainer import Agent, collect_all_demos, pretrain, MetricsLog
from newt.worldmodel import WorldModel, WorldModelConfig

# %%
desk = WorldModel(WorldModelConfig.desk(), seed=0)
for comp in ("enc", "dyn", "rew", "pi", "q"):
    n = sum(desk.params.values[k].size for k in desk.component_names(comp))
    print(f"{comp:4s} {n:8d}")
print("total", desk.num_params())

# %% [markdown]
# The paper-scale configuration is the same code with wider layers.

# %%
print("paper-scale parameters:", WorldModel(WorldModelConfig.paper(), seed=0).num_params())

# %% [markdown]
# Latents are groups of 8 that each sum to one.

# %%
s = np.zeros((1, 16), np.float32)
g = np.ones((1, 32), np.float32) / np.sqrt(32)
z = desk.encode(s, g)
print(z.reshape(-1, 8).sum(1))

# %% [markdown]
# Reward and value heads regress onto a two-hot code over symlog bins.
# A return of 37 lands between two neighbouring bins:

# %%
spec = DiscretizerSpec()
w = two_hot(37.0, spec)
nz = np.flatnonzero(w)
print(spec.bin_centers[nz], w[nz], "symlog(37) =", symlog(37.0))
print("decoded:", decode(np.log(np.maximum(w, 1e-30)), spec))

# %% [markdown]
# ## Fitting demonstrations
#
# Twenty expert episodes per task, then a few hundred pretraining steps.

# %%
cfg = TrainConfig.desk(log_every=50)
demos = collect_all_demos(cfg.tasks, 20, cfg.model)
agent = Agent(cfg)
agent.load_demos(demos, list(cfg.tasks))
log = MetricsLog()
pretrain(agent, iters=300, metrics=log)

# %%
for r in log.records:
    print(f"iter {r['iter']:4d}  self_pred {r['self_pred']:.4f}  reward {r['reward']:.4f}  "
          f"value {r['value']:.4f}  pi_bc {r['pi_bc']:.4f}")
