# %% [markdown]
# # Sampling-based planning
#
# The planner only needs a model with `next`, `reward_value`, `q_value`,
# `pi` and `prior_dist`. An analytic stand-in makes its behaviour easy to
# read.

# %%
import numpy as np

from newt.planner import BiasSchedule, PlannerConfig, bias_coef, plan


class Bowl:
    """Reward -(a - target)^2, latent never changes, no terminal value."""

    def __init__(self, target, prior_mu=0.0):
        self.target = np.asarray(target, float)
        self.action_dim = len(self.target)
        self.prior_mu = prior_mu

    def next(self, z, a, g):
        return z

    def reward_value(self, z, a, g):
        return -((a - self.target) ** 2).sum(-1)

    def q_value(self, z, a, g, rng):
        return np.zeros(len(z))

    def pi(self, z, g, mask, rng=None):
        return np.full((len(z), self.action_dim), self.prior_mu) * mask

    def prior_dist(self, z, g):
        return (np.full((len(z), self.action_dim), self.prior_mu),
                np.full((len(z), self.action_dim), 0.1))


z0 = g = np.zeros(2)

# %% [markdown]
# Each iteration refits the sampling distribution to the elites. The best
# elite score never drops because the incumbent stays in the pool.

# %%
a, state = plan(Bowl([0.42, -0.7]), z0, g, None, 0.0, PlannerConfig(horizon=3),
                np.random.default_rng(0), deterministic=True)
print("action", a.round(3))
print("elite best per iteration", np.round(state.elite_best, 5))
print("final sigma", state.sigma.round(3))

# %% [markdown]
# With beta > 0 the initial distribution leans toward the policy prior.
# Early in training that keeps plans close to the demonstrations.

# %%
sched = BiasSchedule(2_000, 12_000)
cfg = PlannerConfig(horizon=1, iterations=1, population=64, prior_samples=0, elites=8)
for step in (0, 4_000, 7_000, 10_000, 12_000):
    beta = bias_coef(step, sched)
    _, s = plan(Bowl([0.6], prior_mu=-0.6), z0, g, None, beta, cfg, np.random.default_rng(1),
                deterministic=True)
    print(f"step {step:6d}  beta {beta:.2f}  refit mean {s.mu[0, 0]:+.3f}")

# %% [markdown]
# Masked action dimensions carry no mean and no spread.

# %%
seq, s = plan(Bowl([0.3, 0.5, -0.2]), z0, g, None, 0.0, PlannerConfig(horizon=2),
              np.random.default_rng(0), mode="open", action_mask=np.array([True, False, True]))
print(seq.round(3))
