"""Latent-space MPPI planning with a policy-prior warm start.

The planner fits a time-dependent diagonal Gaussian over action sequences.
Each iteration samples candidate sequences, scores them by rolling out the
world model (discounted predicted rewards plus a terminal value), keeps the
top-k elites and refits mean and std to their softmax-weighted statistics.
Sequences produced by rolling out the policy prior join the candidate pool
at every iteration. Early in training the initial distribution can be
pulled towards the policy prior with a coefficient beta.

Any object with the following methods can be planned against::

    next(z, a, g) -> z'
    reward_value(z, a, g) -> r            (decoded, one per row)
    q_value(z, a, g, rng) -> q            (decoded, one per row)
    pi(z, g, action_mask, rng) -> a       (rng=None gives the mean action)
    prior_dist(z, g) -> (mean_action, std)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PlannerConfig:
    horizon: int = 3
    iterations: int = 6
    population: int = 512
    prior_samples: int = 24
    elites: int = 64
    std_min: float = 0.05
    std_max: float = 2.0
    temperature: float = 0.5
    momentum: bool = False
    final: str = "elite"        # elite | gaussian: how training mode draws the executed sequence
    carry_best: bool = True     # keep the incumbent best sequence in the next iteration's pool

    def __post_init__(self):
        if self.elites > self.population + self.prior_samples:
            raise ValueError("elites cannot exceed population + prior_samples")
        if not self.std_min < self.std_max:
            raise ValueError("std_min must be below std_max")
        if self.momentum:
            raise NotImplementedError("iteration momentum is not supported")
        if self.final not in ("elite", "gaussian"):
            raise ValueError(f"unknown final sampling mode {self.final!r}")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(iterations=3, population=64, prior_samples=8, elites=8)
        base.update(kw)
        return cls(**base)


@dataclass
class PlanState:
    mu: np.ndarray
    sigma: np.ndarray
    value_estimate: float = 0.0
    elite_best: list = field(default_factory=list)
    fallback: bool = False
    discarded: int = 0


@dataclass
class BiasSchedule:
    anneal_start: int
    anneal_end: int

    def __post_init__(self):
        if not self.anneal_start < self.anneal_end:
            raise ValueError("anneal_start must be < anneal_end")


def bias_coef(step: int, sched: BiasSchedule) -> float:
    """1 up to ``anneal_start``, 0 from ``anneal_end``, linear in between."""
    if step <= sched.anneal_start:
        return 1.0
    if step >= sched.anneal_end:
        return 0.0
    return (sched.anneal_end - step) / (sched.anneal_end - sched.anneal_start)


def init_distribution(prev: PlanState | None, policy_mu, policy_sigma, beta: float,
                      cfg: PlannerConfig, action_mask=None, shift: int = 1,
                      horizon: int | None = None) -> PlanState:
    """Warm-started initial Gaussian, blended towards the policy prior by ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    H = horizon or cfg.horizon
    if policy_mu is not None:
        A = np.shape(policy_mu)[-1]
    elif prev is not None:
        A = prev.mu.shape[-1]
    elif action_mask is not None:
        A = len(action_mask)
    else:
        raise ValueError("cannot infer the action dimension")
    mu = np.zeros((H, A))
    sigma = np.full((H, A), cfg.std_max)
    if prev is not None:
        keep = max(0, min(H, prev.mu.shape[0] - shift))
        mu[:keep] = prev.mu[shift:shift + keep]
        sigma[:keep] = prev.sigma[shift:shift + keep]
    if beta > 0:
        mu = (1 - beta) * mu + beta * np.asarray(policy_mu)[:H]
        sigma = (1 - beta) * sigma + beta * np.asarray(policy_sigma)[:H]
    mu = np.clip(mu, -1.0, 1.0)
    sigma = np.clip(sigma, cfg.std_min, cfg.std_max)
    if action_mask is not None:
        m = np.asarray(action_mask, bool)
        mu = mu * m
        sigma = sigma * m
    return PlanState(mu, sigma)


def score_trajectory(model, z0, actions, g, gamma, rng, action_mask=None):
    """Discounted predicted return of each action sequence.

    z0 [R, L], actions [R, H, A], g [R, G], gamma scalar or [R]. The terminal
    value uses the policy prior's action at the final latent. Returns [R].
    """
    H = actions.shape[1]
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (len(z0),))
    if action_mask is None:
        action_mask = np.ones((len(z0), actions.shape[2]), dtype=bool)
    z = z0
    G = np.zeros(len(z0))
    disc = np.ones(len(z0))
    for t in range(H):
        a = actions[:, t]
        G += disc * model.reward_value(z, a, g)
        z = model.next(z, a, g)
        disc = disc * gamma
    a_term = model.pi(z, g, action_mask, rng)
    G += disc * model.q_value(z, a_term, g, rng)
    return G


def policy_rollout(model, z0, g, action_mask, H, rng):
    """Roll the policy prior through the model; returns actions [R, H, A]."""
    z = z0
    acts = []
    for _ in range(H):
        a = model.pi(z, g, action_mask, rng)
        acts.append(a)
        z = model.next(z, a, g)
    return np.stack(acts, axis=1)


def prior_distribution(model, z0, g, action_mask, H):
    """Per-step (mean action, std) of the policy prior along its mean rollout."""
    z = z0
    mus, sigmas = [], []
    for _ in range(H):
        mean, std = model.prior_dist(z, g)
        mean = mean * action_mask
        mus.append(mean)
        sigmas.append(std)
        z = model.next(z, mean, g)
    return np.stack(mus, axis=1), np.stack(sigmas, axis=1)


def plan_batch(model, z0, g, action_mask, gamma, prev, beta: float, cfg: PlannerConfig, rng,
               mode: str = "closed", deterministic: bool = False, horizon: int | None = None,
               shift: int = 1):
    """Plan for E environments at once.

    z0 [E, L], g [E, G], action_mask [E, A], gamma [E], prev: list of
    PlanState or None per env, warm-started by ``shift`` steps. Returns
    (out, states) where ``out`` is the first action [E, A] in closed mode or
    the whole sequence [E, H, A] in open mode.
    """
    if mode not in ("closed", "open"):
        raise ValueError(f"unknown planning mode {mode!r}")
    z0 = np.asarray(z0)
    E = len(z0)
    H = horizon or cfg.horizon
    mask = np.asarray(action_mask, dtype=bool)
    A = mask.shape[1]
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (E,))
    prev = list(prev) if prev is not None else [None] * E
    P, Np, K = cfg.population, cfg.prior_samples, cfg.elites
    N = P + Np

    if beta > 0:
        pmu, psig = prior_distribution(model, z0, g, mask.astype(z0.dtype), H)
    else:
        pmu = psig = [None] * E
    init = [init_distribution(prev[e], pmu[e], psig[e], beta, cfg, mask[e], shift, H)
            for e in range(E)]
    mu = np.stack([s.mu for s in init])          # [E, H, A]
    sigma = np.stack([s.sigma for s in init])

    rows_g = np.repeat(g, N, axis=0)
    rows_z = np.repeat(z0, N, axis=0)
    rows_gamma = np.repeat(gamma, N)
    rows_mask = np.repeat(mask, N, axis=0)
    if Np:
        prior = policy_rollout(model, np.repeat(z0, Np, axis=0), np.repeat(g, Np, axis=0),
                               np.repeat(mask, Np, axis=0).astype(z0.dtype), H, rng)
        prior = prior.reshape(E, Np, H, A).astype(np.float64)
    else:
        prior = np.zeros((E, 0, H, A))

    best_hist = [[] for _ in range(E)]
    discarded = np.zeros(E, dtype=int)
    incumbent = None
    for it in range(cfg.iterations):
        eps = rng.standard_normal((E, P, H, A))
        samples = np.clip(mu[:, None] + sigma[:, None] * eps, -1.0, 1.0) * mask[:, None, None]
        if cfg.carry_best and incumbent is not None and P > 0:
            samples[:, 0] = incumbent
        cand = np.concatenate([samples, prior], axis=1)          # [E, N, H, A]
        G = score_trajectory(model, rows_z, cand.reshape(E * N, H, A).astype(z0.dtype),
                             rows_g, rows_gamma, rng, rows_mask).reshape(E, N)
        bad = ~np.isfinite(G)
        discarded += bad.sum(1)
        G = np.where(bad, -np.inf, G)
        elite_idx = np.argsort(-G, axis=1, kind="stable")[:, :K]
        elite_G = np.take_along_axis(G, elite_idx, axis=1)           # [E, K] descending
        elite_a = np.take_along_axis(cand, elite_idx[:, :, None, None], axis=1)
        ok = np.isfinite(elite_G[:, 0])
        top = np.where(ok, elite_G[:, 0], 0.0)[:, None]
        w = np.exp((np.where(np.isfinite(elite_G), elite_G, -np.inf) - top) / cfg.temperature)
        w = np.where(ok[:, None], w, 1.0 / K)
        w /= w.sum(axis=1, keepdims=True)
        new_mu = np.einsum("ek,ekha->eha", w, elite_a)
        var = np.einsum("ek,ekha->eha", w, (elite_a - new_mu[:, None]) ** 2)
        new_sigma = np.clip(np.sqrt(var), cfg.std_min, cfg.std_max)
        mu = np.where(ok[:, None, None], new_mu, mu) * mask[:, None]
        sigma = np.where(ok[:, None, None], new_sigma, sigma) * mask[:, None]
        incumbent = elite_a[:, 0]
        for e in range(E):
            best_hist[e].append(float(elite_G[e, 0]))

    # final choice
    if deterministic:
        seq = mu.copy()
    elif cfg.final == "elite":
        pick = np.array([rng.choice(K, p=w[e]) for e in range(E)])
        seq = elite_a[np.arange(E), pick]
    else:
        seq = np.clip(mu + sigma * rng.standard_normal(mu.shape), -1, 1) * mask[:, None]
    states = []
    fallback_any = ~ok
    if fallback_any.any():
        mean_a = model.pi(z0, g, mask.astype(z0.dtype), None)
        seq[fallback_any, 0] = mean_a[fallback_any]
    value = (w * np.where(np.isfinite(elite_G), elite_G, 0.0)).sum(1)
    for e in range(E):
        states.append(PlanState(mu[e].copy(), sigma[e].copy(), float(value[e]), best_hist[e],
                                bool(fallback_any[e]), int(discarded[e])))
    if mode == "closed":
        return seq[:, 0], states
    return seq, states


def plan(model, z0, g, prev: PlanState | None, beta: float, cfg: PlannerConfig, rng,
         mode: str = "closed", action_mask=None, gamma: float = 0.99,
         deterministic: bool = False, horizon: int | None = None, shift: int = 1):
    """Single-environment wrapper around :func:`plan_batch`."""
    z0 = np.asarray(z0)[None]
    g = np.asarray(g)[None]
    if action_mask is None:
        action_mask = np.ones(_action_dim(model, prev), bool)
    out, states = plan_batch(model, z0, g, np.asarray(action_mask)[None], [gamma], [prev], beta,
                             cfg, rng, mode, deterministic, horizon, shift)
    return out[0], states[0]


def _action_dim(model, prev):
    if prev is not None:
        return prev.mu.shape[-1]
    return model.action_dim
