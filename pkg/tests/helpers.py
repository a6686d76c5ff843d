"""Shared builders for tests: tiny float64 models and random batches."""
import numpy as np

from newt.worldmodel import SegmentBatch, WorldModel, WorldModelConfig

TINY = dict(state_dim=5, action_dim=3, lang_dim=4, latent_dim=8, enc_dim=16, mlp_dim=16,
            encoder_layers=2, mlp_layers=1, q_ensemble=3, q_subset=2, horizon=2,
            num_bins=11, vmin=-3.0, vmax=3.0, simplicial_v=4, dtype="float64")


def tiny_model(seed=0, perturb=0.3, **overrides):
    cfg = WorldModelConfig(**{**TINY, **overrides})
    model = WorldModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, v in model.params.values.items():
        v += perturb * rng.standard_normal(v.shape)
    for name, v in model.target.values.items():
        v += perturb * rng.standard_normal(v.shape)
    return model


def random_batch(cfg, B=4, seed=0, native_state=None, native_action=None, horizon=None):
    rng = np.random.default_rng(seed)
    H = horizon or cfg.horizon
    S, A = cfg.state_dim, cfg.action_dim
    ns = native_state or S - 1
    na = native_action or A - 1
    smask = np.zeros((B, S), bool)
    smask[:, :ns] = True
    amask = np.zeros((B, A), bool)
    amask[:, :na] = True
    states = rng.uniform(-1, 1, (B, H + 1, S)) * smask[:, None]
    actions = rng.uniform(-0.9, 0.9, (B, H, A)) * amask[:, None]
    lang = rng.standard_normal((B, cfg.lang_dim))
    lang /= np.linalg.norm(lang, axis=1, keepdims=True)
    img = rng.standard_normal((B, H + 1, cfg.img_dim)) if cfg.img_dim else None
    return SegmentBatch(states=states, lang=lang, actions=actions,
                        rewards=rng.uniform(0, 2, (B, H)), gamma=np.full(B, 0.95),
                        action_mask=amask, state_mask=smask, task_ids=np.zeros(B, int),
                        is_demo=np.zeros(B, bool), img=img)


def fd_check(f, store, names, n_entries=6, h=1e-5, seed=0):
    """Compare accumulated store grads with central differences of ``f``.

    Returns the worst relative error over sampled entries.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        p = store.values[name]
        g = store.grads[name]
        flat = rng.choice(p.size, min(n_entries, p.size), replace=False)
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            num = (fp - fm) / (2 * h)
            ana = g[idx]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst


class QuadraticToy:
    """Analytic one-step model: reward -(a - a*)^2 summed over dims, no terminal value."""

    def __init__(self, target, terminal=0.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.action_dim = len(self.target)
        self.terminal = terminal

    def next(self, z, a, g):
        return z

    def reward_value(self, z, a, g):
        return -((a - self.target) ** 2).sum(-1)

    def q_value(self, z, a, g, rng):
        return np.full(len(z), self.terminal)

    def pi(self, z, g, action_mask, rng=None):
        return np.zeros((len(z), self.action_dim)) * action_mask

    def prior_dist(self, z, g):
        return np.zeros((len(z), self.action_dim)), np.ones((len(z), self.action_dim))
