"""Language-conditioned latent world model and its training objectives.

Components (all MLPs over concatenated inputs):

    encoder   z  = h([s, x, g])        simplicial latent
    dynamics  z' = d([z, a, g])        simplicial latent
    reward    r  = R([z, a, g])        logits over discretizer bins
    values    q  = Q_i([z, a, g])      ensemble of logit heads (+ EMA copies)
    policy    a  = p([z, g])           tanh-squashed diagonal Gaussian

``g`` is a cached instruction embedding and ``x`` an optional cached image
embedding. Losses compute their own gradients and accumulate them into the
model's ParamStore; quantities behind a stop-gradient are produced by
:func:`compute_targets` and never recorded on a tape.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .discretizer import DiscretizerSpec, ce_loss, decode, decode_backward, two_hot
from .nncore import Mlp, MlpSpec, NonFiniteError, ParamStore, adam_step, ema_update

LOG_2PI = math.log(2 * math.pi)
LOG_2 = math.log(2.0)


@dataclass
class WorldModelConfig:
    state_dim: int = 16
    action_dim: int = 4
    lang_dim: int = 32
    img_dim: int = 0
    latent_dim: int = 64
    enc_dim: int = 128
    mlp_dim: int = 128
    encoder_layers: int = 2
    mlp_layers: int = 2
    q_ensemble: int = 3
    q_subset: int = 2
    horizon: int = 3
    lam: float = 0.5
    num_bins: int = 101
    vmin: float = -10.0
    vmax: float = 10.0
    simplicial_v: int = 8
    simplicial_tau: float = 1.0
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    coef_self_pred: float = 20.0
    coef_reward: float = 0.1
    coef_value: float = 0.1
    coef_bc: float = 10.0
    coef_entropy: float = 1e-4
    lr: float = 3e-4
    enc_lr: float = 1e-4
    grad_clip: float = 20.0
    q_momentum: float = 0.99
    scale_decay: float = 0.99
    dtype: str = "float32"

    def __post_init__(self):
        if self.latent_dim % self.simplicial_v:
            raise ValueError("latent_dim must be divisible by simplicial_v")
        if not 1 <= self.q_subset <= self.q_ensemble:
            raise ValueError("need 1 <= q_subset <= q_ensemble")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.encoder_layers < 1 or self.mlp_layers < 0:
            raise ValueError("encoder_layers >= 1 and mlp_layers >= 0 required")

    @classmethod
    def paper(cls, **overrides) -> "WorldModelConfig":
        base = dict(state_dim=128, action_dim=16, lang_dim=512, latent_dim=512, enc_dim=1024,
                    mlp_dim=1024, encoder_layers=3, mlp_layers=2, q_ensemble=5, q_subset=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "WorldModelConfig":
        return cls(**overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentBatch:
    """Length-(H+1) subsequences; masked state/action entries are exactly zero."""

    states: np.ndarray          # [B, H+1, S]
    lang: np.ndarray            # [B, G]
    actions: np.ndarray         # [B, H, A]
    rewards: np.ndarray         # [B, H]
    gamma: np.ndarray           # [B]
    action_mask: np.ndarray     # [B, A]
    state_mask: np.ndarray | None = None   # [B, S]
    task_ids: np.ndarray | None = None
    is_demo: np.ndarray | None = None
    img: np.ndarray | None = None          # [B, H+1, I]
    episode_ids: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def astype(self, dtype) -> "SegmentBatch":
        cast = {k: (v.astype(dtype) if k in ("states", "lang", "actions", "rewards", "gamma", "img")
                    and v is not None else v)
                for k, v in self.__dict__.items()}
        return SegmentBatch(**cast)


@dataclass
class Targets:
    next_z: np.ndarray   # [B, H, L]
    td: np.ndarray       # [B, H]


class RunningScale:
    """EMA of the 5th and 95th percentiles of decoded Q values."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.p5: float | None = None
        self.p95: float | None = None

    def update(self, values: np.ndarray) -> None:
        lo, hi = np.percentile(np.asarray(values, dtype=np.float64), [5, 95])
        if self.p5 is None:
            self.p5, self.p95 = float(lo), float(hi)
        else:
            self.p5 = self.decay * self.p5 + (1 - self.decay) * float(lo)
            self.p95 = self.decay * self.p95 + (1 - self.decay) * float(hi)

    @property
    def value(self) -> float:
        if self.p5 is None:
            return 1.0
        return max(self.p95 - self.p5, 1e-3)

    def state(self) -> list:
        return [self.p5, self.p95]

    def load(self, state) -> None:
        self.p5, self.p95 = state


def squash_log_std(raw, lo, hi):
    return lo + 0.5 * (hi - lo) * (np.tanh(raw) + 1.0)


def log1m_tanh_sq(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


class WorldModel:
    def __init__(self, cfg: WorldModelConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.disc = DiscretizerSpec(cfg.num_bins, cfg.vmin, cfg.vmax)
        rng = np.random.default_rng(seed)
        self.params = ParamStore(dtype=self.dtype)
        L, A, G, S, I = cfg.latent_dim, cfg.action_dim, cfg.lang_dim, cfg.state_dim, cfg.img_dim
        v, tau = cfg.simplicial_v, cfg.simplicial_tau
        enc_lr = cfg.enc_lr / cfg.lr
        enc_widths = (S + I + G,) + (cfg.enc_dim,) * (cfg.encoder_layers - 1) + (L,)
        hidden = (cfg.mlp_dim,) * cfg.mlp_layers
        za = L + A + G
        self.encoder = Mlp(self.params, "enc", MlpSpec(enc_widths, "simplicial"), rng, v, tau,
                           lr_scale=enc_lr)
        self.dynamics = Mlp(self.params, "dyn", MlpSpec((za,) + hidden + (L,), "simplicial"),
                            rng, v, tau)
        self.reward = Mlp(self.params, "rew", MlpSpec((za,) + hidden + (cfg.num_bins,), "linear"),
                          rng, v, tau, zero_last=True)
        self.policy = Mlp(self.params, "pi", MlpSpec((L + G,) + hidden + (2 * A,), "gaussian_head"),
                          rng, v, tau)
        self.qs = [Mlp(self.params, f"q{i}", MlpSpec((za,) + hidden + (cfg.num_bins,), "linear"),
                       rng, v, tau, zero_last=True)
                   for i in range(cfg.q_ensemble)]
        self.q_names = [n for q in self.qs for n in q.param_names]
        self.target = self.params.subset(self.q_names)
        self.scale = RunningScale(cfg.scale_decay)

    # -- component groups -------------------------------------------------

    def component_names(self, component: str) -> list[str]:
        mlps = {"enc": [self.encoder], "dyn": [self.dynamics], "rew": [self.reward],
                "pi": [self.policy], "q": self.qs}[component]
        return [n for m in mlps for n in m.param_names]

    def num_params(self) -> int:
        return self.params.num_params()

    # -- inference helpers (no tape) --------------------------------------

    def _f(self, x):
        return np.asarray(x, dtype=self.dtype)

    def encoder_input(self, s, g, img=None):
        parts = [self._f(s)]
        if self.cfg.img_dim:
            if img is None:
                raise ValueError("model expects an image embedding")
            parts.append(self._f(img))
        parts.append(self._f(g))
        return np.concatenate(parts, axis=-1)

    def encode(self, s, g, img=None):
        return self.encoder(self.encoder_input(s, g, img))

    def next(self, z, a, g):
        return self.dynamics(np.concatenate([z, self._f(a), self._f(g)], axis=-1))

    def reward_value(self, z, a, g):
        return decode(self.reward(np.concatenate([z, self._f(a), self._f(g)], axis=-1)), self.disc)

    def q_value(self, z, a, g, rng, target=False, heads=None):
        """Minimum over a random subset of Q heads (decoded)."""
        if heads is None:
            heads = self.sample_heads(rng)
        x = np.concatenate([z, self._f(a), self._f(g)], axis=-1)
        store = self.target if target else self.params
        vals = [decode(self.qs[i](x, store), self.disc) for i in heads]
        return np.min(vals, axis=0)

    def sample_heads(self, rng):
        return np.sort(rng.choice(self.cfg.q_ensemble, self.cfg.q_subset, replace=False))

    def pi_dist(self, z, g):
        """Policy mean (pre-tanh) and log-std."""
        out = self.policy(np.concatenate([z, self._f(g)], axis=-1))
        A = self.cfg.action_dim
        return out[:, :A], squash_log_std(out[:, A:], self.cfg.log_std_min, self.cfg.log_std_max)

    def prior_dist(self, z, g):
        """Mean action tanh(mu) and pre-squash std, used to bias planning."""
        mu, log_std = self.pi_dist(z, g)
        return np.tanh(mu), np.exp(log_std)

    @property
    def action_dim(self) -> int:
        return self.cfg.action_dim

    def pi(self, z, g, action_mask, rng=None):
        """Sampled action (or tanh(mean) when ``rng`` is None), masked."""
        mu, log_std = self.pi_dist(z, g)
        mask = self._f(action_mask)
        if rng is None:
            return np.tanh(mu) * mask
        eps = rng.standard_normal(mu.shape).astype(self.dtype)
        return np.tanh(mu + np.exp(log_std) * eps) * mask


def policy_forward(model: WorldModel, z, g, action_mask, noise):
    """Sample a tanh-Gaussian action with explicit ``noise``.

    Returns (action, log_prob, entropy_proxy) where the entropy proxy is the
    negative tanh-corrected log-probability of the sample.
    """
    mu, log_std = model.pi_dist(z, g)
    mask = np.asarray(action_mask, dtype=mu.dtype)
    eps = noise * mask
    u = mu + np.exp(log_std) * eps
    act = np.tanh(u) * mask
    logp = ((-0.5 * eps * eps - log_std - 0.5 * LOG_2PI - log1m_tanh_sq(u)) * mask).sum(-1)
    return act, logp, -logp


# ---------------------------------------------------------------------------
# Objectives


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def _step_weights(cfg, B, H, dtype):
    """Per-row weights lambda^t / B for rows ordered (b, t)."""
    lam = cfg.lam ** np.arange(H)
    return np.tile(lam, B).astype(dtype) / B, lam


def _check(value, term):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {term} loss")


def compute_targets(model: WorldModel, batch: SegmentBatch, rng) -> Targets:
    """Stop-gradient quantities: next-state embeddings and one-step TD targets."""
    cfg = model.cfg
    B, H = batch.size, batch.horizon
    G = np.repeat(model._f(batch.lang), H, axis=0)
    img = None if batch.img is None else _rows(batch.img[:, 1:])
    z1 = model.encode(_rows(batch.states[:, 1:]), G, img)
    amask = np.repeat(batch.action_mask, H, axis=0)
    a1 = model.pi(z1, G, amask, rng)
    q = model.q_value(z1, a1, G, rng, target=True).reshape(B, H)
    td = model._f(batch.rewards) + model._f(batch.gamma)[:, None] * q
    return Targets(z1.reshape(B, H, cfg.latent_dim), td)


def model_loss(model: WorldModel, batch: SegmentBatch, targets: Targets, backward: bool = True):
    """Self-prediction + reward CE + value CE, lambda-weighted over the horizon.

    Accumulates gradients into ``model.params`` when ``backward``. Returns
    (loss, terms, latents) with latents of shape [B, H+1, L].
    """
    cfg, disc = model.cfg, model.disc
    B, H, L = batch.size, batch.horizon, cfg.latent_dim
    dt = model.dtype
    g = model._f(batch.lang)
    img0 = None if batch.img is None else batch.img[:, 0]
    z0, enc_tape = model.encoder.forward(model.encoder_input(batch.states[:, 0], g, img0))
    zs, dyn_tapes = [z0], []
    acts = model._f(batch.actions)
    for t in range(H):
        z1, tape = model.dynamics.forward(np.concatenate([zs[t], acts[:, t], g], axis=1))
        zs.append(z1)
        dyn_tapes.append(tape)

    lam = cfg.lam ** np.arange(H)
    dzs = [np.zeros_like(z0) for _ in range(H + 1)]

    # self-prediction (mean over latent dims)
    sp = 0.0
    for t in range(H):
        diff = zs[t + 1] - targets.next_z[:, t]
        sp += lam[t] * float(np.mean(diff * diff, dtype=np.float64))
        dzs[t + 1] += (cfg.coef_self_pred * lam[t] * 2.0 / (B * L)) * diff
    sp *= cfg.coef_self_pred

    # reward and value heads on rows (b, t)
    Z = np.stack(zs[:H], axis=1).reshape(B * H, L)
    G = np.repeat(g, H, axis=0)
    X = np.concatenate([Z, _rows(acts), G], axis=1)
    w_rows, _ = _step_weights(cfg, B, H, dt)
    logits_r, tape_r = model.reward.forward(X)
    r_ce, r_grad = ce_loss(logits_r, two_hot(batch.rewards.reshape(-1), disc).astype(dt), check=False)
    rew = cfg.coef_reward * float(np.sum(w_rows * r_ce, dtype=np.float64))
    dX = model.reward.backward(tape_r, (cfg.coef_reward * w_rows)[:, None] * r_grad) \
        if backward else None

    td_hot = two_hot(targets.td.reshape(-1), disc).astype(dt)
    nq = cfg.q_ensemble
    val = 0.0
    for q in model.qs:
        logits_q, tape_q = q.forward(X)
        q_ce, q_grad = ce_loss(logits_q, td_hot, check=False)
        val += cfg.coef_value / nq * float(np.sum(w_rows * q_ce, dtype=np.float64))
        if backward:
            dX += q.backward(tape_q, (cfg.coef_value / nq * w_rows)[:, None] * q_grad)

    total = sp + rew + val
    for name, v in (("self-prediction", sp), ("reward", rew), ("value", val)):
        _check(v, name)

    if backward:
        dZ = dX[:, :L].reshape(B, H, L)
        for t in range(H):
            dzs[t] += dZ[:, t]
        for t in reversed(range(H)):
            dx = model.dynamics.backward(dyn_tapes[t], dzs[t + 1])
            dzs[t] += dx[:, :L]
        model.encoder.backward(enc_tape, dzs[0])

    terms = {"self_pred": sp, "reward": rew, "value": val}
    return total, terms, np.stack(zs, axis=1)


def policy_loss(model: WorldModel, batch: SegmentBatch, rng, latents=None, q_coef: float = 1.0,
                update_scale: bool = True, noise=None, heads=None, backward: bool = True):
    """BC + (scaled) Q maximisation + entropy bonus for the policy prior.

    Latents are treated as constants; only policy parameters receive
    gradient. ``latents`` defaults to the rollout of the batch actions.
    """
    cfg = model.cfg
    B, H, L, A = batch.size, batch.horizon, cfg.latent_dim, cfg.action_dim
    dt = model.dtype
    if latents is None:
        latents = rollout(model, batch)
    Z = np.ascontiguousarray(latents[:, :H]).reshape(B * H, L).astype(dt)
    G = np.repeat(model._f(batch.lang), H, axis=0)
    mask = np.repeat(batch.action_mask, H, axis=0).astype(dt)
    n_valid = np.maximum(mask.sum(-1), 1.0)
    target_a = _rows(model._f(batch.actions))
    w_rows, _ = _step_weights(cfg, B, H, dt)

    out, tape = model.policy.forward(np.concatenate([Z, G], axis=1))
    mu, raw = out[:, :A], out[:, A:]
    lo, hi = cfg.log_std_min, cfg.log_std_max
    log_std = squash_log_std(raw, lo, hi)
    std = np.exp(log_std)
    if noise is None:
        noise = rng.standard_normal(mu.shape).astype(dt)
    eps = noise * mask
    u = mu + std * eps
    tu = np.tanh(u)
    act = tu * mask
    logp = ((-0.5 * eps * eps - log_std - 0.5 * LOG_2PI - log1m_tanh_sq(u)) * mask).sum(-1)

    tmu = np.tanh(mu)
    err = (tmu - target_a) * mask
    bc = (err * err).sum(-1) / n_valid

    q_val = np.zeros(B * H, dtype=dt)
    q_tapes = []
    if q_coef:
        if heads is None:
            heads = model.sample_heads(rng)
        X = np.concatenate([Z, act, G], axis=1)
        vals, logits_all = [], []
        for i in heads:
            logits, tp = model.qs[i].forward(X)
            logits_all.append(logits)
            q_tapes.append(tp)
            vals.append(decode(logits, model.disc))
        vals = np.stack(vals)
        arg = np.argmin(vals, axis=0)
        q_val = vals[arg, np.arange(B * H)]
        if update_scale:
            model.scale.update(q_val)
    scale = model.scale.value

    per_row = cfg.coef_bc * bc - q_coef * q_val / scale + cfg.coef_entropy * logp / scale
    loss = float(np.sum(w_rows * per_row, dtype=np.float64))
    terms = {"bc": cfg.coef_bc * float(np.sum(w_rows * bc, dtype=np.float64)),
             "q": -q_coef * float(np.sum(w_rows * q_val, dtype=np.float64)) / scale,
             "entropy": cfg.coef_entropy * float(np.sum(w_rows * logp, dtype=np.float64)) / scale}
    for name, v in terms.items():
        _check(v, f"policy {name}")
    if not backward:
        return loss, terms

    # d loss / d act via Q (no parameter gradients into Q)
    d_act = np.zeros_like(act)
    if q_coef:
        dq = (-q_coef / scale) * w_rows
        for k, i in enumerate(heads):
            sel = arg == k
            if not sel.any():
                continue
            dv = np.where(sel, dq, 0.0).astype(dt)
            dlogits = decode_backward(dv, logits_all[k], model.disc)
            dX = model.qs[i].backward(q_tapes[k], dlogits, param_grads=False)
            d_act += dX[:, L:L + A]
    d_logp = (cfg.coef_entropy / scale) * w_rows
    du = d_act * mask * (1.0 - tu * tu) + d_logp[:, None] * 2.0 * tu * mask
    d_mu = du + ((cfg.coef_bc * w_rows / n_valid)[:, None] * 2.0 * err) * (1.0 - tmu * tmu)
    d_log_std = du * std * eps - d_logp[:, None] * mask
    d_raw = d_log_std * 0.5 * (hi - lo) * (1.0 - np.tanh(raw) ** 2)
    model.policy.backward(tape, np.concatenate([d_mu, d_raw], axis=1).astype(dt))
    return loss, terms


def rollout(model: WorldModel, batch: SegmentBatch):
    """Latent rollout of the batch actions, no tape. Shape [B, H+1, L]."""
    g = model._f(batch.lang)
    img0 = None if batch.img is None else batch.img[:, 0]
    zs = [model.encode(batch.states[:, 0], g, img0)]
    for t in range(batch.horizon):
        zs.append(model.next(zs[t], batch.actions[:, t], g))
    return np.stack(zs, axis=1)


def pretrain_loss(model: WorldModel, batch: SegmentBatch, rng, targets: Targets | None = None,
                  noise=None):
    """Model objective plus policy objective with its Q-value term disabled."""
    if targets is None:
        targets = compute_targets(model, batch, rng)
    m_loss, m_terms, zs = model_loss(model, batch, targets)
    p_loss, p_terms = policy_loss(model, batch, rng, latents=zs, q_coef=0.0, noise=noise)
    terms = {**m_terms, **{f"pi_{k}": v for k, v in p_terms.items()}}
    return m_loss + p_loss, terms


def bc_loss(model: WorldModel, batch: SegmentBatch, backward: bool = True):
    """Masked behaviour cloning through encoder and policy only."""
    cfg = model.cfg
    B, H, A = batch.size, batch.horizon, cfg.action_dim
    dt = model.dtype
    S = _rows(batch.states[:, :H])
    G = np.repeat(model._f(batch.lang), H, axis=0)
    img = None if batch.img is None else _rows(batch.img[:, :H])
    z, enc_tape = model.encoder.forward(model.encoder_input(S, G, img))
    out, tape = model.policy.forward(np.concatenate([z, G], axis=1))
    mask = np.repeat(batch.action_mask, H, axis=0).astype(dt)
    n_valid = np.maximum(mask.sum(-1), 1.0)
    tmu = np.tanh(out[:, :A])
    err = (tmu - _rows(model._f(batch.actions))) * mask
    rows = B * H
    loss = float(np.sum((err * err).sum(-1) / n_valid, dtype=np.float64)) / rows
    _check(loss, "bc")
    if backward:
        d_mu = (2.0 / rows) * err / n_valid[:, None] * (1.0 - tmu * tmu)
        dout = np.concatenate([d_mu, np.zeros_like(d_mu)], axis=1).astype(dt)
        dx = model.policy.backward(tape, dout)
        model.encoder.backward(enc_tape, dx[:, :cfg.latent_dim])
    return loss, {"bc": loss}


def update(model: WorldModel, batch: SegmentBatch, rng, kind: str = "rl") -> dict:
    """One optimisation step. ``kind`` is 'rl', 'pretrain' or 'bc'."""
    cfg = model.cfg
    batch = batch.astype(model.dtype)
    model.params.zero_grad()
    if kind == "bc":
        loss, terms = bc_loss(model, batch)
    elif kind == "pretrain":
        loss, terms = pretrain_loss(model, batch, rng)
    elif kind == "rl":
        targets = compute_targets(model, batch, rng)
        m_loss, m_terms, zs = model_loss(model, batch, targets)
        p_loss, p_terms = policy_loss(model, batch, rng, latents=zs)
        loss = m_loss + p_loss
        terms = {**m_terms, **{f"pi_{k}": v for k, v in p_terms.items()}}
    else:
        raise ValueError(f"unknown update kind {kind!r}")
    grad_norm = adam_step(model.params, cfg.lr, clip_norm=cfg.grad_clip)
    if kind != "bc":
        ema_update(model.target, model.params, cfg.q_momentum)
    return {"loss": loss, "grad_norm": grad_norm, "scale": model.scale.value, **terms}
