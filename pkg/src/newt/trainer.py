"""Demo collection, pretraining, online RL, evaluation, finetuning and BC.

An :class:`Agent` bundles a world model, its replay buffer, the task table
and the counters and random streams needed to resume a run exactly. The
stage functions (:func:`pretrain`, :func:`train`, :func:`bc_train`,
:func:`finetune`) mutate an agent in place and append records to a
:class:`MetricsLog`.

Randomness comes from two generators, one feeding gradient updates and one
feeding the planner, plus per-environment generators seeded from the run
seed. Nothing depends on wall-clock time, so a (config, seed) pair always
yields the same metrics stream.
"""
from __future__ import annotations

import json
import math
import statistics
import time
from fractions import Fraction

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import TrainConfig
from .nncore import NonFiniteError
from .planner import BiasSchedule, PlanState, bias_coef, plan_batch
from .replay import DEMO, ONLINE, DualBuffer, EpisodeRecord, TaskMeta, read_demos, write_demos
from .tasks import make_task, pad, scripted_expert, unpad
from .worldmodel import WorldModel, update


class DemoCollectionError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class MetricsLog:
    """Append-only JSON-lines record stream, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def write(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        line = json.dumps(rec, sort_keys=True, default=_plain)
        self.records.append(json.loads(line))
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Agent


def _env(name, mcfg, seed, embeddings=None):
    return make_task(name, mcfg.state_dim, mcfg.action_dim, mcfg.lang_dim, seed=seed,
                     embeddings=embeddings)


class Agent:
    def __init__(self, cfg: TrainConfig, tasks=None, model: WorldModel | None = None,
                 embeddings: dict | None = None, demo_fraction: float | None = None):
        self.cfg = cfg
        self.tasks = tuple(tasks or cfg.tasks)
        self.embeddings = embeddings
        self.model = model if model is not None else WorldModel(cfg.model, seed=cfg.seed)
        self.specs = [_env(n, cfg.model, 0, embeddings)[1] for n in self.tasks]
        frac = cfg.replay.demo_fraction if demo_fraction is None else demo_fraction
        self.buffer = DualBuffer([TaskMeta.from_spec(s) for s in self.specs],
                                 cfg.replay.capacity, frac)
        self.rng_update = np.random.default_rng([cfg.seed, 1])
        self.rng_plan = np.random.default_rng([cfg.seed, 2])
        self.env_steps = 0
        self.updates = 0
        self.pretrain_steps = 0
        self.bc_steps = 0
        self.episodes = 0
        self.fallbacks = 0

    def task_id(self, name: str) -> int:
        return self.tasks.index(name)

    def load_demos(self, episodes, task_names) -> int:
        """Add demo episodes whose task is part of this agent; returns the count added."""
        added = 0
        for ep in episodes:
            name = task_names[ep.task_id]
            if name in self.tasks:
                self.buffer.add_episode(EpisodeRecord(self.task_id(name), ep.states, ep.actions,
                                                      ep.rewards, DEMO))
                added += 1
        missing = [n for n in self.tasks
                   if not any(e.task_id == self.task_id(n) for e in self.buffer.demo.episodes)]
        if missing and self.buffer.demo_fraction > 0:
            raise ValueError(f"no demonstrations for tasks: {', '.join(missing)}")
        return added

    def sample(self, demo_fraction=None):
        b = self.buffer.sample_segments(self.cfg.batch, self.cfg.model.horizon, self.rng_update,
                                        demo_fraction)
        return b if self.model.dtype == np.float32 else b.astype(self.model.dtype)

    def counters(self) -> dict:
        return {"env_steps": self.env_steps, "updates": self.updates,
                "pretrain_steps": self.pretrain_steps, "bc_steps": self.bc_steps,
                "episodes": self.episodes, "fallbacks": self.fallbacks}


def _guarded_update(agent: Agent, batch, kind: str, dump_path=None) -> dict:
    try:
        return update(agent.model, batch, agent.rng_update, kind)
    except NonFiniteError as exc:
        if dump_path is not None:
            save_checkpoint(dump_path, agent)
        where = f"; state written to {dump_path}" if dump_path else ""
        raise TrainingDiverged(f"{kind} update {agent.updates} diverged: {exc}{where}") from exc


# ---------------------------------------------------------------------------
# Demonstrations


def collect_demos(name: str, n: int, mcfg, seed: int = 0, min_quality: float = 0.75,
                  expert=None, embeddings=None) -> list[EpisodeRecord]:
    """Roll the scripted expert until ``n`` episodes pass the quality filter.

    Success-scored tasks keep successful episodes only; return-scored tasks
    keep episodes whose return is at least ``min_quality`` times the median
    return of all attempts so far. Gives up after ``10 * n`` attempts.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    expert = expert or scripted_expert
    env, spec = _env(name, mcfg, [seed, 3], embeddings)
    obs = env.observe()
    accepted, returns = [], []
    attempts = 0
    while len(accepted) < n:
        if attempts >= 10 * n:
            raise DemoCollectionError(
                f"{name}: accepted {len(accepted)} of {attempts} expert episodes "
                f"({len(accepted) / attempts:.0%}, need >= 10%); median return "
                f"{statistics.median(returns):.3f}; check the expert or lower min_quality")
        attempts += 1
        states, actions, rewards = [obs], [], []
        while True:
            a = pad(expert(name, unpad(obs, spec.state_dim_native)), spec.action_dim)
            step = env.step(a)
            actions.append(a)
            rewards.append(step.reward)
            states.append(step.obs)
            if step.episode_done:
                break
            obs = step.obs
        obs = step.reset_obs
        ret = float(sum(rewards))
        returns.append(ret)
        if spec.success_scored:
            ok = step.success
        else:
            ok = ret >= min_quality * statistics.median(returns)
        if ok:
            accepted.append(EpisodeRecord(0, np.array(states), np.array(actions),
                                          np.array(rewards), DEMO))
    return accepted


def collect_all_demos(names, n: int, mcfg, seed: int = 0, min_quality: float = 0.75,
                      embeddings=None) -> list[EpisodeRecord]:
    """Demos for several tasks; ``task_id`` indexes ``names``."""
    out = []
    for i, name in enumerate(names):
        for ep in collect_demos(name, n, mcfg, seed + i, min_quality, embeddings=embeddings):
            ep.task_id = i
            out.append(ep)
    return out


# ---------------------------------------------------------------------------
# Offline stages


def pretrain(agent: Agent, iters: int | None = None, metrics: MetricsLog | None = None,
             eval_every: int = 0, eval_episodes: int = 5) -> Agent:
    """Model-based pretraining on demo-only batches (policy Q term disabled)."""
    return _offline(agent, "pretrain", iters, metrics, eval_every, eval_episodes)


def bc_train(agent: Agent, iters: int | None = None, metrics: MetricsLog | None = None,
             eval_every: int = 0, eval_episodes: int = 5) -> Agent:
    """Behaviour cloning of the demos through encoder and policy only."""
    return _offline(agent, "bc", iters, metrics, eval_every, eval_episodes)


def _offline(agent, kind, iters, metrics, eval_every, eval_episodes):
    metrics = metrics or MetricsLog()
    iters = agent.cfg.pretrain_iters if iters is None else iters
    attr = "pretrain_steps" if kind == "pretrain" else "bc_steps"
    for _ in range(iters):
        m = _guarded_update(agent, agent.sample(demo_fraction=1.0), kind)
        setattr(agent, attr, getattr(agent, attr) + 1)
        done = getattr(agent, attr)
        if done % agent.cfg.log_every == 0:
            metrics.write(kind, iter=done, **m)
        if eval_every and done % eval_every == 0:
            report = evaluate(agent.model, agent.specs, eval_episodes, policy="prior",
                              seed=agent.cfg.seed)
            metrics.write("eval", stage=kind, iter=done, mode="prior", **_eval_fields(report))
    return agent


# ---------------------------------------------------------------------------
# Online RL


def _utd_target(utd: float, steps: int) -> int:
    # exact rational arithmetic: floor(0.075 * 1000) must be 75, not 74
    return math.floor(Fraction(repr(utd)) * steps)


def train(agent: Agent, total_env_steps: int | None = None, metrics: MetricsLog | None = None,
          beta_fn=None, checkpoint_path=None, checkpoint_every: int = 0,
          dump_path=None) -> Agent:
    """Online multitask RL until the agent has taken ``total_env_steps`` env steps.

    One environment per task steps in strict round robin; each sweep plans
    for all environments in one batch. After a sweep the agent performs
    updates until the cumulative count equals floor(utd * env_steps).
    Updates wait until the online store holds a complete episode, then catch
    up, so the count is exact at every sweep boundary once they start.
    """
    cfg = agent.cfg
    metrics = metrics or MetricsLog()
    total = cfg.total_env_steps if total_env_steps is None else total_env_steps
    sched = BiasSchedule(cfg.anneal_start, cfg.anneal_end)
    beta_fn = beta_fn or (lambda step: bias_coef(step, sched))
    model = agent.model
    n = len(agent.tasks)
    # environments restart from fresh episodes on every call, seeded by progress
    envs = [_env(name, cfg.model, [cfg.seed, 11, i, agent.env_steps], agent.embeddings)[0]
            for i, name in enumerate(agent.tasks)]
    obs = np.stack([e.observe() for e in envs])
    lang = np.stack([s.lang_embedding for s in agent.specs]).astype(model.dtype)
    amask = np.stack([s.action_mask for s in agent.specs])
    gamma = np.array([s.gamma for s in agent.specs])
    prev: list[PlanState | None] = [None] * n
    ep_s = [[o] for o in obs]
    ep_a = [[] for _ in range(n)]
    ep_r = [[] for _ in range(n)]
    last_ckpt = agent.env_steps

    while agent.env_steps < total:
        k = min(n, total - agent.env_steps)
        beta = beta_fn(agent.env_steps)
        z = model.encode(obs[:k].astype(model.dtype), lang[:k])
        acts, states = plan_batch(model, z, lang[:k], amask[:k], gamma[:k], prev[:k], beta,
                                  cfg.planner, agent.rng_plan)
        for i in range(k):
            res = envs[i].step(acts[i])
            agent.fallbacks += int(states[i].fallback)
            prev[i] = states[i]
            ep_a[i].append(acts[i])
            ep_r[i].append(res.reward)
            ep_s[i].append(res.obs)
            if res.episode_done:
                agent.buffer.add_episode(EpisodeRecord(i, np.array(ep_s[i]), np.array(ep_a[i]),
                                                       np.array(ep_r[i]), ONLINE))
                agent.episodes += 1
                metrics.write("episode", step=agent.env_steps + i + 1, task=agent.tasks[i],
                              score=res.info["score"], episode_return=res.info["episode_return"],
                              beta=beta, fallback_count=agent.fallbacks)
                obs[i] = res.reset_obs
                prev[i] = None
                ep_s[i], ep_a[i], ep_r[i] = [res.reset_obs], [], []
            else:
                obs[i] = res.obs
        agent.env_steps += k

        if agent.buffer.num_episodes()[1] > 0 or agent.buffer.demo_fraction >= 1.0:
            target = _utd_target(cfg.utd, agent.env_steps)
            while agent.updates < target:
                m = _guarded_update(agent, agent.sample(), "rl", dump_path)
                agent.updates += 1
                if agent.updates % cfg.log_every == 0:
                    metrics.write("update", step=agent.env_steps, updates=agent.updates,
                                  beta=beta, **m)

        if cfg.eval_every and agent.env_steps % cfg.eval_every < k and agent.env_steps < total:
            report = evaluate(model, agent.specs, cfg.eval_episodes, planner_cfg=cfg.planner,
                              seed=cfg.seed)
            metrics.write("eval", stage="train", step=agent.env_steps, mode="closed",
                          **_eval_fields(report))
        if checkpoint_path and checkpoint_every and agent.env_steps - last_ckpt >= checkpoint_every:
            save_checkpoint(checkpoint_path, agent)
            last_ckpt = agent.env_steps
    return agent


def finetune(agent: Agent, task: str, total_env_steps: int, metrics: MetricsLog | None = None,
             scratch: bool = False, eval_episodes: int | None = None) -> tuple[Agent, dict]:
    """Single-task online RL without demonstrations, starting from ``agent``'s model.

    Returns the finetuned agent and a report with the zero-shot and final
    scores. With ``scratch`` the model is re-initialised first.
    """
    cfg = agent.cfg
    metrics = metrics or MetricsLog()
    eval_episodes = eval_episodes or cfg.eval_episodes
    model = WorldModel(cfg.model, seed=cfg.seed) if scratch else agent.model
    ft = Agent(cfg, tasks=(task,), model=model, embeddings=agent.embeddings, demo_fraction=0.0)
    ft.rng_update = np.random.default_rng([cfg.seed, 21])
    ft.rng_plan = np.random.default_rng([cfg.seed, 22])
    zero = evaluate(model, ft.specs, eval_episodes, planner_cfg=cfg.planner, seed=cfg.seed)
    metrics.write("eval", stage="finetune", step=0, mode="closed", zero_shot=True,
                  scratch=scratch, **_eval_fields(zero))
    train(ft, total_env_steps, metrics, beta_fn=lambda step: 0.0)
    final = evaluate(model, ft.specs, eval_episodes, planner_cfg=cfg.planner, seed=cfg.seed)
    metrics.write("eval", stage="finetune", step=ft.env_steps, mode="closed", zero_shot=False,
                  scratch=scratch, **_eval_fields(final))
    return ft, {"task": task, "scratch": scratch, "zero_shot": zero["mean"],
                "final": final["mean"]}


# ---------------------------------------------------------------------------
# Evaluation


def _eval_fields(report: dict) -> dict:
    return {"score": report["mean"], "per_task": report["per_task"]}


def evaluate(model: WorldModel, specs, episodes: int, mode: str = "closed",
             horizon: int | None = None, policy: str = "planner", planner_cfg=None,
             seed: int = 0) -> dict:
    """Mean normalised score per task over ``episodes`` episodes each.

    ``policy="prior"`` acts with the policy mean and never plans. With the
    planner, closed mode executes the deterministic first action of every
    plan (warm-started from the previous step); open mode plans
    ``horizon`` actions, executes them without feedback, then re-plans from
    the true state. The planner horizon grows to ``horizon`` when needed;
    a shorter window executes a prefix, so ``open`` with horizon 1 matches
    closed mode exactly.
    """
    if policy not in ("planner", "prior"):
        raise ValueError(f"unknown evaluation policy {policy!r}")
    if mode not in ("closed", "open"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "open" and (horizon is None or horizon < 1):
        raise ValueError("open-loop evaluation needs a window horizon >= 1")
    if policy == "planner" and planner_cfg is None:
        raise ValueError("planner evaluation needs a planner config")
    cfg = model.cfg
    specs = list(specs)
    inst = [(ti, e) for ti in range(len(specs)) for e in range(episodes)]
    envs = [_env_from_spec(specs[ti], cfg, [seed, 5, ti, e]) for ti, e in inst]
    E = len(envs)
    obs = np.stack([env.observe() for env in envs])
    lang = np.stack([specs[ti].lang_embedding for ti, _ in inst]).astype(model.dtype)
    amask = np.stack([specs[ti].action_mask for ti, _ in inst])
    gamma = np.array([specs[ti].gamma for ti, _ in inst])
    rng = np.random.default_rng([seed, 6])
    window = 1 if mode == "closed" else horizon
    plan_h = max(window, planner_cfg.horizon) if policy == "planner" else None
    prev = [None] * E
    queue = [[] for _ in range(E)]
    scores = np.zeros(E)
    active = np.ones(E, bool)
    fallbacks = 0
    while active.any():
        idx = np.flatnonzero(active)
        if policy == "prior":
            z = model.encode(obs[idx].astype(model.dtype), lang[idx])
            acts = model.pi(z, lang[idx], amask[idx].astype(model.dtype), None)
            act_of = dict(zip(idx, acts))
        else:
            need = [i for i in idx if not queue[i]]
            if need:
                z = model.encode(obs[need].astype(model.dtype), lang[need])
                seqs, states = plan_batch(model, z, lang[need], amask[need], gamma[need],
                                          [prev[i] for i in need], 0.0, planner_cfg, rng,
                                          mode="open", deterministic=True, horizon=plan_h,
                                          shift=window)
                for j, i in enumerate(need):
                    queue[i] = list(seqs[j, :window])
                    prev[i] = states[j]
                    fallbacks += int(states[j].fallback)
            act_of = {i: queue[i].pop(0) for i in idx}
        for i in idx:
            res = envs[i].step(act_of[i])
            obs[i] = res.obs
            if res.episode_done:
                scores[i] = res.info["score"]
                active[i] = False
    per_task = {}
    for ti, spec in enumerate(specs):
        per_task[spec.name] = float(np.mean([scores[k] for k, (t, _) in enumerate(inst) if t == ti]))
    return {"mode": mode if policy == "planner" else "prior", "horizon": window,
            "per_task": per_task, "mean": float(np.mean(list(per_task.values()))),
            "scores": scores.tolist(), "fallbacks": fallbacks}


def _env_from_spec(spec, mcfg, seed):
    env, _ = make_task(spec.name, mcfg.state_dim, mcfg.action_dim, mcfg.lang_dim, seed=seed)
    env.spec = spec  # keep custom embeddings or discounts
    return env


def open_loop_fraction(model, spec, episodes: int, horizons, planner_cfg, seed: int = 0) -> dict:
    """Closed-loop score and, per horizon, open-loop score and its fraction of it."""
    closed = evaluate(model, [spec], episodes, "closed", planner_cfg=planner_cfg, seed=seed)["mean"]
    out = {"closed": closed, "open": {}, "fraction": {}}
    for h in horizons:
        s = evaluate(model, [spec], episodes, "open", h, planner_cfg=planner_cfg, seed=seed)["mean"]
        out["open"][h] = s
        out["fraction"][h] = s / closed if closed > 0 else float("nan")
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, agent: Agent) -> None:
    m = agent.model
    arrays = {}
    for n, v in m.params.values.items():
        arrays[f"param/{n}"] = v
        arrays[f"adam_m/{n}"] = m.params.adam_m[n]
        arrays[f"adam_v/{n}"] = m.params.adam_v[n]
    for n, v in m.target.values.items():
        arrays[f"target/{n}"] = v
    for i, spec in enumerate(agent.specs):
        arrays[f"task_lang/{i}"] = np.asarray(spec.lang_embedding, dtype=np.float32)
    table = []
    for store, source in ((agent.buffer.demo, DEMO), (agent.buffer.online, ONLINE)):
        for eid, ep in zip(store.ids, store.episodes):
            table.append([eid, ep.task_id, ep.length, source])
    table.sort()
    eps = {eid: ep for store in (agent.buffer.demo, agent.buffer.online)
           for eid, ep in zip(store.ids, store.episodes)}
    if table:
        arrays["replay/states"] = np.concatenate([eps[t[0]].states for t in table])
        arrays["replay/actions"] = np.concatenate([eps[t[0]].actions for t in table])
        arrays["replay/rewards"] = np.concatenate([eps[t[0]].rewards for t in table])
    meta = {
        "format": "newt-checkpoint", "version": 1,
        "config": agent.cfg.to_dict(), "tasks": list(agent.tasks),
        "task_gamma": [float(s.gamma) for s in agent.specs],
        "demo_fraction": agent.buffer.demo_fraction,
        "counters": agent.counters(), "adam_step": m.params.step_count,
        "scale": m.scale.state(),
        "rng": {"update": agent.rng_update.bit_generator.state,
                "plan": agent.rng_plan.bit_generator.state},
        "replay": {"episodes": table, "next_id": agent.buffer._next_id},
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> Agent:
    """Rebuild an agent from ``path``. ``cfg`` may override run settings
    (step budgets, evaluation) but must keep the model architecture."""
    arrays, meta = load_arrays(path)
    if meta.get("format") != "newt-checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    saved = TrainConfig.from_dict(meta["config"])
    if cfg is None:
        cfg = saved
    elif cfg.model != saved.model:
        raise ValueError("config model section differs from the checkpoint's architecture")
    agent = Agent(cfg, tasks=meta["tasks"], demo_fraction=meta["demo_fraction"])
    m = agent.model
    for n in m.params.values:
        m.params.values[n][...] = arrays[f"param/{n}"]
        m.params.adam_m[n][...] = arrays[f"adam_m/{n}"]
        m.params.adam_v[n][...] = arrays[f"adam_v/{n}"]
    for n in m.target.values:
        m.target.values[n][...] = arrays[f"target/{n}"]
    m.params.step_count = meta["adam_step"]
    m.scale.load(meta["scale"])
    for i, spec in enumerate(agent.specs):
        spec.lang_embedding = arrays[f"task_lang/{i}"].astype(np.float64)
        spec.gamma = meta["task_gamma"][i]
        agent.buffer.tasks[i] = TaskMeta.from_spec(spec)
    s0 = a0 = 0
    for eid, tid, T, source in meta["replay"]["episodes"]:
        ep = EpisodeRecord(tid, arrays["replay/states"][s0:s0 + T + 1],
                           arrays["replay/actions"][a0:a0 + T],
                           arrays["replay/rewards"][a0:a0 + T], source)
        s0 += T + 1
        a0 += T
        agent.buffer.add_episode(ep, episode_id=eid)
    agent.buffer._next_id = meta["replay"]["next_id"]
    agent.rng_update.bit_generator.state = meta["rng"]["update"]
    agent.rng_plan.bit_generator.state = meta["rng"]["plan"]
    for k, v in meta["counters"].items():
        setattr(agent, k, v)
    return agent


# ---------------------------------------------------------------------------
# End-to-end desk experiment


def run_suite(cfg: TrainConfig, out_dir, log=print) -> dict:
    """Demos, BC baseline, pretraining and online RL on ``cfg.tasks``.

    Writes demos, checkpoints, ``metrics.jsonl`` and ``summary.json`` under
    ``out_dir`` and returns the summary (scores per stage and wall times).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    mpath = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(mpath):
        os.remove(mpath)
    metrics = MetricsLog(mpath)
    times = {}
    summary = {"config": cfg.to_dict()}

    t0 = time.perf_counter()
    demos = collect_all_demos(cfg.tasks, cfg.demos_per_task, cfg.model, cfg.seed, cfg.min_quality)
    write_demos(os.path.join(out_dir, "demos.newtdemo"), list(cfg.tasks), demos)
    times["demos"] = time.perf_counter() - t0
    log(f"collected {len(demos)} demos in {times['demos']:.0f}s")

    t0 = time.perf_counter()
    bc = Agent(cfg)
    bc.load_demos(demos, list(cfg.tasks))
    bc_train(bc, metrics=metrics)
    summary["bc"] = evaluate(bc.model, bc.specs, cfg.eval_episodes, policy="prior", seed=cfg.seed)
    metrics.write("eval", stage="bc", mode="prior", **_eval_fields(summary["bc"]))
    save_checkpoint(os.path.join(out_dir, "bc.ckpt"), bc)
    times["bc"] = time.perf_counter() - t0
    log(f"bc score {summary['bc']['mean']:.3f} ({times['bc']:.0f}s)")

    t0 = time.perf_counter()
    agent = Agent(cfg)
    agent.load_demos(demos, list(cfg.tasks))
    pretrain(agent, metrics=metrics)
    summary["pretrain"] = evaluate(agent.model, agent.specs, cfg.eval_episodes, policy="prior",
                                   seed=cfg.seed)
    metrics.write("eval", stage="pretrain", mode="prior", **_eval_fields(summary["pretrain"]))
    save_checkpoint(os.path.join(out_dir, "pretrain.ckpt"), agent)
    times["pretrain"] = time.perf_counter() - t0
    log(f"pretrain score {summary['pretrain']['mean']:.3f} ({times['pretrain']:.0f}s)")

    t0 = time.perf_counter()
    train(agent, metrics=metrics, dump_path=os.path.join(out_dir, "diverged.ckpt"))
    times["train"] = time.perf_counter() - t0
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), agent)
    t0 = time.perf_counter()
    summary["rl"] = evaluate(agent.model, agent.specs, cfg.eval_episodes,
                             planner_cfg=cfg.planner, seed=cfg.seed)
    metrics.write("eval", stage="train", step=agent.env_steps, mode="closed",
                  **_eval_fields(summary["rl"]))
    times["eval"] = time.perf_counter() - t0
    log(f"rl score {summary['rl']['mean']:.3f} (train {times['train']:.0f}s, "
        f"eval {times['eval']:.0f}s)")
    times["total"] = sum(times.values())
    summary["times"] = times
    summary["counters"] = agent.counters()
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_plain)
    return summary


__all__ = ["Agent", "MetricsLog", "DemoCollectionError", "TrainingDiverged", "collect_demos",
           "collect_all_demos", "pretrain", "bc_train", "train", "finetune", "evaluate",
           "open_loop_fraction", "save_checkpoint", "load_checkpoint", "read_metrics",
           "read_demos", "write_demos", "run_suite"]
