"""On-policy PPO: rollouts, GAE, clipped losses, Adam + Muon, training loop."""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import EnvConfig, VecImitationEnv
from .nets import GaussianPolicy, gaussian_log_prob


class NumericalError(RuntimeError):
    """Raised when an update produces a non-finite loss or gradient."""


@dataclass
class PpoConfig:
    n_env: int = 64
    rollout_steps: int = 50
    minibatches: int = 32
    epochs: int = 1              # E = 1 keeps updates strictly on-policy
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    vf_clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 1.0
    lr: float = 4e-4
    lr_end: float = 4e-5
    lr_schedule: str = "linear"  # or "warmup_cosine"
    warmup_frac: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0
    total_steps: int = 1_000_000
    advantage_norm: bool = True
    muon_momentum: float = 0.95
    ns_iters: int = 5
    hidden: tuple = (256, 256, 256, 256)
    init_std: float = 0.2
    n_workers: int = 0           # 0: MM_THREADS or 1
    checkpoint_interval: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if (self.n_env * self.rollout_steps) % self.minibatches:
            raise ValueError("n_env * rollout_steps must divide into minibatches")

    @property
    def iterations(self):
        return max(1, math.ceil(self.total_steps / (self.n_env * self.rollout_steps)))


def resolve_workers(requested=0):
    if requested and requested > 0:
        return requested
    env = os.environ.get("MM_THREADS")
    if env:
        return max(1, int(env))
    return 1


# -- schedules -----------------------------------------------------------------

def lr_at(cfg: PpoConfig, iteration, total_iterations=None):
    """Learning rate for a 0-based iteration; hits lr_end exactly at the end."""
    total = total_iterations if total_iterations is not None else cfg.iterations
    frac = 0.0 if total <= 0 else min(1.0, iteration / total)
    if cfg.lr_schedule == "linear":
        return cfg.lr + (cfg.lr_end - cfg.lr) * frac
    if cfg.lr_schedule == "warmup_cosine":
        w = max(cfg.warmup_frac, 1e-9)
        if frac < w:
            return cfg.lr * frac / w
        u = (frac - w) / max(1.0 - w, 1e-9)
        return cfg.lr_end + (cfg.lr - cfg.lr_end) * 0.5 * (1 + math.cos(math.pi * u))
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


# -- GAE -------------------------------------------------------------------------

def compute_gae(rewards, values, next_values, dones, truncs, gamma, lam):
    """Generalized advantage estimation with termination/truncation masks.

    All arrays are (T, B). `next_values[t]` is V(s_{t+1}); at truncations it
    must hold the value of the pre-reset terminal observation. Termination
    zeroes the bootstrap; both termination and truncation cut the recursion.
    Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    T, B = rewards.shape
    adv = np.zeros((T, B))
    not_done = 1.0 - np.asarray(dones, dtype=float)
    cut = not_done * (1.0 - np.asarray(truncs, dtype=float))
    last = np.zeros(B)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * not_done[t] - values[t]
        last = delta + gamma * lam * cut[t] * last
        adv[t] = last
    return adv, adv + values


# -- optimizers -------------------------------------------------------------------

def adam_step(param, grad, state, lr, betas=(0.9, 0.999), eps=1e-8,
              weight_decay=0.0):
    """Bias-corrected Adam with decoupled weight decay; mutates state."""
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    b1, b2 = betas
    state["m"] = b1 * state["m"] + (1 - b1) * grad
    state["v"] = b2 * state["v"] + (1 - b2) * grad * grad
    mhat = state["m"] / (1 - b1 ** state["t"])
    vhat = state["v"] / (1 - b2 ** state["t"])
    out = param - lr * mhat / (np.sqrt(vhat) + eps)
    if weight_decay:
        out = out - lr * weight_decay * param
    return out


def newton_schulz5(G, steps=5):
    """Quintic Newton-Schulz orthogonalization of the published Muon form.

    Coefficients (3.4445, -4.7750, 2.0315) applied to the Frobenius-normalized
    matrix. The iteration drives singular values into a band around 1 rather
    than converging to exactly 1.
    """
    a, b, c = 3.4445, -4.7750, 2.0315
    X = np.asarray(G, dtype=float)
    transpose = X.shape[0] > X.shape[1]
    if transpose:
        X = X.T
    X = X / (np.linalg.norm(X) + 1e-7)
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if transpose else X


def muon_step(param, grad, state, lr, momentum=0.95, ns_iters=5,
              weight_decay=0.0):
    """Orthogonalized-momentum update for 2-D weights; mutates state."""
    if param.ndim != 2:
        raise ValueError("muon_step applies to 2-D parameters only")
    if not state:
        state["buf"] = np.zeros_like(param)
    state["buf"] = momentum * state["buf"] + grad
    direction = newton_schulz5(state["buf"], ns_iters)
    scale = math.sqrt(max(param.shape))
    out = param - lr * scale * direction
    if weight_decay:
        out = out - lr * weight_decay * param
    return out


class OptimState:
    """Per-parameter slots: Adam for 1-D and scalars, Muon for 2-D weights."""

    def __init__(self, cfg: PpoConfig):
        self.cfg = cfg
        self.slots = {}

    def step(self, policy, grads, lr):
        for name, param in policy.named_params():
            g = grads.get(name)
            if g is None:
                continue
            slot = self.slots.setdefault(name, {})
            if np.ndim(param) == 2:
                new = muon_step(param, g, slot, lr, self.cfg.muon_momentum,
                                self.cfg.ns_iters, self.cfg.weight_decay)
            else:
                new = adam_step(np.asarray(param, dtype=float), g, slot, lr,
                                weight_decay=self.cfg.weight_decay)
            policy.set_param(name, new)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
        return grads, total
    return grads, total


# -- losses -----------------------------------------------------------------------

def ppo_loss(policy, obs_norm, actions, logp_old, advantages, returns,
             values_old, cfg: PpoConfig, with_grads=True):
    """Clipped-surrogate + clipped-value loss; optional analytic gradients.

    Returns (loss, stats, grads). The kl stat is the non-negative estimator
    mean(rho - 1 - ln rho).
    """
    n = obs_norm.shape[0]
    cache_a = [] if with_grads else None
    mean = policy.actor.forward(obs_norm, cache_a)
    cache_c = [] if with_grads else None
    value = policy.critic.forward(obs_norm, cache_c)[:, 0]
    log_std = policy.log_std
    std = np.exp(log_std)
    z = (actions - mean) / std
    logp = (-0.5 * (z ** 2).sum(axis=1) - log_std.sum()
            - 0.5 * np.log(2 * np.pi) * actions.shape[1])
    log_ratio = logp - logp_old
    ratio = np.exp(log_ratio)

    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * advantages
    use1 = surr1 <= surr2
    pg_loss = -np.where(use1, surr1, surr2).mean()

    v_clipped = values_old + np.clip(value - values_old, -cfg.vf_clip,
                                     cfg.vf_clip)
    l1 = (value - returns) ** 2
    l2 = (v_clipped - returns) ** 2
    use_l1 = l1 >= l2
    v_loss = np.where(use_l1, l1, l2).mean()

    entropy = float(log_std.sum() + 0.5 * len(log_std) * (np.log(2 * np.pi) + 1))
    loss = pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * entropy
    kl = float(np.mean(ratio - 1.0 - log_ratio))
    stats = {
        "loss": float(loss), "pg_loss": float(pg_loss), "v_loss": float(v_loss),
        "entropy": entropy, "kl": kl,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    if not with_grads:
        return loss, stats, None
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss: {stats}")

    dlogp = -(use1 * ratio * advantages) / n
    dmean = dlogp[:, None] * (z / std)
    dlogstd = (dlogp[:, None] * (z ** 2 - 1.0)).sum(axis=0)
    dlogstd = dlogstd - cfg.ent_coef * np.ones_like(log_std)
    dvalue = cfg.vf_coef * np.where(use_l1, 2.0 * (value - returns), 0.0) / n
    grads_a, _ = policy.actor.backward(cache_a, dmean)
    grads_c, _ = policy.critic.backward(cache_c, dvalue[:, None])
    grads = {f"actor.{k}": v for k, v in grads_a.items()}
    grads.update({f"critic.{k}": v for k, v in grads_c.items()})
    grads["log_std"] = dlogstd
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k}")
    return loss, stats, grads


# -- rollouts ----------------------------------------------------------------------

class RolloutChunk:
    """Steps a contiguous slice of environments with frozen policy parameters."""

    def __init__(self, env_cfg: EnvConfig, n_env, seed, start_index, policy_spec):
        self.env = VecImitationEnv(env_cfg, n_env, seed=seed,
                                   start_index=start_index)
        self.rngs = [np.random.default_rng(
            np.random.SeedSequence([seed, 104729, start_index + e]))
            for e in range(n_env)]
        self.policy = GaussianPolicy(**policy_spec)
        self.obs = self.env.observe()

    def set_params(self, params, stats_state):
        for name, arr in params.items():
            self.policy.set_param(name, arr)
        self.policy.stats.load_state(stats_state)

    def rollout(self, T):
        env = self.env
        pol = self.policy
        B = env.n_env
        D = env.obs_dim
        A = env.act_dim
        out = {
            "obs": np.empty((T, B, D)), "actions": np.empty((T, B, A)),
            "logp": np.empty((T, B)), "values": np.empty((T, B)),
            "rewards": np.empty((T, B)), "dones": np.zeros((T, B), bool),
            "truncs": np.zeros((T, B), bool), "next_values": np.empty((T, B)),
        }
        comp_sums = {}
        episodes = []
        final_rows = []   # (t, env, obs) for truncated envs
        obs = self.obs
        for t in range(T):
            obs_n = pol.stats.normalize(obs)
            mean = pol.actor.forward(obs_n)
            value = pol.critic.forward(obs_n)[:, 0]
            zs = np.stack([rng.standard_normal(A) for rng in self.rngs])
            actions = mean + np.exp(pol.log_std) * zs
            logp = gaussian_log_prob(mean, pol.log_std, actions)
            pre_step_obs = obs
            obs, rew, done, trunc, info = env.step(actions)
            out["obs"][t] = pre_step_obs
            out["actions"][t] = actions
            out["logp"][t] = logp
            out["values"][t] = value
            out["rewards"][t] = rew
            out["dones"][t] = done
            out["truncs"][t] = trunc
            episodes.extend(info["episodes"])
            for k, v in info["components"].items():
                comp_sums[k] = comp_sums.get(k, 0.0) + float(v.mean())
            comp_sums["penalty"] = comp_sums.get("penalty", 0.0) \
                + float(info["penalty"].mean())
            for e in np.flatnonzero(trunc):
                final_rows.append((t, e, info["final_obs"][e]))
        self.obs = obs
        # bootstrap values: next-step values by shift, terminal obs at truncs
        next_obs_n = pol.stats.normalize(obs)
        v_last = pol.critic.forward(next_obs_n)[:, 0]
        out["next_values"][:-1] = out["values"][1:]
        out["next_values"][-1] = v_last
        if final_rows:
            fo = pol.stats.normalize(np.stack([r[2] for r in final_rows]))
            fv = pol.critic.forward(fo)[:, 0]
            for (t, e, _), v in zip(final_rows, fv):
                out["next_values"][t, e] = v
        comps = {k: v / T for k, v in comp_sums.items()}
        return out, episodes, comps, self.env.nan_events


def _worker_main(pipe, env_cfg, n_env, seed, start_index, policy_spec):
    chunk = RolloutChunk(env_cfg, n_env, seed, start_index, policy_spec)
    while True:
        msg = pipe.recv()
        if msg[0] == "rollout":
            _, params, stats_state, T = msg
            chunk.set_params(params, stats_state)
            pipe.send(chunk.rollout(T))
        elif msg[0] == "stop":
            pipe.close()
            return


class RolloutEngine:
    """In-process or worker-pool rollout collection, deterministic per seed.

    Environments are split into contiguous chunks; per-env RNG streams are
    keyed by global env index, so results do not depend on the split.
    """

    def __init__(self, env_cfg, cfg: PpoConfig, policy_spec, n_workers=1):
        self.cfg = cfg
        self.n_workers = max(1, min(n_workers, cfg.n_env))
        counts = [cfg.n_env // self.n_workers] * self.n_workers
        for i in range(cfg.n_env % self.n_workers):
            counts[i] += 1
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.procs = []
        self.pipes = []
        self.chunks = []
        if self.n_workers == 1:
            self.chunks = [RolloutChunk(env_cfg, cfg.n_env, cfg.seed, 0,
                                        policy_spec)]
        else:
            ctx = mp.get_context("fork")
            for c, s in zip(counts, starts):
                parent, child = ctx.Pipe()
                p = ctx.Process(target=_worker_main,
                                args=(child, env_cfg, c, cfg.seed, int(s),
                                      policy_spec), daemon=True)
                p.start()
                self.procs.append(p)
                self.pipes.append(parent)

    def collect(self, policy, T):
        params = {name: arr for name, arr in policy.named_params()}
        stats_state = policy.stats.state()
        if self.chunks:
            self.chunks[0].set_params(params, stats_state)
            results = [self.chunks[0].rollout(T)]
        else:
            for pipe in self.pipes:
                pipe.send(("rollout", params, stats_state, T))
            results = [pipe.recv() for pipe in self.pipes]
        outs, eps, comps, nans = zip(*results)
        batch = {k: np.concatenate([o[k] for o in outs], axis=1)
                 for k in outs[0]}
        episodes = [e for lst in eps for e in lst]
        comp_mean = {}
        for c in comps:
            for k, v in c.items():
                comp_mean.setdefault(k, []).append(v)
        comp_mean = {k: float(np.mean(v)) for k, v in comp_mean.items()}
        return batch, episodes, comp_mean, int(sum(nans))

    def close(self):
        for pipe in self.pipes:
            try:
                pipe.send(("stop",))
            except (BrokenPipeError, OSError):
                pass
        for p in self.procs:
            p.join(timeout=2)


# -- trainer -----------------------------------------------------------------------

class Trainer:
    def __init__(self, env_cfg: EnvConfig, cfg: PpoConfig, run_dir=None,
                 n_workers=None):
        self.env_cfg = env_cfg
        self.cfg = cfg
        probe = VecImitationEnv(env_cfg, 1, seed=cfg.seed)
        self.obs_dim = probe.obs_dim
        self.act_dim = probe.act_dim
        self.policy_spec = dict(obs_dim=probe.obs_dim, act_dim=probe.act_dim,
                                widths=list(cfg.hidden), init_std=cfg.init_std,
                                seed=cfg.seed)
        self.policy = GaussianPolicy(**self.policy_spec)
        self.optim = OptimState(cfg)
        self.engine = RolloutEngine(env_cfg, cfg, self.policy_spec,
                                    resolve_workers(n_workers if n_workers
                                                    is not None else cfg.n_workers))
        self.iteration = 0
        self.env_steps = 0
        self.run_dir = Path(run_dir) if run_dir else None
        self._csv = None
        self._csv_writer = None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    # logging ------------------------------------------------------------------

    def _log_row(self, row):
        if not self.run_dir:
            return
        path = self.run_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
            if new:
                writer.writeheader()
            writer.writerow(row)

    def save_checkpoint(self, tag=None):
        if not self.run_dir:
            return None
        if isinstance(tag, str):
            name = f"checkpoint_{tag}"
        else:
            name = f"checkpoint_{self.iteration:06d}"
        return self.policy.save(self.run_dir / name)

    # core ----------------------------------------------------------------------

    def train_iteration(self):
        """One collect/update cycle; returns the logged stats row."""
        cfg = self.cfg
        t0 = time.perf_counter()
        batch, episodes, comps, nan_events = self.engine.collect(
            self.policy, cfg.rollout_steps)
        adv, rets = compute_gae(batch["rewards"], batch["values"],
                                batch["next_values"], batch["dones"],
                                batch["truncs"], cfg.gamma, cfg.lam)
        N = cfg.n_env * cfg.rollout_steps
        D = self.obs_dim
        obs = batch["obs"].reshape(N, D)
        obs_n = self.policy.stats.normalize(obs)
        actions = batch["actions"].reshape(N, self.act_dim)
        logp_old = batch["logp"].reshape(N)
        values_old = batch["values"].reshape(N)
        adv_flat = adv.reshape(N)
        rets_flat = rets.reshape(N)
        if cfg.advantage_norm:
            adv_flat = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)

        lr = lr_at(cfg, self.iteration)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 7919, self.iteration]))
        mb_size = N // cfg.minibatches
        kls, clip_fracs, losses = [], [], []
        entropy = 0.0
        for epoch in range(cfg.epochs):
            perm = rng.permutation(N)
            for mb in range(cfg.minibatches):
                idx = perm[mb * mb_size:(mb + 1) * mb_size]
                loss, stats, grads = ppo_loss(
                    self.policy, obs_n[idx], actions[idx], logp_old[idx],
                    adv_flat[idx], rets_flat[idx], values_old[idx], cfg)
                grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
                self.optim.step(self.policy, grads, lr)
                kls.append(stats["kl"])
                clip_fracs.append(stats["clip_frac"])
                losses.append(stats["loss"])
                entropy = stats["entropy"]
        self.policy.stats.update_batch(obs)

        self.iteration += 1
        self.env_steps += N
        elapsed = time.perf_counter() - t0
        row = {
            "iteration": self.iteration,
            "step": self.env_steps,
            "return": float(np.mean([e["return"] for e in episodes])) if episodes else float("nan"),
            "ep_len": float(np.mean([e["length"] for e in episodes])) if episodes else float("nan"),
            "kl": float(np.mean(kls)),
            "kl_max": float(np.max(kls)),
            "clip_frac": float(np.mean(clip_fracs)),
            "entropy": float(entropy),
            "loss": float(np.mean(losses)),
            "sps": N / elapsed,
            "lr": lr,
            "nan_events": nan_events,
        }
        for k, v in sorted(comps.items()):
            row[f"mean_{k}"] = v
        self._log_row(row)
        if self.run_dir and self.iteration % self.cfg.checkpoint_interval == 0:
            self.save_checkpoint()
        return row

    def train(self, callback=None):
        """Run to total_steps; on numerical failure save and re-raise."""
        rows = []
        try:
            while self.env_steps < self.cfg.total_steps:
                row = self.train_iteration()
                rows.append(row)
                if callback and callback(self, row):
                    break
        except NumericalError:
            self.save_checkpoint("abort")
            raise
        finally:
            self.engine.close()
        if self.run_dir:
            self.save_checkpoint("final")
        return rows


# -- throughput benchmark ------------------------------------------------------------

def bench_throughput(env_cfg: EnvConfig, n_env_list, threads=1, rollout_steps=50,
                     iterations=3, seed=0):
    """Rollout-only and rollout+update steps-per-second per env count."""
    rows = []
    for n_env in n_env_list:
        mb = max(d for d in (1, 2, 4, 8, 16, 32)
                 if (n_env * rollout_steps) % d == 0)
        cfg = PpoConfig(n_env=n_env, rollout_steps=rollout_steps,
                        minibatches=mb, seed=seed,
                        total_steps=n_env * rollout_steps * iterations,
                        hidden=(64, 64), n_workers=threads)
        trainer = Trainer(env_cfg, cfg, run_dir=None, n_workers=threads)
        # rollout-only timing
        trainer.engine.collect(trainer.policy, rollout_steps)  # warm-up
        t0 = time.perf_counter()
        for _ in range(iterations):
            trainer.engine.collect(trainer.policy, rollout_steps)
        roll_sps = iterations * n_env * rollout_steps / (time.perf_counter() - t0)
        t0 = time.perf_counter()
        for _ in range(iterations):
            trainer.train_iteration()
        train_sps = iterations * n_env * rollout_steps / (time.perf_counter() - t0)
        trainer.engine.close()
        rows.append({"n_env": n_env, "threads": threads,
                     "rollout_sps": roll_sps, "train_sps": train_sps})
    return rows
