"""Imitation RL environment: observations with goal lookahead, rewards, termination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import muscle_force_vec
from .sim import BatchSim, SimOptions


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2 * np.pi)


def quat_geodesic(qa, qb):
    """Geodesic angle between unit quaternions (w, x, y, z).

    Planar bundled models carry no quaternion joints; this exists so the
    joint reward handles the general format.
    """
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = np.clip(np.abs((qa * qb).sum(axis=-1)), 0.0, 1.0)
    return 2.0 * np.arccos(dot)


@dataclass
class RewardSpec:
    w_q: float = 0.1
    w_qdot: float = 0.1
    w_p: float = 0.6
    w_theta: float = 0.01
    w_v: float = 0.1
    w_vroot: float = 0.1          # 0 for fixed-base models
    beta_q: float = 10.0
    beta_p: float = 100.0
    beta_theta: float = 10.0
    beta_v: float = 0.1
    lambda_act_bound: float = 1.0
    lambda_act_rate: float = 0.0
    lambda_energy: float = 0.01
    penalty_floor: float = -1.0   # fixed by the reward formulation

    def __post_init__(self):
        for name in ("w_q", "w_qdot", "w_p", "w_theta", "w_v", "w_vroot"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("beta_q", "beta_p", "beta_theta", "beta_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty_floor != -1.0:
            raise ValueError("penalty floor is fixed at -1")

    def perfect_sum(self):
        """Reward under perfect tracking: both site-velocity terms carry w_v."""
        return (self.w_q + self.w_qdot + self.w_p + self.w_theta
                + 2.0 * self.w_v + self.w_vroot)


@dataclass
class TerminationSpec:
    delta_site: float = 0.5
    delta_root: Optional[float] = 0.5   # None for fixed-base models

    def __post_init__(self):
        if self.delta_site <= 0:
            raise ValueError("delta_site must be positive")
        if self.delta_root is not None and self.delta_root <= 0:
            raise ValueError("delta_root must be positive")


@dataclass
class GoalSpec:
    lookahead_n: int = 5
    lookahead_dt: float = 0.2

    def __post_init__(self):
        if self.lookahead_n < 1:
            raise ValueError("lookahead_n must be >= 1")
        if self.lookahead_dt <= 0:
            raise ValueError("lookahead_dt must be positive")


@dataclass
class Observation:
    vec: np.ndarray
    layout: tuple   # ((name, start, stop), ...)

    def slice(self, name):
        for n, a, b in self.layout:
            if n == name:
                return self.vec[..., a:b]
        raise KeyError(name)


def observation_layout(model, goal: GoalSpec):
    """Named slices of the flat observation vector."""
    nj = model.n_joints
    nm = model.n_muscles
    K = model.n_sites
    ncp = model.cp_link.size if model.root_free else 0
    parts = [("joint_pos", nj), ("joint_vel", nj)]
    if model.root_free:
        parts.append(("root_state", 5))       # z, pitch, xd, zd, pitchd
    parts += [("muscle_ctrl", nm), ("muscle_len", nm), ("muscle_vel", nm),
              ("muscle_force", nm)]
    if ncp:
        parts.append(("touch", ncp))
    goal_dim = nj + (6 if model.root_free else 0) + 2 * K
    for k in range(goal.lookahead_n):
        parts.append((f"goal_{k}", goal_dim))
    parts.append(("prev_action", nm))
    layout = []
    c = 0
    for name, width in parts:
        layout.append((name, c, c + width))
        c += width
    return tuple(layout), c


def _goal_frame_indices(frame, n_frames, goal: GoalSpec, rate):
    """Lookahead frame indices at offsets k*dt, clamped to the final frame."""
    frame = np.asarray(frame)
    steps = np.round(np.arange(goal.lookahead_n) * goal.lookahead_dt * rate)
    idx = frame[:, None] + steps[None, :].astype(int)
    return np.minimum(idx, n_frames - 1)


class ClipBank:
    """Concatenated clip storage for O(1) batched frame gathers."""

    def __init__(self, clips):
        if not clips:
            raise ValueError("need at least one clip")
        self.clips = list(clips)
        self.rate = clips[0].rate
        for c in clips:
            if c.rate != self.rate:
                raise ValueError("all clips must share one rate")
        self.lengths = np.array([c.n_frames for c in clips])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        self.q = np.concatenate([c.q for c in clips], axis=0)
        self.q_dot = np.concatenate([c.q_dot for c in clips], axis=0)
        self.site_pos = np.concatenate([c.site_pos for c in clips], axis=0)
        self.site_rot = np.concatenate([c.site_rot for c in clips], axis=0)
        self.site_linvel = np.concatenate([c.site_linvel for c in clips], axis=0)
        self.site_angvel = np.concatenate([c.site_angvel for c in clips], axis=0)

    def gidx(self, clip_idx, frame):
        return self.offsets[clip_idx] + frame


# -- pure reward / termination over batches -----------------------------------

def _site_relatives(model, pos, rot, linvel=None, angvel=None):
    """Root-relative site quantities; positions are plain offsets from the
    root site, angles are wrapped differences, velocities are expressed in
    the root frame."""
    rs = model.root_site
    keep = [i for i in range(model.n_sites) if i != rs]
    p_rel = pos[:, keep] - pos[:, rs:rs + 1]
    r_rel = wrap_angle(rot[:, keep] - rot[:, rs:rs + 1])
    if linvel is None:
        return keep, p_rel, r_rel
    dv = linvel[:, keep] - linvel[:, rs:rs + 1]
    c = np.cos(rot[:, rs:rs + 1])
    s = np.sin(rot[:, rs:rs + 1])
    v_rel = np.stack([c * dv[..., 0] + s * dv[..., 1],
                      -s * dv[..., 0] + c * dv[..., 1]], axis=-1)
    w_rel = angvel[:, keep] - angvel[:, rs:rs + 1]
    return keep, p_rel, r_rel, v_rel, w_rel


def reward_components_batch(model, spec, q, q_dot, site_pos, site_rot,
                            site_linvel, site_angvel, ref_q, ref_q_dot,
                            ref_pos, ref_rot, ref_linvel, ref_angvel):
    """All imitation reward components for a batch of states."""
    hs = model.hinge_slice()
    dq = q[:, hs] - ref_q[:, hs]
    # no quaternion joints in planar models: the geodesic term is zero
    r_q = np.exp(-spec.beta_q * (dq ** 2).mean(axis=1))
    dqd = q_dot[:, hs] - ref_q_dot[:, hs]
    r_qdot = np.exp(-spec.beta_q * (dqd ** 2).mean(axis=1))

    _, p_rel, r_rel, v_rel, w_rel = _site_relatives(
        model, site_pos, site_rot, site_linvel, site_angvel)
    _, p_ref, r_ref, v_ref, w_ref = _site_relatives(
        model, ref_pos, ref_rot, ref_linvel, ref_angvel)
    r_p = np.exp(-spec.beta_p * ((p_rel - p_ref) ** 2).sum(-1).mean(axis=1))
    r_theta = np.exp(-spec.beta_theta
                     * (wrap_angle(r_rel - r_ref) ** 2).mean(axis=1))
    r_v_ang = np.exp(-spec.beta_v * ((w_rel - w_ref) ** 2).mean(axis=1))
    r_v_lin = np.exp(-spec.beta_v * ((v_rel - v_ref) ** 2).sum(-1).mean(axis=1))
    comps = {"r_q": r_q, "r_qdot": r_qdot, "r_p": r_p, "r_theta": r_theta,
             "r_v_ang": r_v_ang, "r_v_lin": r_v_lin}
    if model.root_free:
        dvr = q_dot[:, :2] - ref_q_dot[:, :2]
        comps["r_v_root"] = np.exp(-spec.beta_v * (dvr ** 2).sum(axis=1))
    return comps


def imitation_reward_batch(model, spec, comps, penalty):
    r_imit = (spec.w_q * comps["r_q"] + spec.w_qdot * comps["r_qdot"]
              + spec.w_p * comps["r_p"] + spec.w_theta * comps["r_theta"]
              + spec.w_v * (comps["r_v_ang"] + comps["r_v_lin"]))
    if "r_v_root" in comps:
        r_imit = r_imit + spec.w_vroot * comps["r_v_root"]
    return np.maximum(0.0, r_imit + penalty)


def penalty_batch(spec, action, prev_action, activations):
    """Clipped regularizer sum P_t in [-1, 0]."""
    excess = np.maximum(0.0, action - 1.0) + np.maximum(0.0, -action)
    c_bound = (excess ** 2).mean(axis=-1)
    c_rate = ((action - prev_action) ** 2).mean(axis=-1)
    c_energy = (activations ** 2).mean(axis=-1)
    total = (spec.lambda_act_bound * c_bound + spec.lambda_act_rate * c_rate
             + spec.lambda_energy * c_energy)
    return np.maximum(spec.penalty_floor, -total)


def site_deviation_batch(model, site_pos, ref_pos):
    """Mean root-relative Euclidean site deviation (the termination signal)."""
    rs = model.root_site
    keep = [i for i in range(model.n_sites) if i != rs]
    rel = site_pos[:, keep] - site_pos[:, rs:rs + 1]
    ref = ref_pos[:, keep] - ref_pos[:, rs:rs + 1]
    return np.linalg.norm(rel - ref, axis=-1).mean(axis=1)


def terminate_batch(model, term: TerminationSpec, q, site_pos, ref_q, ref_pos):
    dev = site_deviation_batch(model, site_pos, ref_pos)
    bad = dev > term.delta_site
    if model.root_free and term.delta_root is not None:
        root_err = np.linalg.norm(q[:, :2] - ref_q[:, :2], axis=1)
        bad = bad | (root_err > term.delta_root)
    return bad, dev


# -- single-state wrappers matching the operation contracts -------------------

def build_observation(model, state, clip, t, prev_action, goal: GoalSpec,
                      touch=None):
    """Assemble one observation; `t` is the current frame index."""
    env = _single_env(model, clip, goal)
    env.set_state(state, int(t), np.asarray(prev_action, dtype=float),
                  touch=touch)
    vec = env.observe()[0]
    return Observation(vec, env.layout)


def imitation_reward(model, state, clip, t, spec: RewardSpec,
                     action=None, prev_action=None):
    """Reward at frame t; penalties enter only when actions are supplied."""
    pos, rot, lv, av = model.site_frames(state.q[None], state.q_dot[None])
    g = int(t)
    comps = reward_components_batch(
        model, spec, state.q[None], state.q_dot[None], pos, rot, lv, av,
        clip.q[g][None], clip.q_dot[g][None], clip.site_pos[g][None],
        clip.site_rot[g][None], clip.site_linvel[g][None],
        clip.site_angvel[g][None])
    if action is None:
        pen = np.zeros(1)
    else:
        pen = penalty_batch(spec, np.asarray(action)[None],
                            np.asarray(prev_action)[None],
                            state.activations[None])
    r = imitation_reward_batch(model, spec, comps, pen)
    return float(r[0]), {k: float(v[0]) for k, v in comps.items()} | {
        "penalty": float(pen[0])}


def penalty(action, prev_action, activations, spec: RewardSpec):
    action = np.asarray(action, dtype=float)
    prev_action = np.asarray(prev_action, dtype=float)
    if action.shape != prev_action.shape:
        raise ValueError("action vectors must have equal length")
    return float(penalty_batch(spec, action[None], prev_action[None],
                               np.asarray(activations, dtype=float)[None])[0])


def terminate_check(model, state, clip, t, term: TerminationSpec):
    """Returns 'terminated' or 'continue' for one state against frame t."""
    pos, _ = model.site_frames(state.q[None])
    g = int(t)
    bad, _ = terminate_batch(model, term, state.q[None], pos,
                             clip.q[g][None], clip.site_pos[g][None])
    return "terminated" if bad[0] else "continue"


def _single_env(model, clip, goal):
    cfg = EnvConfig(model=model, clips=[clip], goal=goal)
    return VecImitationEnv(cfg, n_env=1, seed=0)


# -- vectorized environment ----------------------------------------------------

@dataclass
class EnvConfig:
    model: object
    clips: Sequence
    reward: RewardSpec = field(default_factory=RewardSpec)
    termination: TerminationSpec = field(default_factory=TerminationSpec)
    goal: GoalSpec = field(default_factory=GoalSpec)
    sim: SimOptions = field(default_factory=SimOptions)
    n_substeps: int = 20
    random_start: bool = True    # reference-state initialization at random frames


class VecImitationEnv:
    """Batch of imitation environments stepping in lockstep.

    Each environment owns a seeded RNG stream for clip/start-frame sampling,
    so rollouts are reproducible independently of how environments are
    distributed over workers.
    """

    def __init__(self, cfg: EnvConfig, n_env, seed=0, start_index=0,
                 auto_reset=True):
        self.cfg = cfg
        self.model = cfg.model
        self.n_env = int(n_env)
        self.auto_reset = bool(auto_reset)
        self.engine = BatchSim(cfg.model, cfg.sim)
        self.bank = ClipBank(cfg.clips)
        self.layout, self.obs_dim = observation_layout(cfg.model, cfg.goal)
        self.act_dim = cfg.model.n_muscles
        m = cfg.model
        self.frames_per_step = cfg.n_substeps * cfg.sim.substep_dt * self.bank.rate
        if abs(self.frames_per_step - round(self.frames_per_step)) > 1e-9:
            raise ValueError("control step must cover a whole number of clip "
                             f"frames, got {self.frames_per_step}")
        self.frames_per_step = int(round(self.frames_per_step))
        self.rngs = [np.random.default_rng(np.random.SeedSequence([seed, start_index + e]))
                     for e in range(self.n_env)]
        B = self.n_env
        self.Q = np.zeros((B, m.n_dof))
        self.Qd = np.zeros((B, m.n_dof))
        self.act = np.zeros((B, m.n_muscles))
        self.clip_idx = np.zeros(B, dtype=int)
        self.frame = np.zeros(B, dtype=int)
        self.prev_action = np.zeros((B, m.n_muscles))
        self.touch = np.zeros((B, m.cp_link.size))
        self.ep_return = np.zeros(B)
        self.ep_len = np.zeros(B, dtype=int)
        self.nan_events = 0
        self.reset(np.arange(B))

    # -- state management --------------------------------------------------

    def reset(self, idx):
        for e in np.atleast_1d(idx):
            rng = self.rngs[e]
            ci = int(rng.integers(len(self.bank.clips)))
            n = int(self.bank.lengths[ci])
            f0 = int(rng.integers(n - 1)) if self.cfg.random_start else 0
            g = self.bank.offsets[ci] + f0
            self.clip_idx[e] = ci
            self.frame[e] = f0
            self.Q[e] = self.bank.q[g]
            self.Qd[e] = self.bank.q_dot[g]
            self.act[e] = 0.0
            self.prev_action[e] = 0.0
            self.touch[e] = 0.0
            self.ep_return[e] = 0.0
            self.ep_len[e] = 0

    def set_state(self, state, frame, prev_action=None, touch=None, env=0):
        self.Q[env] = state.q
        self.Qd[env] = state.q_dot
        self.act[env] = state.activations
        self.frame[env] = frame
        if prev_action is not None:
            self.prev_action[env] = prev_action
        if touch is not None:
            self.touch[env] = touch

    # -- observation --------------------------------------------------------

    def observe(self):
        m = self.model
        cfg = self.cfg
        B = self.n_env
        hs = m.hinge_slice()
        g = self.bank.gidx(self.clip_idx, self.frame)
        parts = [self.Q[:, hs], self.Qd[:, hs]]
        if m.root_free:
            parts.append(np.concatenate(
                [self.Q[:, 1:3], self.Qd[:, 0:3]], axis=1))
        L, Ldot, _ = self.engine.tendon_state(self.Q, self.Qd)
        F = muscle_force_vec(self.act, L, Ldot, m.mus_fmax, m.mus_lopt,
                             m.mus_vmax)
        parts += [np.clip(self.prev_action, 0.0, 1.0), L, Ldot, -F]
        if m.root_free and m.cp_link.size:
            parts.append(self.touch)
        # goals: deltas to the current state plus target site offsets
        steps = np.round(np.arange(cfg.goal.lookahead_n)
                         * cfg.goal.lookahead_dt * self.bank.rate).astype(int)
        idx = self.frame[:, None] + steps[None, :]
        idx = np.minimum(idx, (self.bank.lengths[self.clip_idx] - 1)[:, None])
        gi = self.bank.offsets[self.clip_idx][:, None] + idx
        for k in range(cfg.goal.lookahead_n):
            gk = gi[:, k]
            q_ref = self.bank.q[gk]
            block = [q_ref[:, hs] - self.Q[:, hs]]
            if m.root_free:
                dpos = q_ref[:, :2] - self.Q[:, :2]
                dpitch = wrap_angle(q_ref[:, 2] - self.Q[:, 2])[:, None]
                dvel = self.bank.q_dot[gk][:, :3] - self.Qd[:, :3]
                block += [dpos, dpitch, dvel]
            rs = m.root_site
            rel = self.bank.site_pos[gk] - self.bank.site_pos[gk][:, rs:rs + 1]
            block.append(rel.reshape(B, -1))
            parts.append(np.concatenate(block, axis=1))
        parts.append(self.prev_action)
        obs = np.concatenate(parts, axis=1)
        return obs

    # -- stepping ------------------------------------------------------------

    def step(self, actions):
        """Advance all environments one control step.

        Returns (obs, reward, done, trunc, info). `done` marks early
        termination (bootstrap value 0); `trunc` marks clip end (bootstrap
        with the critic's value). Environments reset automatically; the
        returned observation is post-reset.
        """
        m = self.model
        cfg = self.cfg
        actions = np.asarray(actions, dtype=float)
        ctrl = np.clip(actions, 0.0, 1.0)
        self.Q, self.Qd, self.act, grf, touch, bad = self.engine.step(
            self.Q, self.Qd, self.act, ctrl, cfg.n_substeps)
        self.touch = touch
        self.frame = self.frame + self.frames_per_step
        last = self.bank.lengths[self.clip_idx] - 1
        self.frame = np.minimum(self.frame, last)
        g = self.bank.gidx(self.clip_idx, self.frame)

        pos, rot, lv, av = m.site_frames(self.Q, self.Qd)
        comps = reward_components_batch(
            m, cfg.reward, self.Q, self.Qd, pos, rot, lv, av,
            self.bank.q[g], self.bank.q_dot[g], self.bank.site_pos[g],
            self.bank.site_rot[g], self.bank.site_linvel[g],
            self.bank.site_angvel[g])
        pen = penalty_batch(cfg.reward, actions, self.prev_action, self.act)
        reward = imitation_reward_batch(m, cfg.reward, comps, pen)

        term, dev = terminate_batch(m, cfg.termination, self.Q, pos,
                                    self.bank.q[g], self.bank.site_pos[g])
        if bad.any():
            self.nan_events += int(bad.sum())
            term = term | bad
            reward = np.where(bad, 0.0, reward)
        trunc = (self.frame >= last) & ~term

        self.prev_action = actions.copy()
        self.ep_return += reward
        self.ep_len += 1
        info = {
            "components": {k: v.copy() for k, v in comps.items()},
            "penalty": pen.copy(),
            "site_dev": dev,
            "grf": grf,
            "episodes": [],
        }
        ended = term | trunc
        if ended.any():
            final_obs = self.observe()
            info["final_obs"] = {int(e): final_obs[e].copy()
                                 for e in np.flatnonzero(ended)}
            for e in np.flatnonzero(ended):
                info["episodes"].append(
                    {"return": float(self.ep_return[e]),
                     "length": int(self.ep_len[e]),
                     "terminated": bool(term[e])})
            if self.auto_reset:
                self.reset(np.flatnonzero(ended))
        return self.observe(), reward, term, trunc, info
