"""Post-hoc evaluation: validation metrics, gait cycles, EMG envelopes, MPJAE."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .env import (EnvConfig, VecImitationEnv, imitation_reward_batch,
                  penalty_batch, reward_components_batch, terminate_batch,
                  wrap_angle)

RAD2DEG = 180.0 / np.pi
CYCLE_GRID = 101   # 0..100 percent inclusive


@dataclass
class ValidationReport:
    success_rate: float        # %
    frame_coverage: float      # %
    joint_angle_err: float     # deg
    joint_vel_err: float       # deg/s
    root_pos_err: Optional[float]   # cm, free-root models only
    root_yaw_err: Optional[float]   # deg
    rel_site_err: float        # cm
    abs_site_err: float        # cm
    mean_ep_len: float
    mean_ep_return: float
    per_clip: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1)


@dataclass
class GaitCycleProfile:
    name: str
    percent: np.ndarray        # fixed 101-point grid
    mean: np.ndarray
    std: np.ndarray            # population std across cycles
    n_cycles: int


@dataclass
class EpisodeTrace:
    """Raw per-frame record of one evaluation episode."""
    frames: np.ndarray         # reference frame index per executed step
    q: np.ndarray
    q_dot: np.ndarray
    site_pos: np.ndarray
    site_rot: np.ndarray
    rewards: np.ndarray
    grf: np.ndarray            # (T, 2): substep-mean ground force
    activations: np.ndarray
    terminated: bool
    ref_frames: int            # frames remaining in the clip from the start


def rollout_episode(policy, env_cfg: EnvConfig, clip, seed=0,
                    oracle_replay=False, start_frame=0):
    """Deterministic episode against one clip from a fixed start frame.

    With oracle_replay the simulator is bypassed and states are set directly
    from the reference, which ties the kinematics, the clip format and every
    error metric together: all errors must vanish.
    """
    from dataclasses import replace
    cfg = replace(env_cfg, clips=[clip], random_start=False)
    env = VecImitationEnv(cfg, 1, seed=seed, auto_reset=False)
    env.clip_idx[:] = 0
    env.frame[:] = start_frame
    env.Q[0] = clip.q[start_frame]
    env.Qd[0] = clip.q_dot[start_frame]
    env.act[:] = 0.0
    env.prev_action[:] = 0.0
    env.ep_return[:] = 0.0
    env.ep_len[:] = 0

    m = env.model
    rec = {k: [] for k in ("frames", "q", "q_dot", "site_pos", "site_rot",
                           "rewards", "grf", "activations")}
    terminated = False
    n_ref = clip.n_frames - start_frame
    last = clip.n_frames - 1
    while True:
        if oracle_replay:
            fi = min(int(env.frame[0]) + env.frames_per_step, last)
            env.Q[0] = clip.q[fi]
            env.Qd[0] = clip.q_dot[fi]
            env.frame[0] = fi
            pos, rot, lv, av = m.site_frames(env.Q, env.Qd)
            comps = reward_components_batch(
                m, cfg.reward, env.Q, env.Qd, pos, rot, lv, av,
                clip.q[fi][None], clip.q_dot[fi][None],
                clip.site_pos[fi][None], clip.site_rot[fi][None],
                clip.site_linvel[fi][None], clip.site_angvel[fi][None])
            reward = imitation_reward_batch(m, cfg.reward, comps, np.zeros(1))
            term, _ = terminate_batch(m, cfg.termination, env.Q, pos,
                                      clip.q[fi][None], clip.site_pos[fi][None])
            done, trunc = bool(term[0]), fi >= last
            grf = np.zeros((1, 2))
        else:
            obs = env.observe()
            action, _, _ = policy.act(obs, deterministic=True)
            _, reward, term, trunc_v, _info = env.step(action)
            done, trunc = bool(term[0]), bool(trunc_v[0])
            grf = _info["grf"]
            pos, rot, _, _ = m.site_frames(env.Q, env.Qd)
            fi = int(env.frame[0])
        rec["frames"].append(fi)
        rec["q"].append(env.Q[0].copy())
        rec["q_dot"].append(env.Qd[0].copy())
        rec["site_pos"].append(pos[0].copy())
        rec["site_rot"].append(rot[0].copy())
        rec["rewards"].append(float(reward[0]))
        rec["grf"].append(grf[0].copy())
        rec["activations"].append(env.act[0].copy())
        if done:
            terminated = True
            break
        if trunc or fi >= last:
            break
    return EpisodeTrace(
        frames=np.array(rec["frames"]), q=np.array(rec["q"]),
        q_dot=np.array(rec["q_dot"]), site_pos=np.array(rec["site_pos"]),
        site_rot=np.array(rec["site_rot"]), rewards=np.array(rec["rewards"]),
        grf=np.array(rec["grf"]), activations=np.array(rec["activations"]),
        terminated=terminated, ref_frames=n_ref)


def _episode_errors(model, clip, trace):
    """Per-episode error metrics over executed frames only."""
    hs = model.hinge_slice()
    f = trace.frames
    ref_q = clip.q[f]
    ref_qd = clip.q_dot[f]
    ref_pos = clip.site_pos[f]
    dq = (trace.q[:, hs] - ref_q[:, hs]) * RAD2DEG
    dqd = (trace.q_dot[:, hs] - ref_qd[:, hs]) * RAD2DEG
    out = {
        "joint_angle_err": float(np.sqrt((dq ** 2).mean())),
        "joint_vel_err": float(np.sqrt((dqd ** 2).mean())),
    }
    rs = model.root_site
    keep = [i for i in range(model.n_sites) if i != rs]
    rel = trace.site_pos[:, keep] - trace.site_pos[:, rs:rs + 1]
    ref_rel = ref_pos[:, keep] - ref_pos[:, rs:rs + 1]
    out["rel_site_err"] = float(
        np.sqrt(((rel - ref_rel) ** 2).sum(-1).mean()) * 100.0)
    if model.root_free:
        off = trace.q[0, :2] - ref_q[0, :2]   # initial offset is removed
        droot = trace.q[:, :2] - off - ref_q[:, :2]
        out["root_pos_err"] = float(np.sqrt((droot ** 2).sum(-1).mean()) * 100.0)
        dyaw = wrap_angle(trace.q[:, 2] - ref_q[:, 2]) * RAD2DEG
        out["root_yaw_err"] = float(np.abs(dyaw).mean())
        dabs = (trace.site_pos - off) - ref_pos
    else:
        out["root_pos_err"] = None
        out["root_yaw_err"] = None
        dabs = trace.site_pos - ref_pos
    out["abs_site_err"] = float(
        np.linalg.norm(dabs, axis=-1).mean() * 100.0)
    return out


def evaluate_policy(policy, env_cfg: EnvConfig, clips, n_episodes=1, seed=0,
                    oracle_replay=False):
    """Deterministic validation over a clip set; frames pool across episodes."""
    if not clips:
        raise ValueError("empty clip set")
    per_clip = {}
    agg = {"success": [], "executed": 0, "reference": 0, "lens": [],
           "rets": []}
    err_names = ("joint_angle_err", "joint_vel_err", "rel_site_err",
                 "abs_site_err", "root_pos_err", "root_yaw_err")
    weighted = {k: [] for k in err_names}
    for clip in sorted(clips, key=lambda c: c.name):
        for ep in range(n_episodes):
            trace = rollout_episode(policy, env_cfg, clip, seed=seed + ep,
                                    oracle_replay=oracle_replay)
            errs = _episode_errors(env_cfg.model, clip, trace)
            # the start frame counts as executed; a terminating frame does not
            n = len(trace.frames) + (0 if trace.terminated else 1)
            entry = dict(errs)
            entry["success"] = not trace.terminated
            entry["frames"] = n
            entry["coverage"] = 100.0 * n / trace.ref_frames
            entry["ep_return"] = float(trace.rewards.sum())
            per_clip.setdefault(clip.name, []).append(entry)
            agg["success"].append(not trace.terminated)
            agg["executed"] += n
            agg["reference"] += trace.ref_frames
            agg["lens"].append(n)
            agg["rets"].append(entry["ep_return"])
            for k in err_names:
                if errs[k] is not None:
                    weighted[k].append((errs[k], n))

    def pooled(name, rms=True):
        pairs = weighted[name]
        if not pairs:
            return None
        vals = np.array([v for v, _ in pairs])
        ns = np.array([n for _, n in pairs], dtype=float)
        if rms:
            return float(np.sqrt((vals ** 2 * ns).sum() / ns.sum()))
        return float((vals * ns).sum() / ns.sum())

    return ValidationReport(
        success_rate=100.0 * float(np.mean(agg["success"])),
        frame_coverage=100.0 * agg["executed"] / agg["reference"],
        joint_angle_err=pooled("joint_angle_err"),
        joint_vel_err=pooled("joint_vel_err"),
        root_pos_err=pooled("root_pos_err"),
        root_yaw_err=pooled("root_yaw_err", rms=False),
        rel_site_err=pooled("rel_site_err"),
        abs_site_err=pooled("abs_site_err", rms=False),
        mean_ep_len=float(np.mean(agg["lens"])),
        mean_ep_return=float(np.mean(agg["rets"])),
        per_clip=per_clip)


# -- gait cycles ---------------------------------------------------------------

def grf_onsets(grf, rate, threshold, hysteresis_s=0.05):
    """Upward threshold crossings, suppressing re-triggers within hysteresis."""
    grf = np.asarray(grf, dtype=float)
    above = grf >= threshold
    rising = np.flatnonzero(above & ~np.concatenate([[False], above[:-1]]))
    guard = max(1, int(round(hysteresis_s * rate)))
    onsets = []
    for t in rising:
        if not onsets or t - onsets[-1] >= guard:
            onsets.append(int(t))
    return onsets


def segment_gait_cycles(grf, rate, min_duration=0.4, max_duration=2.0,
                        threshold=None, body_weight=None, hysteresis_s=0.05):
    """Onset-to-onset cycles from a vertical GRF series, filtered by duration.

    The onset threshold defaults to 5% of body weight when given, else 5% of
    the series maximum.
    """
    grf = np.asarray(grf, dtype=float)
    if np.any(grf < -1e-9):
        raise ValueError("grf series must be non-negative")
    if threshold is None:
        base = body_weight if body_weight is not None else grf.max()
        threshold = 0.05 * base
    onsets = grf_onsets(grf, rate, threshold, hysteresis_s)
    if len(onsets) < 2:
        return []
    cycles = []
    for a, b in zip(onsets, onsets[1:]):
        dur = (b - a) / rate
        if min_duration <= dur <= max_duration:
            cycles.append((a, b))
    return cycles


def cycle_average(series, cycles, name="signal"):
    """Resample each cycle to the 101-point grid; pointwise mean and std."""
    if not cycles:
        raise ValueError("need at least one cycle")
    series = np.asarray(series, dtype=float)
    grid = np.linspace(0.0, 100.0, CYCLE_GRID)
    rows = []
    for a, b in cycles:
        src = np.linspace(a, b, CYCLE_GRID)
        rows.append(np.interp(src, np.arange(len(series)), series))
    rows = np.array(rows)
    return GaitCycleProfile(name=name, percent=grid, mean=rows.mean(axis=0),
                            std=rows.std(axis=0), n_cycles=len(cycles))


# -- EMG -------------------------------------------------------------------------

def emg_preprocess(raw, rate, cutoff_hz=6.0):
    """Rectify, zero-phase 2nd-order Butterworth low-pass, max-normalize."""
    raw = np.asarray(raw, dtype=float)
    if rate <= 0:
        raise ValueError("rate must be positive")
    rect = np.abs(raw)
    if not rect.any():
        return np.zeros_like(rect)
    b, a = signal.butter(2, cutoff_hz / (rate / 2.0))
    env = signal.filtfilt(b, a, rect)
    env = np.maximum(env, 0.0)
    peak = env.max()
    return env / peak if peak > 0 else env


def _curve(x):
    if isinstance(x, GaitCycleProfile):
        return np.asarray(x.mean, dtype=float)
    return np.asarray(x, dtype=float)


def correlate(profile_a, profile_b):
    """Pearson r of two equal-grid curves; None when variance vanishes."""
    a = _curve(profile_a)
    b = _curve(profile_b)
    if a.shape != b.shape:
        raise ValueError("profiles must share one grid")
    if a.std() == 0.0 or b.std() == 0.0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def mpjae(sim_clip, ref_clip, joints, model=None):
    """Mean per-joint absolute angle error in degrees over aligned frames."""
    if sim_clip.n_frames != ref_clip.n_frames:
        raise ValueError("clips must be frame-aligned")
    idx = []
    for j in joints:
        if isinstance(j, str):
            if model is None:
                raise ValueError("joint names need a model for lookup")
            idx.append(model.root_dofs + model.joint_index(j))
        else:
            idx.append(int(j))
    d = np.abs(wrap_angle(sim_clip.q[:, idx] - ref_clip.q[:, idx]))
    return float(d.mean() * RAD2DEG)
