"""Reference-motion clips: file format, resampling, ground correction, synthesis."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import SCHEMA_VERSION


class ClipError(ValueError):
    pass


@dataclass
class Frame:
    q: np.ndarray
    q_dot: np.ndarray
    site_pos: np.ndarray      # (K, 2)
    site_rot: np.ndarray      # (K,)
    site_linvel: np.ndarray   # (K, 2)
    site_angvel: np.ndarray   # (K,)
    grf: Optional[float] = None


class MotionClip:
    """Fixed-rate trajectory stored columnar; immutable by convention."""

    def __init__(self, name, rate, model_ref, q, q_dot, site_pos, site_rot,
                 site_linvel, site_angvel, grf=None):
        self.name = str(name)
        self.rate = float(rate)
        self.model_ref = str(model_ref)
        self.q = np.asarray(q, dtype=float)
        self.q_dot = np.asarray(q_dot, dtype=float)
        self.site_pos = np.asarray(site_pos, dtype=float)
        self.site_rot = np.asarray(site_rot, dtype=float)
        self.site_linvel = np.asarray(site_linvel, dtype=float)
        self.site_angvel = np.asarray(site_angvel, dtype=float)
        self.grf = None if grf is None else np.asarray(grf, dtype=float)
        self._validate()

    def _validate(self):
        if self.rate <= 0:
            raise ClipError("rate must be positive")
        if self.q.ndim != 2 or self.q.shape[0] < 2:
            raise ClipError("clip needs at least 2 frames")
        T, nq = self.q.shape
        K = self.site_pos.shape[1] if self.site_pos.ndim == 3 else 0
        if self.q_dot.shape != (T, nq):
            raise ClipError("q_dot shape mismatch")
        if self.site_pos.shape != (T, K, 2) or self.site_rot.shape != (T, K):
            raise ClipError("site data shape mismatch")
        if self.site_linvel.shape != (T, K, 2) or self.site_angvel.shape != (T, K):
            raise ClipError("site velocity shape mismatch")
        if self.grf is not None and self.grf.shape != (T,):
            raise ClipError("grf shape mismatch")
        for arr, what in ((self.q, "q"), (self.q_dot, "q_dot"),
                          (self.site_pos, "site_pos"), (self.site_rot, "site_rot"),
                          (self.site_linvel, "site_linvel"),
                          (self.site_angvel, "site_angvel")):
            if not np.all(np.isfinite(arr)):
                bad = int(np.argwhere(~np.isfinite(arr).reshape(T, -1).all(axis=1))[0, 0])
                raise ClipError(f"non-finite {what} at frame {bad}")

    @property
    def n_frames(self):
        return self.q.shape[0]

    @property
    def n_joints(self):
        return self.q.shape[1]

    @property
    def n_sites(self):
        return self.site_pos.shape[1]

    @property
    def duration(self):
        return (self.n_frames - 1) / self.rate

    def frame(self, i):
        grf = None if self.grf is None else float(self.grf[i])
        return Frame(self.q[i], self.q_dot[i], self.site_pos[i], self.site_rot[i],
                     self.site_linvel[i], self.site_angvel[i], grf)

    def copy(self):
        return MotionClip(self.name, self.rate, self.model_ref, self.q.copy(),
                          self.q_dot.copy(), self.site_pos.copy(),
                          self.site_rot.copy(), self.site_linvel.copy(),
                          self.site_angvel.copy(),
                          None if self.grf is None else self.grf.copy())

    def times(self):
        return np.arange(self.n_frames) / self.rate


def site_kinematics_from_q(model, q, q_dot):
    """Derive all per-site kinematics from joint trajectories via FK."""
    pos, rot, linvel, angvel = model.site_frames(q, q_dot)
    return pos, rot, linvel, angvel


def clip_from_q(model, name, rate, q, q_dot, grf=None):
    pos, rot, linvel, angvel = site_kinematics_from_q(model, q, q_dot)
    return MotionClip(name, rate, model.name, q, q_dot, pos, rot, linvel,
                      angvel, grf)


# -- file format: .mmclip.csv + .mmclip.json sidecar --------------------------

def _columns(nq, n_sites, with_grf):
    cols = [f"q_{i}" for i in range(nq)] + [f"qd_{i}" for i in range(nq)]
    for k in range(n_sites):
        cols += [f"s{k}_px", f"s{k}_pz", f"s{k}_rot", f"s{k}_vx", f"s{k}_vz",
                 f"s{k}_w"]
    if with_grf:
        cols.append("grf_z")
    return cols


def _strip_suffix(path):
    s = str(path)
    for suf in (".mmclip.csv", ".mmclip.json"):
        if s.endswith(suf):
            return s[: -len(suf)]
    return s


def save_clip(clip, path):
    """Write `<base>.mmclip.csv` and `<base>.mmclip.json`; floats via repr so a
    round-trip is bit-exact."""
    base = _strip_suffix(path)
    T, nq, K = clip.n_frames, clip.n_joints, clip.n_sites
    with_grf = clip.grf is not None
    header = {
        "schema_version": SCHEMA_VERSION,
        "name": clip.name,
        "rate": clip.rate,
        "model_ref": clip.model_ref,
        "n_frames": T,
        "n_joints": nq,
        "n_sites": K,
        "columns": _columns(nq, K, with_grf),
    }
    with open(base + ".mmclip.json", "w") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")
    block = [clip.q, clip.q_dot]
    for k in range(K):
        block += [clip.site_pos[:, k], clip.site_rot[:, k, None],
                  clip.site_linvel[:, k], clip.site_angvel[:, k, None]]
    if with_grf:
        block.append(clip.grf[:, None])
    data = np.concatenate(block, axis=1)
    with open(base + ".mmclip.csv", "w") as fh:
        fh.write(",".join(header["columns"]) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return base + ".mmclip.csv"


def load_clip(path, model=None):
    """Load a clip pair; validates invariants. With a model, absent site
    kinematics are recomputed from q and q within joint ranges is checked
    (audit-level warning only)."""
    base = _strip_suffix(path)
    json_path, csv_path = base + ".mmclip.json", base + ".mmclip.csv"
    if not Path(json_path).is_file():
        raise ClipError(f"missing sidecar {json_path}")
    if not Path(csv_path).is_file():
        raise ClipError(f"missing frame block {csv_path}")
    with open(json_path) as fh:
        header = json.load(fh)
    for key in ("rate", "n_frames", "n_joints", "n_sites", "columns"):
        if key not in header:
            raise ClipError(f"sidecar missing field {key!r}")
    nq, K, T = header["n_joints"], header["n_sites"], header["n_frames"]
    try:
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ClipError(f"cannot parse {csv_path}: {exc}") from exc
    if data.shape[0] != T:
        raise ClipError(f"frame count mismatch: sidecar {T}, csv {data.shape[0]}")
    if data.shape[1] != len(header["columns"]):
        raise ClipError(f"column count mismatch at frame 0: expected "
                        f"{len(header['columns'])}, got {data.shape[1]}")
    q = data[:, :nq]
    q_dot = data[:, nq:2 * nq]
    site_pos = np.zeros((T, K, 2))
    site_rot = np.zeros((T, K))
    site_linvel = np.zeros((T, K, 2))
    site_angvel = np.zeros((T, K))
    c = 2 * nq
    for k in range(K):
        site_pos[:, k] = data[:, c:c + 2]
        site_rot[:, k] = data[:, c + 2]
        site_linvel[:, k] = data[:, c + 3:c + 5]
        site_angvel[:, k] = data[:, c + 5]
        c += 6
    grf = data[:, c] if header["columns"][-1:] == ["grf_z"] else None
    if K == 0 and model is not None:
        pos, rot, linvel, angvel = site_kinematics_from_q(model, q, q_dot)
        site_pos, site_rot, site_linvel, site_angvel = pos, rot, linvel, angvel
    clip = MotionClip(header.get("name", base), header["rate"],
                      header.get("model_ref", ""), q, q_dot, site_pos, site_rot,
                      site_linvel, site_angvel, grf)
    if model is not None:
        if clip.n_joints != model.n_dof:
            raise ClipError(f"clip has {clip.n_joints} dofs, model {model.n_dof}")
        if clip.n_sites and clip.n_sites != model.n_sites:
            raise ClipError(f"clip has {clip.n_sites} sites, model {model.n_sites}")
        qh = clip.q[:, model.hinge_slice()]
        if np.any(qh > model.joint_hi + 1e-5) or np.any(qh < model.joint_lo - 1e-5):
            warnings.warn(f"clip {clip.name!r} has frames outside joint ranges "
                          "(run the audit for details)")
    return clip


# -- operations ---------------------------------------------------------------

def _central_diff(x, rate):
    """Velocities as central differences, one-sided at the ends."""
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) * (rate / 2.0)
    v[0] = (x[1] - x[0]) * rate
    v[-1] = (x[-1] - x[-2]) * rate
    return v


def resample(clip, target_rate, model=None):
    """Linear position interpolation at the target rate; velocities recomputed
    as central differences for internal consistency. Same-rate input is
    returned unchanged."""
    if target_rate <= 0:
        raise ClipError("target_rate must be positive")
    if target_rate == clip.rate:
        return clip.copy()
    n_new = int(round(clip.duration * target_rate)) + 1
    n_new = max(n_new, 2)
    t_new = np.arange(n_new) / target_rate
    t_old = clip.times()
    t_new = np.minimum(t_new, t_old[-1])

    def lerp(arr):
        flat = arr.reshape(clip.n_frames, -1)
        out = np.empty((n_new, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.interp(t_new, t_old, flat[:, j])
        return out.reshape((n_new,) + arr.shape[1:])

    q = lerp(clip.q)
    q_dot = _central_diff(q, target_rate)
    grf = lerp(clip.grf[:, None])[:, 0] if clip.grf is not None else None
    if model is not None:
        pos, rot, linvel, angvel = site_kinematics_from_q(model, q, q_dot)
    else:
        pos = lerp(clip.site_pos)
        rot_unwrapped = np.unwrap(clip.site_rot, axis=0)
        rot = lerp(rot_unwrapped)
        linvel = _central_diff(pos, target_rate)
        angvel = _central_diff(rot, target_rate)
    return MotionClip(clip.name, target_rate, clip.model_ref, q, q_dot, pos,
                      rot, linvel, angvel, grf)


def min_contact_height(clip, model):
    """Per-frame minimum height of the model's contact probes along the clip."""
    P, PHI = model.link_frames(clip.q)
    pts = model.points_world(P, PHI, model.cp_link, model.cp_off)
    return pts[..., 1].min(axis=1)


def ground_correct(clip, model):
    """Rigid vertical shift so the per-clip minimum contact height is zero.

    A single shift per clip preserves the dynamics; per-frame warping would
    fabricate accelerations.
    """
    if not model.root_free:
        warnings.warn("ground_correct is a no-op for fixed-base models")
        return clip.copy()
    if not len(model.contact_points):
        warnings.warn("model has no contact points; ground_correct is a no-op")
        return clip.copy()
    shift = -min_contact_height(clip, model).min()
    if shift == 0.0:
        return clip.copy()
    out = clip.copy()
    out.q[:, 1] += shift
    out.site_pos[..., 1] += shift
    return out


def synth_clip(kind, params, model):
    """Synthetic test clips with exact derivative velocities.

    kinds: 'hold' (constant pose), 'sinusoid' (per-joint A*sin(2*pi*f*t + phase)
    around a center), 'ramp' (linear from start to end). Hinge joints only;
    a free root stays at the given root pose.
    """
    rate = float(params.get("rate", 100.0))
    duration = float(params.get("duration", 1.0))
    n = int(round(duration * rate)) + 1
    t = np.arange(n) / rate
    nd = model.n_dof
    rd = model.root_dofs
    nj = model.n_joints
    q = np.zeros((n, nd))
    q_dot = np.zeros((n, nd))
    if model.root_free:
        q[:, :3] = np.asarray(params.get("root_pose", (0.0, 0.0, 0.0)))

    def as_vec(key, default):
        v = np.asarray(params.get(key, default), dtype=float)
        return np.broadcast_to(v, (nj,)).copy()

    if kind == "hold":
        center = as_vec("center", 0.0)
        q[:, rd:] = center
    elif kind == "sinusoid":
        center = as_vec("center", 0.0)
        amp = as_vec("amplitude", 0.3)
        freq = as_vec("frequency", 1.0)
        phase = as_vec("phase", 0.0)
        arg = 2 * np.pi * freq * t[:, None] + phase
        q[:, rd:] = center + amp * np.sin(arg)
        q_dot[:, rd:] = amp * 2 * np.pi * freq * np.cos(arg)
        lo_needed = center - np.abs(amp)
        hi_needed = center + np.abs(amp)
    elif kind == "ramp":
        start = as_vec("start", 0.0)
        end = as_vec("end", 0.5)
        q[:, rd:] = start + (end - start) * (t[:, None] / duration)
        q_dot[:, rd:] = (end - start) / duration
        lo_needed = np.minimum(start, end)
        hi_needed = np.maximum(start, end)
    else:
        raise ClipError(f"unknown synth kind {kind!r}")
    if kind in ("sinusoid", "ramp"):
        if np.any(lo_needed < model.joint_lo) or np.any(hi_needed > model.joint_hi):
            raise ClipError("requested motion exceeds joint ranges")
    name = params.get("name", f"{kind}_{model.name}")
    return clip_from_q(model, name, rate, q, q_dot)


def make_gait_clip(model, speed=1.0, cycle_time=1.2, duration=6.0, rate=100.0,
                   hip_amp=0.25, knee_amp=0.8, ankle_amp=0.15, lean=0.03,
                   ground=True, z_harmonics=4):
    """Synthetic planar gait for the free-root walker, analytic derivatives.

    Hips swing sinusoidally in antiphase; knees flex with a smooth sin^4 bump
    during swing; ankles rock gently; the root advances at constant speed.
    The root height is a low-order Fourier series fitted so the lowest foot
    probe grazes the ground throughout the cycle, keeping positions and
    velocities exactly consistent. The clip is kinematic, not dynamically
    consistent; it serves as an imitation target.
    """
    if not model.root_free:
        raise ClipError("gait synthesis needs a free-root model")
    n = int(round(duration * rate)) + 1
    t = np.arange(n) / rate
    w = 2 * np.pi / cycle_time
    nd = model.n_dof
    q = np.zeros((n, nd))
    q_dot = np.zeros((n, nd))

    q[:, 0] = speed * t
    q_dot[:, 0] = speed
    q[:, 1] = 1.0
    q[:, 2] = -lean
    for leg, phase in ((0, 0.0), (1, np.pi)):
        ph = w * t + phase
        hip = 3 + 3 * leg
        q[:, hip] = hip_amp * np.cos(ph)
        q_dot[:, hip] = -hip_amp * w * np.sin(ph)
        # sin^4 bump peaking mid-swing (hip moving forward at wt = 3pi/2)
        s = np.sin(0.5 * ph - 0.25 * np.pi)
        ds = 0.5 * np.cos(0.5 * ph - 0.25 * np.pi)
        q[:, hip + 1] = -knee_amp * s ** 4
        q_dot[:, hip + 1] = -knee_amp * 4 * s ** 3 * ds * w
        q[:, hip + 2] = ankle_amp * np.sin(ph + 0.4 * np.pi)
        q_dot[:, hip + 2] = ankle_amp * w * np.cos(ph + 0.4 * np.pi)
    if (np.any(q[:, 3:] < model.joint_lo) or np.any(q[:, 3:] > model.joint_hi)):
        raise ClipError("gait parameters exceed joint ranges")

    # fit root height so min contact height tracks 0: Fourier basis at
    # harmonics of twice the stride frequency (left/right symmetry)
    probe = clip_from_q(model, "probe", rate, q, q_dot)
    h_low = min_contact_height(probe, model)
    cols = [np.ones_like(t)]
    dcols = [np.zeros_like(t)]
    for j in range(1, z_harmonics + 1):
        wj = 2 * w * j
        cols += [np.cos(wj * t), np.sin(wj * t)]
        dcols += [-wj * np.sin(wj * t), wj * np.cos(wj * t)]
    A = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(A, h_low, rcond=None)
    q[:, 1] = 1.0 - A @ coef
    q_dot[:, 1] = -np.stack(dcols, axis=1) @ coef

    clip = clip_from_q(model, f"gait_{speed:g}ms", rate, q, q_dot)
    if ground:
        clip = ground_correct(clip, model)
    return clip
