"""Planar musculoskeletal model: tendon geometry, moment arms, activation and force."""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MOMENT_ARM_DELTA = 1e-5  # rad, central-difference probe step

# Normalized Hill curve constants. These are deliberate substitutes for
# engine-specific gain/bias curves; swap here to change muscle behavior globally.
FL_WIDTH = 0.5
FV_SLOPE = 1.0
FV_CAP = 1.5
FP_SHAPE = 0.3
FP_CAP = 1.5


class ModelError(ValueError):
    """Raised when a model file violates a structural invariant."""

    def __init__(self, message, path="", line=None):
        loc = f" at {path}" if path else ""
        if line is not None:
            loc += f" (line {line})"
        super().__init__(message + loc)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    inertia: float
    length: float
    com: tuple


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent_link: str
    child_link: str
    axis_anchor: tuple
    range_lo: float
    range_hi: float
    damping: float = 0.0


@dataclass(frozen=True)
class TendonPath:
    via_points: tuple  # ((link_name, (x, z)), ...)
    rest_length: float


@dataclass
class MuscleActuator:
    name: str
    path: TendonPath
    f_max: float
    l_opt: float
    v_max: float = 10.0  # physiological order of magnitude, in l_opt/s
    tau_act: float = 0.01
    tau_deact: float = 0.04
    act: float = 0.0


@dataclass(frozen=True)
class MimicSite:
    name: str
    link: str
    offset: tuple
    is_root: bool = False


def _perp(v):
    """z-hat cross v for planar vectors, shape (..., 2)."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


class MskModel:
    """Immutable articulated planar model over a kinematic tree.

    Link 0 is the root. With ``root_free`` the generalized coordinates are
    ``[x, z, pitch, hinge...]``, otherwise just the hinge angles in joint
    order. All quantities are SI.
    """

    def __init__(self, name, links, joints, muscles, sites, root_free, gravity,
                 contact_points=()):
        self.name = name
        self.links = list(links)
        self.joints = list(joints)
        self.muscles = list(muscles)
        self.sites = list(sites)
        self.root_free = bool(root_free)
        self.gravity = float(gravity)
        self.contact_points = list(contact_points)
        self._validate()
        self._compile()

    # -- structure ---------------------------------------------------------

    @property
    def n_links(self):
        return len(self.links)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_muscles(self):
        return len(self.muscles)

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def n_dof(self):
        return (3 if self.root_free else 0) + len(self.joints)

    @property
    def root_dofs(self):
        return 3 if self.root_free else 0

    def joint_index(self, name):
        try:
            return self._joint_idx[name]
        except KeyError:
            raise ModelError(f"unknown joint {name!r}", path="joints")

    def muscle_index(self, name):
        try:
            return self._muscle_idx[name]
        except KeyError:
            raise ModelError(f"unknown muscle {name!r}", path="muscles")

    def link_index(self, name):
        try:
            return self._link_idx[name]
        except KeyError:
            raise ModelError(f"unknown link {name!r}", path="links")

    def hinge_slice(self):
        return slice(self.root_dofs, self.n_dof)

    def _validate(self):
        if not self.links:
            raise ModelError("model has no links", path="links")
        self._link_idx = {l.name: i for i, l in enumerate(self.links)}
        if len(self._link_idx) != len(self.links):
            raise ModelError("duplicate link names", path="links")
        if sum(l.mass for l in self.links) <= 0:
            raise ModelError("total mass must be positive", path="links")
        children = set()
        for j in self.joints:
            if j.parent_link not in self._link_idx:
                raise ModelError(f"joint {j.name!r} references unknown parent link "
                                 f"{j.parent_link!r}", path=f"joints[{j.name}]")
            if j.child_link not in self._link_idx:
                raise ModelError(f"joint {j.name!r} references unknown child link "
                                 f"{j.child_link!r}", path=f"joints[{j.name}]")
            if j.child_link == self.links[0].name:
                raise ModelError("root link cannot be a joint child",
                                 path=f"joints[{j.name}]")
            if j.child_link in children:
                raise ModelError(f"link {j.child_link!r} has two parent joints",
                                 path=f"joints[{j.name}]")
            children.add(j.child_link)
            if not j.range_lo < j.range_hi:
                raise ModelError(f"joint {j.name!r} has empty range",
                                 path=f"joints[{j.name}]")
            if j.damping < 0:
                raise ModelError(f"joint {j.name!r} has negative damping",
                                 path=f"joints[{j.name}]")
        for l in self.links[1:]:
            if l.name not in children:
                raise ModelError(f"link {l.name!r} is not connected to the tree",
                                 path=f"links[{l.name}]")
        # acyclicity + topological order: parents must already be placed
        placed = {self.links[0].name}
        parent_of = {j.child_link: j.parent_link for j in self.joints}
        for l in self.links[1:]:
            if parent_of[l.name] not in placed:
                raise ModelError("links are not in topological order (or tree has "
                                 f"a cycle) near link {l.name!r}", path="links")
            placed.add(l.name)

        self._joint_idx = {j.name: i for i, j in enumerate(self.joints)}
        if len(self._joint_idx) != len(self.joints):
            raise ModelError("duplicate joint names", path="joints")
        self._muscle_idx = {m.name: i for i, m in enumerate(self.muscles)}
        if len(self._muscle_idx) != len(self.muscles):
            raise ModelError("duplicate muscle names", path="muscles")

        for m in self.muscles:
            if len(m.path.via_points) < 2:
                raise ModelError(f"muscle {m.name!r} needs at least 2 via points",
                                 path=f"muscles[{m.name}]")
            if m.path.rest_length <= 0:
                raise ModelError(f"muscle {m.name!r} rest length must be positive",
                                 path=f"muscles[{m.name}]")
            for link_name, _ in m.path.via_points:
                if link_name not in self._link_idx:
                    raise ModelError(f"muscle {m.name!r} via point references "
                                     f"unknown link {link_name!r}",
                                     path=f"muscles[{m.name}]")
            if not (m.f_max > 0 and m.l_opt > 0 and m.v_max > 0):
                raise ModelError(f"muscle {m.name!r} needs positive f_max, l_opt, "
                                 "v_max", path=f"muscles[{m.name}]")
            if not (m.tau_act > 0 and m.tau_deact > 0):
                raise ModelError(f"muscle {m.name!r} needs positive time constants",
                                 path=f"muscles[{m.name}]")
            if not 0.0 <= m.act <= 1.0:
                raise ModelError(f"muscle {m.name!r} activation outside [0, 1]",
                                 path=f"muscles[{m.name}]")
            for (la, pa), (lb, pb) in zip(m.path.via_points, m.path.via_points[1:]):
                if la == lb and tuple(pa) == tuple(pb):
                    warnings.warn(f"muscle {m.name!r} has coincident consecutive "
                                  "via points (zero-length segment)")

        roots = [s for s in self.sites if s.is_root]
        if self.sites and len(roots) != 1:
            raise ModelError("exactly one site must have is_root", path="sites")
        for s in self.sites:
            if s.link not in self._link_idx:
                raise ModelError(f"site {s.name!r} references unknown link "
                                 f"{s.link!r}", path=f"sites[{s.name}]")
        for link_name, _ in self.contact_points:
            if link_name not in self._link_idx:
                raise ModelError(f"contact point references unknown link "
                                 f"{link_name!r}", path="contact_points")

    def _compile(self):
        nl, nj = self.n_links, self.n_joints
        nd = self.n_dof
        rd = self.root_dofs
        self.parent_idx = np.full(nl, -1, dtype=np.intp)
        self.joint_of_link = np.full(nl, -1, dtype=np.intp)
        self.anchor_local = np.zeros((nl, 2))
        for ji, j in enumerate(self.joints):
            ci = self._link_idx[j.child_link]
            self.parent_idx[ci] = self._link_idx[j.parent_link]
            self.joint_of_link[ci] = ji
            self.anchor_local[ci] = j.axis_anchor

        # ancestor hinge mask and link-angle map phi = ang_map @ q
        self.ancestor = np.zeros((nl, nj))
        for li in range(1, nl):
            p = li
            while p > 0:
                self.ancestor[li, self.joint_of_link[p]] = 1.0
                p = self.parent_idx[p]
        self.ang_map = np.zeros((nl, nd))
        if self.root_free:
            self.ang_map[:, 2] = 1.0
        self.ang_map[:, rd:] = self.ancestor

        self.link_mass = np.array([l.mass for l in self.links], dtype=float)
        self.link_inertia = np.array([l.inertia for l in self.links], dtype=float)
        self.com_local = np.array([l.com for l in self.links], dtype=float)

        self.joint_lo = np.array([j.range_lo for j in self.joints], dtype=float)
        self.joint_hi = np.array([j.range_hi for j in self.joints], dtype=float)
        self.joint_damping = np.array([j.damping for j in self.joints], dtype=float)

        vp_link, vp_off = [], []
        seg_a, seg_b, seg_m = [], [], []
        for mi, m in enumerate(self.muscles):
            start = len(vp_link)
            for link_name, off in m.path.via_points:
                vp_link.append(self._link_idx[link_name])
                vp_off.append(tuple(off))
            for k in range(len(m.path.via_points) - 1):
                seg_a.append(start + k)
                seg_b.append(start + k + 1)
                seg_m.append(mi)
        self.vp_link = np.array(vp_link, dtype=np.intp)
        self.vp_off = np.array(vp_off, dtype=float).reshape(len(vp_link), 2)
        self.seg_a = np.array(seg_a, dtype=np.intp)
        self.seg_b = np.array(seg_b, dtype=np.intp)
        self.seg2mus = np.zeros((len(seg_a), self.n_muscles))
        for si, mi in enumerate(seg_m):
            self.seg2mus[si, mi] = 1.0

        self.mus_fmax = np.array([m.f_max for m in self.muscles], dtype=float)
        self.mus_lopt = np.array([m.l_opt for m in self.muscles], dtype=float)
        self.mus_vmax = np.array([m.v_max for m in self.muscles], dtype=float)
        self.mus_l0 = np.array([m.path.rest_length for m in self.muscles], dtype=float)
        self.mus_tau_act = np.array([m.tau_act for m in self.muscles], dtype=float)
        self.mus_tau_deact = np.array([m.tau_deact for m in self.muscles], dtype=float)

        self.site_link = np.array([self._link_idx[s.link] for s in self.sites],
                                  dtype=np.intp)
        self.site_off = np.array([s.offset for s in self.sites],
                                 dtype=float).reshape(self.n_sites, 2)
        self.root_site = next((i for i, s in enumerate(self.sites) if s.is_root), -1)

        if self.contact_points:
            self.cp_link = np.array([self._link_idx[n] for n, _ in self.contact_points],
                                    dtype=np.intp)
            self.cp_off = np.array([o for _, o in self.contact_points], dtype=float)
        else:
            self.cp_link = np.zeros(0, dtype=np.intp)
            self.cp_off = np.zeros((0, 2))

    # -- kinematics (batched over leading axis) -----------------------------

    def link_frames(self, Q):
        """World origin and angle of every link. Q: (B, n_dof)."""
        Q = np.asarray(Q, dtype=float)
        B = Q.shape[0]
        P = np.zeros((B, self.n_links, 2))
        PHI = Q @ self.ang_map.T
        if self.root_free:
            P[:, 0] = Q[:, :2]
        for li in range(1, self.n_links):
            p = self.parent_idx[li]
            c = np.cos(PHI[:, p])
            s = np.sin(PHI[:, p])
            ax, az = self.anchor_local[li]
            P[:, li, 0] = P[:, p, 0] + c * ax - s * az
            P[:, li, 1] = P[:, p, 1] + s * ax + c * az
        return P, PHI

    def link_rates(self, Q, Qd, P=None, PHI=None):
        """Link origin velocities and angular rates."""
        Qd = np.asarray(Qd, dtype=float)
        if P is None:
            P, PHI = self.link_frames(Q)
        B = Qd.shape[0]
        W = Qd @ self.ang_map.T
        V = np.zeros((B, self.n_links, 2))
        if self.root_free:
            V[:, 0] = Qd[:, :2]
        for li in range(1, self.n_links):
            p = self.parent_idx[li]
            r = P[:, li] - P[:, p]
            V[:, li] = V[:, p] + W[:, p, None] * _perp(r)
        return V, W

    def points_world(self, P, PHI, link_idx, offs):
        """Map per-point local offsets to world. Returns (B, n_pts, 2)."""
        c = np.cos(PHI[:, link_idx])
        s = np.sin(PHI[:, link_idx])
        x = offs[:, 0]
        z = offs[:, 1]
        out = np.empty((P.shape[0], len(link_idx), 2))
        out[..., 0] = P[:, link_idx, 0] + c * x - s * z
        out[..., 1] = P[:, link_idx, 1] + s * x + c * z
        return out

    def point_velocities(self, P, V, W, link_idx, pts):
        """World velocity of points rigidly attached to links."""
        r = pts - P[:, link_idx]
        return V[:, link_idx] + W[:, link_idx, None] * _perp(r)

    def tendon_lengths_batch(self, Q):
        P, PHI = self.link_frames(Q)
        pts = self.points_world(P, PHI, self.vp_link, self.vp_off)
        d = pts[:, self.seg_b] - pts[:, self.seg_a]
        seg_len = np.hypot(d[..., 0], d[..., 1])
        return seg_len @ self.seg2mus

    def moment_arm_matrix(self, Q, delta=MOMENT_ARM_DELTA):
        """Signed moment arms r[j, m] = -dL_m/dtheta_j via central differences.

        Returns (B, n_muscles, n_joints). Positive arm means the muscle
        shortens under positive joint rotation and contributes positive torque.
        """
        Q = np.asarray(Q, dtype=float)
        B = Q.shape[0]
        nj = self.n_joints
        if nj == 0:
            return np.zeros((B, self.n_muscles, 0))
        rd = self.root_dofs
        stack = np.repeat(Q[:, None, :], 2 * nj, axis=1)
        for j in range(nj):
            stack[:, 2 * j, rd + j] += delta
            stack[:, 2 * j + 1, rd + j] -= delta
        L = self.tendon_lengths_batch(stack.reshape(B * 2 * nj, self.n_dof))
        L = L.reshape(B, nj, 2, self.n_muscles)
        dL = (L[:, :, 0] - L[:, :, 1]) / (2.0 * delta)
        return -np.swapaxes(dL, 1, 2)

    def site_frames(self, Q, Qd=None):
        """Site positions, angles and (when Qd given) velocities."""
        Q = np.asarray(Q, dtype=float)
        P, PHI = self.link_frames(Q)
        pos = self.points_world(P, PHI, self.site_link, self.site_off)
        rot = PHI[:, self.site_link]
        if Qd is None:
            return pos, rot
        V, W = self.link_rates(Q, Qd, P, PHI)
        linvel = self.point_velocities(P, V, W, self.site_link, pos)
        angvel = W[:, self.site_link]
        return pos, rot, linvel, angvel


# -- muscle-level operations -------------------------------------------------

def active_force_length(l_norm):
    l_norm = np.asarray(l_norm, dtype=float)
    return np.maximum(0.0, 1.0 - ((l_norm - 1.0) / FL_WIDTH) ** 2)


def force_velocity(v_norm):
    v_norm = np.asarray(v_norm, dtype=float)
    return np.clip(1.0 + FV_SLOPE * v_norm, 0.0, FV_CAP)


def passive_force_length(l_norm):
    l_norm = np.asarray(l_norm, dtype=float)
    return np.where(l_norm <= 1.0, 0.0,
                    np.minimum(((l_norm - 1.0) / FP_SHAPE) ** 2, FP_CAP))


def activation_step_vec(act, ctrl, dt, tau_act, tau_deact):
    """Exponential update of Eq.-style first-order activation dynamics.

    tau is frozen at the step start, which makes the update exact for
    constant tau and unconditionally stable at any dt. The ctrl == act
    boundary belongs to the deactivation branch.
    """
    ctrl = np.clip(ctrl, 0.0, 1.0)
    act = np.asarray(act, dtype=float)
    gain = 0.5 + 1.5 * act
    tau = np.where(ctrl - act > 0.0, tau_act * gain, tau_deact / gain)
    new = ctrl + (act - ctrl) * np.exp(-dt / tau)
    return np.clip(new, 0.0, 1.0)


def activation_step(muscle, ctrl, dt):
    """Single-muscle activation update; returns the new activation."""
    if not np.isfinite(ctrl):
        raise ValueError(f"non-finite ctrl {ctrl!r}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return float(activation_step_vec(muscle.act, float(ctrl), dt,
                                     muscle.tau_act, muscle.tau_deact))


def muscle_force_vec(act, l, l_dot, f_max, l_opt, v_max):
    """Hill-type tension: f_max * (act * fL * fV + fP), always >= 0."""
    l_norm = np.asarray(l, dtype=float) / l_opt
    v_norm = np.asarray(l_dot, dtype=float) / (l_opt * v_max)
    return f_max * (act * active_force_length(l_norm) * force_velocity(v_norm)
                    + passive_force_length(l_norm))


def muscle_force(muscle, l, l_dot):
    if l <= 0:
        raise ValueError("MTC length must be positive")
    return float(muscle_force_vec(muscle.act, l, l_dot, muscle.f_max,
                                  muscle.l_opt, muscle.v_max))


def tendon_length(model, q):
    """MTC length of every muscle at configuration q: sum of straight segments."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite joint vector")
    return model.tendon_lengths_batch(q[None])[0]


def moment_arm(model, q, muscle, joint):
    """Signed moment arm of one muscle about one joint, -dL/dtheta."""
    mi = model.muscle_index(muscle)
    ji = model.joint_index(joint)
    q = np.asarray(q, dtype=float)
    R = model.moment_arm_matrix(q[None])
    return float(R[0, mi, ji])


def muscle_torques(model, q, q_dot, activations):
    """Generalized torques tau_j = sum_m r[j,m] * F_m; root dofs receive 0."""
    q = np.asarray(q, dtype=float)
    q_dot = np.asarray(q_dot, dtype=float)
    activations = np.asarray(activations, dtype=float)
    if q.shape != (model.n_dof,) or q_dot.shape != (model.n_dof,):
        raise ValueError("dimension mismatch with model dofs")
    if activations.shape != (model.n_muscles,):
        raise ValueError("dimension mismatch with model muscles")
    R = model.moment_arm_matrix(q[None])[0]
    L = model.tendon_lengths_batch(q[None])[0]
    l_dot = -(R @ q_dot[model.hinge_slice()])
    F = muscle_force_vec(activations, L, l_dot, model.mus_fmax, model.mus_lopt,
                         model.mus_vmax)
    tau = np.zeros(model.n_dof)
    tau[model.hinge_slice()] = F @ R
    return tau


# -- loading -----------------------------------------------------------------

def _find_line(text, needle):
    for i, line in enumerate(text.splitlines(), start=1):
        if re.search(re.escape(needle), line):
            return i
    return None


def model_from_dict(doc, name="model"):
    links = [LinkSpec(l["name"], float(l["mass"]), float(l["inertia"]),
                      float(l["length"]), tuple(l["com"])) for l in doc["links"]]
    joints = [JointSpec(j["name"], j["parent_link"], j["child_link"],
                        tuple(j["axis_anchor"]), float(j["range_lo"]),
                        float(j["range_hi"]), float(j.get("damping", 0.0)))
              for j in doc.get("joints", [])]
    muscles = []
    for m in doc.get("muscles", []):
        path = TendonPath(tuple((vp[0], tuple(vp[1])) for vp in m["via_points"]),
                          float(m["rest_length"]))
        muscles.append(MuscleActuator(
            m["name"], path, float(m["f_max"]), float(m["l_opt"]),
            float(m.get("v_max", 10.0)), float(m.get("tau_act", 0.01)),
            float(m.get("tau_deact", 0.04))))
    sites = [MimicSite(s["name"], s["link"], tuple(s["offset"]),
                       bool(s.get("is_root", False))) for s in doc.get("sites", [])]
    contact = [(cp[0], tuple(cp[1])) for cp in doc.get("contact_points", [])]
    return MskModel(doc.get("name", name), links, joints, muscles, sites,
                    bool(doc["root_free"]), float(doc["gravity"]), contact)


def load_model(path):
    """Load and validate a model JSON file; errors carry a location anchor."""
    with open(path, "r") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON in {path}: {exc.msg}", path=str(path),
                         line=exc.lineno) from exc
    try:
        return model_from_dict(doc, name=str(path))
    except ModelError as exc:
        # anchor the structural error to a line in the source file when possible
        m = re.search(r"'([^']+)'", str(exc))
        line = _find_line(text, m.group(1)) if m else None
        raise ModelError(str(exc).split(" at ")[0],
                         path=f"{path}:{exc.path}", line=line) from None


def model_to_dict(model):
    return {
        "name": model.name,
        "root_free": model.root_free,
        "gravity": model.gravity,
        "links": [{"name": l.name, "mass": l.mass, "inertia": l.inertia,
                   "length": l.length, "com": list(l.com)} for l in model.links],
        "joints": [{"name": j.name, "parent_link": j.parent_link,
                    "child_link": j.child_link, "axis_anchor": list(j.axis_anchor),
                    "range_lo": j.range_lo, "range_hi": j.range_hi,
                    "damping": j.damping} for j in model.joints],
        "muscles": [{"name": m.name,
                     "via_points": [[ln, list(off)] for ln, off in m.path.via_points],
                     "rest_length": m.path.rest_length, "f_max": m.f_max,
                     "l_opt": m.l_opt, "v_max": m.v_max, "tau_act": m.tau_act,
                     "tau_deact": m.tau_deact} for m in model.muscles],
        "sites": [{"name": s.name, "link": s.link, "offset": list(s.offset),
                   "is_root": s.is_root} for s in model.sites],
        "contact_points": [[ln, list(off)] for ln, off in model.contact_points],
    }


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")
