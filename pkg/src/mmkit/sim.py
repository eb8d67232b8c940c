"""Forward dynamics of planar articulated models with penalty ground contact."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import activation_step_vec, muscle_force_vec


@dataclass
class ContactSpec:
    """Regularized Coulomb point contact against the z = 0 plane."""
    k_n: float = 2e4
    c_n: float = 200.0
    mu: float = 1.0
    v_slip: float = 0.01

    def __post_init__(self):
        if self.k_n < 0 or self.c_n < 0 or self.mu < 0:
            raise ValueError("contact parameters must be non-negative")
        if self.v_slip <= 0:
            raise ValueError("v_slip must be positive")


@dataclass
class SimOptions:
    substep_dt: float = 5e-4
    contact: ContactSpec = field(default_factory=ContactSpec)
    # one-sided spring-damper keeping hinges inside their prescribed ranges
    limit_stiffness: float = 400.0
    limit_damping: float = 4.0


@dataclass
class SimState:
    q: np.ndarray
    q_dot: np.ndarray
    activations: np.ndarray
    time: float = 0.0

    def copy(self):
        return SimState(self.q.copy(), self.q_dot.copy(),
                        self.activations.copy(), self.time)


@dataclass
class StepReport:
    grf: np.ndarray          # (2,) substep-mean total ground force, (x, z)
    touch: np.ndarray        # (n_probes,) substep-mean normal force magnitude
    terminated_nan: bool = False


def default_state(model):
    return SimState(np.zeros(model.n_dof), np.zeros(model.n_dof),
                    np.zeros(model.n_muscles), 0.0)


class BatchSim:
    """Vectorized semi-implicit Euler stepper over a batch of environments.

    All arrays carry a leading batch axis; the single-state `step` below is a
    batch-of-one wrapper. Tendon rates and moment arms use the exact planar
    identity dL/dtheta_j = u . perp(p - anchor_j) restricted to joints spanned
    by each segment (shared ancestors cancel), so no via-point Jacobians are
    ever materialized.
    """

    def __init__(self, model, options: Optional[SimOptions] = None):
        self.model = model
        self.options = options or SimOptions()
        m = model
        self.child_of_joint = np.array(
            [m.link_index(j.child_link) for j in m.joints], dtype=np.intp)
        self.M_ang = m.ang_map.T @ (m.link_inertia[:, None] * m.ang_map)
        nl = m.n_links
        # Jacobian point set: [com | contact | link origins]
        self.pt_link = np.concatenate([np.arange(nl), m.cp_link, np.arange(nl)])
        self.pt_off = np.concatenate(
            [m.com_local, m.cp_off, np.zeros((nl, 2))], axis=0)
        self.s_com = slice(0, nl)
        self.s_cp = slice(nl, nl + len(m.cp_link))
        self.s_org = slice(nl + len(m.cp_link), len(self.pt_link))
        self.anc_pts = m.ancestor[self.pt_link]
        # per-segment exclusive ancestor masks for tendon derivatives
        if m.n_joints and len(m.seg_a):
            anc_a = m.ancestor[m.vp_link[m.seg_a]]
            anc_b = m.ancestor[m.vp_link[m.seg_b]]
            self.seg_mask_b = anc_b * (1.0 - anc_a)
            self.seg_mask_a = anc_a * (1.0 - anc_b)
        else:
            self.seg_mask_b = np.zeros((len(m.seg_a), m.n_joints))
            self.seg_mask_a = np.zeros((len(m.seg_a), m.n_joints))

    def point_jacobians(self, P, pts, anc):
        """Linear-velocity Jacobians of world points: (B, n_pts, 2, nd)."""
        m = self.model
        B, n_pts = pts.shape[:2]
        nj = m.n_joints
        rd = m.root_dofs
        J = np.zeros((B, n_pts, 2, m.n_dof))
        if m.root_free:
            J[..., 0, 0] = 1.0
            J[..., 1, 1] = 1.0
            r = pts - P[:, None, 0]
            J[..., 0, 2] = -r[..., 1]
            J[..., 1, 2] = r[..., 0]
        if nj:
            anchors = P[:, self.child_of_joint]
            rx = pts[:, :, None, 0] - anchors[:, None, :, 0]
            rz = pts[:, :, None, 1] - anchors[:, None, :, 1]
            J[..., 0, rd:] = -rz * anc
            J[..., 1, rd:] = rx * anc
        return J

    def tendon_state(self, Q, Qd=None, frames=None):
        """Lengths, moment arms (B, n_mus, nj) and, with Qd, lengthening rates."""
        m = self.model
        P, PHI = m.link_frames(Q) if frames is None else frames
        vpts = m.points_world(P, PHI, m.vp_link, m.vp_off)
        pa = vpts[:, m.seg_a]
        pb = vpts[:, m.seg_b]
        dx = pb[..., 0] - pa[..., 0]
        dz = pb[..., 1] - pa[..., 1]
        slen = np.hypot(dx, dz)
        inv = 1.0 / np.maximum(slen, 1e-12)
        ux = dx * inv
        uz = dz * inv
        L = slen @ m.seg2mus
        if m.n_joints:
            anchors = P[:, self.child_of_joint]
            ax = anchors[:, None, :, 0]
            az = anchors[:, None, :, 1]
            # u . perp(p - anchor) per segment end, exclusive joints only
            sb = uz[..., None] * (pb[..., None, 0] - ax) \
                - ux[..., None] * (pb[..., None, 1] - az)
            sa = uz[..., None] * (pa[..., None, 0] - ax) \
                - ux[..., None] * (pa[..., None, 1] - az)
            dLdth_seg = self.seg_mask_b * sb - self.seg_mask_a * sa
            dLdth = np.matmul(m.seg2mus.T[None], dLdth_seg)   # (B, n_mus, nj)
        else:
            dLdth = np.zeros((Q.shape[0], m.n_muscles, 0))
        R = -dLdth
        if Qd is None:
            return L, R
        Ldot = (dLdth @ Qd[:, m.hinge_slice(), None])[..., 0]
        return L, Ldot, R

    def substep(self, Q, Qd, act, ctrl, dt, tau_ext=None):
        m = self.model
        opt = self.options
        B = Q.shape[0]
        nd = m.n_dof
        hs = m.hinge_slice()

        act = activation_step_vec(act, ctrl, dt, m.mus_tau_act, m.mus_tau_deact)

        P, PHI = m.link_frames(Q)
        pts = m.points_world(P, PHI, self.pt_link, self.pt_off)
        J = self.point_jacobians(P, pts, self.anc_pts)
        Jf = J.reshape(B, -1, nd)
        vel = (Jf @ Qd[:, :, None]).reshape(B, -1, 2)

        tau = np.zeros_like(Q) if tau_ext is None else tau_ext.copy()
        tau_h = tau[:, hs]
        if m.n_muscles:
            L, Ldot, R = self.tendon_state(Q, Qd, frames=(P, PHI))
            F = muscle_force_vec(act, L, Ldot, m.mus_fmax, m.mus_lopt, m.mus_vmax)
            tau_h += (F[:, None, :] @ R)[:, 0]

        qd_h = Qd[:, hs]
        q_h = Q[:, hs]
        tau_h -= m.joint_damping * qd_h
        hi_exc = np.maximum(0.0, q_h - m.joint_hi)
        lo_exc = np.maximum(0.0, m.joint_lo - q_h)
        tau_h -= opt.limit_stiffness * hi_exc + opt.limit_damping * qd_h * (hi_exc > 0)
        tau_h += opt.limit_stiffness * lo_exc - opt.limit_damping * qd_h * (lo_exc > 0)

        Jc = J[:, self.s_com]
        Jw = Jc * m.link_mass[None, :, None, None]
        tau -= m.gravity * Jw[:, :, 1, :].sum(axis=1)

        # velocity-product bias: com acceleration with qdd = 0
        v_com = vel[:, self.s_com]
        v_org = vel[:, self.s_org]
        if m.n_joints:
            v_anchor = v_org[:, self.child_of_joint]
            dvx = v_com[:, :, None, 0] - v_anchor[:, None, :, 0]
            dvz = v_com[:, :, None, 1] - v_anchor[:, None, :, 1]
            w = qd_h[:, None, :] * m.ancestor[None]
            ax = -(w * dvz).sum(-1)
            az = (w * dvx).sum(-1)
        else:
            ax = np.zeros((B, m.n_links))
            az = np.zeros((B, m.n_links))
        if m.root_free:
            dv = v_com - v_org[:, :1]
            ax += Qd[:, 2, None] * -dv[..., 1]
            az += Qd[:, 2, None] * dv[..., 0]
        a_bias = np.stack([ax, az], axis=-1)
        Jwf = Jw.reshape(B, -1, nd)
        tau -= (a_bias.reshape(B, 1, -1) @ Jwf)[:, 0]

        n_cp = m.cp_link.size
        if n_cp:
            cpts = pts[:, self.s_cp]
            cvel = vel[:, self.s_cp]
            pen = -cpts[..., 1]
            c = opt.contact
            fn = np.where(pen > 0.0,
                          np.maximum(0.0, c.k_n * pen - c.c_n * cvel[..., 1]), 0.0)
            ft = -c.mu * fn * np.tanh(cvel[..., 0] / c.v_slip)
            cf = np.stack([ft, fn], axis=-1)
            tau += (cf.reshape(B, 1, -1) @ J[:, self.s_cp].reshape(B, -1, nd))[:, 0]
            grf = cf.sum(axis=1)
            touch = fn
        else:
            grf = np.zeros((B, 2))
            touch = np.zeros((B, 0))

        M = np.matmul(Jwf.swapaxes(1, 2), Jc.reshape(B, -1, nd)) + self.M_ang
        qdd = np.linalg.solve(M, tau[..., None])[..., 0]
        Qd = Qd + dt * qdd
        Q = Q + dt * Qd
        return Q, Qd, act, grf, touch

    def step(self, Q, Qd, act, ctrl, n_substeps):
        """Zero-order-hold control across substeps; returns substep-mean forces."""
        if n_substeps < 1:
            raise ValueError("n_substeps must be >= 1")
        dt = self.options.substep_dt
        grf_acc = np.zeros((Q.shape[0], 2))
        touch_acc = np.zeros((Q.shape[0], self.model.cp_link.size))
        for _ in range(n_substeps):
            Q, Qd, act, grf, touch = self.substep(Q, Qd, act, ctrl, dt)
            grf_acc += grf
            touch_acc += touch
        bad = ~(np.isfinite(Q).all(axis=1) & np.isfinite(Qd).all(axis=1))
        return Q, Qd, act, grf_acc / n_substeps, touch_acc / n_substeps, bad


def step(model, state, ctrl, n_substeps, options=None):
    """Advance one control step; on numerical blow-up the state is frozen."""
    ctrl = np.asarray(ctrl, dtype=float)
    if ctrl.shape != (model.n_muscles,):
        raise ValueError("ctrl length must equal muscle count")
    engine = BatchSim(model, options)
    Q, Qd, act, grf, touch, bad = engine.step(
        state.q[None].copy(), state.q_dot[None].copy(),
        state.activations[None].copy(), ctrl[None], n_substeps)
    if bad[0]:
        report = StepReport(np.zeros(2), np.zeros(model.cp_link.size), True)
        return state.copy(), report
    new = SimState(Q[0], Qd[0], act[0],
                   state.time + n_substeps * engine.options.substep_dt)
    return new, StepReport(grf[0], touch[0], False)


def reset_to_frame(model, clip, frame_index):
    """Reference-state initialization: copy (q, q_dot) from a clip frame."""
    if not 0 <= frame_index < clip.n_frames:
        raise IndexError(f"frame {frame_index} outside clip of {clip.n_frames}")
    return SimState(clip.q[frame_index].copy(), clip.q_dot[frame_index].copy(),
                    np.zeros(model.n_muscles), frame_index / clip.rate)


def site_kinematics(model, state):
    """World-frame site positions, orientations and velocities."""
    pos, rot, linvel, angvel = model.site_frames(state.q[None], state.q_dot[None])
    return pos[0], rot[0], linvel[0], angvel[0]
