"""Retargeting-quality metrics: joint limits, penetration, floating, tendon jumps."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import SCHEMA_VERSION
from .clips import min_contact_height, resample


@dataclass
class TendonJumpConfig:
    alpha: float = 0.01          # EMA smoothing coefficient
    gamma_amp: float = 10.0      # relative amplification factor
    dl_min_rel: float = 1e-3     # minimum relative change floor
    eps: float = 1e-9            # numerical floor for the rest length

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.gamma_amp <= 1.0:
            raise ValueError("gamma_amp must exceed 1")
        if self.dl_min_rel <= 0.0:
            raise ValueError("dl_min_rel must be positive")


@dataclass
class AuditReport:
    p_joint: float        # joint-limit violation rate, %
    p_pen: float          # penetration prevalence, %
    d_pen_max: float      # max penetration depth, m
    h_float_max: float    # max floating height, m
    dl_tj_max: float      # max relative tendon jump, dimensionless
    tj_detected: bool
    rmse: Optional[float]  # m, only when a reference clip was supplied
    t_frame: float        # audit wall-clock seconds per frame
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @staticmethod
    def from_json(text):
        doc = json.loads(text)
        doc.pop("schema_version", None)
        return AuditReport(**doc, schema_version=SCHEMA_VERSION)


def joint_limit_violation_rate(clip, model, tol=1e-5):
    """Percentage of frames where any joint exceeds its range beyond tol.

    The exceedance must be strictly beyond the tolerance, so a frame sitting
    exactly at lo - tol or hi + tol does not count.
    """
    qh = clip.q[:, model.hinge_slice()]
    over = qh > model.joint_hi + tol
    under = qh < model.joint_lo - tol
    violating = (over | under).any(axis=1)
    return 100.0 * violating.mean()


def penetration_metrics(clip, model, depth_thresh=1e-3):
    """(prevalence %, severity m) of ground penetration over the clip."""
    if not model.root_free or not len(model.contact_points):
        warnings.warn("penetration metrics are zero for fixed-base models")
        return 0.0, 0.0
    depth = np.maximum(0.0, -min_contact_height(clip, model))
    prevalence = 100.0 * (depth > depth_thresh).mean()
    return float(prevalence), float(depth.max())


def floating_height(clip, model):
    """Max over frames of the lowest contact-point height, clamped at 0."""
    if not model.root_free or not len(model.contact_points):
        return 0.0
    return float(np.maximum(0.0, min_contact_height(clip, model)).max())


def tendon_jump_detect(lengths, rest_lengths, cfg=None):
    """Detect abrupt frame-to-frame relative tendon-length changes.

    lengths: (T, n_muscles); rest_lengths: (n_muscles,). For each step the
    relative change is tested against max(gamma * EMA, dl_min_rel) BEFORE the
    EMA absorbs the current sample, so a genuine jump cannot mask itself. The
    EMA is seeded with the first observed change, which is never flagged.

    Returns (dl_tj_max, tj_detected, jump_frames).
    """
    cfg = cfg or TendonJumpConfig()
    lengths = np.asarray(lengths, dtype=float)
    if lengths.ndim == 1:
        lengths = lengths[:, None]
    rest = np.broadcast_to(np.asarray(rest_lengths, dtype=float),
                           (lengths.shape[1],))
    if lengths.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if np.any(rest <= 0):
        raise ValueError("rest lengths must be positive")
    dl_rel = np.abs(np.diff(lengths, axis=0)) / np.maximum(rest, cfg.eps)
    ema = dl_rel[0].copy()
    dl_tj_max = 0.0
    jump_frames = []
    for t in range(1, dl_rel.shape[0]):
        sample = dl_rel[t]
        threshold = np.maximum(cfg.gamma_amp * ema, cfg.dl_min_rel)
        flagged = sample > threshold
        if flagged.any():
            jump_frames.append(t + 1)   # index of the frame ending the step
            dl_tj_max = max(dl_tj_max, float(sample[flagged].max()))
        ema = (1.0 - cfg.alpha) * ema + cfg.alpha * sample
    return dl_tj_max, bool(jump_frames), jump_frames


def clip_tendon_lengths(clip, model):
    return model.tendon_lengths_batch(clip.q)


def clip_rmse(clip, reference):
    """Root-mean-square site-position error between two aligned clips."""
    if clip.n_frames != reference.n_frames or clip.n_sites != reference.n_sites:
        raise ValueError("clips must have equal frame counts and site sets; "
                         "resample first")
    d = clip.site_pos - reference.site_pos
    return float(np.sqrt((d ** 2).sum(axis=-1).mean()))


def audit_clip(clip, model, reference=None, cfg=None, tol=1e-5,
               depth_thresh=1e-3):
    """Run every retargeting metric over one clip and time the pass."""
    t0 = time.perf_counter()
    p_joint = joint_limit_violation_rate(clip, model, tol)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p_pen, d_pen = penetration_metrics(clip, model, depth_thresh)
        h_float = floating_height(clip, model)
    if model.n_muscles:
        lengths = clip_tendon_lengths(clip, model)
        dl_tj_max, tj_detected, _ = tendon_jump_detect(lengths, model.mus_l0, cfg)
    else:
        dl_tj_max, tj_detected = 0.0, False
    rmse = None
    if reference is not None:
        ref = reference
        if ref.rate != clip.rate or ref.n_frames != clip.n_frames:
            ref = resample(ref, clip.rate, model)
            n = min(ref.n_frames, clip.n_frames)
            rmse_clip = clip
            if ref.n_frames != clip.n_frames:
                d = clip.site_pos[:n] - ref.site_pos[:n]
                rmse = float(np.sqrt((d ** 2).sum(axis=-1).mean()))
        if rmse is None:
            rmse = clip_rmse(clip, ref)
    elapsed = time.perf_counter() - t0
    return AuditReport(p_joint=float(p_joint), p_pen=float(p_pen),
                       d_pen_max=float(d_pen), h_float_max=float(h_float),
                       dl_tj_max=float(dl_tj_max), tj_detected=tj_detected,
                       rmse=rmse, t_frame=elapsed / clip.n_frames)


def average_reports(reports):
    """Arithmetic mean of per-clip reports (batch mode), in sorted-name order."""
    if not reports:
        raise ValueError("no reports to average")
    def mean(field, allow_none=False):
        vals = [getattr(r, field) for r in reports]
        if allow_none:
            vals = [v for v in vals if v is not None]
            if not vals:
                return None
        return float(np.mean(vals))
    return AuditReport(
        p_joint=mean("p_joint"), p_pen=mean("p_pen"),
        d_pen_max=mean("d_pen_max"), h_float_max=mean("h_float_max"),
        dl_tj_max=mean("dl_tj_max"),
        tj_detected=any(r.tj_detected for r in reports),
        rmse=mean("rmse", allow_none=True), t_frame=mean("t_frame"))
