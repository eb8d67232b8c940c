"""Bundled planar models and access to packaged asset files."""

from __future__ import annotations

import importlib.resources

import numpy as np

from .model import (JointSpec, LinkSpec, MimicSite, MskModel, MuscleActuator,
                    TendonPath, load_model)


def _muscle(name, via, f_max, model_probe=None):
    return {"name": name, "via": via, "f_max": f_max}


def _calibrate_muscles(model_args, muscle_defs, cal_lo=None, cal_hi=None,
                       rng_seed=0):
    """Set l_opt to the midpoint of each muscle's length range over a nominal
    motion box and rest_length to the length at the zero pose. Keeping the
    calibration box inside the joint limits pushes passive stretch forces out
    of the everyday motion range."""
    probe_muscles = [
        MuscleActuator(d["name"], TendonPath(tuple(d["via"]), 1.0), d["f_max"], 1.0)
        for d in muscle_defs
    ]
    probe = MskModel(muscles=probe_muscles, **model_args)
    lo = probe.joint_lo if cal_lo is None else np.asarray(cal_lo, dtype=float)
    hi = probe.joint_hi if cal_hi is None else np.asarray(cal_hi, dtype=float)
    rng = np.random.default_rng(rng_seed)
    n = 512
    Q = np.zeros((n, probe.n_dof))
    Q[:, probe.hinge_slice()] = rng.uniform(lo, hi, size=(n, probe.n_joints))
    Q[0, probe.hinge_slice()] = 0.0
    L = probe.tendon_lengths_batch(Q)
    rest = L[0]
    # keep the zero pose on or below optimal length so it is passively slack
    l_opt = np.maximum(0.5 * (L.min(axis=0) + L.max(axis=0)), 1.02 * rest)
    muscles = [
        MuscleActuator(d["name"], TendonPath(tuple(d["via"]), float(rest[i])),
                       d["f_max"], float(l_opt[i]))
        for i, d in enumerate(muscle_defs)
    ]
    return MskModel(muscles=muscles, **model_args)


def make_arm2():
    """Fixed-base 2-link arm: shoulder + elbow, 6 muscles, 3 sites."""
    links = [
        LinkSpec("base", 0.5, 0.01, 0.0, (0.0, 0.0)),
        LinkSpec("upper", 1.8, 0.0135, 0.30, (0.15, 0.0)),
        LinkSpec("fore", 1.2, 0.0079, 0.28, (0.14, 0.0)),
    ]
    joints = [
        JointSpec("shoulder", "base", "upper", (0.0, 0.0), -2.4, 1.2, 0.08),
        JointSpec("elbow", "upper", "fore", (0.30, 0.0), 0.0, 2.6, 0.08),
    ]
    muscle_defs = [
        {"name": "sh_flex", "via": (("base", (-0.02, 0.04)), ("upper", (0.10, 0.035))),
         "f_max": 900.0},
        {"name": "sh_ext", "via": (("base", (-0.02, -0.04)), ("upper", (0.10, -0.035))),
         "f_max": 900.0},
        {"name": "el_flex", "via": (("upper", (0.17, 0.035)), ("fore", (0.10, 0.030))),
         "f_max": 500.0},
        {"name": "el_ext", "via": (("upper", (0.17, -0.035)), ("fore", (0.10, -0.030))),
         "f_max": 500.0},
        {"name": "bi_flex", "via": (("base", (-0.02, 0.05)), ("upper", (0.15, 0.045)),
                                    ("fore", (0.08, 0.035))), "f_max": 400.0},
        {"name": "bi_ext", "via": (("base", (-0.02, -0.05)), ("upper", (0.15, -0.045)),
                                   ("fore", (0.08, -0.035))), "f_max": 400.0},
    ]
    sites = [
        MimicSite("anchor", "base", (0.0, 0.0), is_root=True),
        MimicSite("elbow_pt", "upper", (0.30, 0.0)),
        MimicSite("hand", "fore", (0.28, 0.0)),
    ]
    args = dict(name="arm2", links=links, joints=joints, sites=sites,
                root_free=False, gravity=9.81, contact_points=())
    return _calibrate_muscles(args, muscle_defs)


def make_walker7():
    """Free-root planar biped: pelvis + 2x(thigh, shank, foot), 14 muscles.

    Leg segments extend along local -z so the zero pose is standing upright.
    Positive hip angle swings the leg forward; knee flexion is negative.
    """
    links = [
        LinkSpec("pelvis", 40.0, 2.0, 0.40, (0.0, 0.25)),
        LinkSpec("thigh_l", 7.0, 0.103, 0.42, (0.0, -0.21)),
        LinkSpec("shank_l", 3.5, 0.054, 0.43, (0.0, -0.20)),
        LinkSpec("foot_l", 1.0, 0.0042, 0.22, (0.05, -0.03)),
        LinkSpec("thigh_r", 7.0, 0.103, 0.42, (0.0, -0.21)),
        LinkSpec("shank_r", 3.5, 0.054, 0.43, (0.0, -0.20)),
        LinkSpec("foot_r", 1.0, 0.0042, 0.22, (0.05, -0.03)),
    ]

    def leg_joints(side):
        return [
            JointSpec(f"hip_{side}", "pelvis", f"thigh_{side}", (0.0, -0.10),
                      -1.2, 1.2, 1.0),
            JointSpec(f"knee_{side}", f"thigh_{side}", f"shank_{side}", (0.0, -0.42),
                      -2.3, 0.02, 0.8),
            JointSpec(f"ankle_{side}", f"shank_{side}", f"foot_{side}", (0.0, -0.43),
                      -0.9, 0.9, 0.5),
        ]

    joints = leg_joints("l") + leg_joints("r")

    def leg_muscles(side):
        t, s, f = f"thigh_{side}", f"shank_{side}", f"foot_{side}"
        return [
            {"name": f"hfl_{side}", "via": (("pelvis", (0.08, -0.06)), (t, (0.035, -0.15))),
             "f_max": 2000.0},
            {"name": f"glu_{side}", "via": (("pelvis", (-0.08, -0.06)), (t, (-0.035, -0.15))),
             "f_max": 1500.0},
            {"name": f"ham_{side}", "via": (("pelvis", (-0.07, -0.08)), (t, (-0.035, -0.30)),
                                            (s, (-0.030, -0.06))), "f_max": 3000.0},
            {"name": f"vas_{side}", "via": ((t, (0.040, -0.22)), (t, (0.048, -0.40)),
                                            (s, (0.035, -0.05))), "f_max": 6000.0},
            {"name": f"gas_{side}", "via": ((t, (-0.030, -0.35)), (s, (-0.032, -0.20)),
                                            (f, (-0.050, -0.040))), "f_max": 1500.0},
            {"name": f"sol_{side}", "via": ((s, (-0.028, -0.15)), (f, (-0.050, -0.040))),
             "f_max": 4000.0},
            {"name": f"tib_{side}", "via": ((s, (0.030, -0.15)), (f, (0.060, -0.045))),
             "f_max": 800.0},
        ]

    muscle_defs = leg_muscles("l") + leg_muscles("r")

    sites = [MimicSite("pelvis_c", "pelvis", (0.0, 0.0), is_root=True)]
    for side in ("l", "r"):
        sites += [
            MimicSite(f"knee_{side}_pt", f"thigh_{side}", (0.0, -0.42)),
            MimicSite(f"ankle_{side}_pt", f"shank_{side}", (0.0, -0.43)),
            MimicSite(f"heel_{side}_pt", f"foot_{side}", (-0.06, -0.06)),
            MimicSite(f"toe_{side}_pt", f"foot_{side}", (0.16, -0.06)),
        ]

    contact = [(f"foot_{side}", off) for side in ("l", "r")
               for off in ((-0.06, -0.06), (0.16, -0.06))]

    args = dict(name="walker7", links=links, joints=joints, sites=sites,
                root_free=True, gravity=9.81, contact_points=contact)
    gait_lo = [-0.7, -1.4, -0.5] * 2
    gait_hi = [0.7, 0.02, 0.5] * 2
    return _calibrate_muscles(args, muscle_defs, cal_lo=gait_lo, cal_hi=gait_hi)


_BUILDERS = {"arm2": make_arm2, "walker7": make_walker7}


def asset_path(filename):
    return importlib.resources.files("mmkit").joinpath("assets", filename)


def load_bundled(name):
    """Load a bundled model by name from the packaged JSON file."""
    if name not in _BUILDERS:
        raise KeyError(f"no bundled model {name!r}; have {sorted(_BUILDERS)}")
    path = asset_path(f"{name}.model.json")
    if path.is_file():
        return load_model(str(path))
    return _BUILDERS[name]()


def walker_standing_height():
    """Root z at which the walker's flat feet touch z = 0 in the zero pose."""
    return 0.10 + 0.42 + 0.43 + 0.06
