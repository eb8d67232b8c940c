"""Regenerate the bundled asset files (models, demo clips, training configs)."""

import json
from pathlib import Path

from mmkit.assets import make_arm2, make_walker7
from mmkit.clips import make_gait_clip, save_clip, synth_clip
from mmkit.model import save_model

OUT = Path(__file__).resolve().parents[1] / "src" / "mmkit" / "assets"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    arm = make_arm2()
    walker = make_walker7()
    save_model(arm, OUT / "arm2.model.json")
    save_model(walker, OUT / "walker7.model.json")

    reach = synth_clip("sinusoid", {
        "duration": 10.0, "rate": 100.0, "center": [-0.9, 0.9],
        "amplitude": [0.45, 0.45], "frequency": 1.0, "name": "arm2_reach",
    }, arm)
    save_clip(reach, OUT / "arm2_reach")

    gait = make_gait_clip(walker, speed=1.0, cycle_time=1.2, duration=6.0)
    save_clip(gait, OUT / "walker7_gait")

    arm_cfg = {
        "model": "arm2",
        "clips": [{"synth": {"kind": "sinusoid", "duration": 10.0, "rate": 100.0,
                             "center": [-0.9, 0.9], "amplitude": [0.45, 0.45],
                             "frequency": 1.0, "name": "arm2_reach"}}],
        "seed": 0,
        "total_steps": 5_000_000,
        "n_env": 64, "rollout_steps": 50, "minibatches": 32, "epochs": 1,
        "gamma": 0.99, "lam": 0.95, "clip": 0.2, "vf_clip": 0.2,
        "vf_coef": 0.5, "ent_coef": 0.0, "max_grad_norm": 1.0,
        "lr": 4e-4, "lr_end": 4e-5, "lr_schedule": "linear",
        "weight_decay": 0.0,
        "hidden": [256, 256, 256, 256], "init_std": 0.2,
        "reward": {"w_vroot": 0.0},
        "termination": {"delta_site": 0.25, "delta_root": None},
        "checkpoint_interval": 200,
    }
    (OUT / "arm2_reach.train.json").write_text(json.dumps(arm_cfg, indent=1) + "\n")

    walker_cfg = {
        "model": "walker7",
        "clips": [{"gait": {"speed": 1.0, "cycle_time": 1.2, "duration": 6.0}}],
        "seed": 0,
        "total_steps": 20_000_000,
        "n_env": 256, "rollout_steps": 50, "minibatches": 32, "epochs": 1,
        "gamma": 0.99, "lam": 0.95, "clip": 0.2, "vf_clip": 0.2,
        "vf_coef": 0.5, "ent_coef": 0.0, "max_grad_norm": 1.0,
        "lr": 4e-4, "lr_end": 4e-5, "lr_schedule": "linear",
        "weight_decay": 0.0,
        "hidden": [256, 256, 256, 256], "init_std": 0.2,
        "reward": {},
        "termination": {"delta_site": 0.5, "delta_root": 0.5},
        "checkpoint_interval": 200,
    }
    (OUT / "walker7_gait.train.json").write_text(json.dumps(walker_cfg, indent=1) + "\n")
    print(f"assets written under {OUT}")


if __name__ == "__main__":
    main()
