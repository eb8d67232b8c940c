"""Command-line interface: train / eval / audit / gait / convert / bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .analysis import (correlate, cycle_average, evaluate_policy,
                       rollout_episode, segment_gait_cycles)
from .assets import load_bundled
from .audit import TendonJumpConfig, audit_clip, average_reports
from .clips import (ClipError, ground_correct, load_clip, make_gait_clip,
                    resample, save_clip, synth_clip)
from .env import EnvConfig, GoalSpec, RewardSpec, TerminationSpec
from .model import ModelError, load_model
from .nets import GaussianPolicy
from .ppo import NumericalError, PpoConfig, Trainer, bench_throughput

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(ValueError):
    pass


def _load_config_file(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def _resolve_model(name_or_path):
    if name_or_path in ("arm2", "walker7"):
        return load_bundled(name_or_path)
    return load_model(name_or_path)


def _resolve_clips(spec, model):
    """Clips from file paths or generator descriptions."""
    clips = []
    if isinstance(spec, dict):
        spec = [spec]
    for item in spec:
        if isinstance(item, str):
            clips.append(load_clip(item, model))
        elif "synth" in item:
            clips.append(synth_clip(item["synth"].pop("kind"), item["synth"],
                                    model))
        elif "gait" in item:
            clips.append(make_gait_clip(model, **item["gait"]))
        else:
            raise UsageError(f"cannot interpret clip entry {item!r}")
    if not clips:
        raise UsageError("config lists no clips")
    return clips


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _emit(doc, arg, default_name, out_dir=None):
    """Write a JSON document to a path, '-' for stdout."""
    text = json.dumps(doc, indent=1, default=str)
    if arg == "-":
        print(text)
    else:
        path = Path(arg) if arg else Path(out_dir or ".") / default_name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
        return str(path)


def _env_config_from(cfg, model, clips):
    reward = RewardSpec(**cfg.get("reward", {}))
    term = TerminationSpec(**cfg.get("termination", {}))
    goal = GoalSpec(**cfg.get("goal", {}))
    return EnvConfig(model=model, clips=clips, reward=reward, termination=term,
                     goal=goal)


_PPO_KEYS = ("n_env", "rollout_steps", "minibatches", "epochs", "gamma", "lam",
             "clip", "vf_clip", "vf_coef", "ent_coef", "max_grad_norm", "lr",
             "lr_end", "lr_schedule", "warmup_frac", "weight_decay", "seed",
             "total_steps", "advantage_norm", "muon_momentum", "ns_iters",
             "init_std", "n_workers", "checkpoint_interval")


def cmd_train(args):
    cfg = _load_config_file(args.config)
    for key in ("model", "clips"):
        if key not in cfg:
            raise UsageError(f"config is missing required field {key!r}")
    model = _resolve_model(cfg["model"])
    clips = _resolve_clips(cfg["clips"], model)
    ppo_kwargs = {k: cfg[k] for k in _PPO_KEYS if k in cfg}
    if "hidden" in cfg:
        ppo_kwargs["hidden"] = tuple(cfg["hidden"])
    try:
        ppo = PpoConfig(**ppo_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    env_cfg = _env_config_from(cfg, model, clips)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "seed": ppo.seed,
        "config": cfg,
        "model_hash": _sha256(json.dumps(cfg["model"]).encode()
                              if cfg["model"] in ("arm2", "walker7")
                              else Path(cfg["model"]).read_bytes()),
        "clip_list_hash": _sha256(json.dumps(cfg["clips"], sort_keys=True,
                                             default=str).encode()),
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "config.json").write_text(json.dumps(cfg, indent=1) + "\n")

    trainer = Trainer(env_cfg, ppo, run_dir=out)
    try:
        trainer.train()
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _load_eval_objects(args):
    model = _resolve_model(args.model)
    clips = []
    if args.clip:
        clips += [load_clip(c, model) for c in args.clip]
    if args.dir:
        found = sorted(Path(args.dir).glob("*.mmclip.csv"))
        if not found:
            raise UsageError(f"no .mmclip.csv files under {args.dir}")
        clips += [load_clip(str(p), model) for p in found]
    if not clips:
        raise UsageError("no clips given; use --clip or --dir")
    return model, clips


def cmd_eval(args):
    model, clips = _load_eval_objects(args)
    reward = RewardSpec(**json.loads(args.reward)) if args.reward else RewardSpec()
    term_kwargs = {}
    if args.delta_site:
        term_kwargs["delta_site"] = args.delta_site
    if not model.root_free:
        term_kwargs["delta_root"] = None
    env_cfg = EnvConfig(model=model, clips=clips, reward=reward,
                        termination=TerminationSpec(**term_kwargs))
    policy = None
    if not args.oracle_replay:
        if not args.checkpoint:
            raise UsageError("--checkpoint required unless --oracle-replay")
        policy = GaussianPolicy.load(args.checkpoint)
    report = evaluate_policy(policy, env_cfg, clips, n_episodes=args.episodes,
                             seed=args.seed, oracle_replay=args.oracle_replay)
    doc = dataclasses.asdict(report)
    doc["schema_version"] = SCHEMA_VERSION
    _emit(doc, args.json, "eval.json")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            keys = [k for k in doc if k not in ("per_clip", "schema_version")]
            w.writerow(keys)
            w.writerow([doc[k] for k in keys])
    return EXIT_OK


def cmd_audit(args):
    model = _resolve_model(args.model)
    paths = []
    if args.clip:
        paths += list(args.clip)
    if args.dir:
        paths += sorted(str(p) for p in Path(args.dir).glob("*.mmclip.csv"))
    if not paths:
        raise UsageError("no clips given; use --clip or --dir")
    reference = load_clip(args.reference, model) if args.reference else None
    reports = []
    for p in sorted(paths):
        clip = load_clip(p, model)
        reports.append(audit_clip(clip, model, reference=reference))
    report = reports[0] if len(reports) == 1 else average_reports(reports)
    doc = json.loads(report.to_json())
    _emit(doc, args.json, "audit.json")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(doc.keys()))
            w.writerow(list(doc.values()))
    # non-zero kinematic violations are reported, not fatal
    return EXIT_OK


def _read_emg_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[0] != 101:
        raise UsageError(f"EMG reference must have 101 rows, got {data.shape[0]}")
    return {name: data[:, i] for i, name in enumerate(header)}


def cmd_gait(args):
    model = _resolve_model(args.model)
    clip = load_clip(args.clip, model)
    env_cfg = EnvConfig(model=model, clips=[clip])
    policy = GaussianPolicy.load(args.checkpoint)
    trace = rollout_episode(policy, env_cfg, clip, seed=args.seed)
    weight = sum(l.mass for l in model.links) * model.gravity
    cycles = segment_gait_cycles(trace.grf[:, 1], clip.rate,
                                 min_duration=args.min_duration,
                                 max_duration=args.max_duration,
                                 body_weight=weight)
    if not cycles:
        print("no gait cycles detected", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profiles = {}
    for i, muscle in enumerate(model.muscles):
        profiles[muscle.name] = cycle_average(trace.activations[:, i], cycles,
                                              name=muscle.name)
    with open(out / "profiles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["muscle", "percent", "mean", "std"])
        for name, prof in profiles.items():
            for p, m_, s in zip(prof.percent, prof.mean, prof.std):
                w.writerow([name, p, repr(float(m_)), repr(float(s))])
    if args.emg:
        table = _read_emg_table(args.emg)
        with open(out / "correlations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["muscle", "pearson_r"])
            for name in sorted(set(table) & set(profiles)):
                r = correlate(profiles[name], table[name])
                w.writerow([name, "" if r is None else repr(r)])
    print(f"{len(cycles)} cycles -> {out}")
    return EXIT_OK


def cmd_convert(args):
    model = _resolve_model(args.model)
    clip = load_clip(args.clip, model)
    if args.rate:
        clip = resample(clip, args.rate, model)
    if args.ground_correct:
        clip = ground_correct(clip, model)
    save_clip(clip, args.out)
    return EXIT_OK


def cmd_bench(args):
    model = _resolve_model(args.model)
    if model.root_free:
        clip = make_gait_clip(model, duration=4.0)
        env_cfg = EnvConfig(model=model, clips=[clip])
    else:
        clip = synth_clip("sinusoid", {"duration": 4.0, "center": [-0.9, 0.9],
                                       "amplitude": [0.3, 0.3]}, model)
        env_cfg = EnvConfig(model=model, clips=[clip],
                            reward=RewardSpec(w_vroot=0.0),
                            termination=TerminationSpec(0.25, None))
    n_envs = [int(v) for v in args.n_env.split(",")]
    threads = args.threads or int(os.environ.get("MM_THREADS", "1"))
    rows = bench_throughput(env_cfg, n_envs, threads=threads,
                            rollout_steps=args.rollout_steps,
                            iterations=args.iterations, seed=args.seed)
    _emit({"rows": rows, "schema_version": SCHEMA_VERSION}, args.json,
          "bench.json")
    for r in rows:
        print(f"n_env={r['n_env']:>5} threads={r['threads']} "
              f"rollout={r['rollout_sps']:.0f} sps train={r['train_sps']:.0f} sps")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmkit",
        description="Muscle-actuated motion imitation toolkit "
                    f"(v{__version__}, schema v{SCHEMA_VERSION})")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run PPO training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="validation metrics for a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--clip", action="append")
    e.add_argument("--dir")
    e.add_argument("--episodes", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--delta-site", type=float, default=None)
    e.add_argument("--reward", help="JSON overrides for reward weights")
    e.add_argument("--oracle-replay", action="store_true",
                   help="bypass the policy and replay the reference")
    e.add_argument("--json", default="-")
    e.add_argument("--csv")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("audit", help="retargeting-quality metrics for clips")
    a.add_argument("--model", required=True)
    a.add_argument("--clip", action="append")
    a.add_argument("--dir")
    a.add_argument("--reference")
    a.add_argument("--json", default="-")
    a.add_argument("--csv")
    a.set_defaults(fn=cmd_audit)

    g = sub.add_parser("gait", help="gait-cycle activation profiles")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--clip", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--emg", help="reference EMG CSV (muscle headers, 101 rows)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-duration", type=float, default=0.4)
    g.add_argument("--max-duration", type=float, default=2.0)
    g.set_defaults(fn=cmd_gait)

    c = sub.add_parser("convert", help="resample / ground-correct a clip")
    c.add_argument("--clip", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--rate", type=float)
    c.add_argument("--ground-correct", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_convert)

    b = sub.add_parser("bench", help="throughput benchmark")
    b.add_argument("--model", default="walker7")
    b.add_argument("--n-env", default="1,8")
    b.add_argument("--threads", type=int, default=0)
    b.add_argument("--rollout-steps", type=int, default=50)
    b.add_argument("--iterations", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", default="-")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ModelError, ClipError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:   # runtime faults
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
