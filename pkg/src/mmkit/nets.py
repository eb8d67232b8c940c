"""Gated-residual MLP actor-critic with hand-written reverse-mode gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION

LN_EPS = 1e-5
NORM_EPS = 1e-8
GATE_INIT = -2.0
W1_GAIN = 0.01


def orthogonal(rng, rows, cols, gain=1.0):
    a = rng.standard_normal((rows, cols) if rows >= cols else (cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# -- running observation statistics -------------------------------------------

class RunningStats:
    """Welford online mean/variance with population convention (M2 / count)."""

    def __init__(self, dim):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def variance(self):
        if self.count == 0:
            return np.ones_like(self.mean)
        return self.m2 / self.count

    def update(self, x):
        """Single-sample Welford recurrence."""
        x = np.asarray(x, dtype=float)
        self.count += 1.0
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def update_batch(self, xs):
        """Fold a batch via the parallel-merge form; deterministic given order."""
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[None]
        n_b = float(xs.shape[0])
        if n_b == 0:
            return
        mean_b = xs.mean(axis=0)
        m2_b = ((xs - mean_b) ** 2).sum(axis=0)
        delta = mean_b - self.mean
        total = self.count + n_b
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n_b / total)
        self.count = total

    def normalize(self, x):
        """(x - mean) / sqrt(var + eps); identity before any update."""
        if self.count == 0:
            return np.asarray(x, dtype=float)
        return (x - self.mean) / np.sqrt(self.variance + NORM_EPS)

    def state(self):
        return {"count": self.count, "mean": self.mean.copy(),
                "m2": self.m2.copy()}

    def load_state(self, st):
        self.count = float(st["count"])
        self.mean = np.asarray(st["mean"], dtype=float).copy()
        self.m2 = np.asarray(st["m2"], dtype=float).copy()


def welford_update(stats, obs):
    """Operation-contract wrapper: updates stats in place and returns it."""
    stats.update(obs)
    return stats


def normalize(stats, obs):
    return stats.normalize(obs)


# -- gated residual network ----------------------------------------------------

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


class GatedResidualNet:
    """MLP whose consecutive hidden-width pairs form gated residual blocks.

    Block: y = silu(skip(x) + sigmoid(gate) * (W1 silu(LN_b(W0 LN_a(x))) )),
    with near-zero orthogonal W1 so each block starts as (activated) identity.
    An odd trailing width becomes a standalone dense+LN+silu layer. All
    parameters live in `self.params` keyed by name.

    Note: the layer norms sit before each dense layer (pre-norm). Placing a
    norm after W1 would rescale the near-zero branch back to unit size and
    break identity-at-init, so the published block equation is amended here.
    """

    def __init__(self, in_dim, widths, out_dim, rng, head_gain=1.0):
        self.in_dim = int(in_dim)
        self.widths = list(widths)
        self.out_dim = int(out_dim)
        self.params = {}
        p = self.params
        d = in_dim
        self.blocks = []
        i = 0
        bi = 0
        while i + 1 < len(self.widths):
            h, o = self.widths[i], self.widths[i + 1]
            k = f"b{bi}"
            p[f"{k}.ln_a.g"] = np.ones(d)
            p[f"{k}.ln_a.b"] = np.zeros(d)
            p[f"{k}.W0"] = orthogonal(rng, h, d)
            p[f"{k}.c0"] = np.zeros(h)
            p[f"{k}.ln_b.g"] = np.ones(h)
            p[f"{k}.ln_b.b"] = np.zeros(h)
            p[f"{k}.W1"] = orthogonal(rng, o, h, gain=W1_GAIN)
            p[f"{k}.c1"] = np.zeros(o)
            p[f"{k}.gate"] = np.array(GATE_INIT)
            if d != o:
                p[f"{k}.Wskip"] = orthogonal(rng, o, d)
            self.blocks.append((k, d, h, o))
            d = o
            i += 2
            bi += 1
        self.tail = None
        if i < len(self.widths):
            h = self.widths[i]
            p["tail.W"] = orthogonal(rng, h, d)
            p["tail.c"] = np.zeros(h)
            p["tail.ln.g"] = np.ones(h)
            p["tail.ln.b"] = np.zeros(h)
            self.tail = (d, h)
            d = h
        p["head.W"] = orthogonal(rng, out_dim, d, gain=head_gain)
        p["head.b"] = np.zeros(out_dim)

    def forward(self, x, cache=None):
        p = self.params
        x = np.asarray(x, dtype=float)
        for k, d, h, o in self.blocks:
            u, ln_a = _ln_forward(x, p[f"{k}.ln_a.g"], p[f"{k}.ln_a.b"])
            z0 = u @ p[f"{k}.W0"].T + p[f"{k}.c0"]
            h1 = silu(z0)
            v, ln_b = _ln_forward(h1, p[f"{k}.ln_b.g"], p[f"{k}.ln_b.b"])
            z1 = v @ p[f"{k}.W1"].T + p[f"{k}.c1"]
            w = _sigmoid(p[f"{k}.gate"])
            s = x if f"{k}.Wskip" not in p else x @ p[f"{k}.Wskip"].T
            pre = s + w * z1
            y = silu(pre)
            if cache is not None:
                cache.append((x, u, ln_a, z0, h1, v, ln_b, z1, w, pre))
            x = y
        if self.tail is not None:
            z = x @ p["tail.W"].T + p["tail.c"]
            t, ln_t = _ln_forward(z, p["tail.ln.g"], p["tail.ln.b"])
            y = silu(t)
            if cache is not None:
                cache.append((x, z, t, ln_t))
            x = y
        out = x @ p["head.W"].T + p["head.b"]
        if cache is not None:
            cache.append(x)
        return out

    def backward(self, cache, dout):
        """Gradients of every parameter given d(loss)/d(output)."""
        p = self.params
        grads = {}
        x_head = cache[-1]
        grads["head.W"] = dout.T @ x_head
        grads["head.b"] = dout.sum(axis=0)
        dx = dout @ p["head.W"]
        ci = len(cache) - 2
        if self.tail is not None:
            x, z, t, ln_t = cache[ci]
            ci -= 1
            dt = dx * _silu_grad(t)
            dz, dg, db = _ln_backward(dt, p["tail.ln.g"], ln_t)
            grads["tail.ln.g"] = dg
            grads["tail.ln.b"] = db
            grads["tail.W"] = dz.T @ x
            grads["tail.c"] = dz.sum(axis=0)
            dx = dz @ p["tail.W"]
        for k, d, h, o in reversed(self.blocks):
            x, u, ln_a, z0, h1, v, ln_b, z1, w, pre = cache[ci]
            ci -= 1
            dpre = dx * _silu_grad(pre)
            dz1 = dpre * w
            grads[f"{k}.gate"] = np.asarray(
                (dpre * z1).sum() * w * (1.0 - w))
            if f"{k}.Wskip" in p:
                grads[f"{k}.Wskip"] = dpre.T @ x
                dx_skip = dpre @ p[f"{k}.Wskip"]
            else:
                dx_skip = dpre
            grads[f"{k}.W1"] = dz1.T @ v
            grads[f"{k}.c1"] = dz1.sum(axis=0)
            dv = dz1 @ p[f"{k}.W1"]
            dh1, dg, db = _ln_backward(dv, p[f"{k}.ln_b.g"], ln_b)
            grads[f"{k}.ln_b.g"] = dg
            grads[f"{k}.ln_b.b"] = db
            dz0 = dh1 * _silu_grad(z0)
            grads[f"{k}.W0"] = dz0.T @ u
            grads[f"{k}.c0"] = dz0.sum(axis=0)
            du = dz0 @ p[f"{k}.W0"]
            dxa, dg, db = _ln_backward(du, p[f"{k}.ln_a.g"], ln_a)
            grads[f"{k}.ln_a.g"] = dg
            grads[f"{k}.ln_a.b"] = db
            dx = dx_skip + dxa
        return grads, dx

    def skip_reference(self, x):
        """Activated skip stack alone: what forward approximates at init."""
        p = self.params
        x = np.asarray(x, dtype=float)
        for k, d, h, o in self.blocks:
            s = x if f"{k}.Wskip" not in p else x @ p[f"{k}.Wskip"].T
            x = silu(s)
        if self.tail is not None:
            z = x @ p["tail.W"].T + p["tail.c"]
            t, _ = _ln_forward(z, p["tail.ln.g"], p["tail.ln.b"])
            x = silu(t)
        return x @ p["head.W"].T + p["head.b"]


# -- diagonal Gaussian policy ---------------------------------------------------

LOG2PI = float(np.log(2.0 * np.pi))


def gaussian_log_prob(mean, log_std, actions):
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * (z ** 2).sum(axis=-1) - log_std.sum()
            - 0.5 * LOG2PI * mean.shape[-1])


def gaussian_entropy(log_std):
    return float(log_std.sum() + 0.5 * log_std.size * (LOG2PI + 1.0))


class GaussianPolicy:
    """Actor-critic pair with a state-independent learnable log-std."""

    def __init__(self, obs_dim, act_dim, widths=(256, 256, 256, 256),
                 init_std=0.2, seed=0):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.widths = list(widths)
        self.init_std = float(init_std)
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.actor = GatedResidualNet(obs_dim, widths, act_dim, rng,
                                      head_gain=0.01)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.critic = GatedResidualNet(obs_dim, widths, 1, rng, head_gain=1.0)
        self.log_std = np.full(act_dim, np.log(init_std))
        self.stats = RunningStats(obs_dim)

    # parameter plumbing -----------------------------------------------------

    def named_params(self):
        for k in sorted(self.actor.params):
            yield f"actor.{k}", self.actor.params[k]
        for k in sorted(self.critic.params):
            yield f"critic.{k}", self.critic.params[k]
        yield "log_std", self.log_std

    def set_param(self, name, value):
        if name == "log_std":
            self.log_std = value
        elif name.startswith("actor."):
            self.actor.params[name[6:]] = value
        elif name.startswith("critic."):
            self.critic.params[name[7:]] = value
        else:
            raise KeyError(name)

    def dist(self, obs_norm):
        mean = self.actor.forward(obs_norm)
        return mean, np.exp(self.log_std)

    def value(self, obs_norm):
        return self.critic.forward(obs_norm)[:, 0]

    def act(self, obs, rng=None, deterministic=False):
        """Normalized-obs policy step; returns (action, log_prob, value)."""
        obs_n = self.stats.normalize(np.atleast_2d(obs))
        mean = self.actor.forward(obs_n)
        value = self.critic.forward(obs_n)[:, 0]
        if deterministic:
            a = mean
        else:
            z = rng.standard_normal(mean.shape)
            a = mean + np.exp(self.log_std) * z
        lp = gaussian_log_prob(mean, self.log_std, a)
        return a, lp, value

    # checkpointing ------------------------------------------------------------

    def save(self, base_path):
        base = str(base_path)
        if base.endswith(".ckpt.json") or base.endswith(".ckpt.bin"):
            base = base[:-10]
        entries = []
        blobs = []
        offset = 0
        stat_items = (("stats.mean", self.stats.mean), ("stats.m2", self.stats.m2))
        for name, arr in list(self.named_params()) + list(stat_items):
            a = np.asarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape),
                            "offset": offset})
            blobs.append(a.reshape(-1))
            offset += a.size
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "widths": self.widths,
            "init_std": self.init_std,
            "seed": self.seed,
            "stats_count": self.stats.count,
            "params": entries,
            "total": offset,
        }
        with open(base + ".ckpt.json", "w") as fh:
            json.dump(manifest, fh, indent=1)
            fh.write("\n")
        np.concatenate(blobs).astype("<f8").tofile(base + ".ckpt.bin")
        return base + ".ckpt.json"

    @staticmethod
    def load(base_path):
        base = str(base_path)
        if base.endswith(".ckpt.json") or base.endswith(".ckpt.bin"):
            base = base[:-10]
        with open(base + ".ckpt.json") as fh:
            manifest = json.load(fh)
        data = np.fromfile(base + ".ckpt.bin", dtype="<f8")
        if data.size != manifest["total"]:
            raise ValueError(f"parameter block has {data.size} floats, manifest "
                             f"says {manifest['total']}")
        policy = GaussianPolicy(manifest["obs_dim"], manifest["act_dim"],
                                manifest["widths"], manifest["init_std"],
                                manifest.get("seed", 0))
        expected = {name: np.shape(arr) for name, arr in policy.named_params()}
        expected["stats.mean"] = (policy.obs_dim,)
        expected["stats.m2"] = (policy.obs_dim,)
        for e in manifest["params"]:
            shape = tuple(e["shape"])
            if expected.get(e["name"]) != shape:
                raise ValueError(f"shape mismatch for {e['name']}: file has "
                                 f"{shape}, model wants {expected.get(e['name'])}")
            arr = data[e["offset"]:e["offset"] + int(np.prod(shape, dtype=int))]
            arr = arr.reshape(shape).copy()
            if e["name"] == "stats.mean":
                policy.stats.mean = arr
            elif e["name"] == "stats.m2":
                policy.stats.m2 = arr
            else:
                policy.set_param(e["name"], arr)
        policy.stats.count = float(manifest["stats_count"])
        return policy
