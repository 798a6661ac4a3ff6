"""Small float64 networks with hand-written reverse-mode gradients.

Only what the holding agent needs: embedding tables for the categorical part
of the state, ReLU MLPs, a squashed-Gaussian policy head, a Q head taking the
action as an extra input, Adam, Polyak averaging and a checkpoint format.

Every network keeps its parameters in a flat ``dict[str, ndarray]`` so the
optimizer, target averaging and checkpointing can treat them uniformly.
Forward passes return a cache; ``backward`` consumes it.
"""

from __future__ import annotations

import ctypes
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .stochastic import RngStream

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HIDDEN = (32, 32, 32)
N_NUMERIC = 3
EMBED_NAMES = ("bus", "stop", "time", "dir")
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class GradientError(ArithmeticError):
    """Raised when a loss is not finite, so no gradient can be formed."""


def tune_allocator() -> bool:
    """Keep freed batch-sized arrays on the heap instead of returning them to the OS.

    Training allocates and frees the same few hundred-kilobyte arrays
    thousands of times per second; with glibc's default thresholds each one
    is a fresh mmap and a round of page faults.  Speed only, no effect on
    results.  Returns False where the knob is unavailable.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim, m_top_pad, m_mmap = -1, -2, -3
    return bool(libc.mallopt(m_mmap, 1 << 22) and libc.mallopt(m_trim, 1 << 27)
                and libc.mallopt(m_top_pad, 1 << 26))


def embedding_dim(vocab_size: int) -> int:
    return max(1, min(50, vocab_size // 2))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class Net:
    params: dict[str, np.ndarray]

    def copy(self) -> "Net":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self.params.items()}


class EmbeddedMlp(Net):
    """Embedding lookup + numeric concat (+ optional extra inputs) -> ReLU MLP."""

    def __init__(self, vocab_sizes, n_extra: int, n_out: int, rng: RngStream | None,
                 hidden=HIDDEN):
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.dims = tuple(embedding_dim(v) for v in self.vocab_sizes)
        self.state_dim = sum(self.dims) + N_NUMERIC
        self.in_dim = self.state_dim + n_extra
        self.sizes = (self.in_dim, *hidden, n_out)
        self.params = {}
        if rng is None:
            return
        for name, n, d in zip(EMBED_NAMES, self.vocab_sizes, self.dims):
            self.params[f"emb.{name}"] = rng.gen.normal(0.0, 0.1, (n, d))
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"l{i}.W"] = rng.gen.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"l{i}.b"] = rng.gen.uniform(-bound, bound, fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def embed(self, cat: np.ndarray, num: np.ndarray) -> np.ndarray:
        """Concatenated embeddings followed by the numerical features."""
        cat = np.atleast_2d(np.asarray(cat))
        num = np.atleast_2d(np.asarray(num, dtype=np.float64))
        parts = []
        for k, (name, n) in enumerate(zip(EMBED_NAMES, self.vocab_sizes)):
            idx = cat[:, k]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"{name} index out of range for vocabulary of {n}")
            parts.append(self.params[f"emb.{name}"][idx])
        parts.append(num)
        return np.concatenate(parts, axis=1)

    def design(self, cat, num):
        """Batch encoding shared by every network over the same states.

        Returns ``(codes, num)``: category indices offset into one stacked
        table, shape (B, 4), and the float64 numerical features, shape (B, 3).
        """
        cat = np.atleast_2d(np.asarray(cat))
        codes = np.empty((len(cat), len(self.vocab_sizes)), dtype=np.int64)
        off = 0
        for k, (name, n) in enumerate(zip(EMBED_NAMES, self.vocab_sizes)):
            idx = cat[:, k]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"{name} index out of range for vocabulary of {n}")
            codes[:, k] = idx + off
            off += n
        num = np.ascontiguousarray(np.asarray(num, dtype=np.float64).reshape(len(cat), N_NUMERIC))
        return codes, num

    def _first_layer_tables(self) -> np.ndarray:
        # embedding tables pushed through their rows of the first weight matrix
        W0 = self.params["l0.W"]
        parts, off = [], 0
        for name, d in zip(EMBED_NAMES, self.dims):
            parts.append(self.params[f"emb.{name}"] @ W0[off:off + d])
            off += d
        return np.concatenate(parts, axis=0)

    def forward(self, cat, num, extra=None, design=None):
        """Returns (output, cache).

        The lookup-and-concatenate input is never materialised. Looking up
        rows of (table @ first-layer rows) gives the same first-layer
        pre-activation as ``embed(...) @ W0`` at a fraction of the cost.
        """
        if design is None:
            design = self.design(cat, num)
        codes, num = design
        W0 = self.params["l0.W"]
        s = self.state_dim
        if extra is None:
            ex = np.empty((len(codes), 0))
        else:
            ex = np.ascontiguousarray(np.asarray(extra, dtype=np.float64).reshape(len(codes), -1))
        z = np.empty((len(codes), W0.shape[1]))
        _first_layer(codes, num, ex, self._first_layer_tables(), np.ascontiguousarray(W0[s - N_NUMERIC:s]),
                     np.ascontiguousarray(W0[s:]),
                     self.params["l0.b"], self.n_layers > 1, z)
        acts = [None, z]
        for i in range(1, self.n_layers):
            if i > 1:
                np.maximum(z, 0.0, out=z)
                acts.append(z)
            z = z @ self.params[f"l{i}.W"]
            z += self.params[f"l{i}.b"]
        return z, (codes, num, ex, acts)

    def backward(self, cache, dout: np.ndarray, grads: dict[str, np.ndarray] | None = None,
                 param_grads: bool = True):
        """Accumulate parameter gradients into ``grads``.

        Returns ``(grads, d_extra)`` where ``d_extra`` is the gradient with
        respect to the extra (non-state) inputs, or ``None`` if there are none.
        With ``param_grads=False`` only ``d_extra`` is computed.
        """
        codes, num, ex, acts = cache
        if grads is None and param_grads:
            grads = self.zero_grads()
        ones = np.ones(len(codes))
        g = dout
        for i in reversed(range(1, self.n_layers)):
            W = self.params[f"l{i}.W"]
            if param_grads:
                grads[f"l{i}.W"] += acts[i].T @ g
                grads[f"l{i}.b"] += ones @ g
            g = g @ W.T
            np.multiply(g, acts[i] > 0.0, out=g)
        W0 = self.params["l0.W"]
        s = self.state_dim
        d_extra = g @ W0[s:].T if ex.shape[1] else None
        if not param_grads:
            return grads, d_extra
        per_cat = np.zeros((sum(self.vocab_sizes), W0.shape[1]))
        d_num = np.zeros((N_NUMERIC, W0.shape[1]))
        d_extra_w = np.zeros((ex.shape[1], W0.shape[1]))
        d_b = np.zeros(W0.shape[1])
        _first_layer_grads(codes, num, ex, np.ascontiguousarray(g), per_cat, d_num, d_extra_w, d_b)
        grads["l0.b"] += d_b
        grads["l0.W"][s - N_NUMERIC:s] += d_num
        grads["l0.W"][s:] += d_extra_w
        off_v = off_d = 0
        for name, n, d in zip(EMBED_NAMES, self.vocab_sizes, self.dims):
            table = self.params[f"emb.{name}"]
            block = per_cat[off_v:off_v + n]      # summed upstream gradient per category
            grads["l0.W"][off_d:off_d + d] += table.T @ block
            grads[f"emb.{name}"] += block @ W0[off_d:off_d + d].T
            off_v += n
            off_d += d
        return grads, d_extra


@numba.njit(cache=True)
def _first_layer(codes, num, extra, tables, w_num, w_extra, b, relu, out):
    # out = sum of table rows + num @ w_num + extra @ w_extra + b, rectified if ``relu``
    n, h = out.shape
    for i in range(n):
        for j in range(h):
            out[i, j] = b[j]
        for k in range(codes.shape[1]):
            c = codes[i, k]
            for j in range(h):
                out[i, j] += tables[c, j]
        for k in range(num.shape[1]):
            x = num[i, k]
            for j in range(h):
                out[i, j] += x * w_num[k, j]
        for k in range(extra.shape[1]):
            x = extra[i, k]
            for j in range(h):
                out[i, j] += x * w_extra[k, j]
        if relu:
            for j in range(h):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0


@numba.njit(cache=True)
def _first_layer_grads(codes, num, extra, g, d_tables, d_num, d_extra, d_b):
    n, h = g.shape
    for i in range(n):
        for j in range(h):
            d_b[j] += g[i, j]
        for k in range(codes.shape[1]):
            c = codes[i, k]
            for j in range(h):
                d_tables[c, j] += g[i, j]
        for k in range(num.shape[1]):
            x = num[i, k]
            for j in range(h):
                d_num[k, j] += x * g[i, j]
        for k in range(extra.shape[1]):
            x = extra[i, k]
            for j in range(h):
                d_extra[k, j] += x * g[i, j]


class PolicyNet(EmbeddedMlp):
    """Squashed Gaussian over holding times in ``(0, max_hold)``."""

    def __init__(self, vocab_sizes, max_hold: float, rng: RngStream | None, hidden=HIDDEN):
        super().__init__(vocab_sizes, 0, 2, rng, hidden)
        self.max_hold = float(max_hold)

    def head(self, cat, num, design=None):
        out, cache = self.forward(cat, num, design=design)
        raw_log_std = out[:, 1]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        return out[:, 0], log_std, (cache, raw_log_std)

    def head_backward(self, hcache, dmean, dlog_std, grads=None):
        cache, raw = hcache
        dlog_std = dlog_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
        return self.backward(cache, np.stack([dmean, dlog_std], axis=1), grads)[0]

    def squash(self, u: np.ndarray) -> np.ndarray:
        return (np.tanh(u) + 1.0) * (0.5 * self.max_hold)

    def log_prob_u(self, u, mean, log_std):
        """Log-density of the squashed action for pre-squash value ``u``."""
        z = (u - mean) * np.exp(-log_std)
        gauss = -0.5 * z * z - log_std - 0.5 * LOG_2PI
        # log(1 - tanh(u)^2) in overflow-safe form
        log_det = 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
        return gauss - log_det - math.log(0.5 * self.max_hold)

    def sample(self, cat, num, noise, design=None):
        """Reparameterised sample: returns action, log-prob and what backprop needs."""
        mean, log_std, hcache = self.head(cat, num, design)
        std = np.exp(log_std)
        u = mean + std * noise
        logp = self.log_prob_u(u, mean, log_std)
        return self.squash(u), logp, (hcache, mean, log_std, std, noise, u)

    def sample_backward(self, scache, dact, dlogp, grads=None):
        """Gradients given upstream d(loss)/d(action) and d(loss)/d(log_prob)."""
        hcache, mean, log_std, std, noise, u = scache
        t = np.tanh(u)
        du = dact * (1.0 - t * t) * (0.5 * self.max_hold) + dlogp * 2.0 * t
        dmean = du
        dlog_std = du * std * noise - dlogp
        return self.head_backward(hcache, dmean, dlog_std, grads)

    def act(self, cat, num, rng: RngStream | None = None, deterministic: bool = False):
        mean, log_std, _ = self.head(cat, num)
        if deterministic:
            return self.squash(mean)
        noise = rng.gen.standard_normal(mean.shape)
        return self.squash(mean + np.exp(log_std) * noise)


class CriticNet(EmbeddedMlp):
    """Q(s, a) with the action rescaled to [-1, 1] as the last input."""

    def __init__(self, vocab_sizes, max_hold: float, rng: RngStream | None, hidden=HIDDEN):
        super().__init__(vocab_sizes, 1, 1, rng, hidden)
        self.max_hold = float(max_hold)

    def q(self, cat, num, action, design=None):
        a_in = np.asarray(action, dtype=np.float64) * (2.0 / self.max_hold) - 1.0
        out, cache = self.forward(cat, num, a_in, design)
        return out[:, 0], cache

    def q_backward(self, cache, dq, grads=None, param_grads: bool = True):
        """Returns (param grads, d loss / d action)."""
        grads, dx = self.backward(cache, dq[:, None], grads, param_grads)
        return grads, dx[:, 0] * (2.0 / self.max_hold)


def backward(net: EmbeddedMlp, cache, loss: float, dout: np.ndarray):
    """Reverse pass for ``net`` after a forward that produced ``loss``."""
    if not math.isfinite(loss):
        raise GradientError(f"loss is not finite: {loss}")
    return net.backward(cache, dout)[0]


class Adam:
    """Bias-corrected Adam over a parameter dict.

    Embedding tables are updated lazily: rows whose gradient is identically
    zero (categories absent from the batch) keep their values and moments.
    """

    def __init__(self, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            if k not in params or params[k].shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {k!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            if k.startswith("emb."):
                rows = np.flatnonzero(np.any(g != 0.0, axis=1))
                if rows.size == 0:
                    continue
                gr = g[rows]
                m[rows] = b1 * m[rows] + (1.0 - b1) * gr
                v[rows] = b2 * v[rows] + (1.0 - b2) * gr * gr
                p[rows] -= lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        return out


def adam_step(params, grads, state: Adam, lr: float | None = None):
    state.step(params, grads, lr)
    return params


def polyak_update(online: dict[str, np.ndarray], target: dict[str, np.ndarray], tau: float) -> None:
    """In place: ``target <- (1 - tau) * target + tau * online``."""
    for k, w in online.items():
        t = target[k]
        if t.shape != w.shape:
            raise ValueError(f"shape mismatch for {k!r}")
        t *= 1.0 - tau
        t += tau * w


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    nets: dict[str, Net]
    optimizers: dict[str, Adam]
    log_alpha: float
    step: int
    episode: int
    meta: dict


def save_checkpoint(path: str | Path, nets: dict[str, EmbeddedMlp], optimizers: dict[str, Adam],
                    log_alpha: float, step: int, episode: int, extra: dict | None = None) -> Path:
    """Write a ``.npz`` archive; layout described in the README."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    layout = {}
    for name, net in nets.items():
        layout[name] = {"kind": type(net).__name__, "vocab_sizes": list(net.vocab_sizes),
                        "hidden": list(net.sizes[1:-1]), "max_hold": net.max_hold,
                        "shapes": net.shapes()}
        for k, v in net.params.items():
            arrays[f"net/{name}/{k}"] = v
    opt_meta = {}
    for name, opt in optimizers.items():
        opt_meta[name] = {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        arrays.update(opt.state_arrays(f"adam/{name}"))
    meta = {"format": "busholding-checkpoint", "version": CHECKPOINT_VERSION, "nets": layout,
            "adam": opt_meta, "log_alpha": log_alpha, "alpha": math.exp(log_alpha), "step": step,
            "episode": episode, "extra": extra or {}}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "busholding-checkpoint":
            raise ValueError(f"{path}: not a checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
        kinds = {"PolicyNet": PolicyNet, "CriticNet": CriticNet}
        nets = {}
        for name, info in meta["nets"].items():
            net = kinds[info["kind"]](info["vocab_sizes"], info["max_hold"], None, tuple(info["hidden"]))
            net.params = {k: np.array(z[f"net/{name}/{k}"]) for k in info["shapes"]}
            nets[name] = net
        opts = {}
        for name, info in meta["adam"].items():
            opt = Adam(info["lr"], info["beta1"], info["beta2"], info["eps"])
            opt.t = info["t"]
            pre_m, pre_v = f"adam/{name}/m/", f"adam/{name}/v/"
            for key in z.files:
                if key.startswith(pre_m):
                    opt.m[key[len(pre_m):]] = np.array(z[key])
                elif key.startswith(pre_v):
                    opt.v[key[len(pre_v):]] = np.array(z[key])
            opts[name] = opt
    return Checkpoint(nets, opts, meta["log_alpha"], meta["step"], meta["episode"], meta)
