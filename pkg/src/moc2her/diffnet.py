"""Small feed-forward networks with hand-written gradients.

A network is a plain ``dict`` of named arrays: ``W0, b0`` for the tanh hidden
layer and ``W1, b1`` for the linear output. Weights are stored ``(out, in)``.
Every function accepts a single input vector or a batch of row vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

LOG_2PI = float(np.log(2.0 * np.pi))

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAMS_FORMAT_VERSION = 1


def init_mlp(in_dim, hidden, out_dim, rng):
    """Uniform(+-1/sqrt(fan_in)) initialisation of a one-hidden-layer net."""
    b0 = 1.0 / np.sqrt(in_dim)
    b1 = 1.0 / np.sqrt(hidden)
    return {
        "W0": rng.uniform(-b0, b0, size=(hidden, in_dim)),
        "b0": rng.uniform(-b0, b0, size=hidden),
        "W1": rng.uniform(-b1, b1, size=(out_dim, hidden)),
        "b1": rng.uniform(-b1, b1, size=out_dim),
    }


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    batched: bool
    # identities of the weight arrays used, to catch stale caches
    owners: tuple = ()
    consumed: bool = False


def mlp_forward(params, x):
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    xb = x if batched else x[None, :]
    W0, b0, W1, b1 = params["W0"], params["b0"], params["W1"], params["b1"]
    if xb.ndim != 2 or xb.shape[1] != W0.shape[1]:
        raise ContractViolation(
            f"input of shape {x.shape} does not fit a layer expecting {W0.shape[1]} features")
    pre = xb @ W0.T + b0
    h = np.tanh(pre)
    y = h @ W1.T + b1
    cache = ForwardCache(xb, pre, h, batched, (id(W0), id(W1), W0.shape, W1.shape))
    return (y if batched else y[0]), cache


def mlp_backward(params, cache: ForwardCache, dy):
    """Gradients of ``sum(y * dy)`` with respect to parameters and input."""
    W0, W1 = params["W0"], params["W1"]
    if cache.consumed:
        raise ContractViolation("forward cache already consumed by a backward pass")
    if cache.owners != (id(W0), id(W1), W0.shape, W1.shape):
        raise ContractViolation("forward cache does not belong to these parameters")
    dy = np.asarray(dy, dtype=float)
    dyb = dy if cache.batched else dy[None, :]
    if dyb.shape != (cache.x.shape[0], W1.shape[0]):
        raise ContractViolation(f"output gradient has shape {dy.shape}")
    cache.consumed = True
    dW1 = dyb.T @ cache.hidden
    db1 = dyb.sum(axis=0)
    dh = dyb @ W1
    dpre = dh * (1.0 - cache.hidden ** 2)
    dW0 = dpre.T @ cache.x
    db0 = dpre.sum(axis=0)
    dx = dpre @ W0
    grads = {"W0": dW0, "b0": db0, "W1": dW1, "b1": db1}
    return grads, (dx if cache.batched else dx[0])


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def gaussian_log_prob_grad(mean, log_std, action):
    """Diagonal Gaussian log density with its gradients.

    Returns ``(logp, dlogp/dmean, dlogp/dlog_std)``. The last axis is the
    action dimension; leading axes broadcast.
    """
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    action = np.asarray(action, dtype=float)
    if mean.shape[-1] != action.shape[-1] or log_std.shape[-1] != action.shape[-1]:
        raise ContractViolation("mean, log_std and action must share the last dimension")
    inv_var = np.exp(-2.0 * log_std)
    diff = action - mean
    z2 = diff * diff * inv_var
    logp = -0.5 * (z2 + 2.0 * log_std + LOG_2PI).sum(axis=-1)
    dmean = diff * inv_var
    dlog_std = z2 - 1.0
    return logp, dmean, dlog_std


def gaussian_entropy(log_std):
    """Closed-form entropy of a diagonal Gaussian (independent of the mean)."""
    log_std = np.asarray(log_std, dtype=float)
    return (log_std + 0.5 * (LOG_2PI + 1.0)).sum(axis=-1)


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_update(params, grads, state: OptimizerState, lr, lr_scale=None):
    """One adaptive-moment *descent* step; returns fresh parameter arrays.

    ``state`` is advanced in place. Keys missing from ``grads`` are treated as
    zero gradients. ``lr_scale`` optionally multiplies the rate per key.
    """
    lr_scale = lr_scale or {}
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = p - lr * lr_scale.get(k, 1.0) * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return new, state


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    n_checked: int


def finite_diff_check(loss_fn, params, grads, tol, h=1e-5, max_entries=None, rng=None):
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn(params) -> float`` must be deterministic. The relative error of an
    entry is ``|a - n| / max(|a| + |n|, 1e-8)``. Entries are subsampled to
    ``max_entries`` per tensor when given.
    """
    worst, worst_name, count = 0.0, "", 0
    for name, p in params.items():
        analytic = np.asarray(grads.get(name, np.zeros_like(p)))
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, p.shape)
            orig = p[idx]
            trial = dict(params)
            bumped = p.copy()
            bumped[idx] = orig + h
            trial[name] = bumped
            up = loss_fn(trial)
            bumped = p.copy()
            bumped[idx] = orig - h
            trial[name] = bumped
            down = loss_fn(trial)
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
    return GradCheckReport(worst <= tol, worst, worst_name, count)


def write_params(path, named):
    """Write ``{name: array}`` as versioned text with 17 significant digits."""
    lines = [f"moc2her-params v{PARAMS_FORMAT_VERSION}"]
    for name in sorted(named):
        arr = np.asarray(named[name], dtype=float)
        shape = " ".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {arr.ndim} {shape}")
        lines.append(" ".join(f"{v:.17g}" for v in arr.ravel()))
    text = "\n".join(lines) + "\n"
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_params(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"moc2her-params v{PARAMS_FORMAT_VERSION}":
        raise ValueError(f"{path}: unrecognised parameter file header")
    out = {}
    for head, body in zip(lines[1::2], lines[2::2]):
        parts = head.split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2:2 + ndim])
        values = np.array([float(v) for v in body.split()], dtype=float)
        out[name] = values.reshape(shape)
    return out
