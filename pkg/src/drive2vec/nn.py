"""Dense math and hand-written reverse-mode differentiation for stacked GRUs.

Everything works on float64 arrays.  Layers accept either a single vector or
a batch with the feature axis last; backward passes mirror that.  The graph is
fixed (GRU -> GRU -> dense -> dense), so each layer keeps the cache it needs
instead of recording a general tape.
"""
from dataclasses import dataclass, fields

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("elu", "sigmoid", "identity")


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def elu(v):
    return np.where(v >= 0, v, np.expm1(np.minimum(v, 0.0)))


def _elu_grad(v):
    return np.where(v >= 0, 1.0, np.exp(np.minimum(v, 0.0)))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def glorot_uniform(rows, cols, rng):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


# ---------------------------------------------------------------------- GRU


@dataclass
class GruParams:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    ORDER = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        H, n_in = self.Wz.shape
        for name in ("Wr", "Wh"):
            if getattr(self, name).shape != (H, n_in):
                raise ShapeError(f"{name} must be {H}x{n_in}")
        for name in ("Uz", "Ur", "Uh"):
            if getattr(self, name).shape != (H, H):
                raise ShapeError(f"{name} must be {H}x{H}")
        for name in ("bz", "br", "bh"):
            if getattr(self, name).shape != (H,):
                raise ShapeError(f"{name} must have length {H}")

    @property
    def input_size(self):
        return self.Wz.shape[1]

    @property
    def hidden_size(self):
        return self.Wz.shape[0]

    def arrays(self):
        return [getattr(self, n) for n in self.ORDER]

    @classmethod
    def zeros(cls, input_size, hidden_size):
        H, n = hidden_size, input_size
        return cls(
            np.zeros((H, n)), np.zeros((H, H)), np.zeros(H),
            np.zeros((H, n)), np.zeros((H, H)), np.zeros(H),
            np.zeros((H, n)), np.zeros((H, H)), np.zeros(H),
        )

    @classmethod
    def glorot(cls, input_size, hidden_size, rng):
        H, n = hidden_size, input_size
        out = []
        for _ in range(3):
            out += [glorot_uniform(H, n, rng), glorot_uniform(H, H, rng), np.zeros(H)]
        return cls(*out)


@dataclass
class GruState:
    """Forward cache of one GRU step (all arrays share the batch shape)."""

    h: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray  # tanh candidate
    uh: np.ndarray  # Uh @ h_prev, before the reset gate


def gru_cell_step(x, h_prev, p):
    """One GRU update; returns ``(h_next, cache)``.

    z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    h' = z * h + (1 - z) * tanh(Wh x + r * (Uh h) + bh).
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"GRU input has {x.shape[-1]} features, expected {p.input_size}")
    if h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(f"GRU state has {h_prev.shape[-1]} units, expected {p.hidden_size}")
    _check_finite(x, "GRU input")
    _check_finite(h_prev, "GRU state")
    z = sigmoid(x @ p.Wz.T + h_prev @ p.Uz.T + p.bz)
    r = sigmoid(x @ p.Wr.T + h_prev @ p.Ur.T + p.br)
    uh = h_prev @ p.Uh.T
    c = np.tanh(x @ p.Wh.T + r * uh + p.bh)
    h = z * h_prev + (1.0 - z) * c
    _check_finite(h, "GRU hidden state")
    return h, GruState(h=h, x=x, h_prev=h_prev, z=z, r=r, c=c, uh=uh)


def _as_2d(a, n):
    return a.reshape(-1, n)


def gru_cell_backward(dh, cache, p, grads):
    """Backprop one step.  Accumulates into ``grads`` (a GruParams of zeros).

    Returns ``(dx, dh_prev)`` shaped like the cached inputs.
    """
    H, n_in = p.hidden_size, p.input_size
    dh2 = _as_2d(dh, H)
    x = _as_2d(cache.x, n_in)
    hp = _as_2d(cache.h_prev, H)
    z, r, c, uh = (_as_2d(a, H) for a in (cache.z, cache.r, cache.c, cache.uh))

    dhp = dh2 * z
    da_z = dh2 * (hp - c) * z * (1.0 - z)
    da_c = dh2 * (1.0 - z) * (1.0 - c * c)
    duh = da_c * r
    da_r = da_c * uh * r * (1.0 - r)

    grads.Wz += da_z.T @ x
    grads.Uz += da_z.T @ hp
    grads.bz += da_z.sum(axis=0)
    grads.Wr += da_r.T @ x
    grads.Ur += da_r.T @ hp
    grads.br += da_r.sum(axis=0)
    grads.Wh += da_c.T @ x
    grads.Uh += duh.T @ hp
    grads.bh += da_c.sum(axis=0)

    dx = da_z @ p.Wz + da_r @ p.Wr + da_c @ p.Wh
    dhp = dhp + da_z @ p.Uz + da_r @ p.Ur + duh @ p.Uh
    return dx.reshape(cache.x.shape), dhp.reshape(cache.h_prev.shape)


def gru_sequence(xs, p, h0=None):
    """Run the cell over ``xs`` (time axis first).  Returns ``(hs, caches)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[0] == 0:
        raise ShapeError("GRU sequence is empty")
    if h0 is None:
        h0 = np.zeros(xs.shape[1:-1] + (p.hidden_size,))
    h = np.asarray(h0, dtype=np.float64)
    hs = np.empty(xs.shape[:-1] + (p.hidden_size,))
    caches = []
    for t in range(xs.shape[0]):
        h, cache = gru_cell_step(xs[t], h, p)
        hs[t] = h
        caches.append(cache)
    return hs, caches


def gru_sequence_backward(dhs, caches, p):
    """BPTT.  ``dhs[t]`` is the loss gradient flowing into output ``t``.

    Returns ``(dxs, grads, dh0)``.
    """
    if not caches:
        raise ShapeError("no cached forward pass to differentiate")
    dhs = np.asarray(dhs, dtype=np.float64)
    if dhs.shape[0] != len(caches):
        raise ShapeError("gradient sequence length differs from the cached forward pass")
    grads = GruParams.zeros(p.input_size, p.hidden_size)
    dxs = np.empty(dhs.shape[:-1] + (p.input_size,))
    carry = np.zeros_like(dhs[0])
    for t in range(len(caches) - 1, -1, -1):
        dxs[t], carry = gru_cell_backward(dhs[t] + carry, caches[t], p, grads)
    return dxs, grads, carry


# -------------------------------------------------------------------- dense


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    ORDER = ("W", "b")

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense weights {self.W.shape} and bias {self.b.shape} disagree")

    @property
    def in_size(self):
        return self.W.shape[1]

    @property
    def out_size(self):
        return self.W.shape[0]

    def arrays(self):
        return [self.W, self.b]

    @classmethod
    def zeros(cls, in_size, out_size, activation="identity"):
        return cls(np.zeros((out_size, in_size)), np.zeros(out_size), activation)

    @classmethod
    def glorot(cls, in_size, out_size, rng, activation="identity"):
        return cls(glorot_uniform(out_size, in_size, rng), np.zeros(out_size), activation)


def _activate(pre, activation):
    if activation == "elu":
        return elu(pre)
    if activation == "sigmoid":
        return sigmoid(pre)
    return pre


def dense_forward_cached(x, p):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_size:
        raise ShapeError(f"dense input has {x.shape[-1]} features, expected {p.in_size}")
    pre = x @ p.W.T + p.b
    y = _activate(pre, p.activation)
    _check_finite(y, "dense output")
    return y, (x, pre, y)


def dense_forward(x, p):
    """``act(W x + b)`` for a vector or a batch of row vectors."""
    return dense_forward_cached(x, p)[0]


def dense_backward(dy, cache, p, grads):
    """Accumulate W/b gradients into ``grads``; return the input gradient."""
    x, pre, y = cache
    if p.activation == "elu":
        dpre = dy * _elu_grad(pre)
    elif p.activation == "sigmoid":
        dpre = dy * y * (1.0 - y)
    else:
        dpre = dy
    d2 = dpre.reshape(-1, p.out_size)
    grads.W += d2.T @ x.reshape(-1, p.in_size)
    grads.b += d2.sum(axis=0)
    return (d2 @ p.W).reshape(x.shape)


# ------------------------------------------------------------------- losses


def mse_loss(pred, target):
    """Mean squared error over all entries and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse_loss of empty vectors")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_loss(logits, target):
    """Mean binary cross-entropy on logits, written to never overflow."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    if logits.size == 0:
        raise ShapeError("bce_loss of empty vectors")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("binary cross-entropy targets must be 0 or 1")
    # -[y log s(l) + (1-y) log(1-s(l))] == max(l,0) - l*y + log1p(exp(-|l|))
    per = np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - target) / logits.size
    return float(per.mean()), grad


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy for integer labels (batch, classes)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("softmax_cross_entropy of an empty batch")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m=[np.zeros_like(a) for a in params],
            v=[np.zeros_like(a) for a in params],
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must align")
    for g in grads:
        _check_finite(g, "gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} for parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients together so their joint L2 norm is <= max_norm."""
    norm = global_norm(grads)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ----------------------------------------------------------- grad checking


def numerical_gradient(f, params, eps=1e-5):
    """Central differences of scalar ``f()`` wrt every entry of ``params``.

    ``params`` are perturbed in place and restored.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * eps)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-7):
    """max |a - n| / max(|a|, |n|, floor) across a list of arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
