"""Comparison embeddings and the shared linear readout used to score them."""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError, ShapeError
from .model import config_digest


# ----------------------------------------------------------------------- PCA


@dataclass
class PcaModel:
    mean: np.ndarray  # D
    components: np.ndarray  # k x D, orthonormal rows
    explained_variance: np.ndarray  # k, non-increasing

    @property
    def k(self):
        return self.components.shape[0]


def pca_fit(rows, k):
    """Top-``k`` principal axes of ``rows`` (N x D) via a dense eigensolve.

    Each component's largest-magnitude entry is made positive.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("pca_fit expects an N x D matrix")
    N, D = X.shape
    if k < 1 or k > min(N - 1, D):
        raise ValueError(f"k={k} must lie in [1, min(N-1, D)] = [1, {min(N - 1, D)}]")
    mean = X.mean(axis=0)
    C = X - mean
    cov = C.T @ C / (N - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    vals = np.maximum(vals[order], 0.0)
    comps = vecs[:, order].T.copy()
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaModel(mean, comps, vals)


def pca_embed(model, rows):
    """Project row(s) onto the components: C (x - mean)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[-1] != model.mean.size:
        raise ShapeError(f"row has {rows.shape[-1]} entries, PCA expects {model.mean.size}")
    return (rows - model.mean) @ model.components.T


def pca_reconstruct(model, codes):
    return model.mean + np.asarray(codes) @ model.components


def save_pca(path, model, extra=None):
    """Same container idea as model checkpoints: JSON header line + raw <f8."""
    header = {"format_version": 1, "kind": "pca", "D": int(model.mean.size), "k": int(model.k), "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"DRIVE2VEC-PCA 1\n")
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for a in (model.mean, model.components, model.explained_variance):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_pca(path):
    with open(path, "rb") as fh:
        if fh.readline().split()[0] != b"DRIVE2VEC-PCA":
            raise DataError(f"{path} is not a PCA container")
        header = json.loads(fh.readline())
        blob = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    D, k = header["D"], header["k"]
    if blob.size != D + k * D + k:
        raise DataError("PCA container is truncated")
    return PcaModel(blob[:D].copy(), blob[D:D + k * D].reshape(k, D).copy(), blob[D + k * D:].copy())


# ------------------------------------------------------------ last timestep


def last_timestep_predict(window):
    """Repeat the most recent row of a (batch of) window(s)."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim < 2 or w.shape[-2] == 0:
        raise ShapeError("window must have at least one timestep")
    return w[..., -1, :].copy()


# ---------------------------------------------------------- regression head


@dataclass(frozen=True)
class HeadConfig:
    """Identical for every embedding method; its digest proves it."""

    epochs: int = 3000
    lr: float = 0.01
    patience: int = 100
    seed: int = 0

    def digest(self):
        return config_digest(asdict(self))


@dataclass
class RegressionHead:
    """Affine map embed_dim -> D.  Exact heads squash boolean outputs."""

    W: np.ndarray
    b: np.ndarray
    bool_mask: np.ndarray
    kind: str  # "exact" or "avg"
    config_digest: str = ""
    epochs_run: int = 0

    def logits(self, embeddings):
        return np.asarray(embeddings, dtype=np.float64) @ self.W.T + self.b

    def predict(self, embeddings):
        out = self.logits(embeddings)
        if self.kind == "exact" and self.bool_mask.any():
            out[:, self.bool_mask] = nn.sigmoid(out[:, self.bool_mask])
        return out


def head_loss(pred, targets, bool_mask, kind):
    """Exact: MSE(floats) + BCE(booleans on logits).  Avg: MSE over all."""
    if kind == "avg" or not bool_mask.any():
        return nn.mse_loss(pred, targets)
    grad = np.zeros_like(pred)
    loss = 0.0
    fm = ~bool_mask
    if fm.any():
        l, g = nn.mse_loss(pred[:, fm], targets[:, fm])
        loss += l
        grad[:, fm] = g
    l, g = nn.bce_loss(pred[:, bool_mask], targets[:, bool_mask])
    grad[:, bool_mask] = g
    return loss + l, grad


def train_head(embeddings, targets, bool_mask, kind="avg", val=None, config=HeadConfig()):
    """Full-batch Adam on a single affine layer with early stopping on ``val``.

    ``val`` is an optional ``(embeddings, targets)`` pair; without it the
    training loss drives early stopping.  Inputs are standardized internally
    and the scaling is folded back into the returned weights.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if E.ndim != 2 or Y.ndim != 2 or E.shape[0] != Y.shape[0]:
        raise DataError(f"embeddings {E.shape} and targets {Y.shape} are not aligned")
    if E.shape[0] == 0:
        raise DataError("no training pairs")
    if kind not in ("exact", "avg"):
        raise ValueError(f"unknown head kind {kind!r}")
    bool_mask = np.asarray(bool_mask, dtype=bool)
    mu = E.mean(axis=0)
    sd = E.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (E - mu) / sd
    rng = np.random.default_rng(config.seed)
    limit = np.sqrt(6.0 / (E.shape[1] + Y.shape[1]))
    dense = nn.DenseParams(rng.uniform(-limit, limit, (Y.shape[1], E.shape[1])), Y.mean(axis=0).copy())
    if kind == "exact" and bool_mask.any():
        p = np.clip(dense.b[bool_mask], 1e-3, 1 - 1e-3)
        dense.b[bool_mask] = np.log(p / (1 - p))
    params = dense.arrays()
    state = nn.AdamState.for_params(params, lr=config.lr)
    if val is not None:
        Zv = (np.asarray(val[0], dtype=np.float64) - mu) / sd
        Yv = np.asarray(val[1], dtype=np.float64)
    best = (np.inf, dense.W.copy(), dense.b.copy())
    stale = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        pred, cache = nn.dense_forward_cached(Z, dense)
        loss, g = head_loss(pred, Y, bool_mask, kind)
        grads = nn.DenseParams.zeros(dense.in_size, dense.out_size)
        nn.dense_backward(g, cache, dense, grads)
        monitor = loss if val is None else head_loss(Zv @ dense.W.T + dense.b, Yv, bool_mask, kind)[0]
        if monitor < best[0] - 1e-12:
            best = (monitor, dense.W.copy(), dense.b.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        nn.adam_step(params, grads.arrays(), state)
    _, W, b = best
    W_raw = W / sd
    b_raw = b - W_raw @ mu
    return RegressionHead(W_raw, b_raw, bool_mask, kind, config.digest(), epoch)
