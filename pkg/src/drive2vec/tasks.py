"""Downstream evaluations run on a single frozen set of embeddings."""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .baselines import HeadConfig, train_head
from .errors import ConfigError, ContaminationError, DataError, ShapeError

DEFAULT_K_GRID = tuple(round(0.1 * k, 1) for k in range(1, 31))


@dataclass(frozen=True)
class EvalConfig:
    task: str = "exact"  # "exact" or "avg"
    k_seconds: float = 1.0  # exact offset
    horizon_s: int = 100  # averaging horizon
    method: str = "drive2vec"

    def __post_init__(self):
        if self.task not in ("exact", "avg"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "avg" and self.horizon_s not in (1, 10, 100):
            raise ConfigError("average horizon must be 1, 10 or 100 s")


@dataclass
class MetricReport:
    mse: float = float("nan")
    per_channel: np.ndarray = None
    channel_names: list = field(default_factory=list)
    micro_f1: float = float("nan")
    confusion: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def ranking(self):
        """Channel names, worst predicted first."""
        return per_channel_ranking(self.per_channel, self.channel_names)


def per_channel_mse(preds, targets):
    """Channelwise MSE; the overall MSE is the plain mean of this vector."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2:
        raise ShapeError(f"predictions {preds.shape} vs targets {targets.shape}")
    return ((preds - targets) ** 2).mean(axis=0)


def per_channel_ranking(per_channel, names):
    order = np.argsort(-np.asarray(per_channel), kind="mergesort")
    return [(names[i], float(per_channel[i])) for i in order]


def check_disjoint(train_ids, test_ids):
    overlap = set(np.asarray(train_ids).tolist()) & set(np.asarray(test_ids).tolist())
    if overlap:
        raise ContaminationError(f"sessions present in both training and test data: {sorted(overlap)[:5]}")


def score_predictions(preds, targets, names=()):
    pc = per_channel_mse(preds, targets)
    return MetricReport(mse=float(pc.mean()), per_channel=pc, channel_names=list(names))


def eval_prediction(train, train_targets, test, test_targets, bool_mask, task="exact",
                    val=None, head_config=HeadConfig(), names=()):
    """Fit the shared linear head on training embeddings, score the test split.

    ``train``/``test``/``val`` are EmbeddingSets (val optional, as an
    ``(EmbeddingSet, targets)`` pair).  Boolean channels of exact-value heads
    are scored as squared error of the predicted probability.
    """
    check_disjoint(train.session_ids, test.session_ids)
    if len(test) == 0:
        raise DataError("empty test split")
    kind = "exact" if task == "exact" else "avg"
    v = None if val is None else (val[0].vectors, val[1])
    head = train_head(train.vectors, train_targets, bool_mask, kind, val=v, config=head_config)
    report = score_predictions(head.predict(test.vectors), test_targets, names)
    report.extra.update(head_digest=head.config_digest, method=test.method, task=task)
    return report


def offset_key(k_seconds, rate=10):
    return int(round(k_seconds * rate))


def sweep_offset(train, train_offsets, test, test_offsets, bool_mask, k_grid=DEFAULT_K_GRID,
                 val=None, val_offsets=None, head_config=HeadConfig()):
    """Exact-value MSE vs look-ahead K (seconds), a fresh head per K."""
    curve = []
    for K in sorted(set(float(k) for k in k_grid)):
        key = offset_key(K)
        if key not in train_offsets or key not in test_offsets:
            raise DataError(f"no extracted targets for K={K} s")
        v = None if val is None else (val, val_offsets[key])
        rep = eval_prediction(train, train_offsets[key], test, test_offsets[key], bool_mask, "exact",
                              val=v, head_config=head_config)
        curve.append((K, rep.mse))
    return curve


def sweep_embed_size(sizes, evaluate):
    """``evaluate(size) -> short-task MSE`` over deduplicated ascending sizes."""
    uniq = sorted({int(s) for s in sizes})
    if any(s < 1 for s in uniq):
        raise ConfigError("embedding sizes must be positive")
    return [(s, float(evaluate(s))) for s in uniq]


# ---------------------------------------------------------------- driver ID


def micro_f1(predictions, labels):
    """Micro-averaged F1.  Pooled TP/FP/FN over classes."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    if labels.size == 0:
        raise DataError("micro_f1 of empty input")
    tp = fp = fn = 0
    for c in np.union1d(predictions, labels):
        p, l = predictions == c, labels == c
        tp += int(np.sum(p & l))
        fp += int(np.sum(p & ~l))
        fn += int(np.sum(~p & l))
    return 2 * tp / (2 * tp + fp + fn)


def weighted_random_baseline(train_labels, test_labels=None):
    """Hit rate of guessing by training priors: sum_c p_train(c) * p_test(c).

    With identical distributions this is sum_c p_c^2.
    """
    train_labels = np.asarray(train_labels)
    test_labels = train_labels if test_labels is None else np.asarray(test_labels)
    classes = np.union1d(train_labels, test_labels)
    p = np.array([np.mean(train_labels == c) for c in classes])
    q = np.array([np.mean(test_labels == c) for c in classes])
    return float(p @ q)


@dataclass
class DriverIdModel:
    hidden: nn.DenseParams  # embed -> 32, elu
    out: nn.DenseParams  # 32 -> n_drivers
    labels: list
    mu: np.ndarray
    sd: np.ndarray

    def logits(self, embeddings):
        z = (np.asarray(embeddings, dtype=np.float64) - self.mu) / self.sd
        return nn.dense_forward(nn.dense_forward(z, self.hidden), self.out)

    def predict(self, embeddings):
        return np.array(self.labels, dtype=object)[np.argmax(self.logits(embeddings), axis=1)]


def train_driver_id(train_emb, train_labels, test_emb, test_labels, hidden=32, epochs=1000,
                    lr=0.01, seed=0, patience=200):
    """One-hidden-layer softmax classifier.  Returns ``(model, MetricReport)``.

    Every test driver must appear in training.  Training runs
    a fixed budget and keeps the lowest training loss: the validation split
    holds one or two sessions of a few drivers, so it is no guide to test
    accuracy on other drivers.
    """
    train_labels = np.asarray(train_labels, dtype=object)
    test_labels = np.asarray(test_labels, dtype=object)
    classes = sorted(set(train_labels.tolist()))
    if len(classes) < 2:
        raise DataError("need at least two drivers in training")
    unseen = sorted(set(test_labels.tolist()) - set(classes))
    if unseen:
        raise DataError(f"test drivers absent from training: {', '.join(map(str, unseen))}")
    if test_labels.size == 0:
        raise DataError("no test embeddings")
    idx = {c: i for i, c in enumerate(classes)}
    y = np.array([idx[c] for c in train_labels])
    E = np.asarray(train_emb, dtype=np.float64)
    mu = E.mean(axis=0)
    sd = E.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (E - mu) / sd
    rng = np.random.default_rng(seed)
    l1 = nn.DenseParams.glorot(E.shape[1], hidden, rng, "elu")
    l2 = nn.DenseParams.glorot(hidden, len(classes), rng)
    params = l1.arrays() + l2.arrays()
    state = nn.AdamState.for_params(params, lr=lr)
    best = (-np.inf, [p.copy() for p in params])
    stale = 0
    for _ in range(epochs):
        h, c1 = nn.dense_forward_cached(Z, l1)
        logits, c2 = nn.dense_forward_cached(h, l2)
        loss, g = nn.softmax_cross_entropy(logits, y)
        score = -loss
        if score > best[0]:
            best, stale = (score, [p.copy() for p in params]), 0
        else:
            stale += 1
            if stale >= patience:
                break
        g1 = nn.DenseParams.zeros(l1.in_size, l1.out_size)
        g2 = nn.DenseParams.zeros(l2.in_size, l2.out_size)
        dh = nn.dense_backward(g, c2, l2, g2)
        nn.dense_backward(dh, c1, l1, g1)
        nn.adam_step(params, g1.arrays() + g2.arrays(), state)
    for p, b in zip(params, best[1]):
        p[...] = b
    model = DriverIdModel(l1, l2, classes, mu, sd)
    preds = model.predict(test_emb)
    f1 = micro_f1(preds, test_labels)
    conf = np.zeros((len(classes), len(classes)), dtype=int)
    for p, t in zip(preds.tolist(), test_labels.tolist()):
        conf[idx[t], idx[p]] += 1
    report = MetricReport(micro_f1=f1, confusion=conf, extra={
        "accuracy": float(np.mean(preds == test_labels)),
        "random_baseline": weighted_random_baseline(train_labels, test_labels),
        "classes": classes,
        "n_test": int(test_labels.size),
    })
    return model, report


# ---------------------------------------------------------------- plot data


def write_curve(path, rows, digest=""):
    """rows: iterable of (x, y, method, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "method", "seed", "config_digest"])
        for x, y, method, seed in rows:
            w.writerow([repr(float(x)), repr(float(y)), method, seed, digest])
