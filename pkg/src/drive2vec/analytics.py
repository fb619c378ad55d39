"""Case studies on embeddings: maneuver mining, hard-brake detection, t-SNE and
RGB tracks for map overlays."""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .baselines import pca_fit, pca_embed
from .errors import ConfigError, DataError
from .model import forward_embed

MANEUVER_CHANNELS = {"brake_slam": "brake_pedal", "gas_slam": "gas_pedal", "turn": "heading"}


@dataclass
class ManeuverEvent:
    kind: str
    session_id: str
    start: int
    score: float
    embedding: np.ndarray = None


@dataclass(frozen=True)
class DetectorConfig:
    channel: str = "brake_pedal"
    epsilon: float = 25.0
    window: int = 4  # samples (0.4 s at 10 Hz)
    top_k: int = 10
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.window < 2:
            raise ConfigError("detector window must span at least 2 samples")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def window_scores(values, window=4):
    """max - min of the channel over [i, i + window) for every start i."""
    return _kernels.sliding_range(np.ascontiguousarray(values, dtype=np.float64), int(window))


def scan_events(values, config=DetectorConfig(), mode="threshold", kind="event", session_id=""):
    """Greedy non-overlapping peaks of the 0.4 s max-min score.

    ``mode='threshold'`` keeps every peak with score >= epsilon;
    ``mode='top'`` keeps the ``top_k`` highest peaks.  Ties go to the earlier
    start.  Results are sorted by descending score.
    """
    if mode not in ("threshold", "top"):
        raise ConfigError(f"unknown scan mode {mode!r}")
    scores = window_scores(values, config.window)
    if scores.size == 0:
        return []
    order = np.argsort(-scores, kind="mergesort")
    taken = np.zeros(scores.size + config.window, dtype=bool)
    events = []
    for i in order:
        s = scores[i]
        if s <= 0 or (mode == "threshold" and s < config.epsilon):
            break
        lo = max(0, i - config.window + 1)
        if taken[lo:i + config.window].any():
            continue
        taken[i:i + config.window] = True
        events.append(ManeuverEvent(kind, session_id, int(i), float(s)))
        if mode == "top" and len(events) >= config.top_k:
            break
    return events


def scan_session(session, config=DetectorConfig(), mode="threshold", kind="event"):
    try:
        col = session.channel(config.channel)
    except DataError:
        raise DataError(f"unknown channel {config.channel!r}") from None
    return scan_events(col, config, mode, kind, session.session_id)


# ---------------------------------------------------------------- similarity


class SimilarityIndex:
    """Exact max-cosine lookup against unit-normalized references."""

    def __init__(self, vectors, metadata=None):
        V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if V.shape[0] == 0:
            raise DataError("similarity index needs at least one reference")
        norms = np.linalg.norm(V, axis=1)
        if np.any(norms == 0):
            raise DataError("zero-norm vectors cannot be indexed")
        self.vectors = V / norms[:, None]
        self.metadata = list(metadata) if metadata is not None else [None] * V.shape[0]

    def score(self, query):
        """Max cosine similarity of each query row to the references."""
        Q = np.asarray(query, dtype=np.float64)
        single = Q.ndim == 1
        Q = np.atleast_2d(Q)
        norms = np.linalg.norm(Q, axis=1)
        if np.any(norms == 0):
            raise DataError("zero-norm query")
        sims = np.clip((Q / norms[:, None]) @ self.vectors.T, -1.0, 1.0)
        best = sims.max(axis=1)
        return float(best[0]) if single else best


def cosine_matrix(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return (A / np.linalg.norm(A, axis=1, keepdims=True)) @ (B / np.linalg.norm(B, axis=1, keepdims=True)).T


# --------------------------------------------------------------------- AUROC


def auroc(positive, negative):
    """Mann-Whitney AUROC with average ranks for ties."""
    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.asarray(negative, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUROC needs at least one positive and one negative score")
    ranks = _kernels.average_ranks(np.concatenate([pos, neg]))
    n_pos = pos.size
    r_pos = ranks[:n_pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * neg.size))


def roc_points(positive, negative):
    """(fpr, tpr) pairs at every distinct threshold, from (0,0) to (1,1)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pts = [(0.0, 0.0)]
    for t in thresholds:
        pts.append((float(np.mean(neg >= t)), float(np.mean(pos >= t))))
    return pts


# ------------------------------------------------------------ hard brakes


def input_windows(session, ends, window_len=10):
    X = session.signals
    ends = np.asarray(ends, dtype=int)
    if ends.size and (ends.min() < window_len - 1 or ends.max() >= X.shape[0]):
        raise DataError("window end outside the session")
    return np.stack([X[ends - (window_len - 1) + k] for k in range(window_len)], axis=1) if ends.size \
        else np.zeros((0, window_len, X.shape[1]))


def embed_all_windows(model, session, window_len=10, batch_size=2048):
    """Stride-1 embeddings of every full window; returns (ends, vectors)."""
    ends = np.arange(window_len - 1, len(session))
    vecs = np.empty((ends.size, model.arch.embed_dim))
    for lo in range(0, ends.size, batch_size):
        e = ends[lo:lo + batch_size]
        vecs[lo:lo + e.size] = forward_embed(model, input_windows(session, e, window_len)).reshape(e.size, -1)
    return ends, vecs


@dataclass
class HardBrakeResult:
    auroc: float
    positive_scores: np.ndarray
    negative_scores: np.ndarray
    n_events: int
    n_index: int
    top_negatives: list = field(default_factory=list)  # (session, end, score, max brake diff next 1 s)
    events: list = field(default_factory=list)


def dense_embeddings(model, norm_sessions, batch_size=2048):
    """session_id -> (ends, vectors) for every stride-1 window."""
    return {s.session_id: embed_all_windows(model, s, model.arch.window_len, batch_size) for s in norm_sessions}


def hard_brake_experiment(dense, raw_sessions, config=DetectorConfig(), seed=0, n_top=10, window_len=10):
    """Nearest-neighbour cosine detector of pre-slam states.

    ``dense`` maps session ids to stride-1 ``(ends, vectors)`` as returned by
    :func:`dense_embeddings`.  Events are found on raw (unnormalized) pedal
    values; their embedding is the window ending at the event start, i.e.
    before the pedal moves.  A random ``train_fraction`` of events forms the
    index, the rest are positives, and every other window is a negative.
    """
    events = []
    for raw in raw_sessions:
        events += [e for e in scan_session(raw, config, "threshold", "brake_slam") if e.start >= window_len - 1]
    if len(events) < 5:
        raise DataError(f"only {len(events)} hard-brake events; need at least 5")
    missing = sorted({s.session_id for s in raw_sessions} - set(dense))
    if missing:
        raise DataError(f"no embeddings for sessions {missing[:5]}")
    ends = np.concatenate([dense[s.session_id][0] for s in raw_sessions])
    vecs = np.concatenate([dense[s.session_id][1] for s in raw_sessions])
    sids = np.concatenate([np.array([s.session_id] * len(dense[s.session_id][0]), dtype=object) for s in raw_sessions])
    pos_lookup = {(s, int(e)): i for i, (s, e) in enumerate(zip(sids.tolist(), ends.tolist()))}
    try:
        ev_rows = np.array([pos_lookup[(e.session_id, e.start)] for e in events])
    except KeyError as exc:
        raise DataError(f"no embedding for event window {exc}") from None
    for e, r in zip(events, ev_rows):
        e.embedding = vecs[r]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(events))
    n_index = int(round(config.train_fraction * len(events)))
    n_index = min(max(n_index, 1), len(events) - 1)
    index_rows = ev_rows[perm[:n_index]]
    pos_rows = ev_rows[perm[n_index:]]
    neg_mask = np.ones(len(vecs), dtype=bool)
    neg_mask[ev_rows] = False
    index = SimilarityIndex(vecs[index_rows])
    pos_scores = index.score(vecs[pos_rows])
    neg_scores = index.score(vecs[neg_mask])
    value = auroc(pos_scores, neg_scores)

    neg_idx = np.flatnonzero(neg_mask)
    top = neg_idx[np.argsort(-neg_scores, kind="mergesort")[:n_top]]
    raw_by_id = {s.session_id: s for s in raw_sessions}
    top_rows = []
    for r in top:
        brake = raw_by_id[sids[r]].channel(config.channel)
        seg = brake[ends[r]:ends[r] + 10 + config.window]
        diff = float(window_scores(seg, config.window).max()) if seg.size >= config.window else 0.0
        top_rows.append((sids[r], int(ends[r]), float(index.score(vecs[r])), diff))
    return HardBrakeResult(value, pos_scores, neg_scores, len(events), n_index, top_rows, events)


# ----------------------------------------------------------- maneuver study


def top_maneuvers(raw_sessions, top_k=10, window=4, window_len=10):
    """Top-k brake slams, gas slams and turns over a set of sessions."""
    out = {}
    for kind, channel in MANEUVER_CHANNELS.items():
        cfg = DetectorConfig(channel=channel, top_k=top_k, window=window)
        cands = []
        for s in raw_sessions:
            evs = scan_session(s, cfg, "top", kind)
            cands += [e for e in evs if e.start >= window_len - 1]
        cands.sort(key=lambda e: (-e.score, e.session_id, e.start))
        out[kind] = cands[:top_k]
    return out


def attach_embeddings(events, dense):
    """Set ``event.embedding`` to the window ending at the event start."""
    for e in events:
        if e.session_id not in dense:
            raise DataError(f"no embeddings for session {e.session_id}")
        ends, vecs = dense[e.session_id]
        i = np.searchsorted(ends, e.start)
        if i >= ends.size or ends[i] != e.start:
            raise DataError(f"no embedding ending at {e.session_id}:{e.start}")
        e.embedding = vecs[i]
    return events


def separability_margin(groups, center=None):
    """Mean intra-class minus mean inter-class cosine similarity.

    ``groups`` maps a label to an n x d array.  Self-pairs are excluded from
    the intra-class mean.  ``center`` (optional) is subtracted first.
    """
    labels = list(groups)
    if len(labels) < 2:
        raise DataError("need at least two groups")
    mats = {k: np.asarray(groups[k], dtype=np.float64) - (0.0 if center is None else center) for k in labels}
    intra, inter = [], []
    for i, a in enumerate(labels):
        S = cosine_matrix(mats[a], mats[a])
        n = S.shape[0]
        if n > 1:
            intra.append(S[~np.eye(n, dtype=bool)])
        for b in labels[i + 1:]:
            inter.append(cosine_matrix(mats[a], mats[b]).ravel())
    intra_mean = float(np.concatenate(intra).mean())
    inter_mean = float(np.concatenate(inter).mean())
    return intra_mean - inter_mean, intra_mean, inter_mean


# ---------------------------------------------------------------------- t-SNE


@dataclass
class TsneResult:
    Y: np.ndarray
    kl_trace: list
    betas: np.ndarray


def joint_affinities(X, perplexity=30.0, tol=1e-5, max_iter=200, seed=0):
    """Symmetric t-SNE input affinities with per-point bisection on sigma.

    Rows whose entropy cannot reach log(perplexity) (e.g. exact duplicates)
    trigger one retry after adding N(0, 1e-10) jitter.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if perplexity <= 0 or n < 3 * perplexity:
        raise ConfigError(f"t-SNE needs N >= 3 * perplexity (N={n}, perplexity={perplexity})")
    target = np.log(perplexity)
    for attempt in range(2):
        sq = (X * X).sum(axis=1)
        D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
        P, betas, err = _kernels.perplexity_search(np.ascontiguousarray(D2), target, tol, max_iter)
        if np.all(err <= tol) or attempt == 1:
            break
        X = X + np.random.default_rng(seed).normal(0.0, 1e-10, X.shape)
    P = (P + P.T) / (2.0 * n)
    return P, betas


def tsne_objective(P, Y):
    """KL(P || Q) and gradient wrt the 2-d coordinates."""
    return _kernels.tsne_kl_grad(np.ascontiguousarray(P), np.ascontiguousarray(Y), 1.0)


def tsne(X, perplexity=30.0, iters=1000, seed=0, learning_rate=200.0, exaggeration=4.0,
         exaggeration_iters=100, momentum=(0.5, 0.8), momentum_switch=250, dim=2):
    """Exact t-SNE by momentum gradient descent; records KL each iteration."""
    P, betas = joint_affinities(X, perplexity, seed=seed)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, (P.shape[0], dim))
    vel = np.zeros_like(Y)
    trace = []
    for it in range(iters):
        ex = exaggeration if it < exaggeration_iters else 1.0
        kl_ex, grad = _kernels.tsne_kl_grad(P, Y, ex)
        # KL under exaggeration e equals e*KL + e*log(e) (P sums to one)
        trace.append(kl_ex / ex - np.log(ex))
        mom = momentum[0] if it < momentum_switch else momentum[1]
        vel = mom * vel - learning_rate * grad
        Y = Y + vel
        Y = Y - Y.mean(axis=0)
    trace.append(tsne_objective(P, Y)[0])
    return TsneResult(Y, trace, betas)


def silhouette(points, labels):
    """Mean silhouette coefficient (Euclidean)."""
    X = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    sq = (X * X).sum(axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
    classes = np.unique(labels)
    s = np.zeros(len(X))
    for i in range(len(X)):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = D[i, same].mean()
        b = min(D[i, labels == c].mean() for c in classes if c != labels[i])
        s[i] = (b - a) / max(a, b)
    return float(s.mean())


# ---------------------------------------------------------- RGB map tracks


def pca3_rgb(embeddings, lat, lon):
    """Rows of (lat, lon, R, G, B) from a per-session 3-component PCA.

    Each component is min-max scaled to [0, 1]; flat components (and fully
    constant embeddings) map to 0.5.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if E.shape[0] != lat.size or lat.size != lon.size:
        raise DataError("embeddings and coordinates must align")
    n = E.shape[0]
    rgb = np.full((n, 3), 0.5)
    spread = E.max(axis=0) - E.min(axis=0) if n else np.zeros(E.shape[1])
    if n >= 2 and np.any(spread > 1e-12):
        k = min(3, n - 1, E.shape[1])
        codes = pca_embed(pca_fit(E, k), E)
        for j in range(k):
            lo, hi = codes[:, j].min(), codes[:, j].max()
            if hi - lo > 1e-12 * max(1.0, abs(hi), abs(lo)):
                rgb[:, j] = (codes[:, j] - lo) / (hi - lo)
    return np.column_stack([lat, lon, rgb])
