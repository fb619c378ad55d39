"""Stacked-GRU window encoder with a four-block multiscale output head."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import BLOCKS
from .errors import ConfigError, ContaminationError, DataError, NumericError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DRIVE2VEC-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    window_len: int = 10
    gru_hidden: int = 256
    embed_dim: int = 64

    def __post_init__(self):
        for name in ("input_dim", "window_len", "gru_hidden", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def output_dim(self):
        return 4 * self.input_dim


@dataclass
class Drive2VecModel:
    gru1: nn.GruParams
    gru2: nn.GruParams
    fc1: nn.DenseParams
    fc2: nn.DenseParams
    arch: ArchConfig
    schema_hash: str = ""

    def __post_init__(self):
        a = self.arch
        chain = [
            ("gru1", self.gru1.input_size, a.input_dim), ("gru1", self.gru1.hidden_size, a.gru_hidden),
            ("gru2", self.gru2.input_size, a.gru_hidden), ("gru2", self.gru2.hidden_size, a.gru_hidden),
            ("fc1", self.fc1.in_size, a.gru_hidden), ("fc1", self.fc1.out_size, a.embed_dim),
            ("fc2", self.fc2.in_size, a.embed_dim), ("fc2", self.fc2.out_size, a.output_dim),
        ]
        for layer, got, want in chain:
            if got != want:
                raise ShapeError(f"{layer}: size {got} does not match architecture ({want})")

    def named_parameters(self):
        """(name, array) pairs in the fixed checkpoint order."""
        out = []
        for prefix, layer in (("gru1", self.gru1), ("gru2", self.gru2), ("fc1", self.fc1), ("fc2", self.fc2)):
            for n in layer.ORDER:
                out.append((f"{prefix}.{n}", getattr(layer, n)))
        return out

    def parameters(self):
        return [a for _, a in self.named_parameters()]

    def copy(self):
        return Drive2VecModel(
            nn.GruParams(*[a.copy() for a in self.gru1.arrays()]),
            nn.GruParams(*[a.copy() for a in self.gru2.arrays()]),
            nn.DenseParams(self.fc1.W.copy(), self.fc1.b.copy(), self.fc1.activation),
            nn.DenseParams(self.fc2.W.copy(), self.fc2.b.copy(), self.fc2.activation),
            self.arch, self.schema_hash,
        )


def build_model(arch, seed=0, init="glorot", schema_hash=""):
    """Fresh model.  ``init='zeros'`` gives the all-zero model used in tests."""
    D, H, E = arch.input_dim, arch.gru_hidden, arch.embed_dim
    if init == "zeros":
        return Drive2VecModel(
            nn.GruParams.zeros(D, H), nn.GruParams.zeros(H, H),
            nn.DenseParams.zeros(H, E, "elu"), nn.DenseParams.zeros(E, 4 * D),
            arch, schema_hash,
        )
    if init != "glorot":
        raise ConfigError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    return Drive2VecModel(
        nn.GruParams.glorot(D, H, rng),
        nn.GruParams.glorot(H, H, rng),
        nn.DenseParams.glorot(H, E, rng, "elu"),
        nn.DenseParams.glorot(E, 4 * D, rng),
        arch, schema_hash,
    )


# ----------------------------------------------------------------- forward


@dataclass
class ForwardCache:
    caches1: list
    caches2: list
    fc1: tuple
    fc2: tuple
    batch_shape: tuple


def _as_batch(model, windows):
    w = np.asarray(windows, dtype=np.float64)
    single = w.ndim == 2
    if single:
        w = w[None]
    a = model.arch
    if w.ndim != 3 or w.shape[1:] != (a.window_len, a.input_dim):
        raise ShapeError(f"window shape {np.shape(windows)} does not match ({a.window_len}, {a.input_dim})")
    return w, single


def forward(model, windows):
    """Full forward pass with caches.  Returns ``(embedding, outputs, cache)``."""
    w, single = _as_batch(model, windows)
    xs = np.swapaxes(w, 0, 1)  # time first
    hs1, c1 = nn.gru_sequence(xs, model.gru1)
    hs2, c2 = nn.gru_sequence(hs1, model.gru2)
    emb, fc1_cache = nn.dense_forward_cached(hs2[-1], model.fc1)
    out, fc2_cache = nn.dense_forward_cached(emb, model.fc2)
    cache = ForwardCache(c1, c2, fc1_cache, fc2_cache, w.shape)
    if single:
        return emb[0], out[0], cache
    return emb, out, cache


def forward_embed(model, windows):
    """Embedding(s) of one window (T x D) or a batch (N x T x D)."""
    w, single = _as_batch(model, windows)
    xs = np.swapaxes(w, 0, 1)
    hs1, _ = nn.gru_sequence(xs, model.gru1)
    hs2, _ = nn.gru_sequence(hs1, model.gru2)
    emb = nn.dense_forward(hs2[-1], model.fc1)
    return emb[0] if single else emb


def forward_full(model, windows):
    """``(embedding, outputs)`` where outputs reshape to 4 x D blocks.

    Channel j of block k sits at flat index k*D + j.  Boolean channels of the
    exact block are logits; everything else is a raw prediction.
    """
    emb, out, _ = forward(model, windows)
    return emb, out


def backward(model, cache, d_outputs, d_embedding=None):
    """Gradients of every parameter, in ``named_parameters`` order."""
    if cache is None or not cache.caches1:
        raise ShapeError("backward needs the cache of a forward pass")
    d_outputs = np.asarray(d_outputs, dtype=np.float64).reshape(cache.batch_shape[0], -1)
    g_fc2 = nn.DenseParams.zeros(model.fc2.in_size, model.fc2.out_size)
    g_fc1 = nn.DenseParams.zeros(model.fc1.in_size, model.fc1.out_size)
    d_emb = nn.dense_backward(d_outputs, cache.fc2, model.fc2, g_fc2)
    if d_embedding is not None:
        d_emb = d_emb + np.asarray(d_embedding).reshape(d_emb.shape)
    d_h2_last = nn.dense_backward(d_emb, cache.fc1, model.fc1, g_fc1)
    T = len(cache.caches2)
    d_hs2 = np.zeros((T,) + d_h2_last.shape)
    d_hs2[-1] = d_h2_last
    d_hs1, g2, _ = nn.gru_sequence_backward(d_hs2, cache.caches2, model.gru2)
    _, g1, _ = nn.gru_sequence_backward(d_hs1, cache.caches1, model.gru1)
    return g1.arrays() + g2.arrays() + g_fc1.arrays() + g_fc2.arrays()


# -------------------------------------------------------------------- loss


@dataclass
class LossReport:
    total: float
    per_block: dict
    float_part: dict
    bool_part: dict


def composite_loss(outputs, targets, bool_mask, loss_mask=BLOCKS):
    """Summed multiscale loss and its gradient wrt ``outputs`` (N x 4D).

    ``targets`` maps block name to an N x D array (or is an N x 4 x D stack).
    Exact block: mean-BCE over boolean channels (outputs are logits) plus
    mean-MSE over float channels.  Average blocks: mean-MSE over all channels.
    Per-sample losses are averaged over the batch.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    single = outputs.ndim == 1
    out2 = outputs.reshape(1, -1) if single else outputs
    N = out2.shape[0]
    bool_mask = np.asarray(bool_mask, dtype=bool)
    D = bool_mask.size
    if out2.shape[1] != 4 * D:
        raise ShapeError(f"outputs have {out2.shape[1]} columns, expected {4 * D}")
    loss_mask = tuple(b for b in BLOCKS if b in set(loss_mask))
    if not loss_mask:
        raise ConfigError("loss mask is empty")
    if not isinstance(targets, dict):
        t = np.asarray(targets, dtype=np.float64).reshape(N, 4, D)
        targets = {b: t[:, k] for k, b in enumerate(BLOCKS)}
    blocks = out2.reshape(N, 4, D)
    grad = np.zeros_like(blocks)
    per_block = {b: 0.0 for b in BLOCKS}
    fpart = {b: 0.0 for b in BLOCKS}
    bpart = {b: 0.0 for b in BLOCKS}
    fmask = ~bool_mask
    for k, b in enumerate(BLOCKS):
        if b not in loss_mask:
            continue
        if b not in targets:
            raise DataError(f"missing targets for block {b!r}")
        tgt = np.asarray(targets[b], dtype=np.float64).reshape(N, D)
        pred = blocks[:, k]
        if b == "exact1s":
            if fmask.any():
                l, g = nn.mse_loss(pred[:, fmask], tgt[:, fmask])
                fpart[b] = l
                grad[:, k, fmask] = g
            if bool_mask.any():
                try:
                    l, g = nn.bce_loss(pred[:, bool_mask], tgt[:, bool_mask])
                except ValueError as exc:
                    raise DataError(f"exact boolean targets: {exc}") from None
                bpart[b] = l
                grad[:, k, bool_mask] = g
        else:
            l, g = nn.mse_loss(pred, tgt)
            fpart[b] = nn.mse_loss(pred[:, fmask], tgt[:, fmask])[0] if fmask.any() else 0.0
            bpart[b] = nn.mse_loss(pred[:, bool_mask], tgt[:, bool_mask])[0] if bool_mask.any() else 0.0
            per_block[b] = l
            grad[:, k] = g
        if b == "exact1s":
            per_block[b] = fpart[b] + bpart[b]
    # nn losses average over all N*n entries, i.e. already per-sample mean / N
    total = float(sum(per_block[b] for b in loss_mask))
    if not np.isfinite(total):
        raise NumericError("composite loss is not finite")
    g = grad.reshape(out2.shape)
    return LossReport(total, per_block, fpart, bpart), (g[0] if single else g)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    loss_mask: tuple = BLOCKS
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    clip_norm: float = 5.0

    def __post_init__(self):
        mask = tuple(b for b in BLOCKS if b in set(self.loss_mask))
        unknown = set(self.loss_mask) - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown loss blocks {sorted(unknown)}")
        if not mask:
            raise ConfigError("loss_mask must not be empty")
        object.__setattr__(self, "loss_mask", mask)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def digest(self):
        return config_digest(asdict(self))


def config_digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


SHORT_ONLY = ("exact1s",)
LONG_ONLY = ("avg100s",)


def evaluate_loss(model, windows, bool_mask, loss_mask, batch_size=512):
    """Masked composite loss averaged over a WindowSet (batch-size weighted)."""
    n = len(windows)
    if n == 0:
        raise DataError("cannot evaluate on zero windows")
    total = 0.0
    for lo in range(0, n, batch_size):
        idx = slice(lo, min(n, lo + batch_size))
        _, out = forward_full(model, windows.inputs[idx])
        tg = {b: windows.targets[b][idx] for b in loss_mask}
        rep, _ = composite_loss(out, tg, bool_mask, loss_mask)
        total += rep.total * (idx.stop - idx.start)
    return total / n


def loss_and_grads(model, inputs, targets, bool_mask, loss_mask):
    _, out, cache = forward(model, inputs)
    rep, g = composite_loss(out, targets, bool_mask, loss_mask)
    return rep, backward(model, cache, g)


@dataclass
class TrainResult:
    model: Drive2VecModel
    history: list = field(default_factory=list)
    best_epoch: int = 0


def train(train_set, val_set, arch, config, bool_mask, schema_hash="", model=None):
    """Minibatch Adam with best-validation checkpointing and early stopping.

    History row 0 is the untrained model; epochs count from 1.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation splits must be non-empty")
    for ws in (train_set, val_set):
        if schema_hash and ws.schema_hash and ws.schema_hash != schema_hash:
            raise ContaminationError("window set was built with a different schema")
    model = model or build_model(arch, config.seed, schema_hash=schema_hash)
    params = model.parameters()
    state = nn.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    mask = config.loss_mask

    def _val():
        return evaluate_loss(model, val_set, bool_mask, mask)

    best_val = _val()
    best = model.copy()
    best_epoch = 0
    history = [{"epoch": 0, "train_loss": evaluate_loss(model, train_set, bool_mask, mask), "val_loss": best_val}]
    stale = 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        seen, running = 0, 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            tg = {b: train_set.targets[b][idx] for b in mask}
            rep, grads = loss_and_grads(model, train_set.inputs[idx], tg, bool_mask, mask)
            if not np.isfinite(rep.total):
                raise NumericError(f"training diverged at epoch {epoch}")
            grads, _ = nn.clip_by_global_norm(grads, config.clip_norm)
            nn.adam_step(params, grads, state)
            running += rep.total * idx.size
            seen += idx.size
        val = _val()
        history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val})
        log.debug("epoch %d train %.5f val %.5f", epoch, running / seen, val)
        if val < best_val:
            best_val, best, best_epoch, stale = val, model.copy(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, history, best_epoch)


# --------------------------------------------------------------- inference


@dataclass
class EmbeddingSet:
    """Embeddings keyed by (session_id, window end index)."""

    session_ids: np.ndarray
    driver_ids: np.ndarray
    ends: np.ndarray
    vectors: np.ndarray
    schema_hash: str = ""
    method: str = ""

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def keys(self):
        return list(zip(self.session_ids.tolist(), self.ends.tolist()))

    def subset(self, idx):
        return EmbeddingSet(self.session_ids[idx], self.driver_ids[idx], self.ends[idx],
                            self.vectors[idx], self.schema_hash, self.method)


def embed_dataset(model, windows, batch_size=1024):
    """One embedding per window, keyed like the input WindowSet."""
    if windows.schema_hash and model.schema_hash and windows.schema_hash != model.schema_hash:
        raise ContaminationError(
            f"windows use schema {windows.schema_hash} but the model was trained on {model.schema_hash}"
        )
    n = len(windows)
    vecs = np.empty((n, model.arch.embed_dim))
    for lo in range(0, n, batch_size):
        vecs[lo:lo + batch_size] = forward_embed(model, windows.inputs[lo:lo + batch_size]).reshape(-1, model.arch.embed_dim)
    return EmbeddingSet(windows.session_ids, windows.driver_ids, windows.ends, vecs,
                        windows.schema_hash or model.schema_hash, "drive2vec")


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, model, normalizer=None, seed=None, train_config=None, extra=None):
    """Text header (one JSON line) then raw little-endian float64 blocks."""
    table = [{"name": n, "shape": list(a.shape)} for n, a in model.named_parameters()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "schema_hash": model.schema_hash,
        "normalizer": normalizer.to_json() if normalizer is not None else None,
        "seed": seed,
        "train_config_digest": train_config.digest() if train_config is not None else None,
        "train_config": asdict(train_config) if train_config is not None else None,
        "activations": {"fc1": model.fc1.activation, "fc2": model.fc2.activation},
        "parameters": table,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for _, a in model.named_parameters():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a drive2vec checkpoint")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {magic[1]}")
        header = json.loads(fh.readline().decode())
        return header, fh.read()


def load_checkpoint(path):
    """Returns ``(model, header)``; the normalizer (if any) is in the header."""
    header, blob = read_checkpoint_header(path)
    arch = ArchConfig(**header["arch"])
    arrays, pos = {}, 0
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(blob):
            raise DataError("checkpoint is truncated")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise DataError("checkpoint has trailing bytes")
    act = header.get("activations", {})

    def gru(prefix):
        return nn.GruParams(*[arrays[f"{prefix}.{n}"] for n in nn.GruParams.ORDER])

    model = Drive2VecModel(
        gru("gru1"), gru("gru2"),
        nn.DenseParams(arrays["fc1.W"], arrays["fc1.b"], act.get("fc1", "elu")),
        nn.DenseParams(arrays["fc2.W"], arrays["fc2.b"], act.get("fc2", "identity")),
        arch, header.get("schema_hash", ""),
    )
    return model, header
