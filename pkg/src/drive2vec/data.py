"""Sessions, channel schemas, normalization, splitting and window extraction."""
import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SAMPLE_RATE = 10  # Hz
FLOAT, BOOLEAN = "float", "boolean"
BLOCKS = ("exact1s", "avg1s", "avg10s", "avg100s")
AVG_HORIZONS = {"avg1s": 1, "avg10s": 10, "avg100s": 100}  # seconds


@dataclass(frozen=True)
class Channel:
    name: str
    kind: str = FLOAT
    is_metadata: bool = False


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered channels.  Metadata channels ride along but are not signals."""

    channels: tuple

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("channel names must be unique")
        for c in self.channels:
            if c.kind not in (FLOAT, BOOLEAN):
                raise ConfigError(f"channel {c.name!r} has unknown kind {c.kind!r}")
        if self.D < 1:
            raise ConfigError("schema needs at least one non-metadata channel")

    @property
    def names(self):
        return [c.name for c in self.channels]

    @property
    def signals(self):
        return [c for c in self.channels if not c.is_metadata]

    @property
    def signal_names(self):
        return [c.name for c in self.signals]

    @property
    def signal_columns(self):
        return np.array([i for i, c in enumerate(self.channels) if not c.is_metadata], dtype=int)

    @property
    def metadata_names(self):
        return [c.name for c in self.channels if c.is_metadata]

    @property
    def D(self):
        return sum(1 for c in self.channels if not c.is_metadata)

    @property
    def D_float(self):
        return sum(1 for c in self.signals if c.kind == FLOAT)

    @property
    def D_bool(self):
        return sum(1 for c in self.signals if c.kind == BOOLEAN)

    @property
    def bool_mask(self):
        """Boolean mask over the D signal channels."""
        return np.array([c.kind == BOOLEAN for c in self.signals], dtype=bool)

    def signal_index(self, name):
        try:
            return self.signal_names.index(name)
        except ValueError:
            raise DataError(f"unknown channel {name!r}") from None

    def column(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown channel {name!r}") from None

    def to_json(self):
        return [{"name": c.name, "kind": c.kind, "is_metadata": c.is_metadata} for c in self.channels]

    @classmethod
    def from_json(cls, entries):
        return cls(tuple(Channel(e["name"], e["kind"], bool(e.get("is_metadata", False))) for e in entries))

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Session:
    """One drive at 10 Hz; ``values`` columns follow ``schema.channels``."""

    session_id: str
    driver_id: str
    values: np.ndarray
    schema: ChannelSchema
    start_time: float = 0.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema.channels):
            raise DataError(
                f"session {self.session_id}: values {self.values.shape} do not match "
                f"{len(self.schema.channels)} schema channels"
            )
        if self.values.shape[0] < 1:
            raise DataError(f"session {self.session_id} is empty")

    def __len__(self):
        return self.values.shape[0]

    @property
    def signals(self):
        """T x D matrix of the non-metadata channels."""
        return self.values[:, self.schema.signal_columns]

    def channel(self, name):
        return self.values[:, self.schema.column(name)]


def make_session(session_id, driver_id, signals, schema, metadata=None, start_time=0.0):
    """Assemble a session from a T x D signal block plus named metadata columns."""
    signals = np.asarray(signals, dtype=np.float64)
    values = np.empty((signals.shape[0], len(schema.channels)))
    values[:, schema.signal_columns] = signals
    metadata = metadata or {}
    for name in schema.metadata_names:
        values[:, schema.column(name)] = metadata.get(name, 0.0)
    return Session(session_id, driver_id, values, schema, start_time)


# ----------------------------------------------------------- synchronization


def synchronize(streams, rate=SAMPLE_RATE):
    """Sample-and-hold multirate streams onto a uniform grid.

    ``streams`` maps a channel name to ``(timestamps, values)``.  The grid
    spans the time overlap of all streams.  Returns ``(grid_times, matrix)``
    with one column per stream in mapping order.
    """
    if not streams:
        raise DataError("no streams to synchronize")
    prepared = []
    for name, (ts, vs) in streams.items():
        ts = np.asarray(ts, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        if ts.size == 0:
            raise DataError(f"stream {name!r} is empty")
        if ts.shape != vs.shape:
            raise DataError(f"stream {name!r}: {ts.size} timestamps vs {vs.size} values")
        if np.any(np.diff(ts) < 0):
            raise DataError(f"stream {name!r} has non-monotone timestamps")
        prepared.append((ts, vs))
    start = max(ts[0] for ts, _ in prepared)
    end = min(ts[-1] for ts, _ in prepared)
    if end < start:
        raise DataError("streams do not overlap in time")
    n = int(np.floor((end - start) * rate + 1e-9)) + 1
    grid = start + np.arange(n) / rate
    out = np.empty((n, len(prepared)))
    for j, (ts, vs) in enumerate(prepared):
        idx = np.searchsorted(ts, grid + 1e-9, side="right") - 1
        out[:, j] = vs[np.maximum(idx, 0)]
    return grid, out


def synchronize_session(streams, schema, session_id, driver_id, rate=SAMPLE_RATE):
    """Synchronize raw streams (one per schema channel) into a Session."""
    missing = [n for n in schema.names if n not in streams]
    if missing:
        raise DataError(f"no stream for channels {missing}")
    unknown = [n for n in streams if n not in schema.names]
    if unknown:
        raise DataError(f"streams for unknown channels {unknown}")
    grid, mat = synchronize({n: streams[n] for n in schema.names}, rate)
    session = Session(session_id, driver_id, mat, schema, start_time=float(grid[0]), sample_rate=rate)
    _check_booleans(session)
    return session


def _check_booleans(session):
    cols = [i for i, c in enumerate(session.schema.channels) if c.kind == BOOLEAN]
    if not cols:
        return
    block = session.values[:, cols]
    bad = ~((block == 0.0) | (block == 1.0))
    if bad.any():
        row, j = np.argwhere(bad)[0]
        name = session.schema.channels[cols[j]].name
        raise DataError(
            f"session {session.session_id}: boolean channel {name!r} has value "
            f"{block[row, j]!r} at row {row}"
        )


# -------------------------------------------------------------- normalizer


@dataclass
class Normalizer:
    """Per-float-channel z-scoring, indexed by schema channel name."""

    names: list
    mean: np.ndarray
    std: np.ndarray

    def to_json(self):
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(list(d["names"]), np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(sessions, schema):
    """Fit z-scoring on the given (training) sessions only."""
    if not sessions:
        raise DataError("cannot fit a normalizer on zero sessions")
    names = [c.name for c in schema.signals if c.kind == FLOAT]
    cols = [schema.column(n) for n in names]
    stacked = np.concatenate([s.values[:, cols] for s in sessions], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    for name, sd in zip(names, std):
        if not sd > 0:
            raise DataError(f"float channel {name!r} has zero variance")
    return Normalizer(names, mean, std)


def apply_normalizer(session, normalizer):
    cols = [session.schema.column(n) for n in normalizer.names]
    values = session.values.copy()
    values[:, cols] = (values[:, cols] - normalizer.mean) / normalizer.std
    return replace(session, values=values)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError("split ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")


def split_by_session(sessions, spec=SplitSpec()):
    """Seeded session-level train/val/test split balanced by duration.

    Sessions are shuffled, then each goes to the split furthest below its
    duration target.  Every split receives at least one session.
    """
    sessions = list(sessions)
    if len(sessions) < 3:
        raise DataError(f"need at least 3 sessions to split, got {len(sessions)}")
    ids = sorted(s.session_id for s in sessions)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate session ids")
    by_id = {s.session_id: s for s in sessions}
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    total = float(sum(len(s) for s in sessions))
    targets = [r * total for r in spec.ratios]
    assigned = [0.0, 0.0, 0.0]
    buckets = [[], [], []]
    for pos, i in enumerate(order):
        s = by_id[ids[i]]
        remaining = len(order) - pos
        empty = [k for k in range(3) if not buckets[k]]
        if len(empty) >= remaining:
            k = empty[0]
        else:
            k = int(np.argmax([t - a for t, a in zip(targets, assigned)]))
        buckets[k].append(s)
        assigned[k] += len(s)
    return tuple(buckets)


# ---------------------------------------------------------------- windowing


@dataclass
class WindowSet:
    """Column-oriented batch of window samples.

    ``inputs`` is N x window_len x D; ``targets`` maps block name to N x D;
    ``offsets`` maps an exact-target offset in samples to N x D.
    """

    session_ids: np.ndarray
    driver_ids: np.ndarray
    ends: np.ndarray
    inputs: np.ndarray
    targets: dict
    offsets: dict = field(default_factory=dict)
    schema_hash: str = ""

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def keys(self):
        return list(zip(self.session_ids.tolist(), self.ends.tolist()))

    def subset(self, idx):
        idx = np.asarray(idx)
        return WindowSet(
            self.session_ids[idx], self.driver_ids[idx], self.ends[idx], self.inputs[idx],
            {k: v[idx] for k, v in self.targets.items()},
            {k: v[idx] for k, v in self.offsets.items()},
            self.schema_hash,
        )

    def target_matrix(self, blocks=BLOCKS):
        """N x 4 x D stack in block order (missing blocks -> NaN)."""
        D = self.inputs.shape[2]
        out = np.full((len(self), len(blocks), D), np.nan)
        for k, b in enumerate(blocks):
            if b in self.targets:
                out[:, k] = self.targets[b]
        return out


def max_horizon_samples(horizons=(1, 10, 100), k_offsets=(), rate=SAMPLE_RATE):
    """Longest future reach of a window, in samples."""
    reach = [rate]  # exact@+1s is always extracted
    reach += [int(round(h * rate)) for h in horizons]
    reach += [int(k) for k in k_offsets]
    return max(reach)


def window_count(T, stride, h_max, window_len=10):
    """Number of windows ``extract_windows`` yields (closed form)."""
    last = T - 1 - h_max
    first = window_len - 1
    if last < first:
        return 0
    return (last - first) // stride + 1


def extract_windows(session, stride=10, horizons=(1, 10, 100), k_offsets=(), window_len=10, ends=None):
    """Sliding windows with multiscale future targets.

    Windows end at t = window_len-1, window_len-1+stride, ...; a window is kept
    only if every enabled horizon fits inside the session.  ``k_offsets`` are
    extra exact-target offsets in samples.  ``ends`` overrides the end indices
    (they must still leave room for the horizons).
    """
    rate = session.sample_rate
    X = session.signals
    T, D = X.shape
    h_max = max_horizon_samples(horizons, k_offsets, rate)
    if ends is None:
        ends = np.arange(window_len - 1, T - h_max, stride, dtype=int)
    else:
        ends = np.asarray(ends, dtype=int)
        if ends.size and (ends.min() < window_len - 1 or ends.max() > T - 1 - h_max):
            raise DataError("requested window ends leave no room for the input or horizons")
    n = ends.size
    inputs = np.empty((n, window_len, D))
    for k in range(window_len):
        inputs[:, k] = X[ends - (window_len - 1) + k]
    csum = np.vstack([np.zeros((1, D)), np.cumsum(X, axis=0)])
    targets = {"exact1s": X[ends + rate].copy()}
    for name, secs in AVG_HORIZONS.items():
        h = int(round(secs * rate))
        if secs in horizons:
            # mean of rows t+1 .. t+h
            targets[name] = (csum[ends + h + 1] - csum[ends + 1]) / h
    offsets = {int(k): X[ends + int(k)].copy() for k in k_offsets}
    return WindowSet(
        session_ids=np.array([session.session_id] * n, dtype=object),
        driver_ids=np.array([session.driver_id] * n, dtype=object),
        ends=ends,
        inputs=inputs,
        targets=targets,
        offsets=offsets,
        schema_hash=session.schema.hash(),
    )


def concat_windows(sets):
    sets = [s for s in sets if len(s)]
    if not sets:
        raise DataError("no windows to concatenate")
    first = sets[0]
    return WindowSet(
        np.concatenate([s.session_ids for s in sets]),
        np.concatenate([s.driver_ids for s in sets]),
        np.concatenate([s.ends for s in sets]),
        np.concatenate([s.inputs for s in sets]),
        {k: np.concatenate([s.targets[k] for s in sets]) for k in first.targets},
        {k: np.concatenate([s.offsets[k] for s in sets]) for k in first.offsets},
        first.schema_hash,
    )


def windows_for(sessions, **kwargs):
    return concat_windows([extract_windows(s, **kwargs) for s in sessions])


# ----------------------------------------------------------------------- IO


def _fmt(v):
    return repr(float(v))


def save_session(directory, session):
    """Write ``<id>.csv`` and its ``<id>.json`` sidecar into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema = session.schema
    kinds = [c.kind for c in schema.channels]
    with open(directory / f"{session.session_id}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + schema.names)
        for i, row in enumerate(session.values):
            w.writerow([i] + [str(int(v)) if k == BOOLEAN else _fmt(v) for v, k in zip(row, kinds)])
    sidecar = {
        "session_id": session.session_id,
        "driver_id": session.driver_id,
        "sample_rate": session.sample_rate,
        "start_time": session.start_time,
        "channels": schema.to_json(),
    }
    (directory / f"{session.session_id}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def save_sessions(directory, sessions):
    for s in sessions:
        save_session(directory, s)


def load_session(csv_path, schema=None):
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    file_schema = ChannelSchema.from_json(meta["channels"])
    schema = schema or file_schema
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "index":
            raise DataError(f"{csv_path.name}: first column must be 'index'")
        cols = header[1:]
        unknown = [c for c in cols if c not in schema.names]
        if unknown:
            raise DataError(f"{csv_path.name}: unknown channel {unknown[0]!r}")
        if cols != schema.names:
            missing = [c for c in schema.names if c not in cols]
            raise DataError(f"{csv_path.name}: columns do not match schema (missing {missing})")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{csv_path.name}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{csv_path.name}: malformed number in row {lineno}") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))
    for j, c in enumerate(schema.channels):
        if c.kind == BOOLEAN:
            bad = np.flatnonzero(~((values[:, j] == 0.0) | (values[:, j] == 1.0)))
            if bad.size:
                raise DataError(
                    f"{csv_path.name}: boolean channel {c.name!r} has value {values[bad[0], j]!r} "
                    f"in row {bad[0] + 2}"
                )
    return Session(
        meta["session_id"], meta["driver_id"], values, schema,
        start_time=float(meta.get("start_time", 0.0)), sample_rate=int(meta.get("sample_rate", SAMPLE_RATE)),
    )


def load_sessions(directory, schema=None):
    """Load every session CSV in ``directory`` (sorted by file name)."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("*.csv") if p.with_suffix(".json").exists())
    if not paths:
        raise DataError(f"no sessions found in {directory}")
    return [load_session(p, schema) for p in paths]
