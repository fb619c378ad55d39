"""The shared embeddings artifact consumed by every downstream command.

Layout mirrors model checkpoints: a magic line, one JSON header line, then
raw little-endian float64 rows.  Rows are grouped into segments, each a run
of window ends ``first, first+step, ...`` within one session, so the row
metadata stays exact without storing per-row ids.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContaminationError, DataError
from .model import EmbeddingSet

MAGIC = b"DRIVE2VEC-EMBEDDINGS 1\n"


@dataclass
class Segment:
    split: str
    kind: str  # "task" (benchmark windows) or "dense" (stride 1)
    session_id: str
    driver_id: str
    first: int
    step: int
    count: int

    @property
    def ends(self):
        return self.first + self.step * np.arange(self.count)


@dataclass
class EmbeddingArtifact:
    method: str
    schema_hash: str
    embed_dim: int
    segments: list
    vectors: np.ndarray
    header: dict = field(default_factory=dict)

    def _rows(self, pred):
        offs = np.cumsum([0] + [s.count for s in self.segments])
        return [(s, self.vectors[offs[i]:offs[i + 1]]) for i, s in enumerate(self.segments) if pred(s)]

    def task_set(self, split):
        """Benchmark windows of one split as an EmbeddingSet."""
        parts = self._rows(lambda s: s.kind == "task" and s.split == split)
        if not parts:
            raise DataError(f"artifact has no task embeddings for split {split!r}")
        sids = np.concatenate([np.array([s.session_id] * s.count, dtype=object) for s, _ in parts])
        dids = np.concatenate([np.array([s.driver_id] * s.count, dtype=object) for s, _ in parts])
        ends = np.concatenate([s.ends for s, _ in parts])
        vecs = np.concatenate([v for _, v in parts])
        return EmbeddingSet(sids, dids, ends, vecs, self.schema_hash, self.method)

    def dense(self, split="test"):
        """session_id -> (ends, vectors) at stride 1."""
        return {s.session_id: (s.ends, v) for s, v in self._rows(lambda s: s.kind == "dense" and s.split == split)}

    def check_schema(self, schema_hash):
        if schema_hash != self.schema_hash:
            raise ContaminationError(
                f"embeddings were built for schema {self.schema_hash}, data has schema {schema_hash}")


def segments_from_windows(split, windows):
    """Split a WindowSet's rows into per-session arithmetic runs."""
    segs = []
    n = len(windows)
    i = 0
    while i < n:
        sid = windows.session_ids[i]
        j = i + 1
        while j < n and windows.session_ids[j] == sid:
            j += 1
        ends = np.asarray(windows.ends[i:j])
        step = int(ends[1] - ends[0]) if ends.size > 1 else 1
        if ends.size > 1 and not np.all(np.diff(ends) == step):
            raise DataError(f"window ends of {sid} are not evenly spaced")
        segs.append(Segment(split, "task", str(sid), str(windows.driver_ids[i]), int(ends[0]), step, int(ends.size)))
        i = j
    return segs


def save_embeddings(path, artifact):
    seg_json = [vars(s) for s in artifact.segments]
    total = sum(s.count for s in artifact.segments)
    if artifact.vectors.shape != (total, artifact.embed_dim):
        raise DataError(f"vectors {artifact.vectors.shape} do not match {total} rows x {artifact.embed_dim}")
    header = dict(artifact.header, method=artifact.method, schema_hash=artifact.schema_hash,
                  embed_dim=artifact.embed_dim, segments=seg_json)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(artifact.vectors, dtype="<f8").tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise DataError(f"{path} is not an embeddings artifact")
        header = json.loads(fh.readline())
        blob = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    segs = [Segment(**s) for s in header.pop("segments")]
    dim = header["embed_dim"]
    total = sum(s.count for s in segs)
    if blob.size != total * dim:
        raise DataError(f"{path}: expected {total * dim} values, found {blob.size}")
    return EmbeddingArtifact(header["method"], header["schema_hash"], dim, segs, blob.reshape(total, dim), header)
