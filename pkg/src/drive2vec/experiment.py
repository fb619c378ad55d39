"""End-to-end benchmark protocol shared by the CLI and the acceptance suite."""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analytics, baselines, model as mdl, tasks
from .artifacts import EmbeddingArtifact, Segment, segments_from_windows
from .data import BLOCKS, SplitSpec, apply_normalizer, fit_normalizer, split_by_session, windows_for
from .errors import ContaminationError
from .model import EmbeddingSet

log = logging.getLogger(__name__)

METHOD_MASKS = {
    "drive2vec": BLOCKS,
    "short_only": mdl.SHORT_ONLY,
    "long_only": mdl.LONG_ONLY,
}
PREDICTION_METHODS = ("drive2vec", "short_only", "long_only", "pca", "last_timestep")

# Desk-scale architecture for the synthetic benchmark.  256-unit GRUs
# are supported but cost ~16x more per epoch on one core.  The embedding is
# narrower than the 20-channel input so that the PCA baseline, tied to the
# embedding size, is a genuine reduction as it is with 665 sensors.
BENCH_ARCH = dict(window_len=10, gru_hidden=64, embed_dim=8)
BENCH_TRAIN = mdl.TrainConfig(epochs=25, batch_size=128, lr=2e-3, patience=5, clip_norm=5.0)
K_OFFSETS = tuple(range(1, 31))


@dataclass
class Benchmark:
    schema: object
    normalizer: object
    raw: dict  # split -> list of raw sessions
    norm: dict  # split -> list of normalized sessions
    windows: dict  # split -> WindowSet
    stride: int

    @property
    def bool_mask(self):
        return self.schema.bool_mask

    @property
    def schema_hash(self):
        return self.schema.hash()


def prepare_benchmark(sessions, schema, split=SplitSpec(), stride=10, k_offsets=K_OFFSETS):
    train, val, test = split_by_session(sessions, split)
    normalizer = fit_normalizer(train, schema)
    raw = {"train": train, "val": val, "test": test}
    norm = {k: [apply_normalizer(s, normalizer) for s in v] for k, v in raw.items()}
    windows = {k: windows_for(v, stride=stride, k_offsets=k_offsets) for k, v in norm.items()}
    return Benchmark(schema, normalizer, raw, norm, windows, stride)


def train_method(bench, method, seed=0, arch_overrides=None, train_config=BENCH_TRAIN):
    arch = mdl.ArchConfig(input_dim=bench.schema.D, **{**BENCH_ARCH, **(arch_overrides or {})})
    cfg = replace(train_config, loss_mask=METHOD_MASKS[method], seed=seed)
    t0 = time.time()
    res = mdl.train(bench.windows["train"], bench.windows["val"], arch, cfg, bench.bool_mask,
                    schema_hash=bench.schema_hash)
    log.info("%s seed %d: %d epochs (best %d) in %.1fs", method, seed, len(res.history) - 1,
             res.best_epoch, time.time() - t0)
    return res


def embed_splits(model, bench, method="drive2vec"):
    out = {}
    for k, ws in bench.windows.items():
        e = mdl.embed_dataset(model, ws)
        e.method = method
        out[k] = e
    return out


def pca_splits(bench, k=None):
    """PCA on the most recent row of each training window."""
    last = bench.windows["train"].inputs[:, -1, :]
    k = min(k or BENCH_ARCH["embed_dim"], last.shape[1], last.shape[0] - 1)
    pca = baselines.pca_fit(last, k)
    out = {}
    for split, ws in bench.windows.items():
        vec = baselines.pca_embed(pca, ws.inputs[:, -1, :])
        out[split] = EmbeddingSet(ws.session_ids, ws.driver_ids, ws.ends, vec, ws.schema_hash, "pca")
    return pca, out


SPLITS = ("train", "val", "test")


def _artifact(bench, method, dim, task_vectors, dense_vectors, header):
    segs, vecs = [], []
    for split in SPLITS:
        segs += segments_from_windows(split, bench.windows[split])
        vecs.append(task_vectors(bench.windows[split]))
    for s in bench.norm["test"]:
        ends, v = dense_vectors(s)
        segs.append(Segment("test", "dense", s.session_id, s.driver_id, int(ends[0]), 1, int(ends.size)))
        vecs.append(v)
    header = dict(header or {}, splits={k: sorted({s.session_id for s in v}) for k, v in bench.raw.items()})
    return EmbeddingArtifact(method, bench.schema_hash, dim, segs, np.concatenate(vecs), header)


def model_artifact(model, bench, method="drive2vec", header=None):
    """Task windows of every split plus stride-1 test windows, one file."""
    return _artifact(
        bench, method, model.arch.embed_dim,
        lambda ws: mdl.embed_dataset(model, ws).vectors,
        lambda s: analytics.embed_all_windows(model, s, model.arch.window_len),
        header,
    )


def pca_artifact(pca, bench, window_len=10, header=None):
    def dense(s):
        ends = np.arange(window_len - 1, len(s))
        return ends, baselines.pca_embed(pca, s.signals[ends])

    return _artifact(bench, "pca", pca.k, lambda ws: baselines.pca_embed(pca, ws.inputs[:, -1, :]), dense, header)


def check_alignment(bench, artifact):
    """The artifact must describe exactly this benchmark's windows."""
    artifact.check_schema(bench.schema_hash)
    for split in SPLITS:
        got = artifact.header.get("splits", {}).get(split)
        want = sorted({s.session_id for s in bench.raw[split]})
        if got is not None and got != want:
            raise ContaminationError(f"{split} sessions of the embeddings differ from the current split")
        es = artifact.task_set(split)
        ws = bench.windows[split]
        if len(es) != len(ws) or np.any(es.session_ids != ws.session_ids) or np.any(es.ends != ws.ends):
            raise ContaminationError(f"{split} embeddings are not aligned with the benchmark windows")


def artifact_sets(artifact):
    return {k: artifact.task_set(k) for k in SPLITS}


TASK_TARGETS = {"short": ("exact", "exact1s"), "long": ("avg", "avg100s")}


def prediction_row(bench, emb, head_config=baselines.HeadConfig()):
    """Short/long test MSE for one embedding method."""
    row = {}
    for task, (kind, block) in TASK_TARGETS.items():
        rep = tasks.eval_prediction(
            emb["train"], bench.windows["train"].targets[block],
            emb["test"], bench.windows["test"].targets[block],
            bench.bool_mask, kind,
            val=(emb["val"], bench.windows["val"].targets[block]),
            head_config=head_config, names=bench.schema.signal_names,
        )
        row[task] = rep.mse
        row[f"{task}_report"] = rep
    return row


def last_timestep_row(bench):
    ws = bench.windows["test"]
    pred = baselines.last_timestep_predict(ws.inputs)
    row = {}
    for task, (_, block) in TASK_TARGETS.items():
        rep = tasks.score_predictions(pred, ws.targets[block], bench.schema.signal_names)
        row[task] = rep.mse
        row[f"{task}_report"] = rep
    return row


@dataclass
class SeedRun:
    seed: int
    models: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    prediction: dict = field(default_factory=dict)


def run_prediction(bench, seed, methods=PREDICTION_METHODS, head_config=baselines.HeadConfig()):
    run = SeedRun(seed)
    for m in methods:
        if m in METHOD_MASKS:
            res = train_method(bench, m, seed)
            run.models[m] = res
            run.embeddings[m] = embed_splits(res.model, bench, m)
            run.prediction[m] = prediction_row(bench, run.embeddings[m], replace(head_config, seed=seed))
        elif m == "pca":
            _, run.embeddings[m] = pca_splits(bench)
            run.prediction[m] = prediction_row(bench, run.embeddings[m], replace(head_config, seed=seed))
        elif m == "last_timestep":
            run.prediction[m] = last_timestep_row(bench)
    return run


def median_table(runs, methods=PREDICTION_METHODS):
    return {m: {t: float(np.median([r.prediction[m][t] for r in runs])) for t in ("short", "long")}
            for m in methods}


# ----------------------------------------------------------- other studies


def k_sweep(bench, sets, ks=(0.5, 1.0, 2.0, 3.0), head_config=baselines.HeadConfig()):
    w = bench.windows
    return tasks.sweep_offset(sets["train"], w["train"].offsets, sets["test"], w["test"].offsets, bench.bool_mask,
                              ks, val=sets["val"], val_offsets=w["val"].offsets, head_config=head_config)


def size_sweep(bench, sizes, seed=0, method="drive2vec", head_config=baselines.HeadConfig(), models=None):
    """Short-task MSE per embedding size; ``models`` maps size -> trained model to reuse."""
    models = dict(models or {})

    def evaluate(size):
        if size not in models:
            models[size] = train_method(bench, method, seed, {"embed_dim": size}).model
        return prediction_row(bench, embed_splits(models[size], bench, method), head_config)["short"]

    return tasks.sweep_embed_size(sizes, evaluate)


def driver_id_report(sets, seed=0):
    return tasks.train_driver_id(sets["train"].vectors, sets["train"].driver_ids, sets["test"].vectors,
                                 sets["test"].driver_ids, seed=seed)[1]


def hard_brake(bench, artifact, seed=0, config=analytics.DetectorConfig(), window_len=BENCH_ARCH["window_len"]):
    return analytics.hard_brake_experiment(artifact.dense("test"), bench.raw["test"], config, seed,
                                           window_len=window_len)


def maneuver_groups(bench, artifact, config=analytics.DetectorConfig(), window_len=BENCH_ARCH["window_len"]):
    events = analytics.top_maneuvers(bench.raw["test"], config.top_k, config.window, window_len)
    dense = artifact.dense("test")
    for evs in events.values():
        analytics.attach_embeddings(evs, dense)
    return events


def tsne_points(artifact, events, n_random=1000, seed=0):
    """Event embeddings plus ``n_random`` random stride-1 test windows.

    Returns ``(X, labels, keys)`` with keys ``(session_id, window_end)``.
    """
    X = [e.embedding for evs in events.values() for e in evs]
    labels = [k for k, evs in events.items() for _ in evs]
    keys = [(e.session_id, e.start) for evs in events.values() for e in evs]
    dense = sorted(artifact.dense("test").items())
    pool = np.concatenate([v for _, (_, v) in dense])
    pool_keys = [(sid, int(e)) for sid, (ends, _) in dense for e in ends]
    pick = np.sort(np.random.default_rng(seed).choice(len(pool), size=min(n_random, len(pool)), replace=False))
    return (np.vstack([np.array(X), pool[pick]]), labels + ["random"] * pick.size,
            keys + [pool_keys[i] for i in pick])
