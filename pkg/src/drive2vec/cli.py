"""Command-line pipeline: synth -> train -> embed -> eval / sweeps / case studies.

Every command reads a YAML config (``--config``), writes its artifacts under
``--out`` and finishes with a JSON manifest listing inputs (with hashes), the
resolved config and its digest, the seed and wall-clock durations.  Existing
files are never overwritten.
"""
import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigError, DataError, Drive2VecError

log = logging.getLogger("drive2vec")

DEFAULT_CONFIG = {
    "seed": 0,
    "method": "drive2vec",
    "paths": {"data_dir": None, "out_dir": "runs"},
    "synth": {"n_drivers": 6, "sessions_per_driver": 4, "duration_s": 900.0, "seed": 0, "slam_precursor": True,
              "slam_rate": [40.0, 80.0]},
    "split": {"ratios": [0.8, 0.1, 0.1], "seed": 0},
    "arch": {"window_len": 10, "gru_hidden": 64, "embed_dim": 8},
    "train": {"epochs": 25, "batch_size": 128, "lr": 0.002, "patience": 5, "clip_norm": 5.0},
    "eval": {
        "stride": 10,
        "head": {"epochs": 3000, "lr": 0.01, "patience": 100},
        "k_grid": [round(0.1 * k, 1) for k in range(1, 31)],
        "embed_sizes": [2, 4, 8, 16, 32, 64],
    },
    "detector": {"epsilon": 25.0, "window": 4, "top_k": 10, "train_fraction": 0.8},
    "project": {"perplexity": 30.0, "iters": 1000, "n_random": 1000},
}
METHODS = ("drive2vec", "short_only", "long_only", "pca")


# ------------------------------------------------------------------ config


def _merge(base, over, where="config"):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"unknown key {where}.{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, out=None):
    import yaml

    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["paths"]["out_dir"] = str(out)
    if cfg["paths"]["data_dir"] is None:
        cfg["paths"]["data_dir"] = str(Path(cfg["paths"]["out_dir"]) / "fleet")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    return cfg


def digest(cfg):
    """Hash of everything that can change results; output locations excluded."""
    cfg = {k: v for k, v in cfg.items() if k != "paths"}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _sha256(path):
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ----------------------------------------------------------------- context


class Run:
    """Per-command bookkeeping: claimed outputs, inputs, timings."""

    def __init__(self, command, cfg, args):
        self.command = command
        self.cfg = cfg
        self.args = args
        self.digest = digest(cfg)
        self.seed = cfg["seed"]
        self.out = Path(cfg["paths"]["out_dir"])
        self.inputs = {}
        self.outputs = []
        self.durations = {}
        self.t0 = time.time()

    def claim(self, rel):
        path = self.out / rel
        if path.exists():
            raise Drive2VecError(f"{path} exists; outputs are append-only, pick another --out or seed")
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(path))
        return path

    def use(self, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing input artifact {path}")
        self.inputs[str(path)] = _sha256(path)
        return path

    def timed(self, name, fn, *a, **kw):
        t = time.time()
        res = fn(*a, **kw)
        self.durations[name] = round(time.time() - t, 3)
        return res

    def write_csv(self, rel, header, rows):
        path = self.claim(rel)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(header) + ["config_digest"])
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r] + [self.digest])
        return path

    def finish(self, tag, extra=None):
        from . import __version__
        from ._kernels import BACKEND

        self.durations["total"] = round(time.time() - self.t0, 3)
        manifest = {
            "command": self.command,
            "argv": self.args.argv,
            "version": __version__,
            "kernel_backend": BACKEND,
            "config": self.cfg,
            "config_digest": self.digest,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "durations_s": self.durations,
            "extra": extra or {},
        }
        path = self.claim(f"manifests/{self.command}-{tag}.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("%s done in %.1fs; manifest %s", self.command, self.durations["total"], path)
        return manifest


# -------------------------------------------------------------- helpers


def _head_config(cfg, seed):
    from .baselines import HeadConfig

    return HeadConfig(seed=seed, **cfg["eval"]["head"])


def _arch(cfg, D, **over):
    from .model import ArchConfig

    return ArchConfig(input_dim=D, **{**cfg["arch"], **over})


def _train_config(cfg, method, seed):
    from .experiment import METHOD_MASKS
    from .model import TrainConfig

    return TrainConfig(loss_mask=METHOD_MASKS[method], seed=seed, **cfg["train"])


def _benchmark(run, k_offsets=()):
    from .data import SplitSpec, load_sessions
    from .experiment import prepare_benchmark

    data = run.use(Path(run.cfg["paths"]["data_dir"]) / "sessions")
    sessions = run.timed("load", load_sessions, data)
    schema = sessions[0].schema
    split = SplitSpec(tuple(run.cfg["split"]["ratios"]), run.cfg["split"]["seed"])
    return run.timed("prepare", prepare_benchmark, sessions, schema, split,
                     stride=run.cfg["eval"]["stride"], k_offsets=k_offsets)


def _load_artifact(run, bench):
    from .artifacts import load_embeddings
    from .experiment import check_alignment

    art = load_embeddings(run.use(run.args.embeddings))
    check_alignment(bench, art)
    return art


def _tag(run, method=None):
    return f"{method or run.cfg['method']}-seed{run.seed}"


# ------------------------------------------------------------- commands


def cmd_synth(run):
    from .synth import SynthConfig, make_fleet, write_fleet

    scfg = SynthConfig(**{**run.cfg["synth"], "slam_rate": tuple(run.cfg["synth"]["slam_rate"])})
    fleet = run.timed("generate", make_fleet, scfg)
    target = Path(run.cfg["paths"]["data_dir"])
    if target.exists():
        raise Drive2VecError(f"{target} exists; outputs are append-only")
    run.timed("write", write_fleet, fleet, target)
    run.outputs.append(str(target))
    counts = {}
    for e in fleet.events:
        counts[e["kind"]] = counts.get(e["kind"], 0) + 1
    return run.finish(f"seed{scfg.seed}", {"sessions": len(fleet.sessions), "events": counts,
                                          "schema_hash": fleet.schema.hash()})


def cmd_train(run):
    from .model import save_checkpoint, train

    method = run.args.method or run.cfg["method"]
    if method == "pca":
        raise ConfigError("pca has no training step; use `embed --method pca`")
    bench = _benchmark(run)
    tcfg = _train_config(run.cfg, method, run.seed)
    arch = _arch(run.cfg, bench.schema.D)
    res = run.timed("train", train, bench.windows["train"], bench.windows["val"], arch, tcfg,
                    bench.bool_mask, bench.schema_hash)
    tag = _tag(run, method)
    path = run.claim(f"models/{tag}.ckpt")
    save_checkpoint(path, res.model, bench.normalizer, run.seed, tcfg, extra={
        "method": method, "config_digest": run.digest, "best_epoch": res.best_epoch,
        "splits": {k: sorted({s.session_id for s in v}) for k, v in bench.raw.items()},
    })
    run.write_csv(f"models/{tag}-history.csv", ["epoch", "train_loss", "val_loss"],
                  [(h["epoch"], float(h["train_loss"]), float(h["val_loss"])) for h in res.history])
    return run.finish(tag, {"best_epoch": res.best_epoch, "epochs": len(res.history) - 1})


def cmd_embed(run):
    from .artifacts import save_embeddings
    from .baselines import pca_fit, save_pca
    from .errors import ContaminationError
    from .experiment import model_artifact, pca_artifact
    from .model import load_checkpoint

    bench = _benchmark(run)
    header = {"config_digest": run.digest, "seed": run.seed}
    if run.args.checkpoint:
        ck_path = run.use(run.args.checkpoint)
        model, ck = load_checkpoint(ck_path)
        if ck.get("schema_hash") != bench.schema_hash:
            raise ContaminationError("checkpoint was trained on a different channel schema")
        if ck["extra"].get("splits", {}).get("train") != sorted({s.session_id for s in bench.raw["train"]}):
            raise ContaminationError("checkpoint was trained on a different split")
        method = ck["extra"].get("method", "drive2vec")
        header["checkpoint_sha256"] = run.inputs[str(ck_path)]
        art = run.timed("embed", model_artifact, model, bench, method, header)
    else:
        method = run.args.method or run.cfg["method"]
        if method != "pca":
            raise ConfigError("embed needs --checkpoint unless --method pca")
        last = bench.windows["train"].inputs[:, -1, :]
        k = min(run.cfg["arch"]["embed_dim"], last.shape[1], last.shape[0] - 1)
        pca = pca_fit(last, k)
        save_pca(run.claim(f"models/{_tag(run, 'pca')}.pca"), pca, {"config_digest": run.digest})
        art = run.timed("embed", pca_artifact, pca, bench, run.cfg["arch"]["window_len"], header)
    tag = _tag(run, method)
    save_embeddings(run.claim(f"embeddings/{tag}.emb"), art)
    return run.finish(tag, {"rows": int(art.vectors.shape[0]), "embed_dim": art.embed_dim})


def cmd_eval(run):
    from .experiment import TASK_TARGETS, artifact_sets, last_timestep_row, prediction_row

    bench = _benchmark(run)
    art = _load_artifact(run, bench)
    row = run.timed("heads", prediction_row, bench, artifact_sets(art), _head_config(run.cfg, run.seed))
    base = last_timestep_row(bench)
    rows = [(art.method, row["short"], row["long"]), ("last_timestep", base["short"], base["long"])]
    tag = _tag(run, art.method)
    run.write_csv(f"reports/prediction-{tag}.csv", ["method", "short_mse", "long_mse"], rows)
    names = bench.schema.signal_names
    per = []
    for task in TASK_TARGETS:
        for i, n in enumerate(names):
            per.append((art.method, task, n, float(row[f"{task}_report"].per_channel[i])))
            per.append(("last_timestep", task, n, float(base[f"{task}_report"].per_channel[i])))
    run.write_csv(f"reports/prediction-channels-{tag}.csv", ["method", "task", "channel", "mse"], per)
    return run.finish(tag, {"short": row["short"], "long": row["long"]})


def cmd_sweep_k(run):
    from .experiment import artifact_sets
    from .tasks import offset_key, sweep_offset

    grid = [float(k) for k in run.cfg["eval"]["k_grid"]]
    bench = _benchmark(run, k_offsets=tuple(sorted({offset_key(k) for k in grid})))
    art = _load_artifact(run, bench)
    sets = artifact_sets(art)
    w = bench.windows
    curve = run.timed("sweep", sweep_offset, sets["train"], w["train"].offsets, sets["test"], w["test"].offsets,
                      bench.bool_mask, grid, val=sets["val"], val_offsets=w["val"].offsets,
                      head_config=_head_config(run.cfg, run.seed))
    tag = _tag(run, art.method)
    run.write_csv(f"reports/sweep-k-{tag}.csv", ["k_seconds", "mse", "method", "seed"],
                  [(k, m, art.method, run.seed) for k, m in curve])
    return run.finish(tag, {"points": len(curve)})


def cmd_sweep_size(run):
    from .experiment import embed_splits, prediction_row
    from .model import train
    from .tasks import sweep_embed_size

    method = run.args.method or run.cfg["method"]
    if method == "pca":
        raise ConfigError("sweep-size trains models; pca is not supported")
    bench = _benchmark(run)
    tcfg = _train_config(run.cfg, method, run.seed)
    head = _head_config(run.cfg, run.seed)

    def evaluate(size):
        res = train(bench.windows["train"], bench.windows["val"], _arch(run.cfg, bench.schema.D, embed_dim=size),
                    tcfg, bench.bool_mask, bench.schema_hash)
        return prediction_row(bench, embed_splits(res.model, bench, method), head)["short"]

    curve = run.timed("sweep", sweep_embed_size, run.cfg["eval"]["embed_sizes"], evaluate)
    tag = _tag(run, method)
    run.write_csv(f"reports/sweep-size-{tag}.csv", ["embed_dim", "short_mse", "method", "seed"],
                  [(s, m, method, run.seed) for s, m in curve])
    return run.finish(tag, {"points": len(curve)})


def cmd_driver_id(run):
    from .experiment import artifact_sets
    from .tasks import train_driver_id

    bench = _benchmark(run)
    sets = artifact_sets(_load_artifact(run, bench))
    _, rep = run.timed("classifier", train_driver_id, sets["train"].vectors, sets["train"].driver_ids,
                       sets["test"].vectors, sets["test"].driver_ids, seed=run.seed)
    method = sets["test"].method
    tag = _tag(run, method)
    x = rep.extra
    run.write_csv(f"reports/driver-id-{tag}.csv",
                  ["method", "micro_f1", "accuracy", "random_baseline", "n_test"],
                  [(method, float(rep.micro_f1), x["accuracy"], x["random_baseline"], x["n_test"])])
    classes = x["classes"]
    run.write_csv(f"reports/driver-id-confusion-{tag}.csv", ["true"] + classes,
                  [[c] + [int(v) for v in rep.confusion[i]] for i, c in enumerate(classes)])
    return run.finish(tag, {"micro_f1": rep.micro_f1, "random_baseline": x["random_baseline"]})


def _detector(cfg):
    from .analytics import DetectorConfig

    d = cfg["detector"]
    return DetectorConfig(epsilon=d["epsilon"], window=d["window"], top_k=d["top_k"],
                          train_fraction=d["train_fraction"])


def cmd_detect(run):
    from .analytics import separability_margin
    from .experiment import hard_brake, maneuver_groups

    bench = _benchmark(run)
    art = _load_artifact(run, bench)
    det = _detector(run.cfg)
    wl = run.cfg["arch"]["window_len"]
    res = run.timed("hard_brake", hard_brake, bench, art, run.seed, det, wl)
    tag = _tag(run, art.method)
    run.write_csv(f"reports/hard-brake-{tag}.csv", ["method", "auroc", "n_events", "n_index", "n_positive",
                                                    "n_negative"],
                  [(art.method, res.auroc, res.n_events, res.n_index, int(res.positive_scores.size),
                    int(res.negative_scores.size))])
    run.write_csv(f"reports/hard-brake-top-{tag}.csv", ["session_id", "window_end", "score", "max_brake_diff_1s"],
                  res.top_negatives)
    events = maneuver_groups(bench, art, det, wl)
    margin, intra, inter = separability_margin({k: [e.embedding for e in v] for k, v in events.items()})
    run.write_csv(f"reports/maneuvers-{tag}.csv", ["kind", "session_id", "start", "score"],
                  [(k, e.session_id, e.start, e.score) for k, evs in events.items() for e in evs])
    run.write_csv(f"reports/separability-{tag}.csv", ["method", "margin", "intra", "inter"],
                  [(art.method, margin, intra, inter)])
    return run.finish(tag, {"auroc": res.auroc, "margin": margin})


def cmd_project(run):
    from .analytics import pca3_rgb, tsne
    from .experiment import maneuver_groups, tsne_points

    bench = _benchmark(run)
    art = _load_artifact(run, bench)
    pcfg = run.cfg["project"]
    events = maneuver_groups(bench, art, _detector(run.cfg), run.cfg["arch"]["window_len"])
    X, labels, keys = tsne_points(art, events, pcfg["n_random"], run.seed)
    res = run.timed("tsne", tsne, X, perplexity=pcfg["perplexity"], iters=pcfg["iters"], seed=run.seed)
    tag = _tag(run, art.method)
    run.write_csv(f"reports/tsne-{tag}.csv", ["x", "y", "label", "session_id", "window_end"],
                  [(float(y[0]), float(y[1]), lab, sid, e) for y, lab, (sid, e) in zip(res.Y, labels, keys)])
    run.write_csv(f"reports/tsne-kl-{tag}.csv", ["iteration", "kl"],
                  [(i, float(k)) for i, k in enumerate(res.kl_trace)])
    rows = []
    by_id = {s.session_id: s for s in bench.raw["test"]}
    for sid, (ends, vecs) in sorted(art.dense("test").items()):
        s = by_id[sid]
        if "latitude" not in s.schema.names or "longitude" not in s.schema.names:
            raise DataError("pca3 emission needs latitude/longitude metadata")
        rgb = pca3_rgb(vecs, s.channel("latitude")[ends], s.channel("longitude")[ends])
        rows += [(sid, int(e)) + tuple(float(v) for v in r) for e, r in zip(ends, rgb)]
    run.write_csv(f"reports/rgb-{tag}.csv", ["session_id", "window_end", "lat", "lon", "r", "g", "b"], rows)
    return run.finish(tag, {"points": len(labels), "kl_initial": float(res.kl_trace[0]),
                            "kl_final": float(res.kl_trace[-1])})


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic fleet"),
    "train": (cmd_train, "train Drive2Vec or an ablation"),
    "embed": (cmd_embed, "write the shared embeddings artifact"),
    "eval": (cmd_eval, "short/long prediction report"),
    "sweep-k": (cmd_sweep_k, "exact-prediction error vs look-ahead K"),
    "sweep-size": (cmd_sweep_size, "short-task error vs embedding size"),
    "driver-id": (cmd_driver_id, "driver identification report"),
    "detect": (cmd_detect, "hard-brake detector and maneuver separability"),
    "project": (cmd_project, "t-SNE and PCA-3 colour emissions"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="drive2vec", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="overrides config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads (default 1; only single-threaded runs are bit-reproducible)")
    p.add_argument("--out", help="output directory (overrides paths.out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        if name in ("train", "embed", "sweep-size"):
            sp.add_argument("--method", choices=METHODS)
        if name == "embed":
            sp.add_argument("--checkpoint")
        if name in ("eval", "sweep-k", "driver-id", "detect", "project"):
            sp.add_argument("--embeddings", required=True, help="artifact written by `embed`")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        cfg = load_config(args.config, args.seed, args.out)
        with threadpool_limits(limits=args.threads):
            fn = COMMANDS[args.command][0]
            fn(Run(args.command, cfg, args))
    except Drive2VecError as exc:
        print(f"drive2vec {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
