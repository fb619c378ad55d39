from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drive2vec import synth, tasks
from drive2vec.errors import ConfigError, ContaminationError, DataError, ShapeError
from drive2vec.model import EmbeddingSet


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_micro_f1_equals_accuracy(pairs):
    pred, lab = map(np.array, zip(*pairs))
    assert tasks.micro_f1(pred, lab) == np.mean(pred == lab)


def test_micro_f1_errors():
    with pytest.raises(ShapeError):
        tasks.micro_f1([1, 2], [1])
    with pytest.raises(DataError):
        tasks.micro_f1([], [])


def test_weighted_random_baseline():
    assert tasks.weighted_random_baseline(["a"] * 3 + ["b"]) == pytest.approx(0.75 ** 2 + 0.25 ** 2)
    assert tasks.weighted_random_baseline(["a", "b"], ["a", "a"]) == pytest.approx(0.5)
    labels = np.repeat(np.arange(6), 10)
    assert tasks.weighted_random_baseline(labels) == pytest.approx(1 / 6)


def test_per_channel_mse_and_ranking():
    pc = tasks.per_channel_mse([[0, 0, 0], [2, 0, 1]], [[0, 1, 0], [0, 1, 0]])
    np.testing.assert_allclose(pc, [2.0, 1.0, 0.5])
    rep = tasks.score_predictions([[0, 0, 0], [2, 0, 1]], [[0, 1, 0], [0, 1, 0]], ["x", "y", "z"])
    assert rep.mse == pytest.approx(pc.mean())
    assert [n for n, _ in rep.ranking()] == ["x", "y", "z"]
    with pytest.raises(ShapeError):
        tasks.per_channel_mse([[1, 2]], [[1, 2, 3]])


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        tasks.EvalConfig(task="guess")
    with pytest.raises(ConfigError):
        tasks.EvalConfig(task="avg", horizon_s=5)
    assert tasks.offset_key(0.5) == 5 and tasks.offset_key(3.0) == 30


def emb_set(sids, vecs):
    sids = np.asarray(sids, dtype=object)
    return EmbeddingSet(sids, sids, np.arange(len(sids)), np.asarray(vecs, dtype=float))


def test_eval_prediction_rejects_shared_sessions():
    a = emb_set(["s1", "s2"], np.eye(2))
    b = emb_set(["s2"], np.eye(2)[:1])
    with pytest.raises(ContaminationError):
        tasks.eval_prediction(a, np.zeros((2, 1)), b, np.zeros((1, 1)), np.zeros(1, bool))


def test_eval_prediction_and_offset_sweep():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(120, 3))
    tr, te = emb_set(["a"] * 80, V[:80]), emb_set(["b"] * 40, V[80:])
    offs = {k: V @ rng.normal(size=(3, 2)) + rng.normal(size=(120, 2)) * 0.1 * k for k in (5, 10, 20)}
    cfg = tasks.HeadConfig(epochs=1500, lr=0.05)
    curve = tasks.sweep_offset(tr, {k: v[:80] for k, v in offs.items()}, te, {k: v[80:] for k, v in offs.items()},
                               np.zeros(2, bool), k_grid=(2.0, 0.5, 1.0), head_config=cfg)
    assert [k for k, _ in curve] == [0.5, 1.0, 2.0]
    assert curve[0][1] < curve[1][1] < curve[2][1]
    with pytest.raises(DataError):
        tasks.sweep_offset(tr, {}, te, {}, np.zeros(2, bool), k_grid=(0.5,))


def test_sweep_embed_size():
    assert tasks.sweep_embed_size([8, 2, 8], lambda s: 1.0 / s) == [(2, 0.5), (8, 0.125)]
    with pytest.raises(ConfigError):
        tasks.sweep_embed_size([0], float)


def test_driver_id_separable_clusters():
    rng = np.random.default_rng(1)
    centers = rng.normal(size=(4, 5)) * 5
    labels = np.repeat([f"d{i}" for i in range(4)], 40)
    E = centers[np.repeat(np.arange(4), 40)] + rng.normal(size=(160, 5))
    tr = np.arange(160) % 4 != 0
    model, rep = tasks.train_driver_id(E[tr], labels[tr], E[~tr], labels[~tr], epochs=300)
    assert rep.micro_f1 > 0.9 and rep.micro_f1 == rep.extra["accuracy"]
    assert rep.confusion.sum() == (~tr).sum()
    assert rep.extra["random_baseline"] == pytest.approx(0.25)


def test_driver_id_rejects_unseen_drivers():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(30, 2))
    labels = np.array(["a", "b"] * 15)
    with pytest.raises(DataError, match="z"):
        tasks.train_driver_id(E, labels, E[:4], np.array(["a", "z", "b", "z"]), epochs=20)
    with pytest.raises(DataError):
        tasks.train_driver_id(E, np.array(["a"] * 30), E, labels)


def test_two_separable_synthetic_drivers():
    # one road type, speed offsets at the extremes: speeds never overlap
    road = synth.RoadRegime("highway", 120.0, 0.0, 0.0, 400.0, {"highway": 1.0})
    cfg = synth.SynthConfig(n_drivers=2, sessions_per_driver=2, duration_s=300.0, regimes=(road,),
                            slam_rate=(0.0, 0.0))
    base = synth.make_profile(cfg, 0)
    X = {"train": [], "test": []}
    y = {"train": [], "test": []}
    for i, off in enumerate((-15.0, 15.0)):
        prof = replace(base, driver_id=f"d{i}", speed_offset=off)
        for split, session_seed in (("train", 1), ("test", 2)):
            s, _ = synth.generate_session(prof, cfg, session_seed)
            v = s.channel("speed")[600:]  # past the launch
            w = v[: v.size // 10 * 10].reshape(-1, 10)
            X[split].append(w)
            y[split] += [prof.driver_id] * len(w)
    _, rep = tasks.train_driver_id(np.vstack(X["train"]), y["train"], np.vstack(X["test"]), y["test"], epochs=300)
    assert rep.micro_f1 > 0.95


def test_write_curve(tmp_path):
    tasks.write_curve(tmp_path / "c.csv", [(0.5, 0.1, "drive2vec", 0)], digest="abc")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["x,y,method,seed,config_digest", "0.5,0.1,drive2vec,0,abc"]
