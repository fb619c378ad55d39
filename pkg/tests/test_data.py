import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drive2vec import data
from drive2vec.data import BOOLEAN, Channel, ChannelSchema, SplitSpec, make_session
from drive2vec.errors import ConfigError, DataError

from oracles import enumerate_windows


def schema2():
    return ChannelSchema((Channel("speed"), Channel("blink", BOOLEAN), Channel("lat", is_metadata=True)))


def session_of(sig, sid="s0", driver="d0"):
    return make_session(sid, driver, sig, schema2(), metadata={"lat": 48.1})


# ------------------------------------------------------------ synchronize


def test_synchronize_identity_at_10hz():
    ts = np.arange(20) / 10
    vs = np.arange(20.0) ** 2
    grid, out = data.synchronize({"a": (ts, vs)})
    np.testing.assert_allclose(grid, ts)
    np.testing.assert_array_equal(out[:, 0], vs)


def test_synchronize_holds_1hz_values():
    ts = np.arange(5.0)
    grid, out = data.synchronize({"a": (ts, ts * 7)})
    assert out.shape == (41, 1)
    for k in range(4):
        assert np.all(out[10 * k:10 * k + 10, 0] == 7 * k)


def test_synchronize_overlap_example():
    fast = (np.arange(101) / 10, np.arange(101.0))
    slow = (2 + np.arange(31) / 5, np.arange(31.0))
    grid, out = data.synchronize({"fast": fast, "slow": slow})
    assert len(grid) == 61
    assert grid[0] == pytest.approx(2.0) and grid[-1] == pytest.approx(8.0)
    np.testing.assert_array_equal(out[:, 0], np.arange(20.0, 81.0))
    np.testing.assert_array_equal(out[:4, 1], [0, 0, 1, 1])


def test_synchronize_errors():
    with pytest.raises(DataError):
        data.synchronize({})
    with pytest.raises(DataError):
        data.synchronize({"a": ([], [])})
    with pytest.raises(DataError):
        data.synchronize({"a": ([0.0, 1.0], [1.0, 2.0]), "b": ([2.0, 3.0], [0.0, 0.0])})
    with pytest.raises(DataError):
        data.synchronize({"a": ([1.0, 0.0], [1.0, 2.0])})


def test_synchronize_session_checks_channels_and_booleans():
    ts = np.arange(11) / 10
    streams = {"speed": (ts, ts), "blink": (ts, np.zeros(11)), "lat": (ts, np.zeros(11))}
    s = data.synchronize_session(streams, schema2(), "x", "d")
    assert len(s) == 11 and s.signals.shape == (11, 2)
    with pytest.raises(DataError, match="blink"):
        data.synchronize_session(dict(streams, blink=(ts, np.full(11, 2.0))), schema2(), "x", "d")
    with pytest.raises(DataError):
        data.synchronize_session({"speed": streams["speed"]}, schema2(), "x", "d")


# --------------------------------------------------------------- schema


def test_schema_counts_and_hash():
    s = schema2()
    assert s.D == 2 and s.D_float == 1 and s.D_bool == 1
    assert s.signal_names == ["speed", "blink"]
    assert list(s.bool_mask) == [False, True]
    assert s.hash() == ChannelSchema.from_json(s.to_json()).hash()
    with pytest.raises(ConfigError):
        ChannelSchema((Channel("a"), Channel("a")))
    with pytest.raises(ConfigError):
        ChannelSchema((Channel("a", "int"),))
    with pytest.raises(ConfigError):
        ChannelSchema((Channel("a", is_metadata=True),))


# ----------------------------------------------------------- normalizer


def test_normalizer_standardizes_training_data():
    rng = np.random.default_rng(0)
    train = [session_of(np.column_stack([rng.normal(50, 9, 300), rng.integers(0, 2, 300)]), f"s{i}") for i in range(3)]
    norm = data.fit_normalizer(train, schema2())
    assert norm.names == ["speed"]
    z = np.concatenate([data.apply_normalizer(s, norm).channel("speed") for s in train])
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
    blink = data.apply_normalizer(train[0], norm).channel("blink")
    np.testing.assert_array_equal(blink, train[0].channel("blink"))
    assert data.apply_normalizer(train[0], norm).channel("lat")[0] == 48.1


def test_normalizer_ignores_test_data():
    rng = np.random.default_rng(1)
    train = [session_of(np.column_stack([rng.normal(0, 1, 200), np.zeros(200)]), "a")]
    test = session_of(np.column_stack([rng.normal(100, 1, 200), np.zeros(200)]), "b")
    norm = data.fit_normalizer(train, schema2())
    assert norm.to_json() == data.fit_normalizer(train, schema2()).to_json()
    assert data.apply_normalizer(test, norm).channel("speed").mean() > 50


def test_normalizer_rejects_constant_channel():
    with pytest.raises(DataError, match="speed"):
        data.fit_normalizer([session_of(np.column_stack([np.ones(10), np.zeros(10)]))], schema2())
    with pytest.raises(DataError):
        data.fit_normalizer([], schema2())


# -------------------------------------------------------------- splits


def equal_sessions(n, T=100):
    return [session_of(np.column_stack([np.arange(T, dtype=float), np.zeros(T)]), f"s{i:02d}") for i in range(n)]


def test_split_ten_equal_sessions():
    tr, va, te = data.split_by_session(equal_sessions(10))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 25), st.integers(0, 1000))
def test_split_is_disjoint_complete_and_seeded(n, seed):
    sessions = equal_sessions(n, T=20)
    spec = SplitSpec(seed=seed)
    parts = data.split_by_session(sessions, spec)
    ids = [[s.session_id for s in p] for p in parts]
    flat = sum(ids, [])
    assert sorted(flat) == sorted(s.session_id for s in sessions)
    assert len(set(flat)) == len(flat) and all(ids)
    again = data.split_by_session(list(reversed(sessions)), spec)
    assert [[s.session_id for s in p] for p in again] == ids


def test_split_errors():
    with pytest.raises(DataError):
        data.split_by_session(equal_sessions(2))
    with pytest.raises(ConfigError):
        SplitSpec(ratios=(0.5, 0.5, 0.5))
    s = equal_sessions(3)
    with pytest.raises(DataError):
        data.split_by_session(s + s[:1])


# ----------------------------------------------------------- windowing


def test_window_count_example():
    assert data.window_count(1020, 1, 1000) == 11
    s = session_of(np.column_stack([np.arange(1020.0), np.zeros(1020)]))
    assert len(data.extract_windows(s, stride=1)) == 11


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 30), st.integers(1, 200))
def test_window_count_matches_enumeration(T, stride, h_max):
    assert data.window_count(T, stride, h_max) == len(enumerate_windows(T, stride, h_max))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 12), st.sampled_from([(1,), (1, 10)]), st.lists(st.integers(1, 40), max_size=3))
def test_extract_windows_ends_match_enumeration(T, stride, horizons, ks):
    s = session_of(np.column_stack([np.arange(float(T)), np.zeros(T)]))
    ws = data.extract_windows(s, stride=stride, horizons=horizons, k_offsets=ks)
    h_max = data.max_horizon_samples(horizons, ks)
    assert ws.ends.tolist() == enumerate_windows(T, stride, h_max)


def test_targets_follow_definitions():
    T = 1200
    x = np.arange(float(T))
    b = (np.arange(T) // 5 % 2).astype(float)
    s = session_of(np.column_stack([x, b]))
    ws = data.extract_windows(s, stride=37, k_offsets=(5, 30))
    for i, e in enumerate(ws.ends):
        np.testing.assert_array_equal(ws.inputs[i, :, 0], x[e - 9:e + 1])
        assert ws.targets["exact1s"][i, 0] == x[e + 10]
        assert ws.targets["avg1s"][i, 0] == pytest.approx(x[e + 1:e + 11].mean())
        assert ws.targets["avg10s"][i, 0] == pytest.approx(x[e + 1:e + 101].mean())
        assert ws.targets["avg100s"][i, 0] == pytest.approx(x[e + 1:e + 1001].mean())
        assert ws.offsets[5][i, 0] == x[e + 5] and ws.offsets[30][i, 0] == x[e + 30]
        # exact@+1s closes the support of the 1 s average
        assert ws.targets["exact1s"][i, 0] == x[e + 1:e + 11][-1]
        assert ws.targets["avg10s"][i, 1] == pytest.approx(0.5)
    assert set(np.unique(ws.targets["exact1s"][:, 1])) <= {0.0, 1.0}


def test_constant_session_targets_equal_constant():
    s = session_of(np.column_stack([np.full(1100, 3.25), np.ones(1100)]))
    ws = data.extract_windows(s)
    for v in ws.targets.values():
        np.testing.assert_allclose(v[:, 0], 3.25, rtol=0, atol=1e-12)
        np.testing.assert_allclose(v[:, 1], 1.0, rtol=0, atol=1e-12)


def test_short_session_gives_no_windows_and_bad_ends_raise():
    s = session_of(np.column_stack([np.arange(50.0), np.zeros(50)]))
    assert len(data.extract_windows(s)) == 0
    with pytest.raises(DataError):
        data.extract_windows(s, horizons=(1,), ends=[3])
    with pytest.raises(DataError):
        data.windows_for([s])


def test_metadata_is_not_a_signal():
    s = session_of(np.column_stack([np.arange(30.0), np.zeros(30)]))
    ws = data.extract_windows(s, horizons=(1,))
    assert ws.inputs.shape[2] == 2 and not np.any(ws.inputs == 48.1)


# ------------------------------------------------------------------- IO


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(5)
    s = session_of(np.column_stack([rng.normal(size=40) * 1e3, rng.integers(0, 2, 40)]))
    data.save_sessions(tmp_path, [s])
    [back] = data.load_sessions(tmp_path)
    assert back.session_id == s.session_id and back.driver_id == s.driver_id
    assert back.values.tobytes() == s.values.tobytes()
    assert back.schema.hash() == s.schema.hash()


def test_csv_errors_name_the_problem(tmp_path):
    s = session_of(np.column_stack([np.arange(5.0), np.zeros(5)]))
    data.save_session(tmp_path, s)
    path = tmp_path / "s0.csv"
    text = path.read_text()

    path.write_text(text.replace("index,speed", "index,velocity"))
    with pytest.raises(DataError, match="velocity"):
        data.load_session(path, schema2())

    lines = text.splitlines()
    cells = lines[3].split(",")
    cells[2] = "2"
    path.write_text("\n".join(lines[:3] + [",".join(cells)] + lines[4:]) + "\n")
    with pytest.raises(DataError, match="row 4"):
        data.load_session(path)

    path.write_text("\n".join(lines[:2] + ["1,abc,0,48.1"] + lines[3:]) + "\n")
    with pytest.raises(DataError, match="malformed"):
        data.load_session(path)

    path.write_text("\n".join(lines[:2] + ["1,1.0"] + lines[3:]) + "\n")
    with pytest.raises(DataError):
        data.load_session(path)

    with pytest.raises(DataError):
        data.load_sessions(tmp_path / "nowhere")
