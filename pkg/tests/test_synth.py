import filecmp
from dataclasses import replace

import numpy as np
import pytest

from drive2vec import analytics, data, synth
from drive2vec.errors import ConfigError

SMALL = synth.SynthConfig(n_drivers=4, sessions_per_driver=3, duration_s=600.0, seed=5)


@pytest.fixture(scope="module")
def fleet():
    return synth.make_fleet(SMALL)


def regime_labels(fleet, session):
    """Regime kind per sample, rebuilt from the logged changes (None if no change logged)."""
    changes = fleet.events_for(session.session_id, "regime_change")
    if not changes:
        return None
    labels = np.empty(len(session), dtype=object)
    cur, last = changes[0]["detail"].split("->")[0], 0
    for e in changes:
        labels[last:e["start"]] = cur
        cur, last = e["detail"].split("->")[1], e["start"]
    labels[last:] = cur
    return labels


def test_fleet_shape(fleet):
    assert len(fleet.sessions) == 12
    assert all(len(s) == 6000 for s in fleet.sessions)
    assert fleet.schema.D_float == 12 and fleet.schema.D_bool == 8 and fleet.schema.D == 20
    ids = {p.driver_id for p in fleet.profiles}
    assert all(s.driver_id in ids for s in fleet.sessions)


def test_make_fleet_row_count_example():
    cfg = synth.SynthConfig(n_drivers=4, sessions_per_driver=3, duration_s=600.0)
    f = synth.make_fleet(cfg)
    assert len(f.sessions) == 12 and {len(s) for s in f.sessions} == {6000}


def test_clamping_contract(fleet):
    for s in fleet.sessions:
        assert s.channel("speed").min() >= 0
        for p in ("gas_pedal", "brake_pedal"):
            assert 0 <= s.channel(p).min() and s.channel(p).max() <= 100
        B = s.values[:, [fleet.schema.column(n) for n in synth.BOOL_CHANNELS]]
        assert np.all((B == 0) | (B == 1))
        assert np.all(np.isfinite(s.values))


def test_session_determinism():
    prof = synth.make_profile(SMALL, 1)
    a, ea = synth.generate_session(prof, SMALL, 3)
    b, eb = synth.generate_session(prof, SMALL, 3)
    assert a.values.tobytes() == b.values.tobytes() and ea == eb
    c, _ = synth.generate_session(prof, SMALL, 4)
    assert c.values.tobytes() != a.values.tobytes()


def test_fleet_files_byte_identical(tmp_path):
    cfg = replace(SMALL, n_drivers=2, sessions_per_driver=1, duration_s=150.0)
    synth.write_fleet(synth.make_fleet(cfg), tmp_path / "a")
    synth.write_fleet(synth.make_fleet(cfg), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    sub = filecmp.dircmp(tmp_path / "a" / "sessions", tmp_path / "b" / "sessions")
    assert not sub.diff_files and sub.same_files
    assert len(data.load_sessions(tmp_path / "a" / "sessions")) == 2
    assert synth.read_events(tmp_path / "a" / "events.csv")[0]["start"] >= 0


def test_profiles_deterministic_and_in_range():
    a = [synth.make_profile(SMALL, i) for i in range(4)]
    b = [synth.make_profile(SMALL, i) for i in range(4)]
    assert a == b
    with pytest.raises(ConfigError):
        synth.DriverProfile("x", 2.0, 0, 2, 0.5, 1, 1.0, 0.5, 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        synth.SynthConfig(duration_s=60)
    with pytest.raises(ConfigError):
        synth.SynthConfig(n_drivers=1)
    with pytest.raises(ConfigError):
        synth.RoadRegime("x", 50, 0, 0, 100, {"y": 0.5})


# the second fleet targets 122 slams in expectation over the default 6 hours
@pytest.mark.parametrize("config", [SMALL, synth.SynthConfig(slam_rate=(122 / 6, 122 / 6))], ids=["small", "target122"])
def test_injected_slams_are_redetected(config):
    fleet = synth.make_fleet(config)
    cfg = analytics.DetectorConfig()
    logged = found = extra = 0
    for s in fleet.sessions:
        det = [d.start for d in analytics.scan_session(s, cfg)]
        slams = fleet.events_for(s.session_id, "brake_slam")
        logged += len(slams)
        found += sum(any(abs(d - e["start"]) <= cfg.window for d in det) for e in slams)
        extra += max(0, len(det) - len(slams))
        for e in slams:
            seg = s.channel("brake_pedal")[max(0, e["start"] - cfg.window):e["start"] + 2 * cfg.window]
            assert analytics.window_scores(seg, cfg.window).max() >= cfg.epsilon
    assert logged > 20 and found >= 0.99 * logged and extra == 0


def test_zero_slam_rate_gives_no_slams():
    cfg = replace(SMALL, n_drivers=2, sessions_per_driver=2, slam_rate=(0.0, 0.0))
    f = synth.make_fleet(cfg)
    assert not [e for e in f.events if e["kind"] == "brake_slam"]
    for s in f.sessions:
        assert analytics.window_scores(s.channel("brake_pedal"), 4).max() < 25


def test_precursor_ablation_removes_gas_release():
    def gas_before(f):
        levels = []
        for s in f.sessions:
            gas = s.channel("gas_pedal")
            levels += [gas[e["start"] - 4:e["start"]].mean() for e in f.events_for(s.session_id, "brake_slam")]
        return np.mean(levels)

    assert gas_before(synth.make_fleet(SMALL)) < 1.0
    assert gas_before(synth.make_fleet(replace(SMALL, slam_precursor=False))) > 5.0


def test_blinker_precedes_turns(fleet):
    lead = {p.driver_id: p.blinker_lead for p in fleet.profiles}
    on, base = [], []
    for s in fleet.sessions:
        h = s.channel("heading")
        blink = np.maximum(s.channel("left_blinker"), s.channel("right_blinker"))
        span = int(round(lead[s.driver_id] * 10)) + 30
        for t in range(0, len(h) - span, 5):
            turned = np.ptp(h[t:t + span]) > 30.0
            base.append(turned)
            if blink[t]:
                on.append(turned)
    assert np.mean(on) > 2 * np.mean(base)


def test_regime_predicts_long_horizon_speed(fleet):
    groups = {}
    for s in fleet.sessions:
        labels = regime_labels(fleet, s)
        if labels is None:
            continue
        csum = np.r_[0.0, np.cumsum(s.channel("speed"))]
        for t in range(0, len(s) - 1001, 10):
            if len(set(labels[t:t + 1001])) == 1:
                groups.setdefault(labels[t], []).append((csum[t + 1001] - csum[t + 1]) / 1000)
    assert len(groups) == 3
    means = np.array([np.mean(v) for v in groups.values()])
    within = np.sqrt(np.mean([np.var(v) for v in groups.values()]))
    assert means.std() >= 3 * within
