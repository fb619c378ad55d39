"""Deterministic synthetic driving fleet.

Stands in for a real CAN-bus corpus.  Each session is a Markov chain over
road regimes (highway / rural / city) driven by a simple longitudinal vehicle
model.  Structure is planted on purpose so the learning tasks have signal:

* blinkers switch on a driver-specific lead time before every turn;
* injected brake slams are preceded by an abrupt gas release 0.5 s earlier
  (can be disabled to build an ablated fleet);
* aggressive launches from a stop produce gas slams;
* the regime sets speed, stop rate, road roughness and engine temperature,
  which dominate 100 s averages;
* slowly varying road grade and bend curvature give pedals, accelerations
  and yaw a persistent component visible at both horizons;
* drivers differ in speed offset, shift points, pedal style and cruise use.

Normal pedal motion is rate limited so that no 0.4 s pedal swing reaches the
hard-brake threshold unless an event was injected.
"""
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .data import BOOLEAN, FLOAT, Channel, ChannelSchema, Session, save_sessions
from .errors import ConfigError

SAMPLE_RATE = 10
DT = 1.0 / SAMPLE_RATE

FLOAT_CHANNELS = (
    "speed", "gas_pedal", "brake_pedal", "heading", "yaw_rate", "steering_angle",
    "long_accel", "lat_accel", "engine_rpm", "fuel_rate", "vertical_accel", "engine_temp",
)
BOOL_CHANNELS = (
    "left_blinker", "right_blinker", "brake_light", "accelerator_active",
    "vehicle_stopped", "cruise_control", "abs_active", "wipers",
)
METADATA_CHANNELS = ("latitude", "longitude")

GEAR_RATIOS = np.array([4.0, 2.4, 1.6, 1.2, 0.95, 0.78])
BASE_SHIFT = np.array([18.0, 34.0, 52.0, 72.0, 95.0])
GRADE_TAU = 90.0  # s
ACCEL_NOISE = 0.8  # m/s^2, accelerometer
SENSOR_NOISE = {"engine_rpm": 150.0, "fuel_rate": 0.8, "lat_accel": 0.5, "yaw_rate": 1.5, "engine_temp": 1.0}
CURVE_TAU = 30.0  # s


def default_schema(extra_float=0, extra_bool=0):
    chans = [Channel(n, FLOAT) for n in FLOAT_CHANNELS]
    chans += [Channel(f"aux_float_{k}", FLOAT) for k in range(extra_float)]
    chans += [Channel(n, BOOLEAN) for n in BOOL_CHANNELS]
    chans += [Channel(f"aux_flag_{k}", BOOLEAN) for k in range(extra_bool)]
    chans += [Channel(n, FLOAT, is_metadata=True) for n in METADATA_CHANNELS]
    return ChannelSchema(tuple(chans))


@dataclass(frozen=True)
class RoadRegime:
    kind: str
    speed_limit: float  # km/h
    turn_rate: float  # turns per minute
    stop_rate: float  # stops per minute
    mean_dwell: float  # seconds
    transitions: dict
    roughness: float = 0.1
    engine_temp: float = 90.0
    hilliness: float = 2.0  # road grade std, percent
    curviness: float = 0.03  # bend curvature std, deg/m

    def __post_init__(self):
        if self.mean_dwell <= 0:
            raise ConfigError(f"regime {self.kind}: dwell time must be positive")
        probs = np.array(list(self.transitions.values()), dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"regime {self.kind}: transitions must be a probability vector")


DEFAULT_REGIMES = (
    RoadRegime("highway", 120.0, 0.0, 0.0, 400.0, {"rural": 0.7, "city": 0.3}, roughness=0.05, engine_temp=97.0,
               hilliness=3.0, curviness=0.03),
    RoadRegime("rural", 80.0, 0.5, 0.3, 320.0, {"highway": 0.5, "city": 0.5}, roughness=0.35, engine_temp=91.0,
               hilliness=5.0, curviness=0.12),
    RoadRegime("city", 45.0, 1.2, 2.0, 320.0, {"highway": 0.35, "rural": 0.65}, roughness=0.15, engine_temp=86.0,
               hilliness=2.0, curviness=0.06),
)


@dataclass(frozen=True)
class DriverProfile:
    driver_id: str
    aggressiveness: float  # [0, 1]
    speed_offset: float  # km/h, [-15, 15]
    blinker_lead: float  # s, [1, 4]
    pedal_smoothness: float  # [0, 1], 1 = smoothest
    slam_rate: float  # brake slams per hour, >= 0
    shift_factor: float  # [0.75, 1.35], scales upshift speeds
    cruise_use: float  # [0, 1]
    launch_slam_prob: float  # [0, 1], share of launches that are gas slams

    def __post_init__(self):
        checks = [
            ("aggressiveness", 0, 1), ("speed_offset", -15, 15), ("blinker_lead", 1, 4),
            ("pedal_smoothness", 0, 1), ("shift_factor", 0.75, 1.35), ("cruise_use", 0, 1),
            ("launch_slam_prob", 0, 1),
        ]
        for name, lo, hi in checks:
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")
        if self.slam_rate < 0:
            raise ConfigError("slam_rate must be >= 0")


@dataclass(frozen=True)
class SynthConfig:
    n_drivers: int = 6
    sessions_per_driver: int = 4
    duration_s: float = 900.0
    seed: int = 0
    extra_float: int = 0
    extra_bool: int = 0
    slam_rate: tuple = (40.0, 80.0)  # per-hour range across drivers
    slam_precursor: bool = True
    precursor_lead_s: float = 0.5
    slam_level: tuple = (65.0, 95.0)  # brake units, well above the 25-unit threshold
    slam_hold_s: tuple = (1.5, 2.5)
    regimes: tuple = DEFAULT_REGIMES

    def __post_init__(self):
        if self.duration_s < 120:
            raise ConfigError("sessions must last at least 120 s so 100 s horizons exist")
        if self.n_drivers < 2:
            raise ConfigError("need at least two drivers")
        if self.sessions_per_driver < 1:
            raise ConfigError("need at least one session per driver")

    def to_json(self):
        d = asdict(self)
        d["regimes"] = [asdict(r) for r in self.regimes]
        return d


@dataclass
class Fleet:
    schema: ChannelSchema
    sessions: list
    events: list  # dicts: kind, session_id, start, end, detail
    profiles: list
    config: SynthConfig = None

    def events_for(self, session_id, kind=None):
        return [e for e in self.events if e["session_id"] == session_id and (kind is None or e["kind"] == kind)]


def make_profile(config, index):
    """Driver profile, deterministic in (seed, driver index).

    Speed offsets and shift points are stratified over the fleet so that
    drivers stay distinguishable; the rest is drawn independently.
    """
    n = config.n_drivers
    rng = np.random.default_rng([config.seed, index, 7])
    frac = index / (n - 1)
    # a seeded permutation decorrelates shift style from speed offset
    perm = np.random.default_rng([config.seed, 99]).permutation(n)
    shift_frac = perm[index] / (n - 1)
    lo, hi = config.slam_rate
    return DriverProfile(
        driver_id=f"driver{index:02d}",
        aggressiveness=float(np.clip(rng.uniform(0.0, 1.0), 0, 1)),
        speed_offset=float(np.clip(-12.0 + 24.0 * frac + rng.uniform(-1.0, 1.0), -15, 15)),
        blinker_lead=float(rng.uniform(1.0, 4.0)),
        pedal_smoothness=float(rng.uniform(0.0, 1.0)),
        slam_rate=float(rng.uniform(lo, hi)),
        shift_factor=float(np.clip(0.78 + 0.54 * shift_frac + rng.uniform(-0.02, 0.02), 0.75, 1.35)),
        cruise_use=float(rng.uniform(0.0, 1.0)),
        launch_slam_prob=float(rng.uniform(0.5, 0.95)),
    )


# ------------------------------------------------------------------ schedule


def _regime_sequence(config, rng, T):
    regimes = {r.kind: r for r in config.regimes}
    kinds = [r.kind for r in config.regimes]
    seq = np.empty(T, dtype=int)
    changes = []
    k = int(rng.integers(len(kinds)))
    t = 0
    while t < T:
        r = regimes[kinds[k]]
        dwell = max(60.0, rng.exponential(r.mean_dwell))
        end = min(T, t + int(dwell * SAMPLE_RATE))
        seq[t:end] = k
        if end < T:
            nxt = list(r.transitions)
            p = np.array([r.transitions[n] for n in nxt])
            k_new = kinds.index(nxt[int(rng.choice(len(nxt), p=p))])
            changes.append((end, kinds[k], kinds[k_new]))
            k = k_new
        t = end
    return seq, changes


class _Busy:
    """Sample-interval occupancy so injected maneuvers never overlap."""

    def __init__(self, T):
        self.mask = np.zeros(T, dtype=bool)

    def free(self, a, b):
        a, b = max(a, 0), min(b, self.mask.size)
        return a < b and not self.mask[a:b].any()

    def take(self, a, b):
        self.mask[max(a, 0):min(b, self.mask.size)] = True


def generate_session(profile, config, session_seed, session_id=None, schema=None):
    """Simulate one session.  Returns ``(Session, events)``."""
    schema = schema or default_schema(config.extra_float, config.extra_bool)
    session_id = session_id or f"{profile.driver_id}_s{session_seed}"
    rng = np.random.default_rng([config.seed, session_seed, 11])
    T = int(round(config.duration_s * SAMPLE_RATE))
    regimes = list(config.regimes)
    seq, changes = _regime_sequence(config, rng, T)
    limit = np.array([regimes[k].speed_limit for k in seq])
    events = []
    for idx, old, new in changes:
        events.append({"kind": "regime_change", "session_id": session_id, "start": idx, "end": idx,
                       "detail": f"{old}->{new}"})

    a = profile.aggressiveness
    smooth = profile.pedal_smoothness
    v_target = np.maximum(limit + profile.speed_offset * (limit / 80.0), 20.0)
    yaw = np.zeros(T)
    left = np.zeros(T)
    right = np.zeros(T)
    gas_ovr = np.full(T, np.nan)
    brake_ovr = np.full(T, np.nan)
    busy = _Busy(T)
    heading_bias = 0.0

    def add_turn(start, angle, turn_speed):
        nonlocal heading_bias
        dur = int(rng.uniform(4.0, 6.0) * SAMPLE_RATE)
        lead = int(profile.blinker_lead * SAMPLE_RATE)
        approach = 3 * SAMPLE_RATE
        if not busy.free(start - lead - approach, start + dur + 10):
            return False
        busy.take(start - lead - approach, start + dur + 10)
        s = np.arange(dur)
        profile_deg = np.sin(np.pi * (s + 0.5) / dur)
        profile_deg *= angle / (profile_deg.sum() * DT)
        yaw[start:start + dur] = profile_deg[: max(0, min(dur, T - start))]
        lo = max(0, start - approach)
        v_target[lo:start + dur] = np.minimum(v_target[lo:start + dur], turn_speed)
        blink = left if angle > 0 else right
        blink[max(0, start - lead):start + dur] = 1.0
        heading_bias += angle
        events.append({"kind": "turn", "session_id": session_id, "start": int(start), "end": int(start + dur),
                       "detail": f"{angle:+.1f}"})
        return True

    def pick_angle(lo, hi):
        # steer back toward the initial heading so it stays bounded
        mag = rng.uniform(lo, hi)
        if abs(heading_bias) > 30 and rng.random() < 0.9:
            return -np.sign(heading_bias) * mag
        return mag if rng.random() < 0.5 else -mag

    # regime changes always come with a junction turn
    for idx, old, new in changes:
        speed = 50.0 if "highway" in (old, new) else 35.0
        add_turn(idx, pick_angle(35, 70), speed)

    # stops (and launches from them)
    for k, r in enumerate(regimes):
        if r.stop_rate <= 0:
            continue
        n_stops = rng.poisson(r.stop_rate * (seq == k).sum() / SAMPLE_RATE / 60.0)
        cand = np.flatnonzero(seq == k)
        for start in np.sort(rng.choice(cand, size=min(n_stops, cand.size), replace=False)):
            approach = int(SAMPLE_RATE * (4.0 + v_target[start] / 12.0))
            hold = int(rng.uniform(4.0, 15.0) * SAMPLE_RATE)
            launch = int(start) + approach + hold
            if launch + 40 >= T or not busy.free(int(start) - 20, launch + 40):
                continue
            busy.take(int(start) - 20, launch + 40)
            v_target[start:launch] = 0.0
            events.append({"kind": "stop", "session_id": session_id, "start": int(start), "end": int(launch),
                           "detail": ""})
            if rng.random() < profile.launch_slam_prob:
                level = rng.uniform(85.0, 100.0)
                dur = int(rng.uniform(2.0, 3.0) * SAMPLE_RATE)
                gas_ovr[launch] = 0.5 * level
                gas_ovr[launch + 1:launch + dur] = level
                events.append({"kind": "gas_slam", "session_id": session_id, "start": int(launch),
                               "end": int(launch + dur), "detail": f"{level:.1f}"})

    # ordinary turns
    for k, r in enumerate(regimes):
        if r.turn_rate <= 0:
            continue
        n_turns = rng.poisson(r.turn_rate * (seq == k).sum() / SAMPLE_RATE / 60.0)
        cand = np.flatnonzero(seq == k)
        for start in np.sort(rng.choice(cand, size=min(n_turns, cand.size), replace=False)):
            if start > 60 and start < T - 80:
                add_turn(int(start), pick_angle(60, 95), 25.0 if r.kind == "city" else 35.0)

    # brake slams with optional precursor (abrupt gas release)
    n_slams = rng.poisson(profile.slam_rate * config.duration_s / 3600.0)
    lead = int(round(config.precursor_lead_s * SAMPLE_RATE))
    for _ in range(n_slams):
        for _attempt in range(20):
            s = int(rng.integers(150, T - 150))
            hold = int(rng.uniform(*config.slam_hold_s) * SAMPLE_RATE)
            if v_target[s] >= 40 and busy.free(s - lead - 30, s + hold + 60):
                break
        else:
            continue
        busy.take(s - lead - 30, s + hold + 60)
        level = rng.uniform(*config.slam_level)
        if config.slam_precursor:
            gas_ovr[s - lead:s] = 0.0
        brake_ovr[s] = 0.5 * level
        brake_ovr[s + 1:s + hold] = level
        events.append({"kind": "brake_slam", "session_id": session_id, "start": int(s), "end": int(s + hold),
                       "detail": f"{level:.1f}"})

    temp_target = np.array([regimes[k].engine_temp for k in seq])
    rough = np.array([regimes[k].roughness for k in seq])
    gain = 0.35 + 0.5 * a
    phi_g, phi_c = np.exp(-DT / GRADE_TAU), np.exp(-DT / CURVE_TAU)
    hilly = np.array([regimes[k].hilliness for k in seq]) * np.sqrt(1.0 - phi_g ** 2)
    curvy = np.array([regimes[k].curviness for k in seq]) * np.sqrt(1.0 - phi_c ** 2)
    out = _kernels.simulate_vehicle(
        np.ascontiguousarray(v_target), yaw, gas_ovr, brake_ovr, 12.0,
        rng.normal(0.0, 0.6 * (1.0 - smooth) + 0.1, T),
        rng.normal(0.0, ACCEL_NOISE, T),
        rng.normal(0.0, 0.25, T),
        rng.normal(0.0, 0.01, T),
        temp_target, gain, 6.0 + 6.0 * a, 6.0 + 4.0 * a, 0.12 + 0.35 * (1.0 - smooth),
        3.0 + 4.5 * a, BASE_SHIFT * profile.shift_factor, float(v_target[0]),
        rng.normal(0.0, 1.0, T) * hilly, rng.normal(0.0, 1.0, T) * curvy, phi_g, phi_c,
    )
    speed, gas, brake, accel, gear, heading, yawr = (out[:, j] for j in range(7))
    x, y, temp = out[:, 7], out[:, 8], out[:, 9]

    ratio = GEAR_RATIOS[gear.astype(int) - 1]
    rpm = 800.0 + speed * ratio * 32.0
    fuel = 0.3 + 0.04 * gas * (1.0 + rpm / 3000.0)
    steer = yawr * 150.0 / np.maximum(speed, 10.0)
    lat_acc = speed / 3.6 * np.deg2rad(yawr)
    # sensor noise on top of the physical state
    rpm = rpm + rng.normal(0.0, SENSOR_NOISE["engine_rpm"], T)
    fuel = fuel + rng.normal(0.0, SENSOR_NOISE["fuel_rate"], T)
    lat_acc = lat_acc + rng.normal(0.0, SENSOR_NOISE["lat_accel"], T)
    yaw_meas = yawr + rng.normal(0.0, SENSOR_NOISE["yaw_rate"], T)
    temp = temp + rng.normal(0.0, SENSOR_NOISE["engine_temp"], T)
    vert = rng.normal(0.0, 1.0, T) * rough * (0.3 + speed / 100.0)

    slam_active = ~np.isnan(brake_ovr)
    cruise_on = (np.array([regimes[k].kind for k in seq]) == "highway") & (brake < 1.0)
    cruise_on &= rng.random() < profile.cruise_use + 0.2
    cruise_on &= np.abs(speed - v_target) < 8.0
    wipers = np.zeros(T)
    if rng.random() < 0.3:
        a0 = int(rng.integers(0, T // 2))
        wipers[a0:a0 + int(rng.integers(T // 10, T // 2))] = 1.0

    cols = {
        "speed": speed, "gas_pedal": gas, "brake_pedal": brake, "heading": heading,
        "yaw_rate": yaw_meas, "steering_angle": steer, "long_accel": accel, "lat_accel": lat_acc,
        "engine_rpm": rpm, "fuel_rate": fuel, "vertical_accel": vert, "engine_temp": temp,
        "left_blinker": left, "right_blinker": right,
        "brake_light": (brake > 2.0).astype(float), "accelerator_active": (gas > 2.0).astype(float),
        "vehicle_stopped": (speed < 0.5).astype(float), "cruise_control": cruise_on.astype(float),
        "abs_active": (slam_active & (speed > 5.0)).astype(float), "wipers": wipers,
    }
    base_float = np.column_stack([cols[n] for n in FLOAT_CHANNELS[:6]])
    for k in range(config.extra_float):
        w = rng.normal(size=6)
        cols[f"aux_float_{k}"] = (base_float - base_float.mean(0)) / (base_float.std(0) + 1e-9) @ w \
            + rng.normal(0.0, 0.5, T)
    for k in range(config.extra_bool):
        flag = np.zeros(T)
        for _ in range(int(rng.integers(1, 4))):
            a0 = int(rng.integers(0, T))
            flag[a0:a0 + int(rng.integers(50, 2000))] = 1.0
        cols[f"aux_flag_{k}"] = flag

    lat0 = 48.7 + 0.01 * (session_seed % 17)
    lon0 = 11.4 + 0.01 * (session_seed % 13)
    cols["latitude"] = lat0 + y / 111_111.0
    cols["longitude"] = lon0 + x / (111_111.0 * np.cos(np.deg2rad(lat0)))
    values = np.column_stack([cols[n] for n in schema.names])
    events.sort(key=lambda e: (e["start"], e["kind"]))
    return Session(session_id, profile.driver_id, values, schema), events


def make_fleet(config=SynthConfig()):
    schema = default_schema(config.extra_float, config.extra_bool)
    profiles = [make_profile(config, i) for i in range(config.n_drivers)]
    sessions, events = [], []
    for i, prof in enumerate(profiles):
        for j in range(config.sessions_per_driver):
            seed = i * 1000 + j
            s, ev = generate_session(prof, config, seed, session_id=f"{prof.driver_id}_s{j:02d}", schema=schema)
            sessions.append(s)
            events.extend(ev)
    return Fleet(schema, sessions, events, profiles, config)


EVENT_FIELDS = ("kind", "session_id", "start", "end", "detail")


def write_fleet(fleet, directory):
    """Session CSVs + sidecars, ``events.csv`` and ``profiles.json``."""
    directory = Path(directory)
    save_sessions(directory / "sessions", fleet.sessions)
    with open(directory / "events.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVENT_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in fleet.events:
            w.writerow(e)
    meta = {"profiles": [asdict(p) for p in fleet.profiles],
            "config": fleet.config.to_json() if fleet.config else None}
    (directory / "profiles.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_events(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["start"] = int(r["start"])
        r["end"] = int(r["end"])
    return rows
