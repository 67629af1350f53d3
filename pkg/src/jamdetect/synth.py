"""Synthetic LoS/NLoS RSSI and SINR series with injected jamming episodes.

The baseline processes are tuned so long clean runs land on the reported
distribution means (RSSI -84.0 dBm LoS / -95.7 dBm NLoS; SINR -7.7 dB LoS /
-31.2 dB NLoS including jamming). Jammers add interference power, which
lowers SINR by ``10*log10(1 + JNR)`` and raises RSSI by a smaller amount.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

MIN_LENGTH = 300

CONDITIONS = ("LoS", "NLoS")
TERRESTRIAL_USERS = (0, 5, 10)
ATTACKERS = (0, 1, 2, 3, 4)
ATTACKER_POWERS_DBM = (0.0, 2.0, 5.0, 10.0, 20.0)
DISTANCES_M = (100.0, 200.0, 500.0, 1000.0)

# condition -> (rssi mean, rssi spread, sinr overall mean, sinr spread)
CALIBRATION = {
    "LoS": dict(rssi_mean=-84.0, rssi_std=6.0, sinr_mean=-7.7, sinr_std=6.0),
    "NLoS": dict(rssi_mean=-95.7, rssi_std=2.5, sinr_mean=-31.2, sinr_std=1.5),
}
# NLoS SINR mode offsets/weights around the clean mean; weighted offset is zero
NLOS_SINR_MODES = np.array([-12.0, 0.0, 12.0])
NLOS_SINR_WEIGHTS = np.array([0.3, 0.4, 0.3])


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ScenarioConfig:
    condition: str = "LoS"
    terrestrial_users: int = 0
    attackers: int = 0
    attacker_power_dbm: float = 10.0
    distance_m: float = 100.0
    uav_speed_mps: float = 10.0
    length: int = 10_000
    seed: int = 0
    unrestricted: bool = False
    # generator knobs with documented defaults
    attack_fraction: float = 0.3
    episode_mean_steps: float = 400.0
    jammer_ref_dbm: float = -8.0
    rssi_jam_ref_dbm: float = 10.0

    def __post_init__(self):
        cond = {"los": "LoS", "nlos": "NLoS"}.get(str(self.condition).lower())
        if cond is None:
            raise ConfigError(f"condition must be LoS or NLoS, got {self.condition!r}")
        object.__setattr__(self, "condition", cond)
        if self.length < MIN_LENGTH:
            raise ConfigError(f"length must be >= {MIN_LENGTH}, got {self.length}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0.0 < self.attack_fraction < 1.0:
            raise ConfigError("attack_fraction must lie in (0, 1)")
        if self.attackers < 0 or self.terrestrial_users < 0 or self.distance_m <= 0:
            raise ConfigError("counts must be non-negative and distance positive")
        if not self.unrestricted:
            checks = [
                ("terrestrial_users", self.terrestrial_users, TERRESTRIAL_USERS),
                ("attackers", self.attackers, ATTACKERS),
                ("attacker_power_dbm", float(self.attacker_power_dbm), ATTACKER_POWERS_DBM),
                ("distance_m", float(self.distance_m), DISTANCES_M),
            ]
            for name, value, allowed in checks:
                if value not in allowed:
                    raise ConfigError(f"{name}={value} not in {allowed} (use unrestricted=True)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SignalRecord:
    rssi: np.ndarray
    sinr: np.ndarray
    label: np.ndarray
    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        self.rssi = np.asarray(self.rssi, dtype=np.float64)
        self.sinr = np.asarray(self.sinr, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=bool)
        n = len(self.rssi)
        if len(self.sinr) != n or len(self.label) != n:
            raise ConfigError("rssi, sinr and label must have equal length")

    def __len__(self) -> int:
        return len(self.rssi)

    @property
    def attacked_ratio(self) -> float:
        return float(self.label.mean()) if len(self.label) else 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalRecord):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.rssi, other.rssi)
            and np.array_equal(self.sinr, other.sinr)
            and np.array_equal(self.label, other.label)
        )


def jamming_sinr_drop_db(attackers: int, power_dbm: float, distance_m: float = 100.0,
                         ref_dbm: float = 0.0) -> float:
    """SINR loss in dB caused by ``attackers`` jammers of ``power_dbm`` each.

    The jammer-to-noise ratio grows with total jammer power and mildly with the
    UAV-to-base-station distance (weaker serving link).
    """
    if attackers <= 0:
        return 0.0
    jnr_db = power_dbm - ref_dbm + 10.0 * math.log10(attackers) + 5.0 * math.log10(distance_m / 100.0)
    return 10.0 * math.log10(1.0 + 10.0 ** (jnr_db / 10.0))


def _drift(rng: np.random.Generator, n: int, tau: float, std: float) -> np.ndarray:
    """Ornstein-Uhlenbeck path (correlation time ``tau`` steps), demeaned per record."""
    a = math.exp(-1.0 / tau)
    eps = rng.normal(0.0, std * math.sqrt(1.0 - a * a), size=n)
    x0 = rng.normal(0.0, std)
    out, _ = lfilter([1.0], [1.0, -a], eps, zi=[a * x0])
    return out - out.mean()


def _episodes(rng: np.random.Generator, n: int, fraction: float, mean_len: float) -> np.ndarray:
    """Alternating clean/attacked renewal process with exponential durations."""
    label = np.zeros(n, dtype=bool)
    mean_gap = mean_len * (1.0 - fraction) / fraction
    t = int(rng.exponential(mean_gap))
    while t < n:
        dur = max(1, int(round(rng.exponential(mean_len))))
        label[t:t + dur] = True
        t += dur + max(1, int(round(rng.exponential(mean_gap))))
    return label


def generate(config: ScenarioConfig) -> SignalRecord:
    """Simulate one scenario; identical configs give identical records."""
    rng = np.random.default_rng(config.seed)
    n = config.length
    cal = CALIBRATION[config.condition]
    speed_factor = max(config.uav_speed_mps, 1.0) / 10.0
    users_factor = 1.0 + 0.05 * config.terrestrial_users

    if config.attackers > 0:
        label = _episodes(rng, n, config.attack_fraction, config.episode_mean_steps)
    else:
        label = np.zeros(n, dtype=bool)
    drop = jamming_sinr_drop_db(config.attackers, config.attacker_power_dbm,
                                config.distance_m, config.jammer_ref_dbm)
    rise = 0.0
    if config.attackers > 0:
        rise_db = (config.attacker_power_dbm - config.rssi_jam_ref_dbm
                   + 10.0 * math.log10(config.attackers))
        rise = 10.0 * math.log10(1.0 + 10.0 ** (rise_db / 10.0))

    # calibrate on the realised attacked ratio so the overall SINR mean sits
    # on target whatever the jammer strength
    sinr_clean_mean = cal["sinr_mean"] + label.mean() * drop

    tau = 150.0 / speed_factor
    rssi = (cal["rssi_mean"] + _drift(rng, n, tau, 0.8 * cal["rssi_std"])
            + rng.normal(0.0, 0.6 * cal["rssi_std"], n))

    if config.condition == "LoS":
        # right-skewed jitter, zero mean
        skew = (rng.gamma(2.0, 1.0, n) - 2.0) * 0.9 * users_factor
        sinr = sinr_clean_mean + _drift(rng, n, tau, cal["sinr_std"]) + skew
    else:
        # regime switching between three levels, roughly spanning [-50, -20] dB
        dwell = 40.0 / speed_factor
        switch = rng.random(n) < 1.0 / dwell
        draws = rng.choice(3, size=n, p=NLOS_SINR_WEIGHTS)
        draws[0] = rng.choice(3, p=NLOS_SINR_WEIGHTS)
        switch[0] = True
        modes = draws[np.maximum.accumulate(np.where(switch, np.arange(n), 0))]
        offsets = NLOS_SINR_MODES[modes]
        sinr = (sinr_clean_mean + offsets - offsets.mean()
                + _drift(rng, n, tau / 4.0, 0.8 * cal["sinr_std"])
                + rng.normal(0.0, cal["sinr_std"] * users_factor * 0.6, n))

    sinr = sinr - drop * label
    rssi = rssi + rise * label
    return SignalRecord(rssi=rssi, sinr=sinr, label=label, config=config)


def summarize(record: SignalRecord) -> dict:
    """Sample statistics (population std) for each signal plus the attacked ratio."""
    if len(record) == 0:
        raise ValueError("cannot summarize an empty record")
    stats = {}
    for name in ("rssi", "sinr"):
        x = getattr(record, name)
        stats[name] = dict(mean=float(x.mean()), std=float(x.std()),
                           min=float(x.min()), max=float(x.max()))
    stats["attacked_ratio"] = record.attacked_ratio
    stats["length"] = len(record)
    return stats


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def export(record: SignalRecord, path: str | Path) -> Path:
    """Write ``t,rssi_dbm,sinr_db,label`` CSV plus the config sidecar JSON."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rssi_dbm", "sinr_db", "label"])
        for t, (r, s, lab) in enumerate(zip(record.rssi, record.sinr, record.label)):
            w.writerow([t, repr(float(r)), repr(float(s)), int(lab)])
    side = sidecar_path(path)
    side.write_text(json.dumps(record.config.to_dict(), indent=2), encoding="utf-8")
    return path


def load(path: str | Path) -> SignalRecord:
    """Read a record written by :func:`export`. Malformed rows raise ParseError."""
    path = Path(path)
    rssi, sinr, label = [], [], []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "rssi_dbm", "sinr_db", "label"]:
            raise ParseError(f"unexpected header {header}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            try:
                t = int(row[0])
                r, s = float(row[1]), float(row[2])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if t != lineno - 2:
                raise ParseError(f"time index {t} out of sequence", lineno)
            if row[3] not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {row[3]!r}", lineno)
            rssi.append(r)
            sinr.append(s)
            label.append(row[3] == "1")
    side = sidecar_path(path)
    if side.exists():
        try:
            config = ScenarioConfig.from_dict(json.loads(side.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError, ConfigError) as exc:
            raise ParseError(f"bad sidecar {side.name}: {exc}") from None
    else:
        config = ScenarioConfig(length=max(len(rssi), MIN_LENGTH), unrestricted=True)
    if len(rssi) != config.length:
        raise ParseError(f"series has {len(rssi)} rows but sidecar length is {config.length}")
    return SignalRecord(rssi=np.array(rssi), sinr=np.array(sinr), label=np.array(label), config=config)
