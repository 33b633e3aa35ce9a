"""Datasets: synthetic city generator, CSV/JSON ingestion, z-scores, windows."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .graph import Station, build_hsg, load_stations, neighbors, save_stations

log = logging.getLogger(__name__)

AIR_VARS = ("pm25", "pm10", "o3", "no2", "so2", "co")
WEATHER_VARS = ("temperature", "humidity", "wind_speed", "pressure")
SPLIT_RATIO = (8, 1, 1)
START_TIME = "2017-01-01T00:00:00"

# Every coefficient of the synthetic city; written verbatim to the manifest.
SYNTH_DEFAULTS = {
    "box_km": 40.0,
    "center_lat": 39.9,
    "center_lon": 116.4,
    "km_per_deg_lat": 111.32,
    "daily_period": 24,
    "burn_in": 48,
    "epsilon_km": 15.0,
    "temp_mean": 12.0,
    "temp_amp": 8.0,
    "temp_peak_hour": 15,
    "temp_heat_island": 2.0,
    "temp_ar": 0.9,
    "temp_noise": 0.5,
    "hum_mean": 55.0,
    "hum_temp_coef": -1.5,
    "hum_ar": 0.9,
    "hum_noise": 1.5,
    "pres_mean": 1013.0,
    "pres_ar": 0.98,
    "pres_noise": 0.3,
    "pres_local_noise": 0.1,
    "wind_base": [2.0, 1.0],
    "wind_amplitude": 1.0,
    "wind_ar": 0.95,
    "wind_noise": 0.3,
    "wind_diurnal": 0.5,
    "wind_peak_hour": 14,
    "wind_local_factor": 0.2,
    "wind_local_noise": 0.1,
    "diffusion_rho": 0.3,
    "dissipation_kappa": 0.05,
    "emission_scale": 1.0,
    "emission_diurnal": 0.7,
    "emission_peak_hour": 8,
    "emission_rate": 0.11,
    "pollutant_scale": [35.0, 60.0, 50.0, 30.0, 8.0, 1.0],
    "air_noise": 0.03,
    "noise_scale": 1.0,
    "uniform_init": None,
}


@dataclass
class NormStats:
    air_mean: np.ndarray
    air_std: np.ndarray
    weather_mean: np.ndarray
    weather_std: np.ndarray

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("air_mean", "air_std", "weather_mean", "weather_std")}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in obj.items()})

    def mean_std(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        return (self.air_mean, self.air_std) if kind == "air" else (self.weather_mean, self.weather_std)


@dataclass
class Split:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def range(self, name: str) -> tuple[int, int]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)


def chronological_split(steps: int, ratio=SPLIT_RATIO) -> Split:
    total = sum(ratio)
    a = int(round(steps * ratio[0] / total))
    b = int(round(steps * (ratio[0] + ratio[1]) / total))
    return Split((0, a), (a, b), (b, steps))


@dataclass
class Dataset:
    """Aligned hourly observations of every station (raw units)."""

    stations: list[Station]
    timestamps: list[str]
    air: np.ndarray          # [steps, m, D_air]
    weather: np.ndarray      # [steps, n, D_weather]
    air_vars: list[str] = field(default_factory=lambda: list(AIR_VARS))
    weather_vars: list[str] = field(default_factory=lambda: list(WEATHER_VARS))
    split: Split | None = None
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if self.split is None:
            self.split = chronological_split(self.steps)

    @property
    def norm(self) -> NormStats:
        """Training-range statistics, fitted on first use."""
        if self.norm_stats is None:
            self.norm_stats = zscore_fit(self)
        return self.norm_stats

    @property
    def steps(self) -> int:
        return self.air.shape[0]

    @property
    def air_stations(self) -> list[Station]:
        return [s for s in self.stations if s.kind == "air"]

    @property
    def weather_stations(self) -> list[Station]:
        return [s for s in self.stations if s.kind == "weather"]

    @property
    def context(self) -> np.ndarray:
        return np.array([s.context for s in self.stations], dtype=np.float64)

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return zscore_apply(self.air, self.norm, "air"), zscore_apply(self.weather, self.norm, "weather")

    def with_series(self, air: np.ndarray, weather: np.ndarray, refit: bool = False) -> "Dataset":
        return Dataset(self.stations, self.timestamps, air, weather, self.air_vars, self.weather_vars,
                       self.split, None if refit else self.norm_stats)


# ---------------------------------------------------------------- z-scores

def zscore_fit(data, names=None):
    """Per-variable mean and population std.

    For a :class:`Dataset` the statistics come from the training range only
    and a :class:`NormStats` is returned; for an array, the last axis
    indexes variables and ``(mean, std)`` is returned.
    """
    if isinstance(data, Dataset):
        lo, hi = data.split.train
        am, ast = zscore_fit(data.air[lo:hi], data.air_vars)
        wm, wst = zscore_fit(data.weather[lo:hi], data.weather_vars)
        return NormStats(am, ast, wm, wst)
    x = np.asarray(data, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.reshape(-1, 1)
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    for k, s in enumerate(sd):
        if not s > 0:
            label = names[k] if names is not None else f"#{k}"
            raise ValidationError(f"variable {label} has zero variance in the fitting range")
    if x.ndim <= 1:
        return float(mu[0]), float(sd[0])
    return mu, sd


def zscore_apply(values, stats, kind: str | None = None):
    mu, sd = stats.mean_std(kind) if isinstance(stats, NormStats) else stats
    return (np.asarray(values, dtype=np.float64) - mu) / sd


def zscore_invert(values, stats, kind: str | None = None):
    mu, sd = stats.mean_std(kind) if isinstance(stats, NormStats) else stats
    return np.asarray(values, dtype=np.float64) * sd + mu


# ---------------------------------------------------------------- windows

@dataclass
class Window:
    start: int
    hist_air: np.ndarray      # [T, m, D_air]
    hist_weather: np.ndarray
    fut_air: np.ndarray       # [tau, m, D_air]
    fut_weather: np.ndarray


@dataclass
class WindowBatch:
    starts: np.ndarray
    hist_air: np.ndarray      # [B, T, m, D_air]
    hist_weather: np.ndarray
    fut_air: np.ndarray       # [B, tau, m, D_air]
    fut_weather: np.ndarray

    @property
    def hist(self):
        return self.hist_air, self.hist_weather

    @property
    def future(self):
        return self.fut_air, self.fut_weather

    def __len__(self) -> int:
        return len(self.starts)


def make_windows(dataset: Dataset, T: int, tau: int, rng_range: tuple[int, int] | str,
                 normalized: bool = True) -> list[Window]:
    """Every stride-1 (T history, tau future) window lying inside ``rng_range``."""
    lo, hi = dataset.split.range(rng_range) if isinstance(rng_range, str) else rng_range
    if hi - lo < T + tau:
        log.warning("range [%d, %d) shorter than T + tau = %d; no windows", lo, hi, T + tau)
        return []
    air, weather = dataset.normalized() if normalized else (dataset.air, dataset.weather)
    out = []
    for s in range(lo, hi - T - tau + 1):
        out.append(Window(s, air[s:s + T], weather[s:s + T],
                          air[s + T:s + T + tau], weather[s + T:s + T + tau]))
    return out


def stack_windows(windows: list[Window]) -> WindowBatch:
    return WindowBatch(np.array([w.start for w in windows]),
                       np.stack([w.hist_air for w in windows]),
                       np.stack([w.hist_weather for w in windows]),
                       np.stack([w.fut_air for w in windows]),
                       np.stack([w.fut_weather for w in windows]))


def persistence_forecast(batch: WindowBatch) -> tuple[np.ndarray, np.ndarray]:
    """Repeat the last observed step over the horizon."""
    tau = batch.fut_air.shape[1]
    pa = np.repeat(batch.hist_air[:, -1:], tau, axis=1)
    pw = np.repeat(batch.hist_weather[:, -1:], tau, axis=1)
    return pa, pw


def inject_noise(dataset: Dataset, sigma: float, seed: int) -> Dataset:
    """Add N(0, sigma) noise, in normalized units, to the training range only."""
    rng = np.random.default_rng(seed)
    lo, hi = dataset.split.train
    air = dataset.air.copy()
    weather = dataset.weather.copy()
    air[lo:hi] += rng.normal(0.0, sigma, air[lo:hi].shape) * dataset.norm.air_std
    weather[lo:hi] += rng.normal(0.0, sigma, weather[lo:hi].shape) * dataset.norm.weather_std
    return dataset.with_series(air, weather)


# ---------------------------------------------------------------- synthetic city

def _timestamps(steps: int, start: str = START_TIME) -> list[str]:
    t0 = datetime.fromisoformat(start)
    return [(t0 + timedelta(hours=k)).isoformat() for k in range(steps)]


def _diurnal(t: np.ndarray | int, peak_hour: float, period: int) -> np.ndarray:
    return np.cos(2.0 * np.pi * (np.asarray(t) - peak_hour) / period)


def generate_synthetic_city(seed: int = 42, m: int = 8, n: int = 4, steps: int = 2000, c_dim: int = 8,
                            T: int = 72, tau: int = 48, **overrides) -> tuple[Dataset, dict]:
    """Simulate a city of ``m`` air and ``n`` weather stations.

    Weather: diurnal temperature cycle with AR(1) noise, humidity tied to
    temperature, a shared latent 2-D wind vector, slow pressure drift.
    Air: graph diffusion among nearby air stations, context-driven
    emissions with a daily traffic cycle, wind-speed dependent dissipation.
    Returns the dataset and its manifest (all coefficients plus the seed).
    """
    if m < 1 or n < 1:
        raise ConfigError(f"need at least one station of each kind, got m={m}, n={n}")
    if steps <= T + tau:
        raise ConfigError(f"steps={steps} must exceed T + tau = {T + tau}")
    unknown = set(overrides) - set(SYNTH_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown synthetic coefficients: {sorted(unknown)}")
    k = {**SYNTH_DEFAULTS, **overrides}
    rng = np.random.default_rng(seed)
    period = k["daily_period"]

    # placement and context
    xy = rng.uniform(0.0, k["box_km"], size=(m + n, 2)) - k["box_km"] / 2
    ctx = rng.uniform(0.0, 1.0, size=(m + n, c_dim))
    lat0 = k["center_lat"]
    stations = []
    for i in range(m + n):
        kind = "air" if i < m else "weather"
        sid = f"A{i:03d}" if kind == "air" else f"W{i - m:03d}"
        lat = lat0 + xy[i, 1] / k["km_per_deg_lat"]
        lon = k["center_lon"] + xy[i, 0] / (k["km_per_deg_lat"] * math.cos(math.radians(lat0)))
        stations.append(Station(sid, kind, round(lat, 6), round(lon, 6), tuple(ctx[i])))
    air_ctx = ctx[:m]
    w_ctx = ctx[m:]

    graph = build_hsg(stations, k["epsilon_km"])
    mix = np.zeros((m, m))
    for i in range(m):
        nb = neighbors(graph, i, "air->air")
        for j, _ in nb:
            mix[i, j] = 1.0 / len(nb)

    total = steps + k["burn_in"]
    t = np.arange(total)
    noise = k["noise_scale"]

    # latent wind vector process
    dev = np.zeros((total, 2))
    for s in range(1, total):
        dev[s] = k["wind_ar"] * dev[s - 1] + rng.normal(0.0, k["wind_noise"] * noise, 2)
    diurnal_w = 1.0 + k["wind_diurnal"] * _diurnal(t, k["wind_peak_hour"], period)
    wind = k["wind_amplitude"] * (np.asarray(k["wind_base"]) + dev) * diurnal_w[:, None]
    speed = np.linalg.norm(wind, axis=1)

    # weather stations
    heat = k["temp_heat_island"] * (w_ctx[:, 0] if c_dim else np.zeros(n))
    temp_cycle = k["temp_amp"] * _diurnal(t, k["temp_peak_hour"], period)
    weather = np.zeros((total, n, 4))
    ta = np.zeros(n)
    ha = np.zeros(n)
    pres = 0.0
    local_f = 1.0 + k["wind_local_factor"] * (w_ctx[:, 1] - 0.5 if c_dim > 1 else np.zeros(n))
    for s in range(total):
        ta = k["temp_ar"] * ta + rng.normal(0.0, k["temp_noise"] * noise, n)
        ha = k["hum_ar"] * ha + rng.normal(0.0, k["hum_noise"] * noise, n)
        pres = k["pres_ar"] * pres + rng.normal(0.0, k["pres_noise"] * noise)
        temp_anom = temp_cycle[s] + heat + ta
        weather[s, :, 0] = k["temp_mean"] + temp_anom
        weather[s, :, 1] = np.clip(k["hum_mean"] + k["hum_temp_coef"] * temp_anom + ha, 0.0, 100.0)
        weather[s, :, 2] = np.maximum(
            speed[s] * local_f + rng.normal(0.0, k["wind_local_noise"] * noise, n), 0.0)
        weather[s, :, 3] = k["pres_mean"] + pres + rng.normal(0.0, k["pres_local_noise"] * noise, n)

    # air stations
    scale = np.asarray(k["pollutant_scale"], dtype=np.float64)[:len(AIR_VARS)]
    w_emit = np.linspace(0.5, 1.5, c_dim) / max(c_dim, 1)
    base = 0.5 + (air_ctx @ w_emit if c_dim else np.zeros(m))
    emission_cycle = 1.0 + k["emission_diurnal"] * _diurnal(t, k["emission_peak_hour"], period)
    emission = k["emission_scale"] * k["emission_rate"] * base[:, None] * scale[None, :]
    air = np.zeros((total, m, len(AIR_VARS)))
    if k["uniform_init"] is not None:
        x = np.full((m, len(AIR_VARS)), float(k["uniform_init"]))
    else:
        x = base[:, None] * scale[None, :]
    for s in range(total):
        air[s] = x
        x = ((1.0 - k["diffusion_rho"]) * x + k["diffusion_rho"] * (mix @ x)
             + emission * emission_cycle[s]
             - k["dissipation_kappa"] * speed[s] * x
             + rng.normal(0.0, 1.0, x.shape) * (k["air_noise"] * noise * scale))
        x = np.maximum(x, 0.0)

    burn = k["burn_in"]
    ds = Dataset(stations, _timestamps(steps), air[burn:], weather[burn:])
    manifest = {"seed": seed, "m": m, "n": n, "steps": steps, "c_dim": c_dim,
                "air_vars": list(AIR_VARS), "weather_vars": list(WEATHER_VARS),
                "start": START_TIME, "coefficients": k}
    return ds, manifest


# ---------------------------------------------------------------- files

def _write_obs(path: Path, timestamps, stations, series, names) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["timestamp", "station_id", *names])
        for s, ts in enumerate(timestamps):
            for i, st in enumerate(stations):
                wr.writerow([ts, st.id, *(repr(float(v)) for v in series[s, i])])


def write_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_stations(out / "stations.json", dataset.stations)
    _write_obs(out / "observations_air.csv", dataset.timestamps, dataset.air_stations,
               dataset.air, dataset.air_vars)
    _write_obs(out / "observations_weather.csv", dataset.timestamps, dataset.weather_stations,
               dataset.weather, dataset.weather_vars)


def _read_obs(path: Path, stations: list[Station]) -> tuple[list[str], list[str], dict]:
    if not path.exists():
        raise DataError(f"missing observations file {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if not header or header[:2] != ["timestamp", "station_id"]:
            raise DataError(f"{path}: header must start with timestamp,station_id")
        names = header[2:]
        known = {s.id for s in stations}
        rows: dict[tuple[str, str], list[float]] = {}
        stamps = set()
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ts, sid = row[0], row[1]
            if sid not in known:
                raise DataError(f"{path}:{lineno}: unknown station {sid!r}")
            try:
                datetime.fromisoformat(ts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from exc
            stamps.add(ts)
            rows[(ts, sid)] = [float(v) if v.strip() else math.nan for v in row[2:]]
    return names, sorted(stamps, key=datetime.fromisoformat), rows


def _assemble(timestamps, stations, rows, width, what) -> np.ndarray:
    out = np.full((len(timestamps), len(stations), width), np.nan)
    for s, ts in enumerate(timestamps):
        for i, st in enumerate(stations):
            vals = rows.get((ts, st.id))
            if vals is not None:
                out[s, i] = vals
    # forward-fill gaps; a gap before the first reading cannot be filled
    for i, st in enumerate(stations):
        for v in range(width):
            col = out[:, i, v]
            if np.isnan(col[0]):
                raise DataError(f"{what}: station {st.id!r} variable #{v} has no reading at {timestamps[0]}")
            for s in range(1, len(col)):
                if np.isnan(col[s]):
                    col[s] = col[s - 1]
    return out


def read_dataset(data_dir: str | Path) -> Dataset:
    """Load ``stations.json`` and the two observation CSVs from ``data_dir``."""
    d = Path(data_dir)
    if not (d / "stations.json").exists():
        raise DataError(f"missing stations file {d / 'stations.json'}")
    stations = load_stations(d / "stations.json")
    air_st = [s for s in stations if s.kind == "air"]
    w_st = [s for s in stations if s.kind == "weather"]
    air_names, air_ts, air_rows = _read_obs(d / "observations_air.csv", air_st)
    w_names, w_ts, w_rows = _read_obs(d / "observations_weather.csv", w_st)
    timestamps = sorted(set(air_ts) | set(w_ts), key=datetime.fromisoformat)
    if not timestamps:
        raise DataError(f"{d}: no observations")
    air = _assemble(timestamps, air_st, air_rows, len(air_names), "air")
    weather = _assemble(timestamps, w_st, w_rows, len(w_names), "weather")
    return Dataset(stations, timestamps, air, weather, air_names, w_names)


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
