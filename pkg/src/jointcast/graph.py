"""Heterogeneous station graph: typed, distance-thresholded directed edges."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
KINDS = ("air", "weather")
# (source kind, target kind); this order fixes the concatenation layout downstream
RELATIONS = (("air", "air"), ("weather", "weather"), ("air", "weather"), ("weather", "air"))
RELATION_NAMES = tuple(f"{s}->{t}" for s, t in RELATIONS)


@dataclass(frozen=True)
class Station:
    id: str
    kind: str
    lat: float
    lon: float
    context: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"station {self.id!r}: kind must be one of {KINDS}, got {self.kind!r}")
        _check_coord(self.lat, self.lon)
        object.__setattr__(self, "context", tuple(float(c) for c in self.context))

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "lat": self.lat, "lon": self.lon,
                "context": list(self.context)}

    @classmethod
    def from_json(cls, obj: dict) -> "Station":
        return cls(str(obj["id"]), obj["kind"], float(obj["lat"]), float(obj["lon"]),
                   tuple(obj.get("context", ())))


def _check_coord(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0) or not (
            math.isfinite(lat) and math.isfinite(lon)):
        raise ValidationError(f"coordinate out of range: lat={lat}, lon={lon}")


def haversine_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) pairs in degrees."""
    _check_coord(*a)
    _check_coord(*b)
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    s = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def relation_name(r) -> str:
    if isinstance(r, tuple) and r in RELATIONS:
        return f"{r[0]}->{r[1]}"
    if isinstance(r, str) and r in RELATION_NAMES:
        return r
    raise ContractError(f"invalid relation {r!r}; expected one of {RELATION_NAMES}")


@dataclass
class HeteroStationGraph:
    """Stations plus, per relation, each target's (source index, km) neighbor list."""

    stations: list[Station]
    epsilon_km: float
    adjacency: dict[str, list[list[tuple[int, float]]]] = field(default_factory=dict)

    @property
    def num_stations(self) -> int:
        return len(self.stations)

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.stations]

    @property
    def context_dim(self) -> int:
        return len(self.stations[0].context) if self.stations else 0

    def context_matrix(self) -> np.ndarray:
        return np.array([s.context for s in self.stations], dtype=np.float64).reshape(
            self.num_stations, self.context_dim)

    def index_of(self, station_id: str) -> int:
        for i, s in enumerate(self.stations):
            if s.id == station_id:
                return i
        raise ContractError(f"unknown station id {station_id!r}")

    def edges(self) -> list[dict]:
        out = []
        for name in RELATION_NAMES:
            for i, nbrs in enumerate(self.adjacency[name]):
                for j, km in nbrs:
                    out.append({"src": self.stations[j].id, "dst": self.stations[i].id,
                                "relation": name, "km": km})
        return out

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Masks ``[4, N, N]`` (target, source) and distances ``d_ij / epsilon``."""
        n = self.num_stations
        mask = np.zeros((len(RELATIONS), n, n), dtype=bool)
        dist = np.zeros((len(RELATIONS), n, n))
        for r, name in enumerate(RELATION_NAMES):
            for i, nbrs in enumerate(self.adjacency[name]):
                for j, km in nbrs:
                    mask[r, i, j] = True
                    dist[r, i, j] = km / self.epsilon_km
        return mask, dist

    def to_json(self) -> dict:
        return {"epsilon_km": self.epsilon_km,
                "stations": [s.to_json() for s in self.stations],
                "edges": self.edges()}

    @classmethod
    def from_json(cls, obj: dict) -> "HeteroStationGraph":
        stations = [Station.from_json(s) for s in obj["stations"]]
        g = cls(stations, float(obj["epsilon_km"]),
                {name: [[] for _ in stations] for name in RELATION_NAMES})
        pos = {s.id: i for i, s in enumerate(stations)}
        for e in obj["edges"]:
            g.adjacency[relation_name(e["relation"])][pos[e["dst"]]].append((pos[e["src"]], float(e["km"])))
        return g

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "HeteroStationGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_hsg(stations: list[Station], epsilon_km: float = 15.0) -> HeteroStationGraph:
    """Connect j -> i under relation (kind j, kind i) whenever d_ij < epsilon.

    Homogeneous relations include each station's own self-loop at distance 0.
    Neighbor lists are sorted by (distance, station id).
    """
    if not epsilon_km > 0:
        raise ValidationError(f"epsilon_km must be positive, got {epsilon_km}")
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate station ids: {dup}")
    dims = {len(s.context) for s in stations}
    if len(dims) > 1:
        raise ValidationError(f"inconsistent context dimensions: {sorted(dims)}")
    for kind in KINDS:
        if not any(s.kind == kind for s in stations):
            log.warning("no %s stations in graph", kind)

    n = len(stations)
    adjacency: dict[str, list[list[tuple[int, float]]]] = {name: [[] for _ in range(n)]
                                                           for name in RELATION_NAMES}
    for i, si in enumerate(stations):
        for j, sj in enumerate(stations):
            km = 0.0 if i == j else haversine_distance((sj.lat, sj.lon), (si.lat, si.lon))
            if km < epsilon_km or i == j:
                adjacency[f"{sj.kind}->{si.kind}"][i].append((j, km))
    for lists in adjacency.values():
        for nbrs in lists:
            nbrs.sort(key=lambda e: (e[1], stations[e[0]].id))
    return HeteroStationGraph(list(stations), float(epsilon_km), adjacency)


def neighbors(g: HeteroStationGraph, i: int, r) -> list[tuple[int, float]]:
    """Source neighbors of target ``i`` under relation ``r``, nearest first."""
    name = relation_name(r)
    if not 0 <= i < g.num_stations:
        raise ContractError(f"station index {i} out of range [0, {g.num_stations})")
    return list(g.adjacency[name][i])


def load_stations(path: str | Path) -> list[Station]:
    return [Station.from_json(o) for o in json.loads(Path(path).read_text())]


def save_stations(path: str | Path, stations: list[Station]) -> None:
    Path(path).write_text(json.dumps([s.to_json() for s in stations], indent=1))
