import numpy as np
import pytest
from hypothesis import settings

from jointcast.data import generate_synthetic_city
from jointcast.graph import Station, build_hsg

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def small_city():
    """A 3 air / 2 weather synthetic city, short enough for fast tests."""
    ds, manifest = generate_synthetic_city(7, 3, 2, steps=160, T=6, tau=3)
    return ds, manifest


def make_stations(kinds, coords, c_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return [Station(f"s{i}", k, lat, lon, tuple(rng.normal(size=c_dim)))
            for i, (k, (lat, lon)) in enumerate(zip(kinds, coords))]


def path_graph(n=6, spacing_km=10.0, kinds=None, epsilon_km=15.0):
    """Stations on a meridian, ``spacing_km`` apart, so only neighbours connect."""
    kinds = kinds or ["air"] * n
    dlat = spacing_km / 111.195
    coords = [(40.0 + i * dlat, 116.0) for i in range(n)]
    return build_hsg(make_stations(kinds, coords), epsilon_km)


ACCEPTANCE: list[str] = []


def accept(n: int, ok: bool, detail: str) -> None:
    """Record (and echo) one acceptance verdict line."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
