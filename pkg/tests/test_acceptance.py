"""End-to-end acceptance checks; each test prints one verdict line."""
import json
import statistics
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointcast import tensor as tn
from jointcast.data import generate_synthetic_city, inject_noise, make_windows, read_dataset, write_dataset
from jointcast.gradcheck import TOLERANCE, gradcheck_suite
from jointcast.graph import HeteroStationGraph, Station, build_hsg
from jointcast.hrgnn import HRGNN, ChatWeights, ModelDims, chat_apply, chat_scores, embed_pair
from jointcast.metrics import mae, smape
from jointcast.training import (TrainConfig, adaptive_weights, evaluate_windows, fit, group_metrics, load_model,
                                persistence_metrics, save_model)

from conftest import accept, path_graph

HERE = Path(__file__).parent


# ---------------------------------------------------------------- 1 gradients

def test_1_gradient_integrity():
    report = gradcheck_suite("tiny", seed=0, h=1e-5)
    ok = report.worst < TOLERANCE and report.seconds < 120.0
    worst = ", ".join(f"{n}={e:.2e}" for n, e in report.worst_params(3))
    accept(1, ok, f"max rel err {report.worst:.3e} (tol {TOLERANCE:g}) over {len(report.per_param)} "
                  f"params in {report.seconds:.1f}s; worst: {worst}")
    assert report.seconds < 120.0
    assert report.worst < TOLERANCE


# ---------------------------------------------------------------- 2 attention

def _random_config(rng):
    n = int(rng.integers(1, 11))
    kinds = list(rng.choice(["air", "weather"], n))
    c_dim = int(rng.integers(1, 4))
    stations = [Station(f"s{i}", k, 40 + rng.uniform(0, 0.3), 116 + rng.uniform(0, 0.3),
                        tuple(rng.normal(size=c_dim))) for i, k in enumerate(kinds)]
    g = build_hsg(stations, float(rng.uniform(1.0, 40.0)))
    dims = ModelDims(int(rng.integers(2, 9)), 1, int(rng.integers(1, 4)), int(rng.integers(1, 4)), c_dim)
    return g, dims


def test_2_attention_normalization():
    rng = np.random.default_rng(2024)
    worst_sum = worst_shift = 0.0
    rows = 0
    for _ in range(1000):
        g, dims = _random_config(rng)
        model = HRGNN(g, dims, rng=rng)
        L = model.layout
        B = 2
        scale = 10.0 ** rng.uniform(-2, 1)
        air = rng.normal(size=(B, L.m_air, dims.d_air)) * scale
        weather = rng.normal(size=(B, L.n_weather, dims.d_weather)) * scale
        x = embed_pair(model.params, "gen.embed", L, air, weather)
        cw = ChatWeights(model.params, "gen.chat0", L)
        raw = chat_scores(x, cw, dims.alpha).data
        rec = []
        chat_apply(x, cw, dims.alpha, rec)
        att = rec[0]
        nonempty = L.mask.any(axis=-1)                    # [4, N]
        sums = att.sum(axis=-1)                           # [B, 4, N]
        worst_sum = max(worst_sum, np.abs(sums[:, nonempty] - 1.0).max())
        assert np.all(sums[:, ~nonempty] == 0.0)
        assert np.all(att[:, ~L.mask] == 0.0)
        shift = rng.uniform(-50, 50, size=(B, 4, L.n, 1))
        moved = tn.softmax_rows(tn.Value(raw + shift), L.mask).data
        worst_shift = max(worst_shift, np.abs(moved - att).max())
        rows += int(nonempty.sum()) * B
    ok = worst_sum <= 1e-9 and worst_shift <= 1e-9
    accept(2, ok, f"1000 configs, {rows} neighbourhoods; max |sum-1| {worst_sum:.1e}, "
                  f"max shift change {worst_shift:.1e}")
    assert ok


# ---------------------------------------------------------------- 3 weights

_gammas = st.lists(st.floats(0.0, 8.0), min_size=3, max_size=3)


@settings(max_examples=500)
@given(_gammas, st.integers(0, 2), st.floats(1e-6, 8.0), st.floats(0.0, 8.0))
def _weight_contract(g, k, bump, level):
    lam = adaptive_weights(g)
    assert abs(lam.sum() - 1.0) <= 1e-9
    assert np.allclose(adaptive_weights([level] * 3), 1 / 3, atol=1e-15, rtol=0)
    g2 = list(g)
    g2[k] += bump
    assert adaptive_weights(g2)[k] > lam[k]


def test_3_adaptive_weight_contract(small_city):
    _weight_contract()
    # and on a live training stream
    ds, _ = small_city
    res = fit(ds, TrainConfig(d=4, layers=1, T=6, tau=3, lr=0.01, mlp_hidden=4, epochs=2, seed=1))
    iters = [r for r in res.stats if r["type"] == "iter"]
    worst = max(abs(sum(r["lambda"].values()) - 1.0) for r in iters)
    ok = worst <= 1e-9
    accept(3, ok, f"500 random triples; {len(iters)} training iterations, max |sum(lambda)-1| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4 ablation

def test_4_no_adversarial_matches_reference(tmp_path):
    ref = {"city": [7, 3, 2, 160], "T": 6, "tau": 3, "seed": 11, "d": 5, "layers": 2, "epsilon_km": 15.0,
           "lr": 0.02, "epochs": 3, "batch_windows": 16, "teacher_ratio": 0.5}
    (tmp_path / "cfg.json").write_text(json.dumps(ref))
    subprocess.run([sys.executable, str(HERE / "reference_mse_loop.py"), str(tmp_path / "cfg.json"),
                    str(tmp_path / "ref")], check=True)
    ds, _ = generate_synthetic_city(*ref["city"], T=ref["T"], tau=ref["tau"])
    cfg = TrainConfig(d=ref["d"], layers=ref["layers"], T=ref["T"], tau=ref["tau"], lr=ref["lr"],
                      epochs=ref["epochs"], batch_windows=ref["batch_windows"], seed=ref["seed"],
                      teacher_ratio=ref["teacher_ratio"], ablate="no-adversarial")
    res = fit(ds, cfg)
    ours = [r["L_g"] for r in res.stats if r["type"] == "iter"]
    theirs = json.loads((tmp_path / "ref.json").read_text())
    want = np.load(tmp_path / "ref.npz")
    same_params = sorted(want.files) == res.state.model.params.names() and all(
        want[k].tobytes() == res.state.model.params[k].data.tobytes() for k in want.files)
    ok = ours == theirs and same_params
    accept(4, ok, f"{len(ours)} iterations, loss stream identical: {ours == theirs}, "
                  f"{len(want.files)} parameter arrays bitwise equal: {same_params}")
    assert ok


# ---------------------------------------------------------------- 5 locality

@pytest.mark.parametrize("kinds", [["air"] * 6, ["air", "weather"] * 3, ["weather", "air", "air", "weather",
                                                                           "weather", "air"]])
def test_5_locality(kinds):
    g = path_graph(6, kinds=kinds)
    dims = ModelDims(d=6, layers=2, d_air=3, d_weather=2, c_dim=2)
    model = HRGNN(g, dims, rng=np.random.default_rng(5))
    L = model.layout
    rng = np.random.default_rng(6)
    T, tau = 3, 3
    air = rng.normal(size=(1, T, L.m_air, 3))
    weather = rng.normal(size=(1, T, L.n_weather, 2))
    first_kind = kinds[0]
    with tn.no_grad():
        base = model.forward(air, weather, tau)
        base_h = model.encode(air, weather).hidden.data[0]
    checked = 0
    leaks = []
    for t in range(T):
        a2, w2 = air.copy(), weather.copy()
        (a2 if first_kind == "air" else w2)[0, t, 0] += 1.0     # station 0's reading at step t
        with tn.no_grad():
            pred = model.forward(a2, w2, tau)
            h = model.encode(a2, w2).hidden.data[0]
        # encoder: spatial mixing happens once per step, the GRU is per station
        dh = np.abs(h - base_h).max(axis=1)
        leaks += [("h", t, j) for j in range(3, 6) if dh[j] > 1e-12]
        assert np.all(dh[:3] > 1e-12)
        for k in range(tau):
            delta = np.zeros(6)
            delta[L.air_idx] = np.abs(pred[0].data[0, k] - base[0].data[0, k]).max(axis=1)
            delta[L.weather_idx] = np.abs(pred[1].data[0, k] - base[1].data[0, k]).max(axis=1)
            reach = min(2 * (k + 1), 5)
            leaks += [("pred", t, k, j) for j in range(reach + 1, 6) if delta[j] > 1e-12]
            assert np.all(delta[:reach + 1] > 1e-12)
            checked += 6
    ok = not leaks
    accept(5, ok, f"kinds {''.join(k[0] for k in kinds)}: {checked} forecast and {6 * T} hidden outputs checked, "
                  f"leaks beyond 2 hops per step: {leaks or 'none'}")
    assert ok


# ---------------------------------------------------------------- 6 learning signal

LEARN_CFG = dict(d=16, T=24, tau=6, epochs=30, lr=0.03, seed=0)


def test_6_learning_signal():
    t0 = time.perf_counter()
    ds, _ = generate_synthetic_city(42, 8, 4, steps=2000, T=24, tau=6)
    res = fit(ds, TrainConfig(**LEARN_CFG))
    seconds = time.perf_counter() - t0
    base = persistence_metrics(make_windows(ds, 24, 6, "val"), ds.norm)
    ratio = {g: res.best_val[g]["mae"] / base[g]["mae"] for g in ("air", "weather")}
    ok = all(r <= 0.9 for r in ratio.values()) and seconds < 900
    accept(6, ok, f"val MAE / persistence: air {ratio['air']:.3f}, weather {ratio['weather']:.3f} "
                  f"(best epoch {res.best_epoch}); {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------- 7 noise robustness

NOISE_CFG = dict(d=16, T=24, tau=6, epochs=10, lr=0.03)


def _test_score(res, ds, norm):
    out = group_metrics(evaluate_windows(res.state.model, make_windows(ds, 24, 6, "test"), norm, 6))
    # one number per run: MAE in units of each group's training std, summed
    return out, sum(out[g]["mae"] / norm.mean_std(g)[1].mean() for g in out)


def test_7_noise_robustness_direction():
    clean, _ = generate_synthetic_city(42, 8, 4, steps=2000, T=24, tau=6)
    table = []
    for seed in (1, 2, 3):
        noisy = inject_noise(clean, 0.3, seed)
        row = {"seed": seed}
        for label, ablate in (("full", None), ("no_adv", "no-adversarial")):
            res = fit(noisy, TrainConfig(**NOISE_CFG, seed=seed, ablate=ablate))
            # the test range is untouched by the noise
            groups, score = _test_score(res, clean, clean.norm)
            row[label] = score
            row[label + "_air"] = groups["air"]["mae"]
            row[label + "_weather"] = groups["weather"]["mae"]
        table.append(row)
    lines = ["seed  full(air,weather,score)        no-adv(air,weather,score)"]
    for r in table:
        lines.append(f"{r['seed']:4d}  {r['full_air']:7.3f} {r['full_weather']:7.3f} {r['full']:7.4f}   "
                     f"{r['no_adv_air']:7.3f} {r['no_adv_weather']:7.3f} {r['no_adv']:7.4f}")
    print("\n".join(lines))
    med_full = statistics.median(r["full"] for r in table)
    med_plain = statistics.median(r["no_adv"] for r in table)
    worse_everywhere = all(r["full"] > r["no_adv"] for r in table)
    direction = med_full <= med_plain
    accept(7, not worse_everywhere,
           f"median normalized test MAE full {med_full:.4f} vs no-adversarial {med_plain:.4f} "
           f"(direction {'holds' if direction else 'reversed'}; full worse on "
           f"{sum(r['full'] > r['no_adv'] for r in table)}/3 seeds) | " + " ; ".join(lines[1:]))
    assert not worse_everywhere


# ---------------------------------------------------------------- 8 metrics

def _fixtures():
    rng = np.random.default_rng(8)
    fx = [
        ([1.0], [1.0]),
        ([0.0], [0.0]),
        ([1.0, 2.0, 3.0], [2.0, 2.0, 5.0]),
        ([-1.0, 1.0], [1.0, -1.0]),
        ([10.0, 20.0], [11.0, 19.0]),
        ([0.0, 5.0], [5.0, 0.0]),
        ([1e-9, 2e-9], [0.0, 0.0]),
        ([1e6, -1e6], [1e6 + 1.0, -1e6 - 1.0]),
        ([[1.0, 2.0], [3.0, 4.0]], [[1.5, 2.5], [2.0, 4.0]]),
        ([0.25, 0.5, 0.75], [0.5, 0.5, 0.5]),
    ]
    for k in range(10):
        shape = (k % 3 + 1, k % 4 + 2)
        p = np.round(rng.normal(0, 10 ** (k % 4), size=shape), 3)
        t = np.round(p + rng.normal(0, 1.0, size=shape), 3)
        if k % 5 == 0:
            t.flat[0] = 0.0
        fx.append((p.tolist(), t.tolist()))
    return fx


def _flat(x):
    return [v for row in x for v in (row if isinstance(row, list) else [row])]


def _oracle(p, y):
    """Exact rational arithmetic on the float inputs."""
    p, y = [Fraction(v) for v in _flat(p)], [Fraction(v) for v in _flat(y)]
    eps = Fraction(1e-8)
    m = sum(abs(a - b) for a, b in zip(p, y)) / len(p)
    s = sum(abs(a - b) / ((abs(b) + abs(a)) / 2 + eps) for a, b in zip(p, y)) / len(p)
    return float(m), float(s)


HAND = {2: (1.0, (1 / (1.5 + 1e-8) + 0 + 2 / (4 + 1e-8)) / 3), 3: (2.0, 2 / (1 + 1e-8))}


@settings(max_examples=300)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-1e12, 1e12)),
    arrays(np.float64, n, elements=st.floats(-1e12, 1e12)))))
def _smape_bounded(pair):
    v = smape(*pair)
    assert 0.0 <= v <= 2.0


def test_8_metric_correctness():
    fixtures = _fixtures()
    assert len(fixtures) == 20
    worst = 0.0
    for k, (p, y) in enumerate(fixtures):
        om, os_ = _oracle(p, y)
        if k in HAND:
            assert HAND[k][0] == pytest.approx(om, abs=1e-15) and HAND[k][1] == pytest.approx(os_, abs=1e-15)
        worst = max(worst, abs(mae(p, y) - om), abs(smape(p, y) - os_))
    _smape_bounded()
    ok = worst <= 1e-12
    accept(8, ok, f"20 fixtures, max deviation from exact oracle {worst:.1e}; SMAPE in [0, 2] on 300 fuzzed pairs")
    assert ok


# ---------------------------------------------------------------- 9 determinism

def test_9_determinism_and_round_trips(small_city, tmp_path):
    ds, _ = small_city
    cfg = TrainConfig(d=4, layers=2, T=6, tau=3, lr=0.01, mlp_hidden=4, epochs=2, seed=9)
    a, b = fit(ds, cfg), fit(ds, cfg)
    same_stats = json.dumps(a.stats) == json.dumps(b.stats)

    write_dataset(ds, tmp_path / "data")
    back = read_dataset(tmp_path / "data")
    same_data = (back.stations == ds.stations and back.timestamps == ds.timestamps
                 and back.air.tobytes() == ds.air.tobytes() and back.weather.tobytes() == ds.weather.tobytes())

    g = build_hsg(ds.stations, 15.0)
    g.save(tmp_path / "graph.json")
    g2 = HeteroStationGraph.load(tmp_path / "graph.json")
    same_graph = json.dumps(g2.to_json()) == json.dumps(g.to_json()) and g2.adjacency == g.adjacency

    save_model(tmp_path / "m.ckpt", a, ds)
    state, norm = load_model(tmp_path / "m.ckpt", back)
    w = make_windows(back, 6, 3, "test")
    e1 = evaluate_windows(a.state.model, w, ds.norm, 3)
    e2 = evaluate_windows(state.model, w, norm, 3)
    same_eval = all(e1["pred"][k].tobytes() == e2["pred"][k].tobytes() for k in ("air", "weather"))

    ok = same_stats and same_data and same_graph and same_eval
    accept(9, ok, f"stats stream identical: {same_stats}; dataset lossless: {same_data}; "
                  f"graph lossless: {same_graph}; checkpoint evaluation bitwise: {same_eval}")
    assert ok
