import math

import numpy as np
import pytest

from jointcast import tensor as tn
from jointcast.adversarial import (DISCRIMINATORS, DiscOutput, city_sequence, disc_loss, gen_adv_loss,
                                   init_discriminators, macro_disc, run_discriminator, spatial_disc,
                                   temporal_disc)
from jointcast.errors import ContractError, DataError
from jointcast.graph import build_hsg
from jointcast.hrgnn import Layout, ModelDims
from jointcast.tensor import ParamStore, Value

from conftest import make_stations


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def _lrelu(v, a=0.2):
    return np.where(v >= 0, v, a * v)


def _gru(P, prefix, h, x):
    W = {k: P[f"{prefix}.{k}"].data for k in ("W_r", "W_z", "W_h", "b_r", "b_z", "b_h")}
    hx = np.concatenate([h, x])
    r = _sig(hx @ W["W_r"] + W["b_r"])
    z = _sig(hx @ W["W_z"] + W["b_z"])
    ht = np.tanh(np.concatenate([r * h, x]) @ W["W_h"] + W["b_h"])
    return (1 - z) * h + z * ht


def _mlp(P, prefix, x):
    hid = _lrelu(x @ P[f"{prefix}.W1"].data + P[f"{prefix}.b1"].data)
    return (hid @ P[f"{prefix}.W2"].data + P[f"{prefix}.b2"].data)[0], hid


@pytest.fixture(scope="module")
def setup():
    # interleaved kinds so the canonical merge order is non-trivial
    kinds = ["weather", "air", "air", "weather", "air"]
    coords = [(40.0 + 0.05 * i, 116.0 + 0.03 * i) for i in range(5)]
    g = build_hsg(make_stations(kinds, coords, c_dim=2), 15.0)
    layout = Layout(g)
    dims = ModelDims(4, 2, 3, 2, 2)
    P = init_discriminators(dims, layout, np.random.default_rng(0), mlp_hidden=5)
    rng = np.random.default_rng(1)
    B, T, tau = 2, 3, 2
    hist = (rng.normal(size=(B, T, 3, 3)), rng.normal(size=(B, T, 2, 2)))
    fut = (rng.normal(size=(B, tau, 3, 3)), rng.normal(size=(B, tau, 2, 2)))
    return layout, dims, P, hist, fut


def test_output_shapes(setup):
    layout, dims, P, hist, fut = setup
    sizes = {"spatial": 2 * 2, "temporal": 2 * 5, "macro": 2}
    for name in DISCRIMINATORS:
        out = run_discriminator(name, hist, fut, P, layout, dims)
        assert out.logit.shape == (sizes[name],)
        assert out.hidden.shape == (sizes[name], 5)


def test_unknown_discriminator(setup):
    layout, dims, P, hist, fut = setup
    with pytest.raises(ContractError):
        run_discriminator("global", hist, fut, P, layout, dims)


def test_city_sequence_canonical_order(setup):
    layout, _, _, hist, _ = setup
    a, w = hist
    seq = city_sequence(a, w, layout).data
    # station order: W0, A0, A1, W1, A2
    want = np.concatenate([w[:, :, 0], a[:, :, 0], a[:, :, 1], w[:, :, 1], a[:, :, 2]], axis=-1)
    assert np.array_equal(seq, want)


def test_macro_rejects_reordered_stations(setup):
    layout, dims, P, hist, _ = setup
    ids = list(reversed(layout.station_ids))
    with pytest.raises(DataError):
        macro_disc(*hist, P, layout, dims, station_ids=ids)


def test_spatial_rejects_wrong_station_count(setup):
    layout, dims, P, _, _ = setup
    with pytest.raises(DataError):
        spatial_disc(np.zeros((1, 2, 3)), np.zeros((1, 2, 2)), P, layout, dims)


def test_temporal_matches_per_station_loop(setup):
    layout, dims, P, hist, _ = setup
    a, w = hist
    out = temporal_disc(a, w, P, layout, dims)
    k = 0
    for b in range(a.shape[0]):
        ai = wi = 0
        for s in layout.graph.stations:
            if s.kind == "air":
                seq, E, ai = a[b, :, ai], P["disc.temporal.embed.air"].data, ai + 1
            else:
                seq, E, wi = w[b, :, wi], P["disc.temporal.embed.weather"].data, wi + 1
            h = np.zeros(dims.d)
            for t in range(seq.shape[0]):
                h = _gru(P, "disc.temporal.gru", h, seq[t] @ E)
            logit, hid = _mlp(P, "disc.temporal.mlp", h)
            assert out.logit.data[k] == pytest.approx(logit, abs=1e-12)
            assert np.allclose(out.hidden.data[k], hid, atol=1e-12)
            k += 1


def test_macro_matches_loop(setup):
    layout, dims, P, hist, _ = setup
    a, w = hist
    out = macro_disc(a, w, P, layout, dims)
    seq = city_sequence(a, w, layout).data
    for b in range(a.shape[0]):
        h = np.zeros(dims.d)
        for t in range(seq.shape[1]):
            h = _gru(P, "disc.macro.gru", h, seq[b, t] @ P["disc.macro.embed"].data)
        logit, _ = _mlp(P, "disc.macro.mlp", h)
        assert out.logit.data[b] == pytest.approx(logit, abs=1e-12)


def test_spatial_window_is_per_step(setup):
    layout, dims, P, _, fut = setup
    out = run_discriminator("spatial", (None, None), fut, P, layout, dims)
    for b in range(2):
        for t in range(2):
            one = spatial_disc(fut[0][b, t][None], fut[1][b, t][None], P, layout, dims)
            assert one.logit.data[0] == pytest.approx(out.logit.data[b * 2 + t], abs=1e-12)


def _out(logits):
    v = Value(np.asarray(logits, dtype=np.float64))
    return DiscOutput(v, v.reshape(-1, 1))


def test_disc_loss_hand_value():
    # -[log s(2) + log(1 - s(-1)) + log(1 - s(0.5))] / 3
    got = disc_loss(_out([2.0]), _out([-1.0, 0.5])).item()
    want = (math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-1.0)) + math.log1p(math.exp(0.5))) / 3
    assert got == pytest.approx(want, abs=1e-15)


def test_perfect_discriminator_has_small_loss():
    assert disc_loss(_out([40.0, 40.0]), _out([-40.0])).item() < 1e-15


def test_gen_adv_loss_is_non_saturating():
    assert gen_adv_loss(_out([0.0])).item() == pytest.approx(math.log(2.0), abs=1e-15)
    # a confident discriminator still leaves a large generator gradient
    x = Value(np.array([-30.0]), requires_grad=True)
    tn.backward(gen_adv_loss(DiscOutput(x, x.reshape(-1, 1))))
    assert x.grad[0] == pytest.approx(-1.0, abs=1e-12)


def test_empty_batches_rejected():
    with pytest.raises(ContractError):
        disc_loss(_out([]), _out([1.0]))
    with pytest.raises(ContractError):
        gen_adv_loss(_out([]))


@pytest.mark.parametrize("name", DISCRIMINATORS)
def test_discriminator_loss_gradcheck(setup, name):
    layout, dims, P, hist, fut = setup
    sub = P.subset(f"disc.{name}.")
    fake = tuple(0.5 * f for f in fut)

    def f(Q):
        return disc_loss(run_discriminator(name, hist, fut, Q, layout, dims),
                         run_discriminator(name, hist, fake, Q, layout, dims))

    assert tn.grad_check(f, sub) < 1e-3


def test_discriminators_use_disjoint_params(setup):
    _, _, P, _, _ = setup
    names = [set(P.subset(f"disc.{d}.").names()) for d in DISCRIMINATORS]
    assert not (names[0] & names[1]) and not (names[1] & names[2]) and not (names[0] & names[2])
    assert set().union(*names) == set(P.names())


def test_init_is_seeded(setup):
    layout, dims, P, _, _ = setup
    again = init_discriminators(dims, layout, np.random.default_rng(0), mlp_hidden=5)
    assert all(np.array_equal(P[n].data, again[n].data) for n in P.names())
    assert isinstance(again, ParamStore)


def _permuted(perm):
    kinds = ["weather", "air", "air", "weather", "air"]
    coords = [(40.0 + 0.05 * i, 116.0 + 0.03 * i) for i in range(5)]
    st_ = make_stations(kinds, coords, c_dim=2)
    return Layout(build_hsg([st_[k] for k in perm], 15.0))


def test_spatial_is_permutation_invariant_macro_is_not(setup):
    layout, dims, P, hist, fut = setup
    perm = [4, 3, 0, 2, 1]                 # air order A2, A1, A0; weather order W1, W0
    other = _permuted(perm)
    a, w = fut
    pa, pw = a[:, :, [2, 1, 0]], w[:, :, [1, 0]]
    s0 = run_discriminator("spatial", hist, fut, P, layout, dims).logit.data
    s1 = run_discriminator("spatial", (None, None), (pa, pw), P, other, dims).logit.data
    assert np.allclose(s0, s1, atol=1e-12, rtol=0)
    ha, hw = hist
    m0 = run_discriminator("macro", hist, fut, P, layout, dims).logit.data
    m1 = run_discriminator("macro", (ha[:, :, [2, 1, 0]], hw[:, :, [1, 0]]), (pa, pw), P, other, dims).logit.data
    assert not np.allclose(m0, m1, atol=1e-6)


def test_disc_step_lowers_disc_loss(setup):
    layout, dims, _, hist, fut = setup
    fake = tuple(0.3 * f + 0.5 for f in fut)       # a frozen toy "generator"
    for name in DISCRIMINATORS:
        P = init_discriminators(dims, layout, np.random.default_rng(2), mlp_hidden=5).subset(f"disc.{name}.")

        def loss():
            return disc_loss(run_discriminator(name, hist, fut, P, layout, dims),
                             run_discriminator(name, hist, fake, P, layout, dims))

        before = loss()
        tn.backward(before)
        tn.sgd_step(P, 0.05)
        assert loss().item() < before.item()
