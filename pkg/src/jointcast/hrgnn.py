"""Heterogeneous recurrent graph network: the joint air/weather forecaster.

Shapes follow ``[batch, station, feature]``.  Station order is the graph's
station list; air and weather observations arrive as separate arrays in the
order those kinds appear in that list.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, DataError, DimensionError
from .graph import KINDS, RELATION_NAMES, RELATIONS, HeteroStationGraph, relation_name
from .tensor import ParamStore, Value

REL_KEYS = tuple(f"{s}_{t}" for s, t in RELATIONS)
INIT_SCHEMES = ("glorot", "inv_sqrt_d")


@dataclass(frozen=True)
class ModelDims:
    d: int = 64
    layers: int = 2
    d_air: int = 6
    d_weather: int = 4
    c_dim: int = 8
    alpha: float = 0.2
    init: str = "glorot"

    def __post_init__(self):
        if self.d <= 0 or self.layers <= 0:
            raise ContractError(f"d and layers must be positive, got d={self.d}, layers={self.layers}")
        if self.init not in INIT_SCHEMES:
            raise ContractError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")

    def obs_dim(self, kind: str) -> int:
        return self.d_air if kind == "air" else self.d_weather


class Layout:
    """Index bookkeeping and dense graph tensors derived from a station graph."""

    def __init__(self, graph: HeteroStationGraph):
        self.graph = graph
        kinds = np.array(graph.kinds)
        self.n = graph.num_stations
        self.air_idx = np.flatnonzero(kinds == "air")
        self.weather_idx = np.flatnonzero(kinds == "weather")
        self.m_air = len(self.air_idx)
        self.n_weather = len(self.weather_idx)
        # concat([air, weather]) -> canonical order
        self.merge_idx = np.argsort(np.concatenate([self.air_idx, self.weather_idx]), kind="stable")
        self.kind_idx = (kinds == "weather").astype(np.intp)
        self.mask, self.dist = graph.dense()
        self.context = graph.context_matrix()
        self.station_ids = [s.id for s in graph.stations]


@dataclass
class ModelState:
    hidden: Value          # [B, N, d]
    step: int
    last_air: object       # [B, m, D_air]
    last_weather: object   # [B, n, D_weather]


def uniform_init(rng: np.random.Generator, shape, bound: float, scheme: str = "glorot") -> np.ndarray:
    """Uniform draw in ``[-bound, bound]``; under ``glorot`` matrices use sqrt(6 / (fan_in + fan_out))."""
    if scheme == "glorot" and len(shape) == 2:
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_chat_params(store: ParamStore, prefix: str, d: int, c_dim: int,
                     rng: np.random.Generator, with_fuse: bool = True, scheme: str = "glorot") -> None:
    b = 1.0 / np.sqrt(d)
    for rel in REL_KEYS:
        store.add(f"{prefix}.{rel}.W", uniform_init(rng, (d, d), b, scheme))
        store.add(f"{prefix}.{rel}.a_dst", uniform_init(rng, (d,), b, scheme))
        store.add(f"{prefix}.{rel}.a_src", uniform_init(rng, (d,), b, scheme))
        store.add(f"{prefix}.{rel}.a_ctx_dst", uniform_init(rng, (c_dim,), b, scheme))
        store.add(f"{prefix}.{rel}.a_ctx_src", uniform_init(rng, (c_dim,), b, scheme))
        store.add(f"{prefix}.{rel}.a_dist", uniform_init(rng, (1,), b, scheme))
    if with_fuse:
        store.add(f"{prefix}.fuse", uniform_init(rng, (len(REL_KEYS) * d, d), b, scheme))


def init_gru_params(store: ParamStore, prefix: str, d_in: int, d: int,
                    rng: np.random.Generator, scheme: str = "glorot") -> None:
    b = 1.0 / np.sqrt(d)
    for gate in ("r", "z", "h"):
        store.add(f"{prefix}.W_{gate}", uniform_init(rng, (d + d_in, d), b, scheme))
        store.add(f"{prefix}.b_{gate}", uniform_init(rng, (d,), b, scheme))


def init_generator(dims: ModelDims, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    scheme = dims.init
    b = 1.0 / np.sqrt(dims.d)
    for kind in KINDS:
        store.add(f"gen.embed.{kind}", uniform_init(rng, (dims.obs_dim(kind), dims.d), b, scheme))
    for k in range(dims.layers):
        init_chat_params(store, f"gen.chat{k}", dims.d, dims.c_dim, rng, scheme=scheme)
    for kind in KINDS:
        init_gru_params(store, f"gen.gru.{kind}", dims.d, dims.d, rng, scheme)
    for kind in KINDS:
        store.add(f"gen.head.{kind}.W1", uniform_init(rng, (dims.d + dims.c_dim, dims.d), b, scheme))
        store.add(f"gen.head.{kind}.b1", uniform_init(rng, (dims.d,), b, scheme))
        store.add(f"gen.head.{kind}.W2", uniform_init(rng, (dims.d, dims.obs_dim(kind)), b, scheme))
        store.add(f"gen.head.{kind}.b2", uniform_init(rng, (dims.obs_dim(kind),), b, scheme))
    return store


# ---------------------------------------------------------------- CHAT block

class ChatWeights:
    """Relation-stacked attention/convolution weights for one CHAT layer.

    Built once per forward pass; the context and distance parts of the
    attention score do not depend on the observations and are folded into
    ``const`` ``[4, N, N]``.
    """

    def __init__(self, P: Mapping[str, Value], prefix: str, layout: Layout, with_fuse: bool = True):
        def stacked(field):
            return tn.stack([P[f"{prefix}.{rel}.{field}"] for rel in REL_KEYS])

        self.W = stacked("W")                              # [4, d, d]
        self.a_dst_T = stacked("a_dst").transpose()         # [d, 4]
        self.a_src_T = stacked("a_src").transpose()
        n = layout.n
        ctx = Value(layout.context)
        cd = (ctx @ stacked("a_ctx_dst").transpose()).transpose().reshape(len(REL_KEYS), n, 1)
        cs = (ctx @ stacked("a_ctx_src").transpose()).transpose().reshape(len(REL_KEYS), 1, n)
        ad = stacked("a_dist").reshape(len(REL_KEYS), 1, 1)
        self.const = cd + cs + ad * layout.dist
        self.mask = layout.mask
        self.fuse = P[f"{prefix}.fuse"] if with_fuse else None


def chat_scores(x: Value, cw: ChatWeights, alpha: float) -> Value:
    """Raw attention scores ``[B, 4, N, N]`` (target axis -2, source axis -1)."""
    b, n, _ = x.shape
    r = len(REL_KEYS)
    sd = (x @ cw.a_dst_T).transpose(0, 2, 1).reshape(b, r, n, 1)
    ss = (x @ cw.a_src_T).transpose(0, 2, 1).reshape(b, r, 1, n)
    return tn.leaky_relu(sd + ss + cw.const, alpha)


def chat_apply(x: Value, cw: ChatWeights, alpha: float, record: list | None = None) -> Value:
    """One CHAT layer on ``x [B, N, d]``; returns the fused ``[B, N, d]`` output.

    Without a fuse matrix the raw ``[B, N, 4d]`` concatenation is returned.
    """
    b, n, d = x.shape
    r = len(REL_KEYS)
    att = tn.softmax_rows(chat_scores(x, cw, alpha), cw.mask)
    if record is not None:
        record.append(att.data.copy())
    msg = x.reshape(b, 1, n, d) @ cw.W                       # [B, 4, N, d]
    agg = tn.leaky_relu(att @ msg, alpha)                      # empty rows stay 0
    cat = agg.transpose(0, 2, 1, 3).reshape(b, n, r * d)
    if cw.fuse is None:
        return cat
    return tn.leaky_relu(cat @ cw.fuse, alpha)


# ---------------------------------------------------------------- GRU

def gru_cell(h: Value, x: Value, W: Mapping[str, Value]) -> Value:
    """Standard GRU update with shared weights; ``h [.., d]``, ``x [.., d_in]``."""
    hx = tn.concat([h, x], axis=-1)
    r = tn.sigmoid(hx @ W["W_r"] + W["b_r"])
    z = tn.sigmoid(hx @ W["W_z"] + W["b_z"])
    h_tilde = tn.tanh(tn.concat([r * h, x], axis=-1) @ W["W_h"] + W["b_h"])
    return (1.0 - z) * h + z * h_tilde


class KindGRU:
    """Per-station selection of the air/weather GRU weights (built once per pass)."""

    def __init__(self, P: Mapping[str, Value], prefix: str, layout: Layout):
        self.W = {}
        for gate in ("r", "z", "h"):
            self.W[f"W_{gate}"] = tn.take(
                tn.stack([P[f"{prefix}.{k}.W_{gate}"] for k in KINDS]), layout.kind_idx, 0)
            self.W[f"b_{gate}"] = tn.take(
                tn.stack([P[f"{prefix}.{k}.b_{gate}"] for k in KINDS]), layout.kind_idx, 0)

    def __call__(self, h: Value, x: Value) -> Value:
        b, n, d = h.shape

        def lin(v, gate):
            out = v.reshape(b, n, 1, v.shape[-1]) @ self.W[f"W_{gate}"]
            return out.reshape(b, n, d) + self.W[f"b_{gate}"]

        hx = tn.concat([h, x], axis=-1)
        r = tn.sigmoid(lin(hx, "r"))
        z = tn.sigmoid(lin(hx, "z"))
        h_tilde = tn.tanh(lin(tn.concat([r * h, x], axis=-1), "h"))
        return (1.0 - z) * h + z * h_tilde


# ---------------------------------------------------------------- generator

def embed_pair(P: Mapping[str, Value], prefix: str, layout: Layout, air, weather) -> Value:
    """Project per-kind observations into ``[B, N, d]`` in canonical station order."""
    ea = tn.as_value(air) @ P[f"{prefix}.air"]
    ew = tn.as_value(weather) @ P[f"{prefix}.weather"]
    return tn.take(tn.concat([ea, ew], axis=1), layout.merge_idx, axis=1)


class HRGNN:
    """Encoder-decoder generator over a heterogeneous station graph."""

    def __init__(self, graph: HeteroStationGraph, dims: ModelDims,
                 params: ParamStore | None = None, rng: np.random.Generator | None = None):
        if graph.context_dim != dims.c_dim:
            raise DimensionError(f"graph context dim {graph.context_dim} vs model c_dim {dims.c_dim}")
        self.graph = graph
        self.dims = dims
        self.layout = Layout(graph)
        if params is None:
            params = init_generator(dims, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    # -- single-station views, mainly for inspection and tests

    def type_transform(self, x, kind: str) -> Value:
        x = tn.as_value(x)
        if x.shape[-1] != self.dims.obs_dim(kind):
            raise ContractError(f"{kind} observation has {x.shape[-1]} entries, expected {self.dims.obs_dim(kind)}")
        W = self.params[f"gen.embed.{kind}"]
        if x.ndim == 1:
            return (x.reshape(1, -1) @ W).reshape(self.dims.d)
        return x @ W

    def attention_weights(self, i: int, r, xt, layer: int = 0) -> np.ndarray:
        """Weights over ``neighbors(graph, i, r)`` given embeddings ``xt [N, d]``."""
        rel = RELATION_NAMES.index(relation_name(r))
        nbrs = self.graph.adjacency[RELATION_NAMES[rel]][i]
        if not nbrs:
            raise ContractError(f"station {i} has no neighbors under {RELATION_NAMES[rel]}")
        cw = ChatWeights(self.params, f"gen.chat{layer}", self.layout)
        x = tn.as_value(np.asarray(tn.as_value(xt).data)[None])
        att = tn.softmax_rows(chat_scores(x, cw, self.dims.alpha), cw.mask).data[0, rel, i]
        return np.array([att[j] for j, _ in nbrs])

    def gconv(self, i: int, r, weights, xt, layer: int = 0) -> Value:
        rel = relation_name(r)
        nbrs = self.graph.adjacency[rel][i]
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(nbrs),):
            raise ContractError(f"{len(weights)} weights for {len(nbrs)} neighbors of station {i} under {rel}")
        xt = tn.as_value(xt)
        W = self.params[f"gen.chat{layer}.{rel.replace('->', '_')}.W"]
        if not nbrs:
            return Value(np.zeros(self.dims.d))
        src = tn.take(xt, [j for j, _ in nbrs], axis=0)
        agg = Value(weights.reshape(1, -1)) @ (src @ W)
        return tn.leaky_relu(agg.reshape(self.dims.d), self.dims.alpha)

    def chat_layer(self, xt, layer_index: int, record: list | None = None) -> Value:
        if not 0 <= layer_index < self.dims.layers:
            raise ContractError(f"layer index {layer_index} outside [0, {self.dims.layers})")
        xt = tn.as_value(xt)
        squeeze = xt.ndim == 2
        x = xt.reshape(1, *xt.shape) if squeeze else xt
        out = chat_apply(x, ChatWeights(self.params, f"gen.chat{layer_index}", self.layout),
                         self.dims.alpha, record)
        return out.reshape(out.shape[1:]) if squeeze else out

    def gru_step(self, h_prev, x, kind: str) -> Value:
        W = {k.split(".")[-1]: v for k, v in self.params.items() if k.startswith(f"gen.gru.{kind}.")}
        h_prev, x = tn.as_value(h_prev), tn.as_value(x)
        if h_prev.ndim == 1:
            return gru_cell(h_prev.reshape(1, -1), x.reshape(1, -1), W).reshape(self.dims.d)
        return gru_cell(h_prev, x, W)

    # -- batched rollout

    def _check(self, air, weather, steps: int | None, what: str) -> None:
        L = self.layout
        exp_a = (L.m_air, self.dims.d_air)
        exp_w = (L.n_weather, self.dims.d_weather)
        air = np.asarray(air)
        weather = np.asarray(weather)
        if air.ndim != 4 or air.shape[2:] != exp_a or weather.ndim != 4 or weather.shape[2:] != exp_w:
            raise DataError(f"{what}: expected air [B, t, {exp_a[0]}, {exp_a[1]}] and weather "
                            f"[B, t, {exp_w[0]}, {exp_w[1]}], got {air.shape} and {weather.shape}")
        if air.shape[:2] != weather.shape[:2] or (steps is not None and air.shape[1] != steps):
            raise DataError(f"{what}: step counts disagree: air {air.shape[:2]}, weather {weather.shape[:2]}"
                            + (f", expected {steps} steps" if steps is not None else ""))
        for name, arr, idx in (("air", air, L.air_idx), ("weather", weather, L.weather_idx)):
            bad = np.argwhere(~np.isfinite(arr))
            if len(bad):
                b, t, s, _ = bad[0]
                raise DataError(f"{what}: missing {name} value at window {b}, step {t}, "
                                f"station {L.station_ids[idx[s]]!r}")

    def _spatial(self, chats: list[ChatWeights], air, weather, record: list | None) -> Value:
        x = embed_pair(self.params, "gen.embed", self.layout, air, weather)
        for k, cw in enumerate(chats):
            x = chat_apply(x, cw, self.dims.alpha, record if k == 0 else None)
        return x

    def _prepare(self):
        chats = [ChatWeights(self.params, f"gen.chat{k}", self.layout) for k in range(self.dims.layers)]
        return chats, KindGRU(self.params, "gen.gru", self.layout)

    def encode(self, hist_air, hist_weather, record: list | None = None, _prepared=None) -> ModelState:
        """Run embed -> CHAT x l -> GRU over every history step from zero hidden state."""
        self._check(hist_air, hist_weather, None, "encode")
        chats, gru = _prepared or self._prepare()
        B, T = hist_air.shape[:2]
        h = Value(np.zeros((B, self.layout.n, self.dims.d)))
        for t in range(T):
            x = self._spatial(chats, hist_air[:, t], hist_weather[:, t], record)
            h = gru(h, x)
        return ModelState(h, T, hist_air[:, -1], hist_weather[:, -1])

    def _head(self, h: Value, kind: str, prev) -> Value:
        L = self.layout
        B = h.shape[0]
        idx = L.air_idx if kind == "air" else L.weather_idx
        ctx = np.broadcast_to(L.context, (B, L.n, self.dims.c_dim))
        hc = tn.take(tn.concat([h, Value(ctx)], axis=-1), idx, axis=1)
        p = f"gen.head.{kind}"
        z = tn.leaky_relu(hc @ self.params[f"{p}.W1"] + self.params[f"{p}.b1"], self.dims.alpha)
        return tn.as_value(prev) + (z @ self.params[f"{p}.W2"] + self.params[f"{p}.b2"])

    def decode(self, state: ModelState, tau: int, teacher=None, teacher_ratio: float = 0.0,
               rng: np.random.Generator | None = None, record: list | None = None,
               _prepared=None) -> tuple[Value, Value]:
        """Autoregressive rollout; returns ``([B, tau, m, D_air], [B, tau, n, D_weather])``.

        ``teacher`` is ``(future_air, future_weather)``; at each step, with
        probability ``teacher_ratio`` (one coin per step drawn from ``rng``),
        the next input is the true observation instead of the prediction.
        """
        if tau < 1:
            raise ContractError(f"tau must be >= 1, got {tau}")
        if teacher is not None:
            ta, tw = (np.asarray(a) for a in teacher)
            B = state.hidden.shape[0]
            L = self.layout
            if ta.shape != (B, tau, L.m_air, self.dims.d_air) or tw.shape != (B, tau, L.n_weather, self.dims.d_weather):
                raise ContractError(f"teacher shapes {ta.shape}, {tw.shape} do not match "
                                    f"batch {B}, tau {tau}, stations ({L.m_air}, {L.n_weather})")
        chats, gru = _prepared or self._prepare()
        h = state.hidden
        prev_a, prev_w = state.last_air, state.last_weather
        outs_a, outs_w = [], []
        for k in range(tau):
            x = self._spatial(chats, prev_a, prev_w, record)
            h = gru(h, x)
            ya = self._head(h, "air", prev_a)
            yw = self._head(h, "weather", prev_w)
            outs_a.append(ya)
            outs_w.append(yw)
            coin = rng.random() if rng is not None else 1.0
            if teacher is not None and coin < teacher_ratio:
                prev_a, prev_w = ta[:, k], tw[:, k]
            else:
                prev_a, prev_w = ya, yw
        return tn.stack(outs_a, axis=1), tn.stack(outs_w, axis=1)

    def forward(self, hist_air, hist_weather, tau: int, teacher=None, teacher_ratio: float = 0.0,
                rng: np.random.Generator | None = None, record: list | None = None) -> tuple[Value, Value]:
        prepared = self._prepare()
        state = self.encode(hist_air, hist_weather, record, prepared)
        return self.decode(state, tau, teacher, teacher_ratio, rng, record, prepared)

    __call__ = forward


def predictive_loss(pred: tuple[Value, Value], target: tuple[np.ndarray, np.ndarray]) -> Value:
    """MSE over every station, step and variable of both kinds (normalized space)."""
    pa, pw = pred
    ta, tw = (np.asarray(t, dtype=np.float64) for t in target)
    if pa.shape != ta.shape or pw.shape != tw.shape:
        raise ContractError(f"prediction shapes {pa.shape}, {pw.shape} vs targets {ta.shape}, {tw.shape}")
    flat_p = tn.concat([pa.reshape(-1), pw.reshape(-1)], axis=0)
    return tn.mse_loss(flat_p, np.concatenate([ta.reshape(-1), tw.reshape(-1)]))
