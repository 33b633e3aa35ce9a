"""Spatial, temporal and city-level discriminators and their losses.

Each discriminator returns a :class:`DiscOutput` with one logit per sample
and the hidden activations feeding its final layer; the latter drive the
adaptive loss weighting in :mod:`jointcast.training`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, DataError
from .graph import KINDS
from .hrgnn import (ChatWeights, Layout, ModelDims, chat_apply, embed_pair, gru_cell, init_chat_params,
                    init_gru_params, uniform_init)
from .tensor import ParamStore, Value

DISCRIMINATORS = ("spatial", "temporal", "macro")


@dataclass
class DiscOutput:
    logit: Value    # [S]
    hidden: Value   # [S, mlp_hidden]


def _init_mlp(store: ParamStore, prefix: str, d_in: int, hidden: int, bound: float,
              rng: np.random.Generator, scheme: str) -> None:
    store.add(f"{prefix}.W1", uniform_init(rng, (d_in, hidden), bound, scheme))
    store.add(f"{prefix}.b1", uniform_init(rng, (hidden,), bound, scheme))
    store.add(f"{prefix}.W2", uniform_init(rng, (hidden, 1), bound, scheme))
    store.add(f"{prefix}.b2", uniform_init(rng, (1,), bound, scheme))


def init_discriminators(dims: ModelDims, layout: Layout, rng: np.random.Generator,
                        mlp_hidden: int = 64) -> ParamStore:
    store = ParamStore()
    d, scheme = dims.d, dims.init
    b = 1.0 / np.sqrt(d)
    for kind in KINDS:
        store.add(f"disc.spatial.embed.{kind}", uniform_init(rng, (dims.obs_dim(kind), d), b, scheme))
    init_chat_params(store, "disc.spatial.chat", d, dims.c_dim, rng, scheme=scheme)
    _init_mlp(store, "disc.spatial.mlp", d, mlp_hidden, b, rng, scheme)

    for kind in KINDS:
        store.add(f"disc.temporal.embed.{kind}", uniform_init(rng, (dims.obs_dim(kind), d), b, scheme))
    init_gru_params(store, "disc.temporal.gru", d, d, rng, scheme)
    _init_mlp(store, "disc.temporal.mlp", d, mlp_hidden, b, rng, scheme)

    flat = layout.m_air * dims.d_air + layout.n_weather * dims.d_weather
    store.add("disc.macro.embed", uniform_init(rng, (flat, d), b, scheme))
    init_gru_params(store, "disc.macro.gru", d, d, rng, scheme)
    _init_mlp(store, "disc.macro.mlp", d, mlp_hidden, b, rng, scheme)
    return store


def _mlp(P: Mapping[str, Value], prefix: str, x: Value, alpha: float) -> DiscOutput:
    hidden = tn.leaky_relu(x @ P[f"{prefix}.W1"] + P[f"{prefix}.b1"], alpha)
    logit = (hidden @ P[f"{prefix}.W2"] + P[f"{prefix}.b2"]).reshape(-1)
    return DiscOutput(logit, hidden)


def _gru_weights(P: Mapping[str, Value], prefix: str) -> dict[str, Value]:
    return {k: P[f"{prefix}.{k}"] for k in ("W_r", "W_z", "W_h", "b_r", "b_z", "b_h")}


def spatial_disc(air, weather, P: Mapping[str, Value], layout: Layout, dims: ModelDims) -> DiscOutput:
    """Score city snapshots ``air [S, m, D_air]``, ``weather [S, n, D_weather]``.

    Embed per kind, one CHAT layer, mean over stations, then the MLP.
    """
    air, weather = tn.as_value(air), tn.as_value(weather)
    if air.shape[1] != layout.m_air or weather.shape[1] != layout.n_weather:
        raise DataError(f"spatial snapshot has {air.shape[1]} air / {weather.shape[1]} weather stations, "
                        f"expected {layout.m_air} / {layout.n_weather}")
    x = embed_pair(P, "disc.spatial.embed", layout, air, weather)
    x = chat_apply(x, ChatWeights(P, "disc.spatial.chat", layout), dims.alpha)
    return _mlp(P, "disc.spatial.mlp", x.mean(axis=1), dims.alpha)


def spatial_disc_window(seq_air, seq_weather, P, layout, dims) -> DiscOutput:
    """Apply :func:`spatial_disc` to every step of ``[B, tau, ...]`` sequences."""
    a, w = tn.as_value(seq_air), tn.as_value(seq_weather)
    B, tau = a.shape[:2]
    return spatial_disc(a.reshape(B * tau, *a.shape[2:]), w.reshape(B * tau, *w.shape[2:]), P, layout, dims)


def temporal_disc(seq_air, seq_weather, P: Mapping[str, Value], layout: Layout, dims: ModelDims,
                  length: int | None = None) -> DiscOutput:
    """Score every station's own sequence; samples are ``B * N`` (window-major, station order)."""
    a, w = tn.as_value(seq_air), tn.as_value(seq_weather)
    B, L = a.shape[:2]
    if length is not None and L != length:
        raise ContractError(f"temporal sequence has {L} steps, expected {length}")
    x = embed_pair(P, "disc.temporal.embed", layout,
                   a.reshape(B * L, *a.shape[2:]), w.reshape(B * L, *w.shape[2:]))
    x = x.reshape(B, L, layout.n, dims.d)
    W = _gru_weights(P, "disc.temporal.gru")
    h = Value(np.zeros((B, layout.n, dims.d)))
    for t in range(L):
        h = gru_cell(h, x[:, t], W)
    return _mlp(P, "disc.temporal.mlp", h.reshape(B * layout.n, dims.d), dims.alpha)


def city_sequence(seq_air, seq_weather, layout: Layout, station_ids: list[str] | None = None) -> Value:
    """Concatenate all stations' vectors per step in canonical station order."""
    if station_ids is not None and list(station_ids) != layout.station_ids:
        raise DataError("station ordering differs from the dataset manifest")
    a, w = tn.as_value(seq_air), tn.as_value(seq_weather)
    B, L = a.shape[:2]
    parts = [a[:, :, i] for i in range(layout.m_air)] + [w[:, :, j] for j in range(layout.n_weather)]
    ordered = [parts[k] for k in layout.merge_idx]
    return tn.concat(ordered, axis=-1)


def macro_disc(seq_air, seq_weather, P: Mapping[str, Value], layout: Layout, dims: ModelDims,
               station_ids: list[str] | None = None) -> DiscOutput:
    """One logit per window from the flattened whole-city sequence."""
    x = city_sequence(seq_air, seq_weather, layout, station_ids) @ P["disc.macro.embed"]
    B, L = x.shape[:2]
    W = _gru_weights(P, "disc.macro.gru")
    h = Value(np.zeros((B, dims.d)))
    for t in range(L):
        h = gru_cell(h, x[:, t], W)
    return _mlp(P, "disc.macro.mlp", h, dims.alpha)


def disc_loss(real: DiscOutput, fake: DiscOutput) -> Value:
    """BCE with real labelled 1 and fake 0, averaged over the pooled batch."""
    if real.logit.shape[0] == 0 or fake.logit.shape[0] == 0:
        raise ContractError("disc_loss on an empty batch")
    logits = tn.concat([real.logit, fake.logit], axis=0)
    labels = np.concatenate([np.ones(real.logit.shape[0]), np.zeros(fake.logit.shape[0])])
    return tn.bce_with_logits(logits, labels)


def gen_adv_loss(fake: DiscOutput) -> Value:
    """Non-saturating generator loss: mean of -log sigmoid(fake logit)."""
    if fake.logit.shape[0] == 0:
        raise ContractError("gen_adv_loss on an empty batch")
    return tn.bce_with_logits(fake.logit, 1.0)


def run_discriminator(name: str, hist, fut, P: Mapping[str, Value], layout: Layout,
                      dims: ModelDims) -> DiscOutput:
    """Evaluate discriminator ``name`` on a window batch.

    ``hist`` and ``fut`` are ``(air, weather)`` pairs; the future part is
    either ground truth or generator output, the history is always real.
    """
    ha, hw = hist
    fa, fw = fut
    if name == "spatial":
        return spatial_disc_window(fa, fw, P, layout, dims)
    seq_a = tn.concat([tn.as_value(ha), tn.as_value(fa)], axis=1)
    seq_w = tn.concat([tn.as_value(hw), tn.as_value(fw)], axis=1)
    if name == "temporal":
        return temporal_disc(seq_a, seq_w, P, layout, dims)
    if name == "macro":
        return macro_disc(seq_a, seq_w, P, layout, dims)
    raise ContractError(f"unknown discriminator {name!r}; expected one of {DISCRIMINATORS}")
