"""Alternating generator/discriminator training with adaptive loss weights."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .adversarial import DISCRIMINATORS, disc_loss, gen_adv_loss, init_discriminators, run_discriminator
from .data import Dataset, NormStats, WindowBatch, make_windows, persistence_forecast, stack_windows, zscore_invert
from .errors import ConfigError, ContractError
from .graph import build_hsg
from .hrgnn import HRGNN, INIT_SCHEMES, ModelDims, predictive_loss
from .metrics import mae, smape
from .tensor import ParamStore, Value

log = logging.getLogger(__name__)

ABLATIONS = {
    "no-spatial-disc": "drop the spatial discriminator",
    "no-temporal-disc": "drop the temporal discriminator",
    "no-macro-disc": "drop the city-level (macro) discriminator",
    "no-adversarial": "plain MSE training, no discriminators",
    "fixed-weights": "constant discriminator weights from fixed_weights",
    "avg-weights": "equal weight 1/3 for every discriminator",
}
GAMMA_MODES = ("divergence", "similarity")


@dataclass
class TrainConfig:
    d: int = 64
    layers: int = 2
    epsilon_km: float = 15.0
    T: int = 72
    tau: int = 48
    lr: float = 1e-5
    mlp_hidden: int = 64
    leaky_alpha: float = 0.2
    epochs: int = 10
    batch_windows: int = 32
    seed: int = 0
    teacher_ratio: float = 0.5
    teacher_decay: bool = True
    disc_steps_per_gen_step: int = 1
    ablate: str | None = None
    gamma_mode: str = "divergence"
    fixed_weights: tuple[float, ...] = (0.25, 0.25, 0.5)
    init_scheme: str = "glorot"

    def __post_init__(self):
        self.fixed_weights = tuple(float(w) for w in self.fixed_weights)
        self.validate()

    def validate(self) -> None:
        for name in ("d", "layers", "T", "tau", "mlp_hidden", "batch_windows", "disc_steps_per_gen_step"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.epsilon_km > 0 or not self.lr > 0:
            raise ConfigError("epsilon_km and lr must be positive")
        if not 0.0 < self.leaky_alpha < 1.0:
            raise ConfigError(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")
        if not 0.0 <= self.teacher_ratio <= 1.0:
            raise ConfigError(f"teacher_ratio must lie in [0, 1], got {self.teacher_ratio}")
        if self.ablate is not None and self.ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablate!r}; valid: {', '.join(ABLATIONS)}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigError(f"gamma_mode must be one of {GAMMA_MODES}, got {self.gamma_mode!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if len(self.fixed_weights) != len(DISCRIMINATORS):
            raise ConfigError(f"fixed_weights needs {len(DISCRIMINATORS)} entries")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["fixed_weights"] = list(self.fixed_weights)
        return out

    def enabled_discriminators(self) -> tuple[str, ...]:
        if self.ablate == "no-adversarial":
            return ()
        dropped = {"no-spatial-disc": "spatial", "no-temporal-disc": "temporal",
                   "no-macro-disc": "macro"}.get(self.ablate)
        return tuple(d for d in DISCRIMINATORS if d != dropped)


# ---------------------------------------------------------------- adaptive weighting

def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gamma(hidden_real, hidden_fake, mode: str = "divergence") -> float:
    """Mean Euclidean distance between sigmoid-squashed real and fake hiddens.

    ``mode="similarity"`` returns the mean of ``1 / (1 + distance)`` instead.
    """
    hr = np.asarray(hidden_real.data if isinstance(hidden_real, Value) else hidden_real, dtype=np.float64)
    hf = np.asarray(hidden_fake.data if isinstance(hidden_fake, Value) else hidden_fake, dtype=np.float64)
    if hr.shape != hf.shape:
        raise ContractError(f"hidden shapes differ: {hr.shape} vs {hf.shape}")
    dist = np.linalg.norm(_sig(hr) - _sig(hf), axis=-1)
    if mode == "similarity":
        return float(np.mean(1.0 / (1.0 + dist)))
    return float(np.mean(dist))


def adaptive_weights(gammas: Sequence[float]) -> np.ndarray:
    """Softmax of the divergences (max-subtracted)."""
    g = np.asarray(gammas, dtype=np.float64)
    if g.size == 0:
        raise ContractError("adaptive_weights needs at least one divergence")
    if not np.all(np.isfinite(g)):
        raise ContractError(f"non-finite divergence in {g.tolist()}")
    e = np.exp(g - g.max())
    return e / e.sum()


def total_gen_loss(L_g: Value, adv_losses: Sequence[Value], lambdas: Sequence[float]) -> Value:
    """``L_g + sum(lambda_i * adv_i)``; the weights are plain constants."""
    if len(adv_losses) != len(lambdas):
        raise ContractError(f"{len(adv_losses)} adversarial losses but {len(lambdas)} weights")
    total = L_g
    for adv, lam in zip(adv_losses, lambdas):
        total = total + float(lam) * adv
    return total


# ---------------------------------------------------------------- training state

def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams: generator init, discriminator init, training draws.

    The training stream is consumed in a fixed order: the per-epoch window
    permutation, then one teacher-forcing coin per decoder step per batch.
    """
    gen_ss, disc_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return {"gen": np.random.default_rng(gen_ss), "disc": np.random.default_rng(disc_ss),
            "train": np.random.default_rng(train_ss)}


def model_dims(dataset: Dataset, cfg: TrainConfig) -> ModelDims:
    return ModelDims(cfg.d, cfg.layers, len(dataset.air_vars), len(dataset.weather_vars),
                     dataset.context.shape[1], cfg.leaky_alpha, cfg.init_scheme)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: HRGNN
    disc: ParamStore | None
    rng: np.random.Generator
    counters: dict = field(default_factory=lambda: {"disc_updates": 0, "gen_updates": 0})

    @property
    def discriminators(self) -> tuple[str, ...]:
        return self.cfg.enabled_discriminators()


def init_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    rngs = make_rngs(cfg.seed)
    graph = build_hsg(dataset.stations, cfg.epsilon_km)
    model = HRGNN(graph, model_dims(dataset, cfg), rng=rngs["gen"])
    disc = None
    if cfg.enabled_discriminators():
        disc = init_discriminators(model.dims, model.layout, rngs["disc"], cfg.mlp_hidden)
    return TrainState(cfg, model, disc, rngs["train"])


def train_step(batch: WindowBatch, state: TrainState, teacher_ratio: float = 0.0) -> dict:
    """One round: discriminator step(s) on detached forecasts, then a generator step."""
    if len(batch) == 0:
        raise ContractError("train_step on an empty batch")
    cfg, model = state.cfg, state.model
    pred = model.forward(batch.hist_air, batch.hist_weather, cfg.tau, teacher=batch.future,
                         teacher_ratio=teacher_ratio, rng=state.rng)
    L_g = predictive_loss(pred, batch.future)
    record: dict = {"L_g": L_g.item()}
    names = state.discriminators
    if not names:
        tn.backward(L_g)
        record["L_total"] = record["L_g"]
        _check_finite(record)
        tn.sgd_step(model.params, cfg.lr)
        state.counters["gen_updates"] += 1
        return record

    dims, layout = model.dims, model.layout
    fake_det = (pred[0].data, pred[1].data)
    disc_losses = {}
    for _ in range(cfg.disc_steps_per_gen_step):
        for name in names:
            real = run_discriminator(name, batch.hist, batch.future, state.disc, layout, dims)
            fake = run_discriminator(name, batch.hist, fake_det, state.disc, layout, dims)
            loss = disc_loss(real, fake)
            tn.backward(loss)
            disc_losses[name] = loss.item()
        tn.sgd_step(state.disc, cfg.lr)
        state.counters["disc_updates"] += 1

    frozen = state.disc.frozen()
    gammas, advs = [], []
    for name in names:
        real = run_discriminator(name, batch.hist, batch.future, frozen, layout, dims)
        fake = run_discriminator(name, batch.hist, pred, frozen, layout, dims)
        gammas.append(gamma(real.hidden, fake.hidden, cfg.gamma_mode))
        advs.append(gen_adv_loss(fake))
    lambdas = _weights(cfg, names, gammas)
    total = total_gen_loss(L_g, advs, lambdas)
    record.update({
        "L_total": total.item(),
        "adv": {n: a.item() for n, a in zip(names, advs)},
        "gamma": dict(zip(names, gammas)),
        "lambda": {n: float(v) for n, v in zip(names, lambdas)},
        "disc_loss": disc_losses,
    })
    _check_finite(record)
    tn.backward(total)
    tn.sgd_step(model.params, cfg.lr)
    state.counters["gen_updates"] += 1
    return record


def _weights(cfg: TrainConfig, names: tuple[str, ...], gammas: list[float]) -> np.ndarray:
    if cfg.ablate == "avg-weights":
        return np.full(len(names), 1.0 / len(names))
    if cfg.ablate == "fixed-weights":
        w = np.array([cfg.fixed_weights[DISCRIMINATORS.index(n)] for n in names])
        return w / w.sum()
    return adaptive_weights(gammas)


class NonFiniteLoss(ArithmeticError):
    pass


def _check_finite(record: dict) -> None:
    vals = [record["L_g"], record["L_total"]]
    for key in ("adv", "disc_loss"):
        vals.extend(record.get(key, {}).values())
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteLoss(json.dumps(record, default=str))


# ---------------------------------------------------------------- evaluation

def iterate_batches(windows, size: int):
    for k in range(0, len(windows), size):
        yield stack_windows(windows[k:k + size])


def forecast(model: HRGNN, batch: WindowBatch, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized forecasts for a batch, without graph recording."""
    with tn.no_grad():
        pa, pw = model.forward(batch.hist_air, batch.hist_weather, tau)
    return pa.data, pw.data


def evaluate_windows(model: HRGNN, windows, norm: NormStats, tau: int, batch_size: int = 256,
                     predictor: Callable | None = None) -> dict:
    """Denormalized predictions and targets stacked over ``windows``.

    ``predictor(batch) -> (air, weather)`` overrides the model (e.g. persistence).
    """
    preds = {"air": [], "weather": []}
    targets = {"air": [], "weather": []}
    for batch in iterate_batches(windows, batch_size):
        pa, pw = predictor(batch) if predictor is not None else forecast(model, batch, tau)
        preds["air"].append(zscore_invert(pa, norm, "air"))
        preds["weather"].append(zscore_invert(pw, norm, "weather"))
        targets["air"].append(zscore_invert(batch.fut_air, norm, "air"))
        targets["weather"].append(zscore_invert(batch.fut_weather, norm, "weather"))
    return {"pred": {k: np.concatenate(v) for k, v in preds.items()},
            "target": {k: np.concatenate(v) for k, v in targets.items()}}


def group_metrics(result: dict) -> dict:
    return {g: {"mae": mae(result["pred"][g], result["target"][g]),
                "smape": smape(result["pred"][g], result["target"][g])} for g in result["pred"]}


def persistence_metrics(windows, norm: NormStats) -> dict:
    return group_metrics(evaluate_windows(None, windows, norm, 0, predictor=persistence_forecast))


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    state: TrainState
    stats: list[dict]
    best_epoch: int | None
    best_val: dict | None

    @property
    def params(self) -> ParamStore:
        gen = self.state.model.params
        return gen if self.state.disc is None else gen.merged(self.state.disc)


def fit(dataset: Dataset, cfg: TrainConfig, on_record: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs and keep the best-validation parameters."""
    train_w = make_windows(dataset, cfg.T, cfg.tau, "train")
    if not train_w:
        raise ConfigError(f"training split yields no windows for T={cfg.T}, tau={cfg.tau}")
    val_w = make_windows(dataset, cfg.T, cfg.tau, "val")
    state = init_state(dataset, cfg)
    stats: list[dict] = []

    def emit(rec):
        stats.append(rec)
        if on_record is not None:
            on_record(rec)

    best_score, best_epoch, best_val, best_snap = math.inf, None, None, None
    it = 0
    for epoch in range(cfg.epochs):
        ratio = cfg.teacher_ratio * (1.0 - epoch / cfg.epochs) if cfg.teacher_decay else cfg.teacher_ratio
        order = state.rng.permutation(len(train_w))
        for k in range(0, len(order), cfg.batch_windows):
            batch = stack_windows([train_w[j] for j in order[k:k + cfg.batch_windows]])
            try:
                rec = train_step(batch, state, ratio)
            except NonFiniteLoss as exc:
                emit({"type": "non_finite", "epoch": epoch, "iter": it, "detail": str(exc)})
                log.error("non-finite loss at epoch %d iteration %d; epoch aborted", epoch, it)
                state.model.params.zero_grad()
                if state.disc is not None:
                    state.disc.zero_grad()
                break
            emit({"type": "iter", "epoch": epoch, "iter": it, **rec})
            it += 1
        rec = {"type": "epoch", "epoch": epoch, "teacher_ratio": ratio}
        if val_w:
            val = group_metrics(evaluate_windows(state.model, val_w, dataset.norm, cfg.tau))
            rec["val"] = val
            score = sum(v["mae"] / dataset.norm.mean_std(g)[1].mean() for g, v in val.items())
            if score < best_score:
                best_score, best_epoch, best_val = score, epoch, val
                best_snap = _snapshot(state)
        emit(rec)
    if best_snap is not None:
        _restore(state, best_snap)
    return FitResult(state, stats, best_epoch, best_val)


def _snapshot(state: TrainState):
    return (state.model.params.snapshot(), state.disc.snapshot() if state.disc is not None else None)


def _restore(state: TrainState, snap) -> None:
    state.model.params.load(snap[0])
    if snap[1] is not None:
        state.disc.load(snap[1])


# ---------------------------------------------------------------- checkpoints

def save_model(path: str | Path, result_or_state, dataset: Dataset) -> None:
    state = result_or_state.state if isinstance(result_or_state, FitResult) else result_or_state
    params = state.model.params if state.disc is None else state.model.params.merged(state.disc)
    meta = {"config": state.cfg.to_dict(), "station_ids": [s.id for s in dataset.stations],
            "air_vars": list(dataset.air_vars), "weather_vars": list(dataset.weather_vars),
            "norm": dataset.norm.to_json()}
    tn.save_checkpoint(path, params, meta)


def load_model(path: str | Path, dataset: Dataset) -> tuple[TrainState, NormStats]:
    """Rebuild the trained state for ``dataset``; dimension mismatches raise ConfigError."""
    arrays, meta = tn.load_checkpoint(path)
    cfg = TrainConfig.from_dict({**meta["config"], "fixed_weights": tuple(meta["config"]["fixed_weights"])})
    ids = [s.id for s in dataset.stations]
    if ids != meta["station_ids"]:
        raise ConfigError(f"checkpoint stations {meta['station_ids']} do not match data stations {ids}")
    for key, have in (("air_vars", dataset.air_vars), ("weather_vars", dataset.weather_vars)):
        if list(have) != meta[key]:
            raise ConfigError(f"checkpoint {key} {meta[key]} do not match data {key} {list(have)}")
    state = init_state(dataset, cfg)
    gen = {k: v for k, v in arrays.items() if k.startswith("gen.")}
    disc = {k: v for k, v in arrays.items() if k.startswith("disc.")}
    try:
        state.model.params.load(gen)
        if state.disc is not None:
            state.disc.load(disc)
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match configured model: {exc}") from exc
    return state, NormStats.from_json(meta["norm"])
