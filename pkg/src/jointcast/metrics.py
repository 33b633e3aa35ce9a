"""Forecast error metrics computed on denormalized values."""
from __future__ import annotations

import numpy as np

from .errors import ContractError

SMAPE_EPS = 1e-8


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"metric shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def _reduce(err: np.ndarray, by_variable: bool):
    if by_variable:
        return err.reshape(-1, err.shape[-1]).mean(axis=0)
    return float(err.mean())


def mae(pred, target, by_variable: bool = False):
    """Mean absolute error; per last-axis variable when ``by_variable``."""
    p, t = _pair(pred, target)
    return _reduce(np.abs(p - t), by_variable)


def smape(pred, target, by_variable: bool = False):
    """Mean of |p - y| / ((|y| + |p|) / 2 + 1e-8); lies in [0, 2]."""
    p, t = _pair(pred, target)
    err = np.abs(p - t) / ((np.abs(t) + np.abs(p)) / 2.0 + SMAPE_EPS)
    return _reduce(err, by_variable)


def metric_table(pred: dict, target: dict, names: dict) -> list[dict]:
    """Rows ``{group, variable, mae, smape}`` plus one ``ALL`` row per group.

    ``pred``/``target``/``names`` are keyed by group (``air``, ``weather``).
    """
    rows = []
    for group in pred:
        p, t = pred[group], target[group]
        per_mae = mae(p, t, by_variable=True)
        per_smape = smape(p, t, by_variable=True)
        for k, name in enumerate(names[group]):
            rows.append({"group": group, "variable": name,
                         "mae": float(per_mae[k]), "smape": float(per_smape[k])})
        rows.append({"group": group, "variable": "ALL", "mae": mae(p, t), "smape": smape(p, t)})
    return rows
