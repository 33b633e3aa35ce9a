"""Stand-alone plain-MSE training loop, run as a script.

The adversarial, training, gradcheck and cli modules are blocked from
import, so nothing here can reach a discriminator.  Writes the final
parameters (``.npz``) and the per-iteration loss stream (``.json``).

usage: reference_mse_loop.py CONFIG_JSON OUT_PREFIX
"""
import sys

for _mod in ("adversarial", "training", "gradcheck", "cli"):
    sys.modules[f"jointcast.{_mod}"] = None

import json  # noqa: E402

import numpy as np  # noqa: E402

from jointcast import tensor as tn  # noqa: E402
from jointcast.data import generate_synthetic_city, make_windows, stack_windows, zscore_invert  # noqa: E402
from jointcast.graph import build_hsg  # noqa: E402
from jointcast.hrgnn import HRGNN, ModelDims, predictive_loss  # noqa: E402
from jointcast.metrics import mae  # noqa: E402


def val_score(model, windows, norm, tau):
    preds, targets = {"air": [], "weather": []}, {"air": [], "weather": []}
    for k in range(0, len(windows), 256):
        b = stack_windows(windows[k:k + 256])
        with tn.no_grad():
            pa, pw = model.forward(b.hist_air, b.hist_weather, tau)
        preds["air"].append(zscore_invert(pa.data, norm, "air"))
        preds["weather"].append(zscore_invert(pw.data, norm, "weather"))
        targets["air"].append(zscore_invert(b.fut_air, norm, "air"))
        targets["weather"].append(zscore_invert(b.fut_weather, norm, "weather"))
    score = 0.0
    for g in ("air", "weather"):
        score += mae(np.concatenate(preds[g]), np.concatenate(targets[g])) / norm.mean_std(g)[1].mean()
    return score


def main(cfg_path, out_prefix):
    c = json.loads(open(cfg_path).read())
    ds, _ = generate_synthetic_city(*c["city"], T=c["T"], tau=c["tau"])
    gen_ss, _disc_ss, train_ss = np.random.SeedSequence(c["seed"]).spawn(3)
    rng = np.random.default_rng(train_ss)
    graph = build_hsg(ds.stations, c["epsilon_km"])
    dims = ModelDims(c["d"], c["layers"], len(ds.air_vars), len(ds.weather_vars), ds.context.shape[1], 0.2)
    model = HRGNN(graph, dims, rng=np.random.default_rng(gen_ss))
    train_w = make_windows(ds, c["T"], c["tau"], "train")
    val_w = make_windows(ds, c["T"], c["tau"], "val")

    losses, best, best_params = [], np.inf, None
    for epoch in range(c["epochs"]):
        ratio = c["teacher_ratio"] * (1.0 - epoch / c["epochs"])
        order = rng.permutation(len(train_w))
        for k in range(0, len(order), c["batch_windows"]):
            b = stack_windows([train_w[j] for j in order[k:k + c["batch_windows"]]])
            pred = model.forward(b.hist_air, b.hist_weather, c["tau"], teacher=b.future,
                                 teacher_ratio=ratio, rng=rng)
            loss = predictive_loss(pred, b.future)
            tn.backward(loss)
            tn.sgd_step(model.params, c["lr"])
            losses.append(loss.item())
        score = val_score(model, val_w, ds.norm, c["tau"])
        if score < best:
            best, best_params = score, model.params.snapshot()
    model.params.load(best_params)
    np.savez(out_prefix + ".npz", **{k: v.data for k, v in model.params.items()})
    with open(out_prefix + ".json", "w") as fh:
        json.dump(losses, fh)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
