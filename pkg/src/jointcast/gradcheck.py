"""Finite-difference audit of every generator and discriminator parameter."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .adversarial import DISCRIMINATORS, disc_loss, gen_adv_loss, run_discriminator
from .data import generate_synthetic_city, make_windows, stack_windows
from .errors import ConfigError
from .hrgnn import predictive_loss
from .training import TrainConfig, adaptive_weights, gamma, init_state, total_gen_loss

SCALES = {
    # m air, n weather, T, tau, d, layers, windows per batch
    "tiny": dict(m=3, n=2, T=4, tau=2, d=8, layers=2, batch=2),
}
TOLERANCE = 1e-3


@dataclass
class GradcheckReport:
    scale: str
    h: float
    worst: float
    per_param: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def worst_params(self, k: int = 5) -> list[tuple[str, float]]:
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:k]


def gradcheck_suite(scale: str = "tiny", seed: int = 0, h: float = 1e-5) -> GradcheckReport:
    """Check the generator objective and all discriminator losses.

    The generator objective is the full weighted loss with the mixing weights
    held at their baseline values.  Each discriminator is checked on its own
    loss (real future vs detached forecast) over its own parameters, as it
    is trained.
    """
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    s = SCALES[scale]
    t0 = time.perf_counter()
    ds, _ = generate_synthetic_city(seed, s["m"], s["n"], steps=120, T=s["T"], tau=s["tau"])
    cfg = TrainConfig(d=s["d"], layers=s["layers"], T=s["T"], tau=s["tau"], mlp_hidden=s["d"], seed=seed)
    state = init_state(ds, cfg)
    batch = stack_windows(make_windows(ds, s["T"], s["tau"], "train")[:s["batch"]])
    model, layout, dims = state.model, state.model.layout, state.model.dims

    def predict():
        return model.forward(batch.hist_air, batch.hist_weather, cfg.tau)

    with tn.no_grad():
        pred = predict()
        fake_det = (pred[0].data, pred[1].data)
        gam = [gamma(run_discriminator(n, batch.hist, batch.future, state.disc, layout, dims).hidden,
                     run_discriminator(n, batch.hist, fake_det, state.disc, layout, dims).hidden)
               for n in DISCRIMINATORS]
    lambdas = adaptive_weights(gam)
    frozen = state.disc.frozen()

    def gen_objective(_):
        p = predict()
        L_g = predictive_loss(p, batch.future)
        advs = [gen_adv_loss(run_discriminator(n, batch.hist, p, frozen, layout, dims)) for n in DISCRIMINATORS]
        return total_gen_loss(L_g, advs, lambdas)

    def disc_objective(name):
        def f(_):
            real = run_discriminator(name, batch.hist, batch.future, state.disc, layout, dims)
            fake = run_discriminator(name, batch.hist, fake_det, state.disc, layout, dims)
            return disc_loss(real, fake)
        return f

    _, per = tn.grad_check(gen_objective, model.params, h=h, return_details=True)
    for name in DISCRIMINATORS:
        _, detail = tn.grad_check(disc_objective(name), state.disc.subset(f"disc.{name}."), h=h,
                                  return_details=True)
        per.update(detail)
    return GradcheckReport(scale, h, max(per.values()), per, time.perf_counter() - t0)
