"""Built-in verification suite behind ``gatedxvec selftest``."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .data import Trial
from .evalkit import DcfParams, ScoreSet, compute_eer, compute_min_dcf
from .layers import GcnnParams, gcnn_cell
from .network import SYSTEMS, build_network, forward, system_spec
from .pooling import (AttentiveParams, GatedAttentionParams, attentive_pool,
                      gated_attention_pool, statistics_pool)
from .tensor import Tensor
from .trainer import cross_entropy_loss
from .verify import (FD_TOL, brute_force_eer, brute_force_min_dcf,
                     max_gradient_error, mp_attentive_pool, mp_gated_pool,
                     naive_conv1d)


def tiny_spec(system: str, width: int = 4, speakers: int = 3, feat_dim: int = 3):
    return system_spec(system, layer_widths=(width,) * 4 + (width + 2,), segment_widths=(width, width),
                       attention_dim=width, num_speakers=speakers, feat_dim=feat_dim)


def system_gradient_error(system: str, seed: int = 0, width: int = 8, frames: int = 20, batch: int = 4) -> float:
    rng = np.random.default_rng(seed)
    model = build_network(tiny_spec(system, width), seed=seed)
    x = Tensor(rng.normal(size=(batch, frames, model.spec.feat_dim)))
    y = rng.integers(model.spec.num_speakers, size=batch)
    params = dict(model.named_parameters())
    return max_gradient_error(lambda: cross_entropy_loss(forward(model, x, train=True), y), params)


def _check_conv(rng) -> float:
    worst = 0.0
    for _ in range(5):
        w, d = int(rng.choice([1, 3, 5])), int(rng.integers(1, 4))
        t = int(rng.integers((w - 1) * d + 1, 33))
        x, k, b = rng.normal(size=(t, 2)), rng.normal(size=(w, 2, 3)), rng.normal(size=3)
        got = T.conv1d_dilated(Tensor(x), Tensor(k), Tensor(b), d).data
        worst = max(worst, float(np.abs(got - naive_conv1d(x, k, b, d)).max()))
    return worst


def _check_pooling(rng, n: int = 10) -> float:
    worst = 0.0
    for _ in range(n):
        h = rng.normal(size=(7, 3))
        w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=4)
        stats, alpha = attentive_pool(Tensor(h), AttentiveParams(Tensor(w1), Tensor(w2)))
        u, s, a = mp_attentive_pool(h, w1, w2)
        worst = max(worst, np.abs(stats.mean.data - u).max(), np.abs(stats.std.data - s).max(),
                    np.abs(alpha.data - a).max())
        ctx, hs = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
        ws, bs = rng.normal(size=(3, 4)), rng.normal(size=4)
        stats, alpha, gates = gated_attention_pool(Tensor(ctx), Tensor(hs),
                                                   GatedAttentionParams(Tensor(ws[None]), Tensor(bs)))
        u, s, a, _, g = mp_gated_pool(ctx, hs, ws, bs)
        worst = max(worst, np.abs(stats.mean.data - u).max(), np.abs(stats.std.data - s).max(),
                    np.abs(alpha.data - a).max(), np.abs(gates.data - g).max())
    return float(worst)


def _check_metrics(rng) -> bool:
    fixture = ScoreSet([Trial("e", f"t{i}", i < 4) for i in range(8)], [4, 3, 2, 0, 2.5, 1, 0.5, -1])
    ok = compute_eer(fixture)[0] == 0.25
    for _ in range(3):
        n = 200
        lab = rng.random(n) < 0.3
        lab[:2] = [True, False]
        sc = rng.normal(size=n) + lab
        s = ScoreSet([Trial("e", f"t{i}", bool(v)) for i, v in enumerate(lab)], sc)
        ok &= compute_eer(s)[0] == brute_force_eer(sc[lab], sc[~lab])
        ok &= compute_min_dcf(s, DcfParams(0.01))[0] == brute_force_min_dcf(sc[lab], sc[~lab], 0.01)
    return bool(ok)


def _check_saturation(rng) -> float:
    h, c = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    p = GcnnParams.create(rng, 3, 3, 1, 1)
    worst = 0.0
    for bias, target in ((20.0, c), (-20.0, h)):
        p.b_f = Tensor(np.full(3, bias))
        act = gcnn_cell(Tensor(h), Tensor(c), p)
        worst = max(worst, float(np.abs(act.c.data - target).max()))
    return worst


def run(quick: bool = False, out=print) -> bool:
    """Run every check, printing one line each; returns True when all pass."""
    rng = np.random.default_rng(1234)
    checks = []

    def record(name, passed, detail):
        checks.append(passed)
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    t0 = time.perf_counter()
    err = _check_conv(rng)
    record("conv1d_dilated vs loop oracle", err <= 1e-12, f"max abs diff {err:.2e}")
    err = _check_pooling(rng, 3 if quick else 10)
    record("pooling formulas vs extended precision", err <= 1e-10, f"max abs diff {err:.2e}")
    h = rng.normal(size=(9, 4))
    zero = AttentiveParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
    d = np.abs(attentive_pool(Tensor(h), zero)[0].concatenated.data - statistics_pool(Tensor(h)).concatenated.data).max()
    record("attentive pooling with zero weights == statistics pooling", d <= 1e-12, f"max abs diff {d:.2e}")
    record("EER/minDCF vs exhaustive sweep", _check_metrics(rng), "fixture EER 0.25 and random sets")
    err = _check_saturation(rng)
    record("forget-gate saturation limits", err <= 1e-6, f"max abs diff {err:.2e}")
    systems = ["x_tdnn", "x_gcnn_gatt"] if quick else list(SYSTEMS)
    for name in systems:
        err = system_gradient_error(name)
        record(f"gradient check {name}", err <= FD_TOL, f"max relative error {err:.2e}")
    out(f"{sum(checks)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return all(checks)
