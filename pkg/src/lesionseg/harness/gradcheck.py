"""Finite-difference verification of every analytic gradient in the package.

Each check compares an analytic gradient tensor against
:func:`lesionseg.tensor.finite_diff_grad` in float64 and reports

    rel = max|analytic - numeric| / max|numeric|

per tensor (0 when both are identically zero).  Kernels and losses must stay
below 1e-6, end-to-end network parameter gradients below 1e-5.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import losses as L
from .. import nn
from .. import tensor as T
from ..models import ModelConfig, build

KERNEL_TOL = 1e-6
NETWORK_TOL = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    n_seeds: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = np.max(np.abs(n)) if n.size else 0.0
    err = np.max(np.abs(a - n)) if n.size else 0.0
    if scale == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return float(err / scale)


# A check returns a list of (analytic, numeric) pairs; the perturb hook may
# edit the analytic gradients before comparison (used to validate the checker).
Perturb = Callable[[str, list], None] | None


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _kernel_conv(rng, k, s, p, xshape=(2, 3, 8, 8), c_out=4):
    x = rng.standard_normal(xshape)
    kp = T.KernelParams(rng.standard_normal((c_out, xshape[1], k, k)), rng.standard_normal(c_out), s, p)
    u = rng.standard_normal(T.conv2d_forward(x, kp).shape)
    gx, gw, gb = T.conv2d_backward(x, kp, u)
    f_x = lambda v: np.sum(u * T.conv2d_forward(v, kp))
    f_w = lambda v: np.sum(u * T.conv2d_forward(x, T.KernelParams(v, kp.bias, s, p)))
    f_b = lambda v: np.sum(u * T.conv2d_forward(x, T.KernelParams(kp.weight, v, s, p)))
    return [
        ("input", gx, T.finite_diff_grad(f_x, x, STEP)),
        ("weight", gw, T.finite_diff_grad(f_w, kp.weight, STEP)),
        ("bias", gb, T.finite_diff_grad(f_b, kp.bias, STEP)),
    ]


def _kernel_convt(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    kp = T.KernelParams(rng.standard_normal((2, 4, 2, 2)), rng.standard_normal(2), 2, 0)
    u = rng.standard_normal((2, 2, 8, 8))
    gx, gw, gb = T.convtranspose2_backward(x, kp, u)
    f_x = lambda v: np.sum(u * T.convtranspose2_forward(v, kp))
    f_w = lambda v: np.sum(u * T.convtranspose2_forward(x, T.KernelParams(v, kp.bias, 2, 0)))
    f_b = lambda v: np.sum(u * T.convtranspose2_forward(x, T.KernelParams(kp.weight, v, 2, 0)))
    return [
        ("input", gx, T.finite_diff_grad(f_x, x, STEP)),
        ("weight", gw, T.finite_diff_grad(f_w, kp.weight, STEP)),
        ("bias", gb, T.finite_diff_grad(f_b, kp.bias, STEP)),
    ]


def _kernel_maxpool(rng):
    # well-separated values so no window is within the step of a tie
    x = rng.permutation(2 * 4 * 8 * 8).reshape(2, 4, 8, 8) * 0.01 + rng.uniform(0, 1e-3, (2, 4, 8, 8))
    out, arg = T.maxpool2_forward(x)
    u = rng.standard_normal(out.shape)
    f = lambda v: np.sum(u * T.maxpool2_forward(v)[0])
    return [("input", T.maxpool2_backward(arg, u), T.finite_diff_grad(f, x, STEP))]


def _kernel_concat(rng):
    a = rng.standard_normal((2, 1, 8, 8))
    b = rng.standard_normal((2, 3, 8, 8))
    u = rng.standard_normal((2, 4, 8, 8))
    ga, gb = T.split_channels(u, [1, 3])
    return [
        ("a", ga, T.finite_diff_grad(lambda v: np.sum(u * T.concat_channels([v, b])), a, STEP)),
        ("b", gb, T.finite_diff_grad(lambda v: np.sum(u * T.concat_channels([a, v])), b, STEP)),
    ]


def _kernel_activation(kind):
    def check(rng):
        x = _away_from_zero(rng, (2, 4, 8, 8))
        u = rng.standard_normal(x.shape)
        f = lambda v: np.sum(u * T.activation(v, kind))
        return [("input", T.activation_backward(x, kind, u), T.finite_diff_grad(f, x, STEP))]

    return check


def _loss_check(cfg: L.LossConfig):
    def check(rng):
        p = (rng.uniform(size=(2, 1, 8, 8)) < 0.3).astype(np.float64)
        q = rng.uniform(0.01, 0.99, size=p.shape)
        _, g = L.compute_loss(cfg, p, q)
        f = lambda v: L.compute_loss(cfg, p, v)[0]
        return [("pred", g, T.finite_diff_grad(f, q, STEP))]

    return check


def _network_check(cfg: ModelConfig, loss: L.LossConfig, shape=(1, 1, 8, 8)):
    def check(rng):
        graph = build(cfg)
        params = nn.init_params(graph, int(rng.integers(2**32)), dtype=np.float64)
        # non-zero biases so their gradients are exercised away from symmetric points
        for e in params:
            e.bias[...] = rng.normal(0, 0.1, e.bias.shape)
        x = rng.uniform(0, 1, shape)
        y = (rng.uniform(size=(shape[0], 1, *shape[2:])) < 0.4).astype(np.float64)
        prob = nn.forward(graph, params, x)
        _, g = L.compute_loss(loss, y, prob)
        grads = nn.backward(graph, params, g)

        def f_of(entry, attr):
            def f(v):
                saved = getattr(entry, attr)
                setattr(entry, attr, v)
                try:
                    return L.compute_loss(loss, y, nn.forward(graph, params, x, keep_cache=False))[0]
                finally:
                    setattr(entry, attr, saved)

            return f

        pairs = []
        for e, (gw, gb) in zip(params, grads):
            pairs.append((f"{e.layer_id}.weight", gw, T.finite_diff_grad(f_of(e, "weight"), e.weight, STEP)))
            pairs.append((f"{e.layer_id}.bias", gb, T.finite_diff_grad(f_of(e, "bias"), e.bias, STEP)))
        return pairs

    return check


def suite():
    """``[(name, check_fn, tolerance), ...]`` in reporting order."""
    bce = L.LossConfig(kind="bce")
    return [
        ("conv2d k3 s1 p1", lambda r: _kernel_conv(r, 3, 1, 1), KERNEL_TOL),
        ("conv2d k3 s1 p0", lambda r: _kernel_conv(r, 3, 1, 0), KERNEL_TOL),
        ("conv2d k3 s2 p1", lambda r: _kernel_conv(r, 3, 2, 1, xshape=(2, 3, 7, 7)), KERNEL_TOL),
        ("conv2d k1 s1 p0", lambda r: _kernel_conv(r, 1, 1, 0), KERNEL_TOL),
        ("convtranspose2", _kernel_convt, KERNEL_TOL),
        ("maxpool2", _kernel_maxpool, KERNEL_TOL),
        ("concat/split", _kernel_concat, KERNEL_TOL),
        ("relu", _kernel_activation("relu"), KERNEL_TOL),
        ("sigmoid", _kernel_activation("sigmoid"), KERNEL_TOL),
        ("loss bce", _loss_check(bce), KERNEL_TOL),
        ("loss dice (denominator)", _loss_check(L.LossConfig(kind="dice")), KERNEL_TOL),
        ("loss dice (symmetric)", _loss_check(L.LossConfig(kind="dice", dice_smoothing="symmetric")), KERNEL_TOL),
        ("loss focal", _loss_check(L.LossConfig(kind="focal")), KERNEL_TOL),
        ("loss focal gamma=0", _loss_check(L.LossConfig(kind="focal", gamma_focal=0.0)), KERNEL_TOL),
        ("loss focal_tversky", _loss_check(L.LossConfig(kind="focal_tversky")), KERNEL_TOL),
        ("loss focal_tversky gamma=1", _loss_check(L.LossConfig(kind="focal_tversky", gamma_ftl=1.0)), KERNEL_TOL),
        ("loss focal_tversky gamma=3", _loss_check(L.LossConfig(kind="focal_tversky", gamma_ftl=3.0)), KERNEL_TOL),
        ("net unet d1 b2 bce", _network_check(ModelConfig("unet", 1, 2), bce), NETWORK_TOL),
        ("net unetpp d1 b2 bce", _network_check(ModelConfig("unetpp", 1, 2), bce), NETWORK_TOL),
        ("net unet d2 b2 focal_tversky", _network_check(ModelConfig("unet", 2, 2), L.LossConfig(kind="focal_tversky")), NETWORK_TOL),
        ("net unetpp d2 b2 dice", _network_check(ModelConfig("unetpp", 2, 2), L.LossConfig(kind="dice")), NETWORK_TOL),
    ]


def run_gradcheck(seeds=range(5), perturb: Perturb = None, only=None, report=None) -> list[CheckResult]:
    """Run the suite for every seed.

    ``perturb(name, pairs)`` is a test-only hook called with each check's
    list of ``(label, analytic, numeric)`` tuples before errors are measured;
    mutating an analytic array there must make the suite fail.
    ``report`` receives each :class:`CheckResult` as soon as it is computed.
    """
    results = []
    for name, fn, tol in suite():
        if only is not None and name not in only:
            continue
        worst = 0.0
        for seed in seeds:
            pairs = fn(np.random.default_rng([seed, _stable_hash(name)]))
            if perturb is not None:
                perturb(name, pairs)
            err = max(rel_error(a, n) for _, a, n in pairs)
            worst = max(worst, err)
        res = CheckResult(name, len(seeds), worst, tol)
        results.append(res)
        if report is not None:
            report(res)
    return results


def _stable_hash(name: str) -> int:
    h = 1469598103934665603  # FNV-1a
    for ch in name.encode():
        h = ((h ^ ch) * 1099511628211) & (2**64 - 1)
    return h


def main_report(seeds=range(5), out=print, perturb: Perturb = None) -> bool:
    t0 = time.perf_counter()

    def line(r: CheckResult):
        out(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} max rel error {r.max_rel_error:.3e}  (tol {r.tolerance:.0e})")

    results = run_gradcheck(list(seeds), perturb=perturb, report=line)
    ok = all(r.passed for r in results)
    out(f"{sum(r.passed for r in results)}/{len(results)} checks passed over {len(list(seeds))} seeds "
        f"in {time.perf_counter() - t0:.1f}s")
    return ok
