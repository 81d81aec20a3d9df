"""Finite-difference gradient checks and slow reference implementations.

The references here deliberately share no code with the fast paths they
check: plain loops, exhaustive threshold sweeps and mpmath arithmetic.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import mpmath
import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4
MP_DPS = 40


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||, GRAD_FLOOR)``.

    The floor makes gradients that are exactly zero (e.g. a bias the loss is
    invariant to) compare absolutely instead of dividing noise by noise.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradient_errors(fn: Callable[[], Tensor], tensors: Sequence[Tensor] | dict,
                    step: float = FD_STEP) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per tensor.

    ``fn`` must rebuild the scalar loss from the current tensor values.
    """
    named = dict(tensors) if isinstance(tensors, dict) else {str(i): t for i, t in enumerate(tensors)}
    for t in named.values():
        t.requires_grad = True
        t.grad = None
    with T.Tape():
        T.backward(fn())
    out = {}
    for name, t in named.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        out[name] = relative_error(analytic, numeric_gradient(fn, t, step))
    return out


def max_gradient_error(fn, tensors, step: float = FD_STEP) -> float:
    errs = gradient_errors(fn, tensors, step)
    return max(errs.values()) if errs else 0.0


def weighted_sum_loss(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Fixed random projection to a scalar, so every output element matters."""
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: T.sum(T.mul(y, w))


# ---------------------------------------------------------------------------
# tensor oracles
# ---------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for q in range(k):
                acc += a[i, q] * b[q, j]
            out[i, j] = acc
    return out


def naive_conv1d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, dilation: int) -> np.ndarray:
    """Centred dilated convolution, one output frame and tap at a time."""
    w, din, dout = kernel.shape
    half = (w - 1) * dilation // 2
    t_out = x.shape[0] - (w - 1) * dilation
    out = np.zeros((t_out, dout))
    for t in range(t_out):
        centre = t + half
        for o in range(dout):
            acc = bias[o]
            for k in range(w):
                frame = centre + (k - (w - 1) // 2) * dilation if w % 2 else t + k * dilation
                for i in range(din):
                    acc += x[frame, i] * kernel[k, i, o]
            out[t, o] = acc
    return out


def mp_softmax(logits) -> list:
    with mpmath.workdps(MP_DPS):
        e = [mpmath.exp(mpmath.mpf(float(v))) for v in logits]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


# ---------------------------------------------------------------------------
# pooling oracles (extended precision, direct formulas)
# ---------------------------------------------------------------------------

def _mp(x):
    return [[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(x)]


def _mp_weighted_stats(z, alpha):
    d = len(z[0])
    u = [mpmath.fsum(alpha[t] * z[t][j] for t in range(len(z))) for j in range(d)]
    second = [mpmath.fsum(alpha[t] * z[t][j] ** 2 for t in range(len(z))) for j in range(d)]
    std = [mpmath.sqrt(max(second[j] - u[j] ** 2, mpmath.mpf(0))) for j in range(d)]
    return u, std


def mp_statistics_pool(h: np.ndarray):
    with mpmath.workdps(MP_DPS):
        hm = _mp(h)
        n = len(hm)
        alpha = [mpmath.mpf(1) / n] * n
        u, std = _mp_weighted_stats(hm, alpha)
        return np.array([float(v) for v in u]), np.array([float(v) for v in std])


def mp_attentive_pool(h: np.ndarray, w1: np.ndarray, w2: np.ndarray):
    """Returns (mean, std, weights) from e_t = w2 . relu(W1^T h_t) and a softmax."""
    with mpmath.workdps(MP_DPS):
        hm, w1m = _mp(h), _mp(w1)
        w2m = [mpmath.mpf(float(v)) for v in w2]
        d, a = len(w1m), len(w2m)
        e = []
        for row in hm:
            hidden = [max(mpmath.fsum(row[i] * w1m[i][k] for i in range(d)), mpmath.mpf(0)) for k in range(a)]
            e.append(mpmath.fsum(w2m[k] * hidden[k] for k in range(a)))
        m = max(e)
        ex = [mpmath.exp(v - m) for v in e]
        s = mpmath.fsum(ex)
        alpha = [v / s for v in ex]
        u, std = _mp_weighted_stats(hm, alpha)
        f = lambda xs: np.array([float(v) for v in xs])  # noqa: E731
        return f(u), f(std), f(alpha)


def mp_gated_pool(ctx: np.ndarray, hs: np.ndarray, w_s: np.ndarray, b_s: np.ndarray,
                  use_gate: bool = True, use_attention: bool = True):
    """Gated-attention pooling with a width-1 gate kernel ``w_s`` of shape (Din, D).

    Returns (mean, std, weights, logits, gates).
    """
    with mpmath.workdps(MP_DPS):
        cm, hm, wm = _mp(ctx), _mp(hs), _mp(w_s)
        bm = [mpmath.mpf(float(v)) for v in b_s]
        din, d = len(wm), len(bm)
        pre = [[mpmath.fsum(row[i] * wm[i][j] for i in range(din)) + bm[j] for j in range(d)] for row in cm]
        gates = [[1 / (1 + mpmath.exp(-v)) for v in row] for row in pre]
        logits = [mpmath.fsum(row) / d for row in pre]
        n = len(hm)
        if use_attention:
            m = max(logits)
            ex = [mpmath.exp(v - m) for v in logits]
            s = mpmath.fsum(ex)
            alpha = [v / s for v in ex]
        else:
            alpha = [mpmath.mpf(1) / n] * n
        z = [[gates[t][j] * hm[t][j] for j in range(d)] for t in range(n)] if use_gate else hm
        u, std = _mp_weighted_stats(z, alpha)
        f = lambda xs: np.array([float(v) for v in xs])  # noqa: E731
        return f(u), f(std), f(alpha), f(logits), np.array([[float(v) for v in r] for r in gates])


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def _sweep(target: Sequence[float], nontarget: Sequence[float]):
    values = sorted(set(target) | set(nontarget))
    thresholds = [-math.inf] + [(a + b) / 2.0 for a, b in zip(values[:-1], values[1:])] + [math.inf]
    points = []
    for th in thresholds:
        miss = sum(1 for s in target if s < th)
        fa = sum(1 for s in nontarget if s > th)
        points.append((th, miss / len(target), fa / len(nontarget)))
    return points


def brute_force_eer(target, nontarget) -> float:
    """EER by exhaustive threshold sweep, interpolated between the bracketing points."""
    pts = _sweep(list(target), list(nontarget))
    for (_, a0, b0), (_, a1, b1) in zip(pts[:-1], pts[1:]):
        if a1 >= b1:
            s = (b0 - a0) / ((a1 - a0) - (b1 - b0))
            return a0 + s * (a1 - a0)
    raise AssertionError("miss and false-alarm curves never cross")


def brute_force_min_dcf(target, nontarget, p_target=0.01, c_miss=1.0, c_fa=1.0) -> float:
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return min((c_miss * p_target * pm + c_fa * (1 - p_target) * pf) / norm
               for _, pm, pf in _sweep(list(target), list(nontarget)))
