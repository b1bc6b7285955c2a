"""Scalar deep-sigmoidal flow layers, conditioned per particle.

One layer maps ``z -> logit(sum_j w_j * sigmoid(a_j * z + b_j))`` with
``a_j > 0`` and ``w`` on the simplex, so it is strictly increasing and
unbounded in both directions.  Everything is evaluated in log space so
very steep layers stay finite.

Sampling runs layers forward (base -> data); density evaluation inverts each
layer numerically (bracketed Newton with bisection fallback) and
differentiates the inverse implicitly.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InversionError

LOG_2PI = math.log(2.0 * math.pi)
BISECT_TOL = 1e-12
# log-slopes are squashed into (-LOG_SLOPE_BOUND, LOG_SLOPE_BOUND) so no layer
# can become numerically flat or overflow exp()
LOG_SLOPE_BOUND = 6.0


@dataclass
class FlowLayer:
    """Parameters of one layer, each a Tensor of shape (..., n, J)."""
    log_a: ad.Tensor
    b: ad.Tensor
    log_w: ad.Tensor

    @property
    def components(self):
        return self.log_a.shape[-1]


def layers_from_raw(theta, n_layers, n_components):
    """Split hyper-map output (..., n, 3*K*J) into K constrained layers."""
    layers = []
    J = n_components
    for k in range(n_layers):
        base = 3 * J * k
        raw_a = ad.slice_cols(theta, base, base + J)
        log_a = ad.mul(ad.tanh(ad.mul(raw_a, 1.0 / LOG_SLOPE_BOUND)), LOG_SLOPE_BOUND)
        b = ad.slice_cols(theta, base + J, base + 2 * J)
        log_w = ad.log_softmax_rows(ad.slice_cols(theta, base + 2 * J, base + 3 * J))
        layers.append(FlowLayer(log_a, b, log_w))
    return layers


def _tile(z, J):
    return ad.matmul(z, ad.constant(np.ones((1, J))))


def layer_forward(z, layer):
    """Apply one layer to ``z`` (..., n, 1); returns (z', log dz'/dz)."""
    J = layer.components
    u = ad.add(ad.mul(ad.exp(layer.log_a), _tile(z, J)), layer.b)
    ls_pos = ad.logsigmoid(u)
    ls_neg = ad.logsigmoid(ad.neg(u))
    log_s = ad.logsumexp_rows(ad.add(layer.log_w, ls_pos))
    log_1ms = ad.logsumexp_rows(ad.add(layer.log_w, ls_neg))
    z_new = ad.sub(log_s, log_1ms)
    log_ds = ad.logsumexp_rows(ad.add(ad.add(layer.log_w, layer.log_a), ad.add(ls_pos, ls_neg)))
    logdet = ad.sub(log_ds, ad.add(log_s, log_1ms))
    return z_new, logdet


def _logsigmoid_np(u):
    return -np.logaddexp(0.0, -u)


def _lse(x):
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def layer_forward_np(z, log_a, b, log_w):
    """Plain-numpy forward of one layer; z (..., 1), params (..., J)."""
    u = np.exp(log_a) * z + b
    lp, ln = _logsigmoid_np(u), _logsigmoid_np(-u)
    log_s, log_1ms = _lse(log_w + lp), _lse(log_w + ln)
    logdet = _lse(log_w + log_a + lp + ln) - log_s - log_1ms
    return log_s - log_1ms, logdet


def invert_layer_np(y, log_a, b, log_w, tol=BISECT_TOL, max_expand=200, max_iter=1000):
    """Solve ``f(z) = y`` elementwise for a strictly increasing layer ``f``.

    A bracket [lo, hi] with f(lo) <= y <= f(hi) is grown geometrically, then
    shrunk by safeguarded Newton steps.  A Newton iterate outside the bracket,
    or one following an iteration that failed to halve the bracket, is
    replaced by the midpoint, so convergence is never slower than bisection
    by more than a factor of two.  Converged when the bracket or the Newton
    step falls below ``tol`` (relative for |z| > 1).
    """
    y = np.asarray(y, dtype=np.float64)
    lo, hi = y - 1.0, y + 1.0
    for _ in range(max_expand):
        f_lo, _ = layer_forward_np(lo, log_a, b, log_w)
        f_hi, _ = layer_forward_np(hi, log_a, b, log_w)
        low_bad, high_bad = f_lo > y, f_hi < y
        if not (low_bad.any() or high_bad.any()):
            break
        width = hi - lo
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
    else:
        raise InversionError("could not bracket the inverse of a flow layer")

    z = 0.5 * (lo + hi)
    done = np.zeros(y.shape, dtype=bool)
    width = hi - lo
    for _ in range(max_iter):
        f_z, logdet = layer_forward_np(z, log_a, b, log_w)
        resid = f_z - y
        above = resid > 0
        hi = np.where(above, z, hi)
        lo = np.where(above, lo, z)
        scale = tol * np.maximum(1.0, np.abs(z))
        step = resid * np.exp(-logdet)
        done = done | (np.abs(step) <= scale) | (resid == 0) | (hi - lo <= scale)
        if done.all():
            break
        stalled = (hi - lo) > 0.5 * width
        width = hi - lo
        cand = z - step
        newton_ok = np.isfinite(cand) & (cand > lo) & (cand < hi) & ~stalled
        z = np.where(done, z, np.where(newton_ok, cand, 0.5 * (lo + hi)))
    else:
        raise InversionError(f"layer inversion did not reach tolerance {tol}")
    return z


def layer_inverse(y, layer):
    """Differentiable inverse of one layer.

    The root ``z*`` is found numerically; the returned value is the Newton
    correction ``z* - (f(z*) - y) / f'(z*)`` built on the tape, which has the
    implicit-function derivatives dz/dy = 1/f' and dz/dθ = -(∂f/∂θ)/f'.
    """
    z_star = invert_layer_np(y.data, layer.log_a.data, layer.b.data, layer.log_w.data)
    zc = ad.constant(z_star)
    f_z, logdet = layer_forward(zc, layer)
    inv_slope = ad.constant(np.exp(-logdet.data))
    return ad.sub(zc, ad.mul(ad.sub(f_z, y), inv_slope))


def std_normal_logpdf(z):
    return ad.sub(ad.mul(ad.square(z), -0.5), 0.5 * LOG_2PI)


def sample(z0, layers):
    """Push base noise (..., n, 1) through the layers; returns (z_K, sum logdet)."""
    z = z0
    total = None
    for layer in layers:
        z, ld = layer_forward(z, layer)
        total = ld if total is None else ad.add(total, ld)
    return z, total


def log_prob(z_k, layers):
    """log p(z_K) = log N(z_0) - sum_k log|f_k'(z_{k-1})|, per particle."""
    z = z_k
    total = None
    for layer in reversed(layers):
        z_prev = layer_inverse(z, layer)
        _, ld = layer_forward(z_prev, layer)
        total = ld if total is None else ad.add(total, ld)
        z = z_prev
    base = std_normal_logpdf(z)
    return base if total is None else ad.sub(base, total)


def log_prob_np(z_k, params):
    """Numpy-only log density; ``params`` is a list of (log_a, b, log_w) arrays."""
    z = np.asarray(z_k, dtype=np.float64)
    total = np.zeros_like(z)
    for log_a, b, log_w in reversed(params):
        z = invert_layer_np(z, log_a, b, log_w)
        total += layer_forward_np(z, log_a, b, log_w)[1]
    return -0.5 * z ** 2 - 0.5 * LOG_2PI - total


def sample_np(z0, params):
    z = np.asarray(z0, dtype=np.float64)
    for log_a, b, log_w in params:
        z = layer_forward_np(z, log_a, b, log_w)[0]
    return z
