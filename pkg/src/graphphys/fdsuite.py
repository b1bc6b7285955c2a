"""Finite-difference check of every autodiff primitive and every loss path.

Each check builds a scalar function of freshly drawn parameters for a
given seed and compares :func:`autodiff.backward` against central
differences with :func:`autodiff.gradcheck`.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .dataset import feature_width, relative_channels

PRIMITIVE_TOL = 1e-5
SAMPLED_FLOW_TOL = 1e-4
DEFAULT_SEEDS = 20
COMPOSITE_COORDS = 6
COMPOSITE_TENSORS = 4


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    seeds: int

    @property
    def passed(self):
        return self.worst < self.tol


def _p(rng, *shape, scale=1.0):
    return ad.parameter(rng.normal(0.0, scale, size=shape))


def _away_from_zero(rng, *shape, margin=0.1):
    """Values with |x| >= margin so rectifier kinks stay out of the FD stencil."""
    x = rng.normal(0.0, 1.0, size=shape)
    return ad.parameter(np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x))


def _loss(t):
    """Fold any tensor into a scalar with a non-symmetric weighting."""
    w = np.cos(np.arange(t.size, dtype=np.float64)).reshape(t.shape) + 0.3
    return ad.sum(ad.mul(t, w))


# --------------------------------------------------------------------------- #
# primitives: name -> builder(rng) -> (fn, inputs)

def _unary(op, positive=False, kink=False):
    def build(rng):
        if positive:
            x = ad.parameter(rng.uniform(0.2, 2.0, size=(3, 4)))
        elif kink:
            x = _away_from_zero(rng, 3, 4)
        else:
            x = _p(rng, 3, 4)
        return (lambda a: _loss(op(a))), [x]
    return build


def _binary(op, shapes, positive_b=False):
    def build(rng):
        a = _p(rng, *shapes[0])
        b = ad.parameter(rng.uniform(0.5, 2.0, size=shapes[1])) if positive_b else _p(rng, *shapes[1])
        return (lambda x, y: _loss(op(x, y))), [a, b]
    return build


def _bilinear_build(stacked):
    def build(rng):
        z = _p(rng, 2, 4, 3)
        w = _p(rng, 5, 3, 3) if stacked else _p(rng, 3, 3)
        z2 = _p(rng, 2, 4, 3)
        return (lambda a, b, c: _loss(ad.bilinear(a, b, c))), [z, w, z2]
    return build


PRIMITIVES = {
    "add": _binary(ad.add, [(2, 3, 4), (3, 4)]),
    "sub": _binary(ad.sub, [(3, 4), (2, 3, 4)]),
    "mul": _binary(ad.mul, [(2, 3, 4), (3, 4)]),
    "div": _binary(ad.div, [(2, 3, 4), (3, 4)], positive_b=True),
    "neg": _unary(ad.neg),
    "square": _unary(ad.square),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sigmoid": _unary(ad.sigmoid),
    "logsigmoid": _unary(ad.logsigmoid),
    "tanh": _unary(ad.tanh),
    "relu": _unary(ad.relu, kink=True),
    "logsumexp_rows": _unary(ad.logsumexp_rows),
    "softmax_rows": _unary(ad.softmax_rows),
    "log_softmax_rows": _unary(ad.log_softmax_rows),
    "concat_cols": _binary(ad.concat_cols, [(2, 3, 2), (2, 3, 4)]),
    "slice_cols": _unary(lambda a: ad.slice_cols(a, 1, 3)),
    "transpose": _unary(ad.transpose),
    "reshape": _unary(lambda a: ad.reshape(a, (2, 6))),
    "sum": _unary(lambda a: ad.sum(a, axis=0)),
    "mean": _unary(lambda a: ad.mean(a, axis=-1)),
    "matmul": _binary(ad.matmul, [(3, 4), (4, 2)]),
    "matmul_batched": _binary(ad.matmul, [(2, 3, 4), (2, 4, 5)]),
    "matmul_batch_matrix": _binary(ad.matmul, [(2, 3, 4), (4, 5)]),
    "matmul_matrix_batch": _binary(ad.matmul, [(3, 4), (2, 4, 5)]),
    "bilinear": _bilinear_build(stacked=False),
    "bilinear_channels": _bilinear_build(stacked=True),
}


# --------------------------------------------------------------------------- #
# composite loss paths on a tiny elastic model

TINY_N = 4


def tiny_config(system="elastic2d", **kw):
    base = dict(system=system, n_particles=TINY_N, k=1, hidden=5, layers=2, edge_hidden=4,
                decoder_hidden=5, flow_layers=2, flow_components=3, bilinear_channels=3,
                invdec_hidden=4, logmass_mean=-1.0, logmass_std=1.5, relmass_scale=2.0)
    base.update(kw)
    return M.ModelConfig(**base)


def tiny_batch(rng, cfg, batch=2):
    """Random but well-scaled inputs and targets for the tiny model."""
    n, k = cfg.n_particles, cfg.k
    feats = rng.normal(0.0, 1.0, size=(batch, n, feature_width(k)))
    sel = feats[..., :relative_channels(k)]
    # small differences and a ring graph keep the contact sigmoid out of saturation
    rel = 0.3 * np.moveaxis(sel[:, :, None, :] - sel[:, None, :, :], -1, 1)
    ring = np.eye(n) + np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)
    adj = np.repeat(np.minimum(ring, 1.0)[None], batch, axis=0)
    masses = rng.uniform(0.2, 1.5, size=(batch, n))
    contact = (rng.random((batch, n, n)) < 0.3).astype(np.float64)
    contact = np.maximum(contact, np.swapaxes(contact, 1, 2))
    contact[:, np.arange(n), np.arange(n)] = 0.0
    types = np.zeros((batch, n, cfg.n_types))
    types[..., 0] = 1.0
    if cfg.n_types == 2:
        types[:, ::2] = [0.0, 1.0]
    return {
        "adjacency": adj, "node_features": feats, "relative": rel,
        "contact": contact if cfg.sigmoid_contact else contact * rng.random((batch, n, n)),
        "types": types, "forward_target": rng.normal(0.0, 1.0, size=(batch, n, 2)),
        "relmass": masses[:, :, None] / masses[:, None, :], "masses": masses,
    }


def _params_for(rng, cfg):
    params = M.init_params(cfg, seed=int(rng.integers(1 << 31)))
    # perturb so no parameter sits at a structured initial value (zeros, ones)
    for name, t in params.items():
        # the hyper-map gets less: steep random flows put masses in far tails,
        # where a huge NLL drowns the finite differences in round-off
        scale = 0.02 if name == "hyper_W" else 0.1
        t.data = np.asarray(t.data + rng.normal(0.0, scale, size=t.shape))
    return params


KINK_MARGIN = 1e-3
MAX_REDRAWS = 50


class _KinkProbe:
    """Records the smallest |input| seen by the rectifier while active."""

    def __init__(self):
        self.closest = np.inf

    def __enter__(self):
        self._relu = ad.relu

        def relu(a):
            data = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
            if data.size:
                self.closest = min(self.closest, float(np.abs(data).min()))
            return self._relu(a)
        ad.relu = relu
        return self

    def __exit__(self, *exc):
        ad.relu = self._relu


def _composite(select, system="elastic2d", z0=False, **cfg_kw):
    """Check d(loss term)/d(parameters) for a few tensors the term depends on.

    Fixtures with a rectifier input within KINK_MARGIN of zero are redrawn:
    central differences straddling a kink do not estimate the derivative.
    """
    def build(rng):
        cfg = tiny_config(system, **cfg_kw)
        for _ in range(MAX_REDRAWS):
            batch = tiny_batch(rng, cfg)
            params = _params_for(rng, cfg)
            noise = rng.normal(0.0, 1.0, size=(2, cfg.n_particles, 1)) if z0 else None

            def evaluate(p, batch=batch, noise=noise):
                return select(M.run_model(batch, p, cfg, z0=noise))

            with _KinkProbe() as probe:
                root = evaluate(params)
            if probe.closest > KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"no kink-free fixture after {MAX_REDRAWS} draws")
        ad.backward(root)
        used = [k for k, t in params.items() if t.grad is not None and np.any(t.grad != 0)]
        for t in params.values():
            t.grad = None
        chosen = sorted(rng.choice(used, size=min(COMPOSITE_TENSORS, len(used)), replace=False))

        def fn(*tensors):
            p = dict(params)
            p.update(zip(chosen, tensors))
            return evaluate(p)
        return fn, [params[k] for k in chosen]
    return build


COMPOSITES = {
    "encode_nodes+classify": (_composite(lambda o: o.losses["classification"]), PRIMITIVE_TOL),
    "encode_edges+contact(sigmoid)": (_composite(lambda o: o.losses["collision"]), PRIMITIVE_TOL),
    "encode_edges+contact(raw)": (_composite(lambda o: o.losses["collision"], system="spring2d"),
                                  PRIMITIVE_TOL),
    "forward_decode": (_composite(lambda o: o.losses["dec"]), PRIMITIVE_TOL),
    "forward_decode(no classifier)": (_composite(lambda o: o.losses["dec"], system="spring2d"),
                                      PRIMITIVE_TOL),
    "flow_logprob": (_composite(lambda o: o.losses["flow"]), PRIMITIVE_TOL),
    "flow_sample+inverse_decode": (_composite(lambda o: o.losses["inv_dec"], z0=True), SAMPLED_FLOW_TOL),
    "total_loss": (_composite(lambda o: o.total, z0=True), SAMPLED_FLOW_TOL),
}


# --------------------------------------------------------------------------- #

def run_suite(seeds=DEFAULT_SEEDS, max_coords=COMPOSITE_COORDS, log=None):
    """Run every check over ``seeds`` seeds; returns a list of CheckResult."""
    say = log or (lambda msg: None)
    results = []
    table = [(name, build, PRIMITIVE_TOL, None) for name, build in PRIMITIVES.items()]
    table += [(name, build, tol, max_coords) for name, (build, tol) in COMPOSITES.items()]
    for name, build, tol, coords in table:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, len(name)])
            fn, inputs = build(rng)
            worst = max(worst, ad.gradcheck(fn, inputs, max_coords=coords, seed=seed))
        res = CheckResult(name, worst, tol, seeds)
        results.append(res)
        say(f"{'PASS' if res.passed else 'FAIL'} {name:32s} worst rel err {worst:.2e} "
            f"(tol {tol:.0e}, {seeds} seeds, {time.perf_counter() - t0:.1f}s)")
    return results
