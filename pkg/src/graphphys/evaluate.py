"""Held-out metrics: one-step error, type classification, mass posterior, R², flow checks.

Every entry point takes frozen parameters (or freezes them) and never
writes back into the model.
"""

import csv
import json
import math
import os

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from . import flow
from . import model as M
from .dataset import stack
from .errors import ConfigError, StatisticsError

EVAL_BATCH = 8
KDE_POINTS = 512
KDE_PAD_BANDWIDTHS = 3.0
QUAD_POINTS = 10000
QUAD_MAX_POINTS = 2_000_000
QUAD_LOGP_STEP = 0.02
QUAD_MASS_FLOOR = 1e-14


# --------------------------------------------------------------------------- #
# statistics toolkit

def mse(pred, target):
    """Mean over particles of the squared error norm (the training-loss convention)."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def roc_auc(labels, scores):
    """Area under the ROC curve via the rank-sum identity (ties get half credit)."""
    labels = np.asarray(labels).astype(bool).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise StatisticsError("ROC-AUC is undefined when only one class is present")
    ranks = sps.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def silverman_bandwidth(x):
    """0.9 * min(std, IQR / 1.34) * n^(-1/5), falling back to std when the IQR is zero."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise StatisticsError("bandwidth needs at least two samples")
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        raise StatisticsError("bandwidth undefined for constant samples")
    return 0.9 * spread * x.size ** -0.2


def kde(x, grid, bandwidth):
    """Gaussian kernel density of samples ``x`` evaluated on ``grid``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    u = (np.asarray(grid, dtype=np.float64)[:, None] - x[None, :]) / bandwidth
    return np.exp(-0.5 * u * u).sum(axis=1) / (x.size * bandwidth * math.sqrt(2.0 * math.pi))


def kde_grid(samples, bandwidth, points=KDE_POINTS, pad=KDE_PAD_BANDWIDTHS):
    samples = np.asarray(samples, dtype=np.float64).ravel()
    return np.linspace(samples.min() - pad * bandwidth, samples.max() + pad * bandwidth, points)


def find_modes(grid, density):
    """Indices of strict local maxima of a sampled curve."""
    d = np.asarray(density)
    inner = np.nonzero((d[1:-1] > d[:-2]) & (d[1:-1] > d[2:]))[0] + 1
    return inner.tolist()


def mode_fractions(samples, grid, density, modes):
    """Share of samples in each mode's basin (split at the density minimum between modes)."""
    samples = np.asarray(samples).ravel()
    cuts = [grid[a + int(np.argmin(density[a:b + 1]))] for a, b in zip(modes[:-1], modes[1:])]
    which = np.searchsorted(np.asarray(cuts), samples)
    return [float(np.mean(which == i)) for i in range(len(modes))]


def welch_ttest(a, b):
    """Two-sided unequal-variance t-test on means; returns (t, p)."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise StatisticsError("t-test needs at least two samples per group")
    if a.mean() == b.mean():
        return 0.0, 1.0
    res = sps.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def r2_score(target, pred):
    target = np.asarray(target, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ss_tot = np.sum((target - target.mean()) ** 2)
    if ss_tot == 0:
        raise StatisticsError("R² is undefined for a constant target")
    return float(1.0 - np.sum((target - pred) ** 2) / ss_tot)


# --------------------------------------------------------------------------- #
# model-facing metrics

def _sequences(dataset, part):
    seqs = dataset.samples(part)
    if not seqs or not any(len(s) for s in seqs):
        raise ConfigError(f"{part} split is empty")
    return seqs


def _batches(seqs, frames=None):
    """Stacked batches over every frame (or the chosen frame positions) of each sequence."""
    items = [(s, i) for s in seqs for i in (range(len(s)) if frames is None else frames(s))]
    for start in range(0, len(items), EVAL_BATCH):
        yield stack([s[i] for s, i in items[start:start + EVAL_BATCH]])


def one_step_error(params, cfg, dataset, part="test"):
    """MSE of the forward head and of the trivial baseline over every frame of a split.

    The baseline keeps the current velocity for discs and predicts zero
    acceleration for force systems.
    """
    fr = M.frozen(params)
    err = base = 0.0
    count = 0
    for batch in _batches(_sequences(dataset, part)):
        out = M.run_model(batch, fr, cfg, with_losses=False)
        target = batch["forward_target"]
        trivial = batch["current_velocity"] if cfg.system == "elastic2d" else np.zeros_like(target)
        b = target.shape[0]
        err += mse(out.pred.data, target) * b
        base += mse(trivial, target) * b
        count += b
    return {"mse": err / count, "baseline_mse": base / count, "n_samples": count}


def classification_metrics(params, cfg, dataset, part="test"):
    """Accuracy at the 0.5 threshold and ROC-AUC over every particle-frame."""
    if not cfg.use_classifier:
        raise ConfigError("model has no classifier head")
    fr = M.frozen(params)
    labels, scores, correct = [], [], 0
    for batch in _batches(_sequences(dataset, part)):
        out = M.run_model(batch, fr, cfg, with_losses=False)
        y = batch["types"].argmax(axis=-1)
        correct += int(np.sum(out.y_hat.data.argmax(axis=-1) == y))
        labels.append(y.ravel())
        scores.append(out.y_hat.data[..., -1].ravel())
    labels, scores = np.concatenate(labels), np.concatenate(scores)
    result = {"accuracy": correct / labels.size, "n": int(labels.size)}
    if cfg.n_types == 2:
        result["roc_auc"] = roc_auc(labels == 1, scores)
    return result


def middle_frame(seq):
    return [len(seq) // 2]


def posterior_draws(params, cfg, dataset, rng, part="test", frames=middle_frame):
    """One flow sample per particle (in mass units) plus decoded R̂ and true R.

    Returns (sampled masses, true masses, R̂ stack, R stack).
    """
    if not cfg.use_inverse:
        raise ConfigError("model has no inverse head")
    fr = M.frozen(params)
    sampled, true, r_hat, r_true = [], [], [], []
    for batch in _batches(_sequences(dataset, part), frames):
        z0 = rng.standard_normal(batch["masses"].shape + (1,))
        out = M.run_model(batch, fr, cfg, z0=z0, with_losses=False)
        sampled.append(M.destandardize_mass(out.z_k.data[..., 0], cfg).ravel())
        true.append(batch["masses"].ravel())
        r_hat.append(out.r_hat.data)
        r_true.append(batch["relmass"])
    return (np.concatenate(sampled), np.concatenate(true),
            np.concatenate(r_hat), np.concatenate(r_true))


def mass_posterior_report(sampled, true):
    """KDEs (in log-mass) of true and sampled masses, modes, and a Welch t-test on masses."""
    sampled, true = np.asarray(sampled).ravel(), np.asarray(true).ravel()
    if sampled.size < 2 or true.size < 2:
        raise StatisticsError("need at least two true and two sampled masses")
    ls, lt = np.log(sampled), np.log(true)
    bw_s, bw_t = silverman_bandwidth(ls), silverman_bandwidth(lt)
    grid = kde_grid(np.concatenate([ls, lt]), max(bw_s, bw_t))
    dens_s, dens_t = kde(ls, grid, bw_s), kde(lt, grid, bw_t)

    def modes_of(samples, dens):
        idx = find_modes(grid, dens)
        fracs = mode_fractions(samples, grid, dens, idx)
        return [{"mass": float(math.exp(grid[i])), "log_mass": float(grid[i]), "fraction": f}
                for i, f in zip(idx, fracs)]

    t, p = welch_ttest(true, sampled)
    return {
        "grid": grid, "true_density": dens_t, "sampled_density": dens_s,
        "bandwidth_true": bw_t, "bandwidth_sampled": bw_s,
        "modes_sampled": modes_of(ls, dens_s), "modes_true": modes_of(lt, dens_t),
        "t_statistic": t, "p_value": p, "n_true": int(true.size), "n_sampled": int(sampled.size),
        "mean_true": float(true.mean()), "mean_sampled": float(sampled.mean()),
    }


def relmass_r2(r_hat, r_true):
    return r2_score(r_true, r_hat)


# --------------------------------------------------------------------------- #
# flow validity

def _rows(layer_params):
    """(J,) parameter vectors -> (1, J) rows broadcasting against (N, 1) inputs."""
    return [tuple(np.asarray(p, dtype=np.float64)[None, :] for p in lp) for lp in layer_params]


def _forward_logp(z, rows):
    """Images of base points and the log density there, using forward passes only."""
    y = z[:, None]
    logdet = np.zeros(z.size)
    for args in rows:
        y, ld = flow.layer_forward_np(y, *args)
        logdet += ld[:, 0]
    return y[:, 0], -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi) - logdet


def covering_grid(layer_params, points=QUAD_POINTS, base_range=12.0):
    """Sorted points in data space that resolve the density wherever it has mass.

    A uniform base grid over [-base_range, base_range] is pushed forward and
    base intervals are bisected until the log density changes by at most
    QUAD_LOGP_STEP between neighbours (intervals holding less than
    QUAD_MASS_FLOOR are left alone), so sharp peaks get as many nodes as they
    need.  A uniform grid over the same image is merged in.
    """
    rows = _rows(layer_params)
    z = np.linspace(-base_range, base_range, points // 2)
    y, logp = _forward_logp(z, rows)
    while z.size < QUAD_MAX_POINTS:
        mass = np.exp(np.maximum(logp[1:], logp[:-1])) * np.diff(y)
        coarse = (np.abs(np.diff(logp)) > QUAD_LOGP_STEP) & (mass > QUAD_MASS_FLOOR)
        if not coarse.any():
            break
        mid = 0.5 * (z[1:] + z[:-1])[coarse]
        z = np.sort(np.concatenate([z, mid]))
        y, logp = _forward_logp(z, rows)
    uniform = np.linspace(y.min(), y.max(), points - points // 2)
    return np.unique(np.concatenate([uniform, y]))


def flow_integral(layer_params, points=QUAD_POINTS):
    """Trapezoid integral of exp(log p) over a covering grid, plus a monotonicity flag.

    ``layer_params`` is a list of (log_a, b, log_w) arrays of shape (J,).
    The density comes from the inverse passes, not from the forward map.
    """
    grid = covering_grid(layer_params, points)
    logp = flow.log_prob_np(grid[:, None], _rows(layer_params))[:, 0]
    integral = float(np.trapezoid(np.exp(logp), grid))
    return integral, layers_monotone(layer_params, grid)


def layers_monotone(layer_params, grid, base_range=12.0):
    """True when every layer is strictly increasing with a finite log-slope.

    Each layer is checked on ``grid`` itself and on the images of a dense
    base grid after the preceding layers, i.e. on the inputs it really sees.
    """
    z = np.sort(np.asarray(grid, dtype=np.float64))[:, None]
    carried = np.linspace(-base_range, base_range, z.shape[0])[:, None]
    for args in _rows(layer_params):
        for inputs in (z, carried):
            out, logdet = flow.layer_forward_np(inputs, *args)
            if not (np.all(np.diff(out[:, 0]) > 0) and np.all(np.isfinite(logdet))):
                return False
        carried = flow.layer_forward_np(carried, *args)[0]
    return True


def particle_flow_params(params, cfg, batch, particles):
    """Per-particle constrained flow parameters for the first frame of ``batch``."""
    out = M.run_model(batch, M.frozen(params), cfg, with_losses=False)
    layers = M.flow_layers(out.h_tilde_v, M.frozen(params), cfg)
    result = []
    for p in particles:
        result.append([(l.log_a.data[0, p], l.b.data[0, p], l.log_w.data[0, p]) for l in layers])
    return result


def random_flow_params(rng, n_layers=3, n_components=4, scale=1.5):
    """Constrained layer parameters drawn at random (for validity checks)."""
    raw = rng.normal(0.0, scale, size=(1, 3 * n_layers * n_components))
    layers = flow.layers_from_raw(ad.constant(raw), n_layers, n_components)
    return [(l.log_a.data[0], l.b.data[0], l.log_w.data[0]) for l in layers]


# --------------------------------------------------------------------------- #
# report writer

def _fmt(x):
    return repr(float(x))


def evaluate(params, cfg, dataset, out_dir, seed=0, flow_particles=20, log=None):
    """Run every applicable metric on the test split and write the report files."""
    os.makedirs(out_dir, exist_ok=True)
    say = log or (lambda msg: None)
    fps = dataset.test_bundles[0].config.fps if dataset.test_bundles else 0
    summary = {"system": cfg.system, "fps": fps}

    ose = one_step_error(params, cfg, dataset)
    say(f"one-step MSE {ose['mse']:.6g} (baseline {ose['baseline_mse']:.6g}, {ose['n_samples']} samples)")
    with open(os.path.join(out_dir, "table1.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "fps", "one_step_error", "baseline_error", "n_samples"])
        w.writerow([cfg.system, fps, _fmt(ose["mse"]), _fmt(ose["baseline_mse"]), ose["n_samples"]])
    summary["one_step"] = ose

    if cfg.use_classifier:
        cls = classification_metrics(params, cfg, dataset)
        say(f"type accuracy {cls['accuracy']:.4f}, ROC-AUC {cls.get('roc_auc', float('nan')):.4f}")
        with open(os.path.join(out_dir, "classification.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["system", "fps", "accuracy", "roc_auc", "n"])
            w.writerow([cfg.system, fps, _fmt(cls["accuracy"]),
                        _fmt(cls["roc_auc"]) if "roc_auc" in cls else "", cls["n"]])
        summary["classification"] = cls

    if cfg.use_inverse:
        rng = np.random.default_rng(seed)
        sampled, true, r_hat, r_true = posterior_draws(params, cfg, dataset, rng)
        rep = mass_posterior_report(sampled, true)
        r2 = relmass_r2(r_hat, r_true)
        with open(os.path.join(out_dir, "mass_kde.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["log_mass", "mass", "true_density", "sampled_density"])
            for g, dt, ds_ in zip(rep["grid"], rep["true_density"], rep["sampled_density"]):
                w.writerow([_fmt(g), _fmt(math.exp(g)), _fmt(dt), _fmt(ds_)])
        seqs = dataset.samples("test")
        batch = stack([seqs[0][middle_frame(seqs[0])[0]]])
        picks = np.random.default_rng(seed + 1).choice(cfg.n_particles, min(flow_particles, cfg.n_particles),
                                                       replace=False)
        checks = [flow_integral(lp) for lp in particle_flow_params(params, cfg, batch, sorted(picks))]
        integrals = [c[0] for c in checks]
        report = {
            "p_value": rep["p_value"], "t_statistic": rep["t_statistic"],
            "n_true": rep["n_true"], "n_sampled": rep["n_sampled"],
            "mean_true": rep["mean_true"], "mean_sampled": rep["mean_sampled"],
            "bandwidth_true": rep["bandwidth_true"], "bandwidth_sampled": rep["bandwidth_sampled"],
            "modes": rep["modes_sampled"], "true_modes": rep["modes_true"], "r2": r2,
            "flow_integral_min": min(integrals), "flow_integral_max": max(integrals),
            "flow_monotone": all(c[1] for c in checks), "flow_particles_checked": len(checks),
        }
        say(f"mass modes {[round(m['mass'], 5) for m in report['modes']]}, "
            f"t-test p {report['p_value']:.4g}, R² {r2:.4f}")
        with open(os.path.join(out_dir, "inverse_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
        summary["inverse"] = report
    return summary
