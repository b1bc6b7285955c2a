"""Adam training loop over the summed multi-task loss."""

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import model as M
from .dataset import stack
from .errors import ConfigError, TrainingError

LOSS_TERMS = ("classification", "collision", "dec", "flow", "inv_dec")
COND_BANK_FRAMES = 4
# one elastic step costs ~30x a four-particle step, so epochs are subsampled
DEFAULT_SAMPLES_PER_EPOCH = {"elastic2d": 1600, "spring2d": 800, "gravity2d": 800}


@dataclass
class TrainConfig:
    epochs: int = -1               # -1 -> 20 for elastic2d, 200 otherwise
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0      # epochs; 0 disables intermediate checkpoints
    samples_per_epoch: int = -1    # -1 -> per-system default, 0 -> every training frame
    use_classifier: bool = True
    use_contact: bool = True
    use_inverse: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")

    def resolved_epochs(self, system):
        if self.epochs >= 0:
            return self.epochs
        return 20 if system == "elastic2d" else 200

    def resolved_samples(self, system, available):
        """Frames drawn (without replacement) per epoch."""
        want = self.samples_per_epoch
        if want < 0:
            want = DEFAULT_SAMPLES_PER_EPOCH.get(system, 0)
        return available if want == 0 else min(want, available)

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by ``min(1, max_norm / ||g||)`` (joint L2 norm)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = 1.0 if norm <= max_norm else max_norm / norm
    if scale == 1.0:
        return dict(grads), norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on ``params[k].data``."""
    grads, norm = clip_by_global_norm(grads, cfg.clip)
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        p.data = np.asarray(p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps))
    return norm


def model_config_for(dataset, tcfg, overrides=None):
    """ModelConfig sized to the data, with log-mass standardization from training masses."""
    logm = np.log(np.concatenate([b.masses for b in dataset.train_bundles]))
    ratios = np.concatenate([(b.masses[:, None] / b.masses[None, :]).ravel()
                             for b in dataset.train_bundles])
    kw = dict(system=dataset.system, n_particles=len(dataset.train_bundles[0].masses), k=dataset.k,
              use_classifier=tcfg.use_classifier, use_contact=tcfg.use_contact,
              use_inverse=tcfg.use_inverse, logmass_mean=float(logm.mean()),
              logmass_std=float(max(logm.std(), 1e-3)),
              relmass_scale=float(max(ratios.std(), 1.0)))
    kw.update(overrides or {})
    return M.ModelConfig(**kw)


def _grads(params):
    return {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in params.items()}


def condition_bank(dataset, params, cfg):
    """Per-particle conditioning rows H̃_V from the last frames of every training run.

    Stored with a checkpoint so posterior samples can be drawn without data.
    """
    frozen = M.frozen(params)
    rows = []
    for seq in dataset.samples("train"):
        picks = list(range(max(len(seq) - COND_BANK_FRAMES, 0), len(seq)))
        batch = stack([seq[i] for i in picks])
        out = M.run_model(batch, frozen, cfg, with_losses=False)
        rows.append(out.h_tilde_v.data.reshape(-1, out.h_tilde_v.shape[-1]))
    return np.concatenate(rows, axis=0)


def train(dataset, tcfg, cfg=None, params=None, on_epoch=None, log=None):
    """Minimize the total loss; returns (params, cfg, history).

    ``history`` holds one dict per epoch with the mean of each loss term over
    that epoch's batches.  ``on_epoch(epoch, params, history)`` runs after
    every epoch (checkpointing hook).  A non-finite loss or gradient raises
    :class:`TrainingError` before any parameter is modified.
    """
    cfg = cfg or model_config_for(dataset, tcfg)
    params = params if params is not None else M.init_params(cfg, tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    index = dataset.index("train")
    if not index:
        raise ConfigError("training split has no usable frames")
    state = AdamState(params)
    history = []
    epochs = tcfg.resolved_epochs(cfg.system)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(index))[:tcfg.resolved_samples(cfg.system, len(index))]
        sums, counts = {}, {}
        for start in range(0, len(order), tcfg.batch_size):
            chosen = order[start:start + tcfg.batch_size]
            batch = stack([index[i][0][index[i][1]] for i in chosen])
            z0 = rng.standard_normal((len(chosen), cfg.n_particles, 1))
            for p in params.values():
                p.grad = None
            out = M.run_model(batch, params, cfg, z0=z0)
            if not np.isfinite(out.total.data).all():
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch, step=state.t)
            ad.backward(out.total)
            grads = _grads(params)
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite gradient in epoch {epoch}", epoch=epoch, step=state.t)
            adam_step(params, grads, state, tcfg)
            for name, term in list(out.losses.items()) + [("total", out.total)]:
                if term is not None:
                    sums[name] = sums.get(name, 0.0) + float(term.data)
                    counts[name] = counts.get(name, 0) + 1
        row = {"epoch": epoch}
        row.update({k: sums[k] / counts[k] for k in sums})
        history.append(row)
        if log is not None:
            log(format_epoch(row))
        if on_epoch is not None:
            on_epoch(epoch, params, history)
    return params, cfg, history


def format_epoch(row):
    terms = " ".join(f"{k}={row[k]:.5g}" for k in ("total",) + LOSS_TERMS if k in row)
    return f"epoch {row['epoch']}: {terms}"


def write_history(path, history):
    cols = ["epoch", "total"] + list(LOSS_TERMS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) if c in row else "" for c in cols[1:]])
