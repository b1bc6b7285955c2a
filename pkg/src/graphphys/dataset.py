"""Turn trajectory bundles into supervised graph samples.

A sample at frame ``t`` carries node features ``[x_t, v_t, v_{t-1}, ..., v_{t-k}]``,
the self-looped adjacency, the pairwise relative tensor, and the targets of
every head (contact, type, next-step dynamics, relative mass).
"""

import json
import os
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import sim
from .errors import ConfigError, RangeError

DEFAULT_K = 3
STD_FLOOR = 1e-8
CONNECTIVITY_SCALE = 1.0


@dataclass
class GraphSample:
    adjacency: np.ndarray          # (n, n), A + I
    node_features: np.ndarray      # (n, 2 + 2(k+1)), normalized
    relative: np.ndarray           # (2(k+1), n, n)
    contact: np.ndarray            # (n, n)
    types: np.ndarray              # (n, n_types) one-hot
    forward_target: np.ndarray     # (n, 2)
    relmass: np.ndarray            # (n, n)
    masses: np.ndarray             # (n,)
    current_velocity: np.ndarray   # (n, 2), raw units; persistence baseline
    sim_id: int = 0
    t: int = 0

    @property
    def n(self):
        return self.adjacency.shape[0]

    def check(self, binary_contact=True, atol=1e-9):
        """Assert the structural invariants; returns self for chaining."""
        a, c, r, rel = self.adjacency, self.contact, self.relmass, self.relative
        assert np.array_equal(a, a.T), "adjacency not symmetric"
        assert np.all(np.diag(a) == 1.0), "adjacency lacks unit diagonal"
        assert np.allclose(c, c.T, atol=atol, rtol=0), "contact not symmetric"
        assert np.all(np.diag(c) == 0.0), "contact diagonal non-zero"
        if binary_contact:
            assert np.all((c == 0) | (c == 1)), "contact not binary"
        else:
            assert c.min() >= 0 and c.max() <= 1, "contact weights outside [0, 1]"
        assert np.allclose(np.diag(r), 1.0, atol=atol, rtol=0)
        assert np.allclose(r * r.T, 1.0, atol=atol, rtol=0), "relmass not reciprocal"
        assert np.allclose(rel, -np.swapaxes(rel, 1, 2), atol=atol, rtol=0), "relative not antisymmetric"
        return self


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def feature_width(k):
    return 2 + 2 * (k + 1)


def relative_channels(k):
    return 2 * (k + 1)


# --------------------------------------------------------------------------- #
# per-frame builders

def build_adjacency(positions, radii, system, scale=CONNECTIVITY_SCALE):
    """Self-looped adjacency: contact-radius graph for discs, complete otherwise."""
    n = positions.shape[0]
    if system != "elastic2d":
        return np.ones((n, n))
    d = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    reach = scale * (radii[:, None] + radii[None, :])
    adj = (dist <= reach).astype(np.float64)
    np.fill_diagonal(adj, 1.0)
    return adj


def build_contact_target(bundle, t):
    x = bundle.positions[t]
    n = x.shape[0]
    if bundle.config.system == "elastic2d":
        d = x[:, None, :] - x[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        c = (dist <= bundle.radii[:, None] + bundle.radii[None, :]).astype(np.float64)
        np.fill_diagonal(c, 0.0)
        return c
    f = sim.pair_forces(x, bundle.masses, bundle.config)
    mag = np.sqrt(np.einsum("ijk,ijk->ij", f, f))
    mag = 0.5 * (mag + mag.T)
    np.fill_diagonal(mag, 0.0)
    top = mag.max()
    if top == 0.0:
        return np.zeros((n, n))
    return mag / top


def build_forward_target(bundle, t):
    """Next velocity for discs; acceleration (v_{t+1} - v_t) * fps otherwise."""
    steps = bundle.velocities.shape[0]
    if not 0 <= t < steps - 1:
        raise RangeError(f"frame {t} has no successor in a {steps}-step trajectory")
    v = bundle.velocities
    if bundle.config.system == "elastic2d":
        return v[t + 1].copy()
    return (v[t + 1] - v[t]) * bundle.config.fps


def build_relmass_target(masses):
    masses = np.asarray(masses, dtype=np.float64)
    return masses[:, None] / masses[None, :]


def raw_node_features(bundle, t, k):
    if t < k:
        raise RangeError(f"frame {t} lacks {k} previous velocities")
    parts = [bundle.positions[t]] + [bundle.velocities[t - j] for j in range(k + 1)]
    return np.concatenate(parts, axis=1)


def relative_tensor(features, k):
    """Pairwise differences of position and the k most recent velocities.

    ``features`` is the (normalized) node-feature matrix; the result has
    ``2(k+1)`` channels and ``out[c, i, j] = f[i, c] - f[j, c]``.
    """
    sel = features[:, :relative_channels(k)]
    return np.ascontiguousarray((sel[:, None, :] - sel[None, :, :]).transpose(2, 0, 1))


def one_hot(types, n_types):
    out = np.zeros((len(types), n_types))
    out[np.arange(len(types)), types] = 1.0
    return out


def n_types_of(system):
    return 2 if system == "elastic2d" else 1


# --------------------------------------------------------------------------- #
# normalization

def fit_norm_stats(bundles, k):
    """Per-column mean/std of node features over every usable frame."""
    rows = []
    for b in bundles:
        steps = b.positions.shape[0]
        for t in range(k, steps - 1):
            rows.append(raw_node_features(b, t, k))
    data = np.concatenate(rows, axis=0)
    return NormStats(data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR))


# --------------------------------------------------------------------------- #

def make_sample(bundle, t, k, stats, sim_id=0):
    raw = raw_node_features(bundle, t, k)
    feats = stats.normalize(raw) if stats is not None else raw
    system = bundle.config.system
    radii = bundle.radii if bundle.radii is not None else np.zeros(len(bundle.masses))
    return GraphSample(
        adjacency=build_adjacency(bundle.positions[t], radii, system),
        node_features=feats,
        relative=relative_tensor(feats, k),
        contact=build_contact_target(bundle, t),
        types=one_hot(bundle.types, n_types_of(system)),
        forward_target=build_forward_target(bundle, t),
        relmass=build_relmass_target(bundle.masses),
        masses=bundle.masses.copy(),
        current_velocity=bundle.velocities[t].copy(),
        sim_id=sim_id,
        t=t,
    )


class SampleSequence(Sequence):
    """Lazy view of every usable frame ``t in [k, steps-2]`` of one bundle."""

    def __init__(self, bundle, k, stats, sim_id=0):
        steps = bundle.positions.shape[0]
        if steps < k + 2:
            raise RangeError(f"trajectory of {steps} steps is too short for k={k}")
        self.bundle, self.k, self.stats, self.sim_id = bundle, k, stats, sim_id
        self.frames = range(k, steps - 1)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return make_sample(self.bundle, self.frames[i], self.k, self.stats, self.sim_id)


def make_samples(bundle, k=DEFAULT_K, stats=None, sim_id=0):
    return SampleSequence(bundle, k, stats, sim_id)


def stack(samples):
    """Stack samples along a new leading batch axis."""
    keys = ("adjacency", "node_features", "relative", "contact", "types",
            "forward_target", "relmass", "masses", "current_velocity")
    return {key: np.stack([getattr(s, key) for s in samples]) for key in keys}


# --------------------------------------------------------------------------- #
# splits

def split(sim_ids, ratio, seed):
    """Partition whole simulations (never frames) into train and test."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = list(sim_ids)
    if len(ids) < 2:
        raise ConfigError("need at least two simulations to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def write_split(data_dir, train, test, ratio, seed):
    payload = {"train": list(train), "test": list(test), "ratio": ratio, "seed": seed}
    with open(os.path.join(data_dir, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def read_split(data_dir):
    with open(os.path.join(data_dir, "split.json"), encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload["train"], payload["test"]


class Dataset:
    """Train/test bundles of one data directory plus train-only NormStats."""

    def __init__(self, train, test, k=DEFAULT_K, stats=None):
        if not train:
            raise ConfigError("empty training split")
        self.train_bundles, self.test_bundles, self.k = list(train), list(test), k
        self.stats = stats if stats is not None else fit_norm_stats(self.train_bundles, k)
        self.system = self.train_bundles[0].config.system

    @classmethod
    def from_dir(cls, data_dir, k=DEFAULT_K, stats=None):
        train_ids, test_ids = read_split(data_dir)
        train = [sim.load_bundle(os.path.join(data_dir, d)) for d in train_ids]
        test = [sim.load_bundle(os.path.join(data_dir, d)) for d in test_ids]
        return cls(train, test, k=k, stats=stats)

    def samples(self, part="train"):
        bundles = self.train_bundles if part == "train" else self.test_bundles
        offset = 0 if part == "train" else len(self.train_bundles)
        return [make_samples(b, self.k, self.stats, sim_id=offset + i) for i, b in enumerate(bundles)]

    def index(self, part="train"):
        """Flat list of (sequence, position) pairs for every frame of a split."""
        return [(seq, i) for seq in self.samples(part) for i in range(len(seq))]
