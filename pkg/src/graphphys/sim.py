"""Analytic 2D particle simulators.

Three systems are provided:

* ``elastic2d`` -- hard discs in a reflecting square box, resolved with
  closed-form elastic impulses.
* ``spring2d`` -- every pair coupled by a Hooke spring.
* ``gravity2d`` -- pairwise attraction falling off as 1/r**p, p in {1, 2}.

All integrators record ``velocities[t] == (positions[t] - positions[t-1]) * fps``:
the velocity stored at a frame is the one that carried the particle there.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, IntegrationError

SYSTEMS = ("elastic2d", "spring2d", "gravity2d")
FRAME_RATES = (10, 30, 50, 100, 200)
FORMAT_VERSION = "1"

# balanced light/heavy mixture for the collision system
ELASTIC_MODES = (0.001, 0.4)
ELASTIC_WEIGHTS = (0.5, 0.5)
# imbalanced mixture with low-probability modes for the force systems
FORCE_MODES = (0.2, 1.0, 2.5, 5.0)
FORCE_WEIGHTS = (0.55, 0.25, 0.15, 0.05)
MODE_REL_STD = 0.05
MASS_FLOOR = 0.01


@dataclass
class SimConfig:
    system: str = "elastic2d"
    force_exponent: int = 2
    fps: int = 10
    steps: int = 1000
    n_particles: int = 0
    box: float = 10.0
    radius: float = 0.1
    spring_k: float = 1.0
    rest_length: float = 1.0
    G: float = 1.0
    softening: float = 1e-3
    equipartition: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if self.force_exponent not in (1, 2):
            raise ConfigError(f"force_exponent must be 1 or 2, got {self.force_exponent}")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.n_particles <= 0:
            self.n_particles = 200 if self.system == "elastic2d" else 4
        if self.n_particles < 2:
            raise ConfigError("need at least two particles")
        if self.steps < 2:
            raise ConfigError("need at least two steps")

    @property
    def dt(self):
        return 1.0 / self.fps

    def to_dict(self):
        return asdict(self)


@dataclass
class ParticleSet:
    masses: np.ndarray
    types: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    radii: np.ndarray = None

    @property
    def n(self):
        return len(self.masses)


@dataclass
class TrajectoryBundle:
    config: SimConfig
    particles: ParticleSet
    positions: np.ndarray
    velocities: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def masses(self):
        return self.particles.masses

    @property
    def radii(self):
        return self.particles.radii

    @property
    def types(self):
        return self.particles.types

    def save(self, path):
        save_bundle(self, path)


# --------------------------------------------------------------------------- #
# masses

def sample_masses(system, n, seed, return_components=False):
    """Draw per-particle masses from the system's mixture.

    Each component is a Gaussian with standard deviation ``0.05 * mean``,
    truncated below at ``MASS_FLOOR`` by resampling.
    """
    if n < 2:
        raise ConfigError("sample_masses needs n >= 2")
    if system == "elastic2d":
        means, weights = ELASTIC_MODES, ELASTIC_WEIGHTS
    elif system in ("spring2d", "gravity2d"):
        means, weights = FORCE_MODES, FORCE_WEIGHTS
    else:
        raise ConfigError(f"unknown system {system!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    means = np.asarray(means)
    comp = rng.choice(len(means), size=n, p=weights)
    masses = rng.normal(means[comp], MODE_REL_STD * means[comp])
    floor = min(MASS_FLOOR, 0.5 * means.min())
    low = masses <= floor
    while low.any():
        masses[low] = rng.normal(means[comp[low]], MODE_REL_STD * means[comp[low]])
        low = masses <= floor
    if return_components:
        return masses, comp
    return masses


# --------------------------------------------------------------------------- #
# forces

def pair_forces(positions, masses, config):
    """Force on particle i exerted by j, shape (n, n, 2); zero on the diagonal.

    Only gravity is softened; coincident spring particles exert no force.
    """
    d = positions[:, None, :] - positions[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", d, d)
    if config.system == "spring2d":
        r = np.sqrt(dist2)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, -config.spring_k * (r - config.rest_length) / safe, 0.0)
    elif config.system == "gravity2d":
        r = np.sqrt(dist2 + config.softening ** 2)
        p = config.force_exponent
        # attractive: points from i toward j, i.e. along -d
        coef = -config.G * masses[:, None] * masses[None, :] / r ** (p + 1)
    else:
        raise ConfigError(f"{config.system} has no pairwise force law")
    np.fill_diagonal(coef, 0.0)
    return coef[:, :, None] * d


def accelerations(positions, masses, config):
    return pair_forces(positions, masses, config).sum(axis=1) / masses[:, None]


def step_forces(positions, velocities, masses, dt, force_fn, step=None):
    """Semi-implicit Euler: v += a dt, then x += v dt."""
    acc = force_fn(positions)
    v = velocities + acc * dt
    x = positions + v * dt
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise IntegrationError(f"non-finite state at step {step}", step=step)
    return x, v


def energy(positions, velocities, masses, config):
    """Total mechanical energy (kinetic + pairwise potential)."""
    kinetic = 0.5 * np.sum(masses * np.sum(velocities ** 2, axis=1))
    if config.system == "elastic2d":
        return kinetic
    d = positions[:, None, :] - positions[None, :, :]
    soft = config.softening ** 2 if config.system == "gravity2d" else 0.0
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d) + soft)
    iu = np.triu_indices(len(masses), 1)
    r = r[iu]
    if config.system == "spring2d":
        pot = 0.5 * config.spring_k * (r - config.rest_length) ** 2
    elif config.force_exponent == 2:
        pot = -config.G * masses[iu[0]] * masses[iu[1]] / r
    else:
        pot = config.G * masses[iu[0]] * masses[iu[1]] * np.log(r)
    return kinetic + pot.sum()


# --------------------------------------------------------------------------- #
# elastic collisions

def resolve_contacts(positions, velocities, masses, radii):
    """Apply elastic impulses to every touching, approaching pair.

    Pairs are processed in lexicographic (i, j) order; each impulse uses the
    velocities left by the previous ones.  Returns new velocities and the
    list of pairs that received an impulse.
    """
    v = velocities.copy()
    d = positions[:, None, :] - positions[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", d, d)
    reach = radii[:, None] + radii[None, :]
    ii, jj = np.nonzero(np.triu(dist2 <= reach ** 2, 1))
    hits = []
    for i, j in zip(ii, jj):
        dij = d[i, j]
        norm = np.sqrt(dist2[i, j])
        if norm == 0.0:
            continue
        n = dij / norm
        vn = np.dot(v[i] - v[j], n)
        if vn >= 0.0:
            continue
        mi, mj = masses[i], masses[j]
        total = mi + mj
        v[i] = v[i] - (2.0 * mj / total) * vn * n
        v[j] = v[j] + (2.0 * mi / total) * vn * n
        hits.append((int(i), int(j)))
    return v, hits


def reflect_walls(positions, velocities, radii, box):
    v = velocities.copy()
    r = radii[:, None]
    out_low = (positions < r) & (v < 0)
    out_high = (positions > box - r) & (v > 0)
    v[out_low | out_high] *= -1.0
    return v


def step_elastic(positions, velocities, masses, radii, dt, box, step=None):
    """Resolve contacts at the current frame, reflect at walls, then free-fly."""
    v, _ = resolve_contacts(positions, velocities, masses, radii)
    v = reflect_walls(positions, v, radii, box)
    x = positions + v * dt
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise IntegrationError(f"non-finite state at step {step}", step=step)
    return x, v


# --------------------------------------------------------------------------- #
# initial conditions and rollout

def _place_discs(n, radii, box, rng, max_tries=100000):
    pos = np.empty((n, 2))
    placed = 0
    tries = 0
    while placed < n:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"could not place {n} discs without overlap in box {box}")
        cand = rng.uniform(radii[placed], box - radii[placed], size=2)
        if placed:
            gap = np.linalg.norm(pos[:placed] - cand, axis=1) - (radii[:placed] + radii[placed])
            if np.any(gap <= 0):
                continue
        pos[placed] = cand
        placed += 1
    return pos


def initial_particles(config):
    rng = np.random.default_rng(config.seed)
    n = config.n_particles
    masses, comp = sample_masses(config.system, n, rng, return_components=True)
    if config.system == "elastic2d":
        radii = np.full(n, config.radius)
        pos = _place_discs(n, radii, config.box, rng)
        vel = rng.uniform(-1.0, 1.0, size=(n, 2))
        if config.equipartition:
            # equal mean kinetic energy per particle: heavy discs move slowly
            vel *= np.sqrt(ELASTIC_MODES[0] / masses)[:, None]
        return ParticleSet(masses=masses, types=comp.astype(np.int64), positions=pos,
                           velocities=vel, radii=radii)
    if config.system == "spring2d":
        pos = rng.uniform(-1.5, 1.5, size=(n, 2))
        vel = rng.normal(0.0, 0.5, size=(n, 2))
    else:
        pos = rng.uniform(-2.0, 2.0, size=(n, 2))
        vel = rng.normal(0.0, 0.3, size=(n, 2))
    # zero total momentum keeps the cloud from drifting off
    vel -= (masses[:, None] * vel).sum(axis=0) / masses.sum()
    return ParticleSet(masses=masses, types=np.zeros(n, dtype=np.int64), positions=pos,
                       velocities=vel, radii=None)


def run(config, particles=None):
    """Roll out ``config.steps`` frames (frame 0 is the initial state)."""
    p = particles if particles is not None else initial_particles(config)
    n, dt = p.n, config.dt
    positions = np.empty((config.steps, n, 2))
    velocities = np.empty((config.steps, n, 2))
    positions[0], velocities[0] = p.positions, p.velocities
    x, v = p.positions, p.velocities
    if config.system == "elastic2d":
        for t in range(1, config.steps):
            x, v = step_elastic(x, v, p.masses, p.radii, dt, config.box, step=t)
            positions[t], velocities[t] = x, v
    else:
        def force_fn(xx):
            return accelerations(xx, p.masses, config)
        for t in range(1, config.steps):
            x, v = step_forces(x, v, p.masses, dt, force_fn, step=t)
            positions[t], velocities[t] = x, v
    return TrajectoryBundle(config=config, particles=p, positions=positions, velocities=velocities)


# --------------------------------------------------------------------------- #
# on-disk format

def save_bundle(bundle, path):
    os.makedirs(path, exist_ok=True)
    p = bundle.particles
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "n_particles": p.n,
        "steps": int(bundle.positions.shape[0]),
        "masses": p.masses.tolist(),
        "radii": None if p.radii is None else p.radii.tolist(),
        "types": p.types.tolist(),
        "mass_mixture": {
            "means": list(ELASTIC_MODES if bundle.config.system == "elastic2d" else FORCE_MODES),
            "weights": list(ELASTIC_WEIGHTS if bundle.config.system == "elastic2d" else FORCE_WEIGHTS),
            "relative_std": MODE_REL_STD,
        },
        "layout": "[step][particle][axis] little-endian float64",
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name, arr in (("positions", bundle.positions), ("velocities", bundle.velocities)):
        with open(os.path.join(path, f"{name}.f64le"), "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_bundle(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported bundle format {manifest.get('format_version')!r}")
    config = SimConfig(**manifest["config"])
    steps, n = manifest["steps"], manifest["n_particles"]
    arrays = {}
    for name in ("positions", "velocities"):
        raw = np.fromfile(os.path.join(path, f"{name}.f64le"), dtype="<f8")
        if raw.size != steps * n * 2:
            raise ConfigError(f"{path}/{name}.f64le holds {raw.size} values, expected {steps * n * 2}")
        arrays[name] = raw.astype(np.float64).reshape(steps, n, 2)
    radii = None if manifest["radii"] is None else np.asarray(manifest["radii"], dtype=np.float64)
    particles = ParticleSet(
        masses=np.asarray(manifest["masses"], dtype=np.float64),
        types=np.asarray(manifest["types"], dtype=np.int64),
        positions=arrays["positions"][0].copy(),
        velocities=arrays["velocities"][0].copy(),
        radii=radii,
    )
    return TrajectoryBundle(config=config, particles=particles, meta={"path": path}, **arrays)
