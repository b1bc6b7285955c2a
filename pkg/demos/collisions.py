"""Roll out a box of elastic discs and audit every collision.

Run with ``python demos/collisions.py``. Prints how many impulses were
applied and the worst relative change in kinetic energy and momentum
across any single collision.
"""

import numpy as np

from graphphys import sim


def kinetic(m, v):
    return 0.5 * np.sum(m * np.sum(v ** 2, axis=-1))


def main():
    cfg = sim.SimConfig(system="elastic2d", steps=300, seed=7)
    b = sim.run(cfg)
    print(f"{b.masses.size} discs, {cfg.steps} frames at {cfg.fps} fps, box {cfg.box} m")
    light = b.types == 0
    print(f"light discs: {light.sum()}, mean speed {np.linalg.norm(b.velocities[0][light], axis=1).mean():.3f} m/s")
    print(f"heavy discs: {(~light).sum()}, mean speed {np.linalg.norm(b.velocities[0][~light], axis=1).mean():.3f} m/s")

    worst_e = worst_p = 0.0
    count = 0
    for t in range(cfg.steps - 1):
        x, v = b.positions[t], b.velocities[t]
        _, hits = sim.resolve_contacts(x, v, b.masses, b.radii)
        for i, j in hits:
            pair = np.array([i, j])
            m = b.masses[pair]
            after, _ = sim.resolve_contacts(x[pair], v[pair], m, b.radii[pair])
            worst_e = max(worst_e, abs(kinetic(m, after) - kinetic(m, v[pair])) / kinetic(m, v[pair]))
            mom = m[:, None] * v[pair]
            worst_p = max(worst_p, np.linalg.norm((m[:, None] * after).sum(0) - mom.sum(0)) / np.abs(mom).sum())
            count += 1
    print(f"{count} collisions; worst relative energy change {worst_e:.2e}, momentum {worst_p:.2e}")


if __name__ == "__main__":
    main()
