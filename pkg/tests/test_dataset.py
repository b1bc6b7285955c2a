import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphphys import dataset as ds
from graphphys import sim
from graphphys.errors import ConfigError, RangeError


@pytest.fixture(scope="module")
def elastic_bundle():
    return sim.run(sim.SimConfig(system="elastic2d", steps=40, n_particles=30, seed=2))


@pytest.fixture(scope="module")
def gravity_bundle():
    return sim.run(sim.SimConfig(system="gravity2d", steps=40, seed=2))


def bundle_from_states(system, positions, velocities, masses, fps=10, radius=0.1):
    n = len(masses)
    cfg = sim.SimConfig(system=system, n_particles=n, steps=len(positions), fps=fps)
    parts = sim.ParticleSet(masses=np.asarray(masses, dtype=float), types=np.zeros(n, dtype=np.int64),
                            positions=positions[0], velocities=velocities[0],
                            radii=np.full(n, radius) if system == "elastic2d" else None)
    return sim.TrajectoryBundle(cfg, parts, np.asarray(positions, dtype=float),
                                np.asarray(velocities, dtype=float))


# --------------------------------------------------------------------------- #
# adjacency

def test_complete_graph_for_force_systems():
    np.testing.assert_array_equal(ds.build_adjacency(np.random.default_rng(0).normal(size=(4, 2)),
                                                     None, "gravity2d"), np.ones((4, 4)))


def test_far_discs_only_self_loops():
    adj = ds.build_adjacency(np.array([[0.0, 0.0], [5.0, 5.0]]), np.full(2, 0.1), "elastic2d")
    np.testing.assert_array_equal(adj, np.eye(2))


def test_adjacency_matches_brute_force(elastic_bundle):
    x, r = elastic_bundle.positions[10], elastic_bundle.radii
    adj = ds.build_adjacency(x, r, "elastic2d")
    n = len(r)
    for i in range(n):
        for j in range(n):
            dist = np.hypot(*(x[i] - x[j]))
            want = 1.0 if i == j or dist <= ds.CONNECTIVITY_SCALE * (r[i] + r[j]) else 0.0
            assert adj[i, j] == want


def test_wider_connectivity_scale_adds_edges():
    x = np.array([[0.0, 0.0], [0.3, 0.0]])
    assert ds.build_adjacency(x, np.full(2, 0.1), "elastic2d", scale=1.0)[0, 1] == 0.0
    assert ds.build_adjacency(x, np.full(2, 0.1), "elastic2d", scale=4.0)[0, 1] == 1.0


# --------------------------------------------------------------------------- #
# contact target

def test_touching_discs_are_in_contact():
    x = np.array([[[1.0, 1.0], [1.2, 1.0], [5.0, 5.0]]] * 2)
    b = bundle_from_states("elastic2d", x, np.zeros_like(x), [1.0, 1.0, 1.0])
    c = ds.build_contact_target(b, 0)
    assert c[0, 1] == 1.0 and c[1, 0] == 1.0 and c[0, 2] == 0.0
    np.testing.assert_array_equal(np.diag(c), 0.0)


def test_closer_gravity_pair_has_larger_weight():
    x = np.array([[[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]]] * 2)
    b = bundle_from_states("gravity2d", x, np.zeros_like(x), [1.0, 1.0, 1.0])
    c = ds.build_contact_target(b, 0)
    assert c[0, 1] > c[0, 2]
    assert c[0, 1] > c[1, 2]


def test_force_contact_is_normalized(gravity_bundle):
    c = ds.build_contact_target(gravity_bundle, 7)
    assert c.max() == 1.0
    np.testing.assert_allclose(c, c.T, atol=1e-15)


def test_zero_force_frame_gives_zero_contact():
    x = np.array([[[0.0, 0.0], [1.0, 0.0]]] * 2)   # spring pair at rest length
    b = bundle_from_states("spring2d", x, np.zeros_like(x), [1.0, 1.0])
    np.testing.assert_array_equal(ds.build_contact_target(b, 0), np.zeros((2, 2)))


# --------------------------------------------------------------------------- #
# forward target

def test_free_disc_target_is_current_velocity():
    b = sim.run(sim.SimConfig(system="elastic2d", n_particles=2, steps=5, seed=0),
                sim.ParticleSet(masses=np.ones(2), types=np.zeros(2, dtype=np.int64),
                                positions=np.array([[2.0, 2.0], [7.0, 7.0]]),
                                velocities=np.array([[0.1, 0.2], [-0.3, 0.0]]), radii=np.full(2, 0.1)))
    np.testing.assert_array_equal(ds.build_forward_target(b, 2), b.velocities[2])


def test_force_free_particle_has_zero_acceleration():
    x = np.array([[[0.0, 0.0], [1.0, 0.0]], [[0.1, 0.0], [1.1, 0.0]]])
    v = np.array([[[1.0, 0.0], [1.0, 0.0]]] * 2)
    b = bundle_from_states("spring2d", x, v, [1.0, 2.0])
    np.testing.assert_array_equal(ds.build_forward_target(b, 0), 0.0)


def test_gravity_target_is_analytic_acceleration(gravity_bundle):
    b, t = gravity_bundle, 12
    x, m = b.positions[t], b.masses
    acc = np.zeros_like(x)
    for i in range(len(m)):
        for j in range(len(m)):
            if i != j:
                d = x[j] - x[i]
                r = np.sqrt(d @ d + b.config.softening ** 2)
                acc[i] += b.config.G * m[j] * d / r ** (b.config.force_exponent + 1)
    np.testing.assert_allclose(ds.build_forward_target(b, t), acc, rtol=1e-9, atol=1e-12)


def test_forward_target_at_end_is_range_error(gravity_bundle):
    with pytest.raises(RangeError):
        ds.build_forward_target(gravity_bundle, gravity_bundle.positions.shape[0] - 1)


# --------------------------------------------------------------------------- #
# relative mass

def test_relmass_examples():
    np.testing.assert_array_equal(ds.build_relmass_target([3.0, 3.0, 3.0]), np.ones((3, 3)))
    np.testing.assert_array_equal(ds.build_relmass_target([1.0, 2.0]), [[1.0, 0.5], [2.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 1e4), min_size=2, max_size=12))
def test_relmass_reciprocal(masses):
    r = ds.build_relmass_target(masses)
    np.testing.assert_allclose(r * r.T, 1.0, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(np.diag(r), 1.0)


# --------------------------------------------------------------------------- #
# samples

def test_sample_count_and_width():
    b = sim.run(sim.SimConfig(system="spring2d", steps=1000, seed=0))
    seq = ds.make_samples(b, k=3)
    assert len(seq) == 996
    assert seq[0].node_features.shape == (4, 10)
    assert ds.feature_width(3) == 10


def test_too_short_trajectory():
    b = sim.run(sim.SimConfig(system="spring2d", steps=4, seed=0))
    with pytest.raises(RangeError):
        ds.make_samples(b, k=3)
    assert len(ds.make_samples(b, k=2)) == 1


def test_norm_round_trip(elastic_bundle):
    stats = ds.fit_norm_stats([elastic_bundle], 3)
    x = ds.raw_node_features(elastic_bundle, 5, 3)
    np.testing.assert_allclose(stats.denormalize(stats.normalize(x)), x, atol=1e-12, rtol=0)
    assert np.all(stats.std >= ds.STD_FLOOR)


def test_constant_column_std_is_floored():
    x = np.zeros((8, 2, 2))
    v = np.zeros((8, 2, 2))
    b = bundle_from_states("spring2d", x, v, [1.0, 1.0])
    stats = ds.fit_norm_stats([b], 1)
    np.testing.assert_array_equal(stats.std, ds.STD_FLOOR)


@pytest.mark.parametrize("system", sim.SYSTEMS)
def test_samples_satisfy_invariants(system):
    b = sim.run(sim.SimConfig(system=system, steps=30, n_particles=40 if system == "elastic2d" else 4,
                              seed=6))
    stats = ds.fit_norm_stats([b], 3)
    for s in ds.make_samples(b, 3, stats):
        s.check(binary_contact=(system == "elastic2d"))


def test_node_feature_layout(elastic_bundle):
    t = 9
    raw = ds.raw_node_features(elastic_bundle, t, 3)
    np.testing.assert_array_equal(raw[:, :2], elastic_bundle.positions[t])
    for j in range(4):
        np.testing.assert_array_equal(raw[:, 2 + 2 * j:4 + 2 * j], elastic_bundle.velocities[t - j])


def test_relative_tensor_channels():
    f = np.random.default_rng(0).normal(size=(5, 10))
    rel = ds.relative_tensor(f, 3)
    assert rel.shape == (8, 5, 5)
    np.testing.assert_array_equal(rel[2, 1, 3], f[1, 2] - f[3, 2])


# --------------------------------------------------------------------------- #
# splits

def test_split_sizes_and_disjointness():
    ids = [f"sim_{i:03d}" for i in range(10)]
    train, test = ds.split(ids, 0.8, seed=3)
    assert len(train) == 8 and len(test) == 2
    assert not set(train) & set(test)
    assert sorted(train + test) == ids
    assert ds.split(ids, 0.8, seed=3) == (train, test)


def test_split_errors():
    with pytest.raises(ConfigError):
        ds.split(["a"], 0.5, 0)
    with pytest.raises(ConfigError):
        ds.split(["a", "b"], 1.0, 0)


def test_dataset_stats_ignore_test_split(tmp_path):
    bundles = [sim.run(sim.SimConfig(system="spring2d", steps=20, seed=s)) for s in range(3)]
    names = []
    for i, b in enumerate(bundles):
        sim.save_bundle(b, tmp_path / f"sim_{i}")
        names.append(f"sim_{i}")
    ds.write_split(tmp_path, names[:2], names[2:], 0.67, 0)
    data = ds.Dataset.from_dir(tmp_path)
    want = ds.fit_norm_stats(bundles[:2], ds.DEFAULT_K)
    np.testing.assert_array_equal(data.stats.mean, want.mean)
    # perturbing the held-out run must not move the statistics
    bundles[2].positions[:] += 100.0
    again = ds.Dataset(bundles[:2], bundles[2:])
    np.testing.assert_array_equal(again.stats.mean, want.mean)


def test_stack_adds_batch_axis(elastic_bundle):
    seq = ds.make_samples(elastic_bundle, 3)
    batch = ds.stack([seq[0], seq[1], seq[2]])
    assert batch["adjacency"].shape == (3, 30, 30)
    assert batch["relative"].shape == (3, 8, 30, 30)
