import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from graphphys import dataset as ds
from graphphys import evaluate as ev
from graphphys import model as M
from graphphys import sim
from graphphys import train as tr
from graphphys.errors import ConfigError, StatisticsError

SMALL = dict(hidden=8, decoder_hidden=8, flow_layers=2, flow_components=3, bilinear_channels=3,
             invdec_hidden=4)


@pytest.fixture(scope="module")
def elastic_setup():
    bundles = [sim.run(sim.SimConfig(system="elastic2d", n_particles=16, steps=25, box=2.5, seed=s))
               for s in (4, 5)]
    data = ds.Dataset(bundles[:1], bundles[1:], k=1)
    tcfg = tr.TrainConfig(epochs=2)
    cfg = tr.model_config_for(data, tcfg, SMALL)
    params, cfg, _ = tr.train(data, tcfg, cfg)
    return data, params, cfg


# --------------------------------------------------------------------------- #
# statistics

def test_mse_hand_computed():
    pred = np.array([[1.0, 0.0], [0.0, 0.0]])
    target = np.array([[0.0, 0.0], [0.0, 2.0]])
    assert ev.mse(pred, target) == pytest.approx((1.0 + 4.0) / 2)
    assert ev.mse(target, target) == 0.0


def test_auc_perfect_and_reversed():
    labels = np.array([0, 0, 1, 1])
    assert ev.roc_auc(labels, [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert ev.roc_auc(labels, [0.9, 0.8, 0.2, 0.1]) == 0.0
    assert ev.roc_auc(labels, [0.5, 0.5, 0.5, 0.5]) == 0.5


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(0)
    labels = np.arange(10000) % 2
    assert abs(ev.roc_auc(labels, rng.random(10000)) - 0.5) < 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 2 ** 31 - 1))
def test_auc_matches_pairwise_count(n_pos, n_neg, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=n_pos + n_neg).astype(float)   # ties on purpose
    labels = np.r_[np.ones(n_pos), np.zeros(n_neg)].astype(bool)
    pos, neg = scores[labels], scores[~labels]
    brute = np.mean((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :]))
    auc = ev.roc_auc(labels, scores)
    assert auc == pytest.approx(brute, abs=1e-12)
    assert 0.0 <= auc <= 1.0


def test_auc_single_class_error():
    with pytest.raises(StatisticsError):
        ev.roc_auc([1, 1, 1], [0.1, 0.2, 0.3])


def test_kde_integrates_to_one():
    x = np.random.default_rng(1).normal(size=300)
    bw = ev.silverman_bandwidth(x)
    grid = ev.kde_grid(x, bw)
    assert np.trapezoid(ev.kde(x, grid, bw), grid) == pytest.approx(1.0, abs=1e-3)
    assert len(grid) == 512


def test_silverman_matches_closed_form():
    x = np.random.default_rng(2).normal(size=500)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    want = 0.9 * min(x.std(ddof=1), iqr / 1.34) * 500 ** -0.2
    assert ev.silverman_bandwidth(x) == pytest.approx(want, rel=1e-14)


def test_kde_matches_scipy():
    x = np.random.default_rng(3).normal(size=200)
    bw = 0.3
    grid = np.linspace(-3, 3, 31)
    ref = stats.gaussian_kde(x, bw_method=bw / x.std(ddof=1))(grid)
    np.testing.assert_allclose(ev.kde(x, grid, bw), ref, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-100, 100)))
def test_kde_positive_at_its_samples(x):
    if np.ptp(x) == 0:
        x = x + np.arange(x.size)
    try:
        bw = ev.silverman_bandwidth(x)
    except StatisticsError:
        return
    assert np.all(ev.kde(x, x, bw) > 0)


def test_bimodal_modes_and_fractions():
    rng = np.random.default_rng(4)
    x = np.r_[rng.normal(-3, 0.3, 600), rng.normal(2, 0.3, 400)]
    bw = ev.silverman_bandwidth(x)
    grid = ev.kde_grid(x, bw)
    dens = ev.kde(x, grid, bw)
    modes = ev.find_modes(grid, dens)
    assert len(modes) == 2
    np.testing.assert_allclose(grid[modes], [-3, 2], atol=0.15)
    np.testing.assert_allclose(ev.mode_fractions(x, grid, dens, modes), [0.6, 0.4], atol=1e-12)


def test_find_modes_strict_maxima_only():
    assert ev.find_modes(np.arange(5), np.array([0, 1, 1, 0, 0])) == []
    assert ev.find_modes(np.arange(5), np.array([0, 2, 1, 3, 0])) == [1, 3]


def test_welch_identical_sets_p_one():
    x = np.random.default_rng(5).normal(size=50)
    assert ev.welch_ttest(x, x.copy()) == (0.0, 1.0)


def test_welch_matches_hand_formula():
    rng = np.random.default_rng(6)
    a, b = rng.normal(0, 1, 40), rng.normal(0.5, 2, 25)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    t = (a.mean() - b.mean()) / np.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2 * stats.t.sf(abs(t), dof)
    got_t, got_p = ev.welch_ttest(a, b)
    assert got_t == pytest.approx(t, rel=1e-12)
    assert got_p == pytest.approx(p, rel=1e-10)
    assert 0.0 <= got_p <= 1.0


def test_welch_needs_two_samples():
    with pytest.raises(StatisticsError):
        ev.welch_ttest([1.0], [1.0, 2.0])


def test_r2_examples():
    r = np.array([[1.0, 0.5], [2.0, 1.0]])
    assert ev.r2_score(r, r) == 1.0
    assert ev.r2_score(r, np.full_like(r, r.mean())) == pytest.approx(0.0, abs=1e-15)
    # closed form: mean 1.125, SS_tot = 1.1875; pred off by 0.5 on one entry
    pred = r.copy()
    pred[1, 0] = 1.5
    assert ev.r2_score(r, pred) == pytest.approx(1 - 0.25 / 1.1875, rel=1e-14)
    with pytest.raises(StatisticsError):
        ev.r2_score(np.ones(4), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_r2_never_exceeds_one(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=20)
    assert ev.r2_score(y, y + rng.normal(0, rng.uniform(0, 3), size=20)) <= 1.0


def test_posterior_report_on_true_sampler():
    true = sim.sample_masses("elastic2d", 400, seed=1)
    draws = sim.sample_masses("elastic2d", 400, seed=2)
    rep = ev.mass_posterior_report(draws, true)
    assert len(rep["modes_sampled"]) == 2
    for mode, want in zip(rep["modes_sampled"], (0.001, 0.4)):
        assert abs(np.log(mode["mass"]) - np.log(want)) <= 0.2 * abs(np.log(want))
        assert mode["fraction"] >= 0.2
    assert rep["p_value"] > 0.1
    with pytest.raises(StatisticsError):
        ev.mass_posterior_report([1.0], true)


# --------------------------------------------------------------------------- #
# flow validity

def test_random_flows_integrate_to_one():
    rng = np.random.default_rng(7)
    for _ in range(3):
        total, monotone = ev.flow_integral(ev.random_flow_params(rng))
        assert 0.999 <= total <= 1.001 and monotone


def test_monotone_check_rejects_degenerate_layer():
    params = ev.random_flow_params(np.random.default_rng(8), 1, 2)
    grid = np.linspace(-3, 3, 50)
    assert ev.layers_monotone(params, grid)
    bad = [(params[0][0] + 800.0, params[0][1], params[0][2])]   # slope overflows to inf
    with np.errstate(over="ignore", invalid="ignore"):
        assert not ev.layers_monotone(bad, grid)


# --------------------------------------------------------------------------- #
# model-facing

def test_one_step_error_of_untrained_model(elastic_setup):
    data, params, cfg = elastic_setup
    res = ev.one_step_error(params, cfg, data)
    assert res["n_samples"] == 25 - 1 - 1
    assert res["mse"] >= 0 and res["baseline_mse"] >= 0


def test_perfect_predictor_scores_zero(elastic_setup, monkeypatch):
    data, params, cfg = elastic_setup
    real = M.run_model

    def oracle(batch, p, c, z0=None, with_losses=True):
        out = real(batch, p, c, z0=z0, with_losses=with_losses)
        out.pred = M.ad.constant(batch["forward_target"])
        return out
    monkeypatch.setattr(M, "run_model", oracle)
    assert ev.one_step_error(params, cfg, data)["mse"] == 0.0


def test_empty_split_is_config_error(elastic_setup):
    data, params, cfg = elastic_setup
    empty = ds.Dataset(data.train_bundles, [], k=1)
    with pytest.raises(ConfigError):
        ev.one_step_error(params, cfg, empty)


def test_evaluation_is_read_only_and_writes_reports(elastic_setup, tmp_path):
    data, params, cfg = elastic_setup
    before = {k: p.data.tobytes() for k, p in params.items()}
    summary = ev.evaluate(params, cfg, data, tmp_path, seed=0, flow_particles=3)
    for k, p in params.items():
        assert p.data.tobytes() == before[k]
    for name in ("table1.csv", "classification.csv", "mass_kde.csv", "inverse_report.json"):
        assert (tmp_path / name).exists()
    report = json.loads((tmp_path / "inverse_report.json").read_text())
    assert 0.0 <= report["p_value"] <= 1.0
    assert report["r2"] <= 1.0
    assert 0.999 <= report["flow_integral_min"] <= report["flow_integral_max"] <= 1.001
    cls = summary["classification"]
    assert 0.0 <= cls["roc_auc"] <= 1.0 and 0.0 <= cls["accuracy"] <= 1.0


def test_evaluation_is_deterministic(elastic_setup, tmp_path):
    data, params, cfg = elastic_setup
    ev.evaluate(params, cfg, data, tmp_path / "a", seed=3, flow_particles=2)
    ev.evaluate(params, cfg, data, tmp_path / "b", seed=3, flow_particles=2)
    for name in ("table1.csv", "classification.csv", "mass_kde.csv", "inverse_report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
