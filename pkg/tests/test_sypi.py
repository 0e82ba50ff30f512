import numpy as np
import pytest

from causal_adj.errors import BadInput, InsufficientSamples, MTooLarge
from causal_adj.pipeline import SYNTHETIC_CIT
from causal_adj.synth import SynthSpec, edge_metrics, generate
from causal_adj.sypi import (
    SypiConfig,
    causal_adjacency,
    estimate_min_lag,
    learn_causal_graph,
    preselect_candidates,
    sypi_causes,
    write_test_log,
)


def _lag1_pair(seed, n=201):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, n))
    y = np.zeros(n)
    y[1:] = 0.8 * x1[:-1] + rng.standard_normal(n - 1)
    return np.vstack([y, x1, x2])


def test_preselect_examples():
    corr = np.eye(4)
    corr[0] = corr[:, 0] = [1.0, 0.9, -0.95, 0.1]
    assert preselect_candidates(corr, 0, 2) == [2, 1]
    assert preselect_candidates(corr, 0, 3) == [2, 1, 3]
    tie = np.eye(8)
    tie[0, 3] = tie[0, 7] = 0.5
    assert preselect_candidates(tie, 0, 2) == [3, 7]
    with pytest.raises(MTooLarge):
        preselect_candidates(corr, 0, 4)


def test_min_lag_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 200))
    assert estimate_min_lag(x, 0, 1, max_lag=3, fixed_lag=1) == 1
    x[1, 2:] = x[0, :-2]
    assert estimate_min_lag(x, 0, 1, max_lag=4) == 2
    w = rng.standard_normal((2, 200))
    lag = estimate_min_lag(w, 0, 1, max_lag=4)
    assert 1 <= lag <= 4 and lag == estimate_min_lag(w, 0, 1, max_lag=4)
    with pytest.raises(BadInput):
        estimate_min_lag(w, 0, 1, max_lag=50)


def test_insufficient_samples():
    x = np.random.default_rng(1).standard_normal((3, 15))
    with pytest.raises(InsufficientSamples):
        sypi_causes(x, 0, [1, 2], SypiConfig(series_length=15))


def test_edges_respect_thresholds():
    cfg = SypiConfig(series_length=200, cit=SYNTHETIC_CIT)
    edges, records = sypi_causes(_lag1_pair(3), 0, [1, 2], cfg)
    for e in edges:
        assert e.p_dependence < cfg.threshold1 and e.p_independence > cfg.threshold2
        assert e.src != e.dst and e.lag == 1
    assert len(records) == 2
    skipped = [r for r in records if r.p1 >= cfg.threshold1]
    assert all(np.isnan(r.p2) and not r.decision for r in skipped)


@pytest.mark.slow
def test_direct_cause_marginal_rates():
    # The cascade runs two calibrated tests, so the joint "X1 kept and X2
    # dropped" rate is bounded by roughly (1 - 0.1) * (1 - 0.08) per spurious
    # candidate. The rates are checked one at a time.
    cfg = SypiConfig(series_length=200, cit=SYNTHETIC_CIT)
    found = spurious = 0
    for s in range(100):
        edges, _ = sypi_causes(_lag1_pair(s), 0, [1, 2], cfg)
        src = {e.src for e in edges}
        found += 1 in src
        spurious += 2 in src
    assert found >= 88
    assert spurious <= 15


@pytest.mark.slow
def test_white_noise_candidate_rarely_kept():
    cfg = SypiConfig(series_length=200, cit=SYNTHETIC_CIT)
    kept = 0
    for s in range(100):
        w = np.random.default_rng(500 + s).standard_normal((2, 201))
        kept += len(sypi_causes(w, 0, [1], cfg)[0]) > 0
    assert kept <= 15


def test_shifted_copy_passes_both_tests():
    cfg = SypiConfig(series_length=200, cit=SYNTHETIC_CIT)
    passed = 0
    for s in range(10):
        rng = np.random.default_rng(s)
        x = rng.standard_normal(201)
        y = np.zeros(201)
        y[1:] = x[:-1] + 0.1 * rng.standard_normal(200)
        edges, _ = sypi_causes(np.vstack([y, x]), 0, [1], cfg)
        passed += len(edges) == 1
    assert passed >= 8


@pytest.mark.slow
def test_chain_recovery():
    f1 = []
    cfg = SypiConfig(preselect_M=2, series_length=300, cit=SYNTHETIC_CIT)
    for s in range(20):
        spec = SynthSpec(n_nodes=3, T=300, true_edges=((0, 1, 1, 0.8), (1, 2, 1, 0.8)), noise_std=0.3, seed=s)
        panel, truth = generate(spec)
        f1.append(edge_metrics(causal_adjacency(panel, cfg), truth)["f1"])
    assert np.mean(f1) >= 0.8


@pytest.mark.slow
def test_independent_nodes_near_empty():
    rate = []
    cfg = SypiConfig(preselect_M=5, series_length=300, cit=SYNTHETIC_CIT)
    for s in range(20):
        panel, _ = generate(SynthSpec(n_nodes=6, T=300, seed=s))
        rate.append(causal_adjacency(panel, cfg).matrix.sum() / 30)
    assert np.mean(rate) <= 0.15


def test_call_count_and_worker_determinism(tmp_path):
    panel, _ = generate(SynthSpec(n_nodes=8, T=120, true_edges=((0, 1, 1, 0.7), (2, 3, 1, 0.7)), seed=4))
    cfg = SypiConfig(preselect_M=3, series_length=120, cit=SYNTHETIC_CIT)
    one = learn_causal_graph(panel, cfg, workers=1)
    three = learn_causal_graph(panel, cfg, workers=3)
    assert one.n_cit_calls <= 2 * 3 * 8
    assert one.n_cit_calls == len(one.tests) + sum(not np.isnan(r.p2) for r in one.tests)
    np.testing.assert_array_equal(one.adjacency.matrix, three.adjacency.matrix)
    assert repr(one.tests) == repr(three.tests)
    A = one.adjacency
    assert A.kind == "causal" and A.directed and np.all(np.diag(A.matrix) == 0)
    assert A.matrix.sum() <= 3 * 8
    write_test_log(one.tests, tmp_path / "log.csv", panel.node_ids)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "target,candidate,lag,p1,p2,decision"
    assert len(lines) == 1 + 8 * 3


def test_config_from_dict():
    cfg = SypiConfig.from_dict({"preselect_M": 4, "cit": {"ridge_epsilon": 1.0}})
    assert cfg.preselect_M == 4 and cfg.cit.ridge_epsilon == 1.0
    with pytest.raises(BadInput):
        SypiConfig(threshold1=1.5)
    with pytest.warns(UserWarning):
        SypiConfig(threshold1=0.05, threshold2=0.1)
