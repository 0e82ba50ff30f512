import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from causal_adj.baseline_adjacency import correlation_matrix
from causal_adj.errors import BadInput, SizeMismatch, UnstableSpec
from causal_adj.synth import (
    Confounder,
    GroundTruth,
    Shift,
    SynthSpec,
    default_spec,
    edge_metrics,
    generate,
    load_truth,
    save_truth,
)


def _lag1_autocorr(v):
    v = v - v.mean()
    return float(v[1:] @ v[:-1] / (v @ v))


def test_independent_series_are_white():
    panel, truth = generate(SynthSpec(n_nodes=5, T=300, seed=0))
    for row in panel.target:
        assert abs(_lag1_autocorr(row)) < 0.15
    assert truth.causal_adjacency.sum() == 0


def test_single_edge_cross_correlation():
    panel, truth = generate(SynthSpec(n_nodes=2, T=300, true_edges=((0, 1, 1, 0.9),), seed=1))
    x = panel.target
    assert np.corrcoef(x[0, :-1], x[1, 1:])[0, 1] > 0.5
    assert truth.causal_adjacency[0, 1] == 1 and truth.causal_adjacency[1, 0] == 0


def test_same_seed_is_bit_identical():
    a, _ = generate(default_spec(3))
    b, _ = generate(default_spec(3))
    assert a.values.tobytes() == b.values.tobytes()
    c, _ = generate(default_spec(4))
    assert not np.array_equal(a.values, c.values)


def test_edge_metrics_examples():
    truth = np.zeros((4, 4))
    truth[1, 2] = truth[2, 3] = 1
    assert edge_metrics(truth, truth)["f1"] == 1.0
    m = edge_metrics(np.zeros((4, 4)), truth)
    assert (m["precision"], m["recall"], m["f1"]) == (1.0, 0.0, 0.0)
    est = np.zeros((4, 4))
    est[1, 2] = est[1, 3] = 1
    m = edge_metrics(est, GroundTruth(truth))
    assert (m["precision"], m["recall"], m["f1"]) == (0.5, 0.5, 0.5)
    with pytest.raises(SizeMismatch):
        edge_metrics(np.zeros((3, 3)), truth)


def test_default_spec_shape():
    spec = default_spec(0)
    assert (spec.n_nodes, spec.T, len(spec.true_edges), len(spec.confounders)) == (20, 300, 25, 5)
    assert spec.shift == Shift(240, "coefficient_rescale", 0.5)
    assert spec.spectral_radius() < 1
    confounded = {v for c in spec.confounders for v in c.nodes}
    assert len(confounded) == 10
    assert not any(dst in confounded for _, dst, _, _ in spec.true_edges)
    panel, truth = generate(spec)
    assert (panel.n_nodes, panel.n_steps) == (20, 300)
    assert np.all(np.diag(truth.causal_adjacency) == 0)
    for i, j in truth.confounded_pairs:
        assert truth.causal_adjacency[i, j] == 0 and truth.causal_adjacency[j, i] == 0


def _stationary_cov(spec, post=False):
    A = spec.lag_matrices()[0]
    Bm = np.zeros((spec.n_nodes, len(spec.confounders)))
    for k, c in enumerate(spec.confounders):
        (i, j), (li, lj) = c.nodes, c.loadings
        Bm[i, k] += li
        Bm[j, k] += lj * (spec.shift.magnitude if post else 1.0)
    Q = Bm @ Bm.T + spec.noise_std**2 * np.eye(spec.n_nodes)
    return A, Q, solve_discrete_lyapunov(A, Q)


@pytest.mark.parametrize("seed", range(5))
def test_pre_shift_halves_are_stationary(seed):
    spec = default_spec(seed, T=400, shift_at=None)
    x = generate(spec)[0].target
    a, b = x[:, :200], x[:, 200:]
    gap = np.abs(a.mean(axis=1) - b.mean(axis=1))
    # A fixed bar such as 0.2 pooled std is too tight here: with self
    # persistence 0.5 plus spillovers, a 200-step mean has a standard error
    # of 0.2 to 0.4 std. The gap is scored against the long-run variance
    # of the VAR instead.
    A, Q, _ = _stationary_cov(spec)
    inv = np.linalg.inv(np.eye(spec.n_nodes) - A)
    long_run = np.diag(inv @ Q @ inv.T)
    z = gap / np.sqrt(2 * long_run / 200)
    assert np.all(z < 4)


def test_coefficient_rescale_matches_lyapunov_oracle():
    # Long pre/post segments so the sample variances converge; the oracle is
    # the stationary covariance of the VAR with white confounders.
    spec = default_spec(0, T=200_000, shift_at=100_000)
    x = generate(spec)[0].target
    pre, post = x[:, :100_000], x[:, 101_000:]
    want = np.diag(_stationary_cov(spec, True)[2]) / np.diag(_stationary_cov(spec)[2])
    got = post.var(axis=1) / pre.var(axis=1)
    np.testing.assert_allclose(got, want, rtol=0.05)
    # the rescaled node carries a visible variance drop
    assert want.min() < 0.9


def test_mean_shift_magnitude():
    spec = default_spec(1, T=2000, shift_at=1000, shift_kind="mean_shift", magnitude=0.5)
    x = generate(spec)[0].target
    nodes = sorted({v for c in spec.confounders for v in c.nodes})
    delta = x[nodes, 1000:].mean(axis=1) - x[nodes, :1000].mean(axis=1)
    assert abs(delta.mean() - 0.5) < 0.2 * 0.5


def test_confounded_pairs_correlate():
    rs = []
    for seed in range(5):
        panel, truth = generate(default_spec(seed))
        C = correlation_matrix(panel, stop=240)
        rs += [abs(C[i, j]) for i, j in truth.confounded_pairs]
    assert np.median(rs) > 0.3
    assert np.mean(np.array(rs) > 0.3) >= 0.8


def test_validation_errors():
    with pytest.raises(UnstableSpec):
        generate(SynthSpec(n_nodes=2, T=50, true_edges=((0, 1, 1, 0.5),), self_coef=1.0))
    with pytest.raises(BadInput):
        SynthSpec(n_nodes=2, T=50, true_edges=((0, 0, 1, 0.5),)).validate()
    with pytest.raises(BadInput):
        SynthSpec(n_nodes=3, T=50, true_edges=((0, 1, 1, 0.5),), confounders=(Confounder((0, 1)),)).validate()
    with pytest.raises(BadInput):
        SynthSpec(n_nodes=3, T=50, shift=Shift(60)).validate()
    with pytest.raises(BadInput):
        Shift(3, kind="bogus")


def test_spec_and_truth_roundtrip(tmp_path):
    spec = default_spec(2)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    assert SynthSpec.from_dict({"default": True, "seed": 2}) == spec
    _, truth = generate(spec)
    save_truth(truth, tmp_path / "t.json")
    back = load_truth(tmp_path / "t.json")
    np.testing.assert_array_equal(back.causal_adjacency, truth.causal_adjacency)
    assert back.confounded_pairs == truth.confounded_pairs
