import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_adj.errors import Divergence, ShapeMismatch
from causal_adj.panel import NormStats
from causal_adj.stgcn import (
    LaplacianPair,
    PARAM_NAMES,
    StgcnModel,
    TrainConfig,
    backward,
    cheb_basis,
    cheb_conv,
    evaluate,
    forward,
    horizon_labels,
    laplacian_pair,
    loss,
    normalized_laplacian,
    scale_laplacian,
    train,
)


def _random_adj(rng, n, density=0.4):
    A = (rng.random((n, n)) < density) * rng.random((n, n))
    np.fill_diagonal(A, 0.0)
    return A


def _spectral_reference(pair, x, theta):
    # evaluate T_k on the eigenvalues with the explicit polynomials, which
    # avoids the arccos branch issue at eigenvalues a hair outside [-1, 1]
    w, V = np.linalg.eigh(pair.L_scaled)
    T = [np.ones_like(w), w]
    for _ in range(2, theta.shape[0]):
        T.append(2 * w * T[-1] - T[-2])
    return sum(V @ np.diag(T[k]) @ V.T @ x @ theta[k] for k in range(theta.shape[0]))


def test_laplacian_examples():
    L = normalized_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(L, [[1, -1], [-1, 1]], atol=1e-15)
    np.testing.assert_array_equal(normalized_laplacian(np.zeros((4, 4))), np.eye(4))
    # a directed edge is symmetrized
    np.testing.assert_allclose(normalized_laplacian(np.array([[0.0, 1.0], [0.0, 0.0]])), L)
    rng = np.random.default_rng(0)
    for _ in range(5):
        L = normalized_laplacian(_random_adj(rng, 10))
        np.testing.assert_array_equal(L, L.T)
        w = np.linalg.eigvalsh(L)
        assert w.min() >= -1e-8 and w.max() <= 2 + 1e-8


def test_scale_examples():
    pair = scale_laplacian(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert pair.lambda_max == pytest.approx(2.0, abs=1e-7)
    np.testing.assert_allclose(pair.L_scaled, [[0, -1], [-1, 0]], atol=1e-7)
    eye = scale_laplacian(np.eye(3))
    assert eye.lambda_max == pytest.approx(1.0)
    np.testing.assert_allclose(eye.L_scaled, np.eye(3), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15), st.floats(0.05, 0.9))
def test_scaled_spectrum_in_unit_interval(seed, n, density):
    pair = laplacian_pair(_random_adj(np.random.default_rng(seed), n, density))
    w = np.linalg.eigvalsh(pair.L_scaled)
    assert w.min() >= -1 - 1e-6 and w.max() <= 1 + 1e-6


def test_cheb_conv_examples():
    rng = np.random.default_rng(1)
    pair = laplacian_pair(_random_adj(rng, 5))
    x = rng.normal(size=(5, 2))
    th = rng.normal(size=(1, 2, 3))
    np.testing.assert_allclose(cheb_conv(x, pair, th, 0.5), x @ th[0] + 0.5, atol=1e-14)
    th2 = rng.normal(size=(2, 2, 3))
    np.testing.assert_allclose(cheb_conv(x, np.eye(5), th2, 0.0), x @ (th2[0] + th2[1]), atol=1e-14)
    with pytest.raises(ShapeMismatch):
        cheb_conv(rng.normal(size=(4, 2)), pair, th, 0.0)


def test_cheb_spectral_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pair = laplacian_pair(_random_adj(rng, 8, 0.5))
        x = rng.normal(size=(8, 3))
        th = rng.normal(size=(3, 3, 2))
        assert np.max(np.abs(cheb_conv(x, pair, th, 0.0) - _spectral_reference(pair, x, th))) < 1e-9


def test_cheb_recurrence_identity():
    rng = np.random.default_rng(3)
    Ls = laplacian_pair(_random_adj(rng, 7)).L_scaled
    x = rng.normal(size=(7, 2))
    T3 = cheb_basis(x, Ls, 4)[3]
    np.testing.assert_allclose(T3, 4 * Ls @ Ls @ Ls @ x - 3 * Ls @ x, atol=1e-9)


def test_forward_examples():
    rng = np.random.default_rng(4)
    pair = laplacian_pair(_random_adj(rng, 6))
    m = StgcnModel.init(4, 4, seed=0)
    for k in ("bias1", "bias2", "bias_out"):
        m.params[k][:] = 0.0
    np.testing.assert_array_equal(forward(m, np.zeros((6, 4, 1)), pair), 0.0)
    lin = StgcnModel.init(4, 4, seed=1, activation="identity")
    for k in ("bias1", "bias2", "bias_out"):
        lin.params[k][:] = 0.0
    x = rng.normal(size=(3, 6, 4, 1))
    np.testing.assert_allclose(forward(lin, 2 * x, pair), 2 * forward(lin, x, pair), atol=1e-12)
    assert forward(m, x, pair).shape == (3, 6, 4)


def test_full_size_forward():
    rng = np.random.default_rng(5)
    pair = laplacian_pair(_random_adj(rng, 172, 0.05))
    out = forward(StgcnModel.init(4, 4, seed=0), rng.normal(size=(2, 172, 4, 1)), pair)
    assert out.shape == (2, 172, 4) and np.all(np.isfinite(out))


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    A = _random_adj(rng, 6)
    m = StgcnModel.init(4, 4, seed=2)
    x = rng.normal(size=(2, 6, 4, 1))
    perm = rng.permutation(6)
    pair = laplacian_pair(A)
    out = forward(m, x, pair)
    relabeled = LaplacianPair(pair.L[np.ix_(perm, perm)], pair.L_scaled[np.ix_(perm, perm)], pair.lambda_max)
    np.testing.assert_allclose(forward(m, x[:, perm], relabeled), out[:, perm], atol=1e-12)
    # rebuilding the Laplacian from the relabeled graph reruns power
    # iteration, whose estimate is only good to its 1e-8 tolerance
    out_p = forward(m, x[:, perm], laplacian_pair(A[np.ix_(perm, perm)]))
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-7)


def test_loss_examples():
    y = np.random.default_rng(7).normal(size=(2, 3, 4))
    assert loss(y, y) == 0.0
    assert loss(np.full((1, 1), 2.0), np.zeros((1, 1))) == 4.0
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 5, 6, 4))
    total = 0.0
    for i in range(5):
        for j in range(6):
            for h in range(4):
                total += (a[i, j, h] - b[i, j, h]) ** 2
    assert loss(a, b) == pytest.approx(total / a.size, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    pair = laplacian_pair(_random_adj(rng, 6))
    m = StgcnModel.init(4, 4, 2, K=3, hidden=5, seed=seed)
    X = rng.standard_normal((3, 6, 4, 2))
    Y = rng.standard_normal((3, 6, 4))
    _, g = backward(m, X, Y, pair)
    h = 1e-5
    for name in PARAM_NAMES:
        P = m.params[name]
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = loss(forward(m, X, pair), Y)
            P[idx] = old - h
            down = loss(forward(m, X, pair), Y)
            P[idx] = old
            fd[idx] = (up - down) / (2 * h)
        rel = np.linalg.norm(fd - g[name]) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4, name


def test_zero_loss_gives_zero_gradients():
    rng = np.random.default_rng(9)
    pair = laplacian_pair(_random_adj(rng, 6))
    m = StgcnModel.init(4, 4, seed=3)
    X = rng.standard_normal((2, 6, 4, 1))
    value, g = backward(m, X, forward(m, X, pair), pair)
    assert value == 0.0
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(g[name], 0.0)


def test_output_bias_gradient():
    rng = np.random.default_rng(10)
    pair = laplacian_pair(_random_adj(rng, 6))
    m = StgcnModel.init(4, 4, seed=4)
    x = rng.standard_normal((6, 4, 1))
    y = rng.standard_normal((6, 4))
    _, g = backward(m, x, y, pair)
    resid = forward(m, x, pair) - y
    np.testing.assert_allclose(g["bias_out"], 2 * resid.mean(axis=0) / 4, atol=1e-14)


def _toy(seed=11, n_windows=1):
    rng = np.random.default_rng(seed)
    pair = laplacian_pair(_random_adj(rng, 6))
    X = rng.standard_normal((n_windows, 6, 4, 1))
    Y = rng.standard_normal((n_windows, 6, 4))
    return pair, X, Y


@pytest.mark.slow
def test_single_sample_overfit():
    pair, X, Y = _toy()
    m = StgcnModel.init(4, 4, seed=0)
    best, hist = train(m, (X, Y), (X, Y), pair, TrainConfig(learning_rate=1e-2, max_epochs=2000, patience=1999))
    assert loss(forward(best, X, pair), Y) < 1e-3


def test_zero_learning_rate_keeps_parameters():
    pair, X, Y = _toy(n_windows=3)
    m = StgcnModel.init(4, 4, seed=0)
    for opt in ("adam", "sgd"):
        _, hist = train(m, (X, Y), (X, Y), pair, TrainConfig(learning_rate=0.0, max_epochs=5, patience=4, optimizer=opt))
        last = StgcnModel.init(4, 4, seed=0)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(m.params[k], last.params[k])
        assert len({round(e[1], 15) for e in hist.epochs}) == 1


def test_training_is_deterministic():
    pair, X, Y = _toy(n_windows=4)
    cfg = TrainConfig(learning_rate=1e-2, max_epochs=30, patience=10)
    a, ha = train(StgcnModel.init(4, 4, seed=5), (X, Y), (X[:2], Y[:2]), pair, cfg)
    b, hb = train(StgcnModel.init(4, 4, seed=5), (X, Y), (X[:2], Y[:2]), pair, cfg)
    assert ha.epochs == hb.epochs
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_training_loss_mostly_monotone():
    pair, X, Y = _toy(n_windows=8)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=300, patience=299)
    _, hist = train(StgcnModel.init(4, 4, seed=6), (X, Y), (X, Y), pair, cfg)
    losses = np.array([e[1] for e in hist.epochs])
    assert np.mean(np.diff(losses) <= 1e-12) >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    pair, X, Y = _toy(n_windows=2)
    with pytest.raises(Divergence):
        train(StgcnModel.init(4, 4, seed=0), (X, Y * 1e200), (X, Y), pair, TrainConfig(learning_rate=1.0, optimizer="sgd", max_epochs=20, patience=10))


def test_evaluate_examples():
    pair, X, Y = _toy(n_windows=5)
    m = StgcnModel.init(4, 4, seed=0)
    res = evaluate(m, (X, forward(m, X, pair)), pair)
    assert list(res["normalized"]) == ["T+1", "T+2", "T+3", "T+4", "Avg"]
    for cell in res["normalized"].values():
        assert cell["rmse"] == 0.0 and cell["mae"] == 0.0

    zero = StgcnModel.init(4, 4, seed=0)
    for k in PARAM_NAMES:
        zero.params[k][:] = 0.0
    rng = np.random.default_rng(12)
    Yz = rng.standard_normal((200, 6, 4))
    stats = NormStats(mean=np.full((6, 1), 10.0), std=np.full((6, 1), 3.0))
    res = evaluate(zero, (rng.standard_normal((200, 6, 4, 1)), Yz), pair, stats)
    assert res["normalized"]["Avg"]["rmse"] == pytest.approx(1.0, abs=0.1)
    assert res["denormalized"]["Avg"]["rmse"] == pytest.approx(3 * res["normalized"]["Avg"]["rmse"])


def test_horizon_labels():
    assert horizon_labels(4) == ["T+1", "T+2", "T+3", "T+4", "Avg"]


def test_model_roundtrip(tmp_path):
    m = StgcnModel.init(4, 4, 2, K=2, hidden=3, seed=9)
    m.save(tmp_path / "m.json")
    back = StgcnModel.load(tmp_path / "m.json")
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert (back.K, back.hidden, back.n_features) == (2, 3, 2)
