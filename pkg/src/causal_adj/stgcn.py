"""Chebyshev graph-convolution forecaster with hand-written gradients.

Two Chebyshev layers (shared over the input window) encode every time
step; a full-window linear map decodes the ``N x tau x C`` stack into the
``N x tau'`` forecast. Gradients are exact reverse-mode, the Chebyshev
part running the recurrence backwards with the transposed operator.

Arrays inside the model use the layout ``(B, tau, N, C)`` so that the
graph operator acts on the second-to-last axis through ``np.matmul``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline_adjacency import Adjacency
from .errors import BadInput, Divergence, NegativeWeight, ShapeMismatch
from .panel import NormStats

logger = logging.getLogger(__name__)

PARAM_NAMES = ("theta1", "bias1", "theta2", "bias2", "kernel", "bias_out")


# -- graph operators -------------------------------------------------------------


@dataclass(frozen=True)
class LaplacianPair:
    L: np.ndarray
    L_scaled: np.ndarray
    lambda_max: float
    converged: bool = True


def symmetrize(A) -> np.ndarray:
    """``max(A, A^T)``: keeps every directed edge in both directions."""
    A = np.asarray(A, dtype=np.float64)
    return np.maximum(A, A.T)


def normalized_laplacian(adj) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` on the symmetrized weights.

    Isolated nodes keep ``L_ii = 1`` and an otherwise empty row.
    """
    A = adj.matrix if isinstance(adj, Adjacency) else np.asarray(adj, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"adjacency must be square, got {A.shape}")
    if np.any(A < 0):
        raise NegativeWeight("adjacency has negative weights")
    A = symmetrize(A).copy()
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    L = np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def power_iteration(M, tol: float = 1e-8, max_iter: int = 5000):
    """Largest eigenvalue of a symmetric PSD matrix; returns ``(value, converged)``."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    # fixed, non-degenerate start vector keeps the result deterministic
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, True
        v = w / norm
        new = float(v @ M @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new, True
        lam = new
    return lam, False


def scale_laplacian(L, tol: float = 1e-8, max_iter: int = 5000) -> LaplacianPair:
    """Map the spectrum into ``[-1, 1]``: ``L~ = 2 L / lambda_max - I``."""
    L = np.asarray(L, dtype=np.float64)
    lam, ok = power_iteration(L, tol, max_iter)
    if not ok or not lam > 0:
        logger.warning("power iteration did not converge (lambda=%.6g); using lambda_max = 2", lam)
        lam, ok = 2.0, False
    Ls = (2.0 / lam) * L - np.eye(L.shape[0])
    return LaplacianPair(L, 0.5 * (Ls + Ls.T), float(lam), ok)


def laplacian_pair(adj) -> LaplacianPair:
    return scale_laplacian(normalized_laplacian(adj))


def cheb_basis(x: np.ndarray, Ls: np.ndarray, K: int) -> list:
    """``[T_0(L~) x, ..., T_{K-1}(L~) x]`` for ``x`` with nodes on axis -2."""
    out = [x]
    if K > 1:
        out.append(np.matmul(Ls, x))
    for _ in range(2, K):
        out.append(2.0 * np.matmul(Ls, out[-1]) - out[-2])
    return out


def cheb_basis_adjoint(grads: list, Ls: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given gradients w.r.t. each ``T_k(L~) x``."""
    g = [a.copy() for a in grads]
    LsT = Ls.T
    for k in range(len(g) - 1, 1, -1):
        g[k - 1] += 2.0 * np.matmul(LsT, g[k])
        g[k - 2] -= g[k]
    if len(g) > 1:
        g[0] += np.matmul(LsT, g[1])
    return g[0]


def cheb_conv(x, pair, theta, bias, K: Optional[int] = None) -> np.ndarray:
    """``sum_k T_k(L~) x theta_k + bias``.

    ``x`` is ``(N, C_in)`` or any ``(..., N, C_in)`` stack; ``theta`` is
    ``(K, C_in, C_out)``.
    """
    Ls = pair.L_scaled if isinstance(pair, LaplacianPair) else np.asarray(pair)
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    K = theta.shape[0] if K is None else K
    if theta.ndim != 3 or theta.shape[0] != K:
        raise ShapeMismatch(f"theta must be (K={K}, C_in, C_out), got {theta.shape}")
    if x.shape[-2] != Ls.shape[0] or x.shape[-1] != theta.shape[1]:
        raise ShapeMismatch(f"x {x.shape} incompatible with L {Ls.shape} and theta {theta.shape}")
    basis = cheb_basis(x, Ls, K)
    y = sum(b @ theta[k] for k, b in enumerate(basis))
    return y + np.asarray(bias, dtype=np.float64)


# -- model -----------------------------------------------------------------------


@dataclass
class StgcnModel:
    K: int
    tau: int
    tau_prime: int
    n_features: int
    hidden: int
    params: dict
    activation: str = "relu"

    def __post_init__(self):
        if self.K < 1:
            raise BadInput("K must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise BadInput(f"unknown activation {self.activation!r}")
        expected = self.shapes()
        for name in PARAM_NAMES:
            p = np.asarray(self.params[name], dtype=np.float64)
            if p.shape != expected[name]:
                raise ShapeMismatch(f"{name}: expected {expected[name]}, got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise BadInput(f"{name} has non-finite entries")
            self.params[name] = p

    def shapes(self) -> dict:
        K, F, H = self.K, self.n_features, self.hidden
        return {
            "theta1": (K, F, H),
            "bias1": (H,),
            "theta2": (K, H, H),
            "bias2": (H,),
            "kernel": (self.tau, H, self.tau_prime),
            "bias_out": (self.tau_prime,),
        }

    @classmethod
    def init(cls, tau: int, tau_prime: int, n_features: int = 1, K: int = 3, hidden: int = 16, seed: int = 0, activation: str = "relu"):
        """Uniform ``+-sqrt(1 / fan_in)`` initialization from a seeded generator."""
        rng = np.random.default_rng(seed)
        model = cls.__new__(cls)
        model.K, model.tau, model.tau_prime = K, tau, tau_prime
        model.n_features, model.hidden = n_features, hidden
        shapes = model.shapes()
        fan_in = {
            "theta1": K * n_features,
            "bias1": K * n_features,
            "theta2": K * hidden,
            "bias2": K * hidden,
            "kernel": tau * hidden,
            "bias_out": tau * hidden,
        }
        params = {}
        for name in PARAM_NAMES:
            bound = np.sqrt(1.0 / fan_in[name])
            params[name] = rng.uniform(-bound, bound, size=shapes[name])
        return cls(K, tau, tau_prime, n_features, hidden, params, activation)

    def copy(self) -> "StgcnModel":
        return StgcnModel(
            self.K, self.tau, self.tau_prime, self.n_features, self.hidden,
            {k: v.copy() for k, v in self.params.items()}, self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "tau": self.tau,
            "tau_prime": self.tau_prime,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "activation": self.activation,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StgcnModel":
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        return cls(d["K"], d["tau"], d["tau_prime"], d["n_features"], d["hidden"], params, d.get("activation", "relu"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "StgcnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def _act_grad(z, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else np.ones_like(z)


def forward(model: StgcnModel, x, pair: LaplacianPair, return_cache: bool = False):
    """Forecast ``(B, N, tau')`` from windows ``(B, N, tau, F)``.

    A single ``(N, tau, F)`` window gives an ``(N, tau')`` forecast.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    B, N, tau, F = x.shape
    if tau != model.tau or F != model.n_features or pair.L_scaled.shape[0] != N:
        raise ShapeMismatch(f"input {x.shape} does not match model (tau={model.tau}, F={model.n_features}) / graph")
    p, Ls, K = model.params, pair.L_scaled, model.K
    x0 = np.transpose(x, (0, 2, 1, 3))  # (B, tau, N, F)

    T1 = cheb_basis(x0, Ls, K)
    z1 = sum(b @ p["theta1"][k] for k, b in enumerate(T1)) + p["bias1"]
    h1 = _act(z1, model.activation)
    T2 = cheb_basis(h1, Ls, K)
    z2 = sum(b @ p["theta2"][k] for k, b in enumerate(T2)) + p["bias2"]
    h2 = _act(z2, model.activation)
    out = np.einsum("btnh,thp->bnp", h2, p["kernel"]) + p["bias_out"]

    if single:
        out = out[0]
    if return_cache:
        return out, {"T1": T1, "z1": z1, "T2": T2, "z2": z2, "h2": h2, "single": single}
    return out


def loss(y_hat, y) -> float:
    """Mean squared error averaged over nodes, horizons and windows."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"prediction {y_hat.shape} vs target {y.shape}")
    return float(np.mean((y - y_hat) ** 2))


def backward(model: StgcnModel, x, y, pair: LaplacianPair):
    """Return ``(loss, grads)`` with ``grads`` keyed like ``model.params``."""
    y_hat, c = forward(model, x, pair, return_cache=True)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"prediction {y_hat.shape} vs target {y.shape}")
    value = loss(y_hat, y)
    if c["single"]:
        y_hat, y = y_hat[None], y[None]
    p, Ls, act = model.params, pair.L_scaled, model.activation

    d_out = 2.0 * (y_hat - y) / y.size  # (B, N, tau')
    g = {
        "kernel": np.einsum("btnh,bnp->thp", c["h2"], d_out),
        "bias_out": d_out.sum(axis=(0, 1)),
    }
    d_h2 = np.einsum("bnp,thp->btnh", d_out, p["kernel"])

    d_z2 = d_h2 * _act_grad(c["z2"], act)
    g["theta2"] = np.stack([np.einsum("btnc,btnh->ch", b, d_z2) for b in c["T2"]])
    g["bias2"] = d_z2.sum(axis=(0, 1, 2))
    d_h1 = cheb_basis_adjoint([d_z2 @ p["theta2"][k].T for k in range(model.K)], Ls)

    d_z1 = d_h1 * _act_grad(c["z1"], act)
    g["theta1"] = np.stack([np.einsum("btnc,btnh->ch", b, d_z1) for b in c["T1"]])
    g["bias1"] = d_z1.sum(axis=(0, 1, 2))
    return value, g


# -- training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise BadInput("learning_rate must be >= 0")
        if self.max_epochs < 1:
            raise BadInput("max_epochs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise BadInput("patience must satisfy 0 < patience < max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise BadInput(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_rmse)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_rmse"]
        lines += [f"{e},{tl!r},{vr!r}" for e, tl, vr in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n")


def rmse(model, x, y, pair) -> float:
    return float(np.sqrt(loss(forward(model, x, pair), y)))


def train(model: StgcnModel, train_xy, val_xy, pair: LaplacianPair, cfg: TrainConfig = TrainConfig()):
    """Full-batch training with early stopping on validation RMSE.

    ``train_xy`` and ``val_xy`` are ``(X, Y)`` stacks from
    :func:`causal_adj.panel.stack_windows`. Returns the best-validation
    model (a copy) and the history.
    """
    Xtr, Ytr = train_xy
    Xva, Yva = val_xy
    if len(Xtr) == 0 or len(Xva) == 0:
        raise BadInput("training needs at least one train and one validation window")
    model = model.copy()
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    hist = TrainHistory()
    best, best_val, since = model.copy(), rmse(model, Xva, Yva, pair), 0
    for epoch in range(1, cfg.max_epochs + 1):
        value, grads = backward(model, Xtr, Ytr, pair)
        if not np.isfinite(value) or not all(np.all(np.isfinite(gr)) for gr in grads.values()):
            raise Divergence(f"non-finite training loss at epoch {epoch}")
        lr = cfg.learning_rate
        for k in PARAM_NAMES:
            if cfg.optimizer == "adam":
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * grads[k]
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * grads[k] ** 2
                m_hat = m[k] / (1 - cfg.beta1**epoch)
                v_hat = v[k] / (1 - cfg.beta2**epoch)
                model.params[k] = model.params[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            else:
                model.params[k] = model.params[k] - lr * grads[k]
        val = rmse(model, Xva, Yva, pair)
        if not np.isfinite(val):
            raise Divergence(f"non-finite validation RMSE at epoch {epoch}")
        hist.epochs.append((epoch, value, val))
        if val < best_val:
            best, best_val, since = model.copy(), val, 0
            hist.best_epoch = epoch
        else:
            since += 1
            if since >= cfg.patience:
                hist.stopped_early = True
                break
    return best, hist


# -- evaluation ------------------------------------------------------------------


def horizon_labels(tau_prime: int) -> list:
    return [f"T+{h}" for h in range(1, tau_prime + 1)] + ["Avg"]


def error_metrics(y_hat, y) -> dict:
    """Per-horizon RMSE/MAE plus ``Avg`` for ``(B, N, tau')`` arrays.

    ``Avg`` pools all horizons: RMSE is the root of the mean MSE and MAE
    the mean absolute error over every cell.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"prediction {y_hat.shape} vs target {y.shape}")
    err = (y_hat - y).reshape(-1, y.shape[-1])
    labels = horizon_labels(y.shape[-1])
    mse_h = np.mean(err**2, axis=0)
    mae_h = np.mean(np.abs(err), axis=0)
    out = {lab: {"rmse": float(np.sqrt(mse_h[i])), "mae": float(mae_h[i])} for i, lab in enumerate(labels[:-1])}
    out["Avg"] = {"rmse": float(np.sqrt(mse_h.mean())), "mae": float(mae_h.mean())}
    return out


def evaluate(model: StgcnModel, test_xy, pair: LaplacianPair, stats: Optional[NormStats] = None, target_channel: int = 0) -> dict:
    """Metrics on the normalized scale, plus the raw scale when ``stats`` is given.

    Returns ``{"normalized": {...}, "denormalized": {...} or None, "predictions": y_hat}``.
    """
    X, Y = test_xy
    if len(X) == 0:
        raise BadInput("no test windows")
    y_hat = forward(model, X, pair)
    res = {"normalized": error_metrics(y_hat, Y), "denormalized": None, "predictions": y_hat}
    if stats is not None:
        mean = stats.mean[:, target_channel][None, :, None]
        std = stats.std[:, target_channel][None, :, None]
        res["denormalized"] = error_metrics(y_hat * std + mean, np.asarray(Y) * std + mean)
    return res
