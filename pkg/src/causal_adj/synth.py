"""Synthetic panels from a lagged linear-Gaussian VAR with known structure.

Nodes follow

    x^j_t = a * x^j_{t-1} + sum_{i -> j} c_ij x^i_{t-lag} + sum_h lambda_hj h_t + e^j_t

where ``h`` are hidden unit-variance AR(1) drivers ("confounders"), each
loading on a pair of nodes that share no causal edge. A regime shift after ``shift.at`` either
rescales the confounder loading on the second node of every pair
(``coefficient_rescale``) or adds a constant offset to the confounded nodes
(``mean_shift``). Causal coefficients never change, so the causal graph is
the invariant part of the process.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline_adjacency import Adjacency
from .errors import BadInput, SizeMismatch, UnstableSpec
from .panel import TimeSeriesPanel

BURN_IN = 500


@dataclass(frozen=True)
class Confounder:
    nodes: tuple  # (i, j)
    loadings: tuple = (1.0, 1.0)
    persistence: float = 0.5  # AR(1) coefficient of the hidden driver


@dataclass(frozen=True)
class Shift:
    at: int
    kind: str = "coefficient_rescale"
    magnitude: float = 0.5

    def __post_init__(self):
        if self.kind not in ("coefficient_rescale", "mean_shift"):
            raise BadInput(f"unknown shift kind {self.kind!r}")


@dataclass(frozen=True)
class SynthSpec:
    n_nodes: int
    T: int
    true_edges: tuple = ()  # (src, dst, lag, coefficient)
    noise_std: float = 0.3
    confounders: tuple = ()
    shift: Optional[Shift] = None
    seed: int = 0
    self_coef: float = 0.0
    burn_in: int = BURN_IN
    coords: tuple = ()  # optional (x, y) per node, used for the distance baseline

    def distance_matrix(self) -> np.ndarray:
        if not self.coords:
            raise BadInput("spec has no node coordinates")
        c = np.asarray(self.coords, dtype=np.float64)
        return np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)

    def lag_matrices(self) -> list:
        """``C[l-1][dst, src]`` coefficients per lag, self terms included at lag 1."""
        max_lag = max([int(e[2]) for e in self.true_edges] + [1])
        mats = [np.zeros((self.n_nodes, self.n_nodes)) for _ in range(max_lag)]
        mats[0] += self.self_coef * np.eye(self.n_nodes)
        for src, dst, lag, coef in self.true_edges:
            mats[int(lag) - 1][int(dst), int(src)] += float(coef)
        return mats

    def spectral_radius(self) -> float:
        mats = self.lag_matrices()
        n, p = self.n_nodes, len(mats)
        comp = np.zeros((n * p, n * p))
        comp[:n, :] = np.hstack(mats)
        if p > 1:
            comp[n:, :-n] = np.eye(n * (p - 1))
        return float(np.max(np.abs(np.linalg.eigvals(comp))))

    def validate(self) -> None:
        n = self.n_nodes
        if n < 2 or self.T < 8:
            raise BadInput("synthetic spec needs n_nodes >= 2 and T >= 8")
        if not self.noise_std > 0:
            raise BadInput("noise_std must be > 0")
        causal_pairs = set()
        for src, dst, lag, _ in self.true_edges:
            if not (0 <= src < n and 0 <= dst < n) or src == dst:
                raise BadInput(f"bad edge {src}->{dst}")
            if int(lag) < 1:
                raise BadInput("edge lags must be >= 1")
            causal_pairs.add((int(src), int(dst)))
        for c in self.confounders:
            i, j = c.nodes
            if (i, j) in causal_pairs or (j, i) in causal_pairs:
                raise BadInput(f"confounded pair {(i, j)} also has a causal edge")
            if not abs(c.persistence) < 1:
                raise UnstableSpec("confounder persistence must be < 1 in magnitude")
        if self.shift is not None and not 0 <= self.shift.at < self.T:
            raise BadInput("shift.at must lie in [0, T)")
        rho = self.spectral_radius()
        if rho >= 1:
            raise UnstableSpec(f"spectral radius {rho:.4f} >= 1")

    # -- (de)serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_edges"] = [list(e) for e in self.true_edges]
        d["coords"] = [list(c) for c in self.coords]
        d["confounders"] = [
            {"nodes": list(c.nodes), "loadings": list(c.loadings), "persistence": c.persistence}
            for c in self.confounders
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if d.get("default"):
            return default_spec(seed=d.get("seed", 0), **d.get("overrides", {}))
        d["true_edges"] = tuple(
            (int(e[0]), int(e[1]), int(e[2]), float(e[3])) if not isinstance(e, dict)
            else (int(e["src"]), int(e["dst"]), int(e.get("lag", 1)), float(e["coefficient"]))
            for e in d.get("true_edges", ())
        )
        d["confounders"] = tuple(
            Confounder(tuple(c["nodes"]), tuple(c.get("loadings", (1.0, 1.0))), float(c.get("persistence", 0.5)))
            for c in d.get("confounders", ())
        )
        d["coords"] = tuple(tuple(float(v) for v in c) for c in d.get("coords", ()))
        if d.get("shift"):
            d["shift"] = Shift(**d["shift"])
        else:
            d["shift"] = None
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class GroundTruth:
    causal_adjacency: np.ndarray  # binary, [src, dst]
    confounded_pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        n = self.causal_adjacency.shape[0]
        edges = [[int(i), int(j)] for i in range(n) for j in range(n) if self.causal_adjacency[i, j]]
        return {"n_nodes": n, "edges": edges, "confounded_pairs": [list(p) for p in self.confounded_pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        a = np.zeros((d["n_nodes"], d["n_nodes"]))
        for i, j in d["edges"]:
            a[i, j] = 1.0
        return cls(a, [tuple(p) for p in d.get("confounded_pairs", [])])


def node_names(n: int) -> tuple:
    width = max(2, len(str(n - 1)))
    return tuple(f"n{i:0{width}d}" for i in range(n))


def generate(spec: SynthSpec):
    """Simulate the process; returns ``(TimeSeriesPanel, GroundTruth)``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, burn = spec.n_nodes, spec.burn_in
    total = burn + spec.T
    mats = spec.lag_matrices()
    p = len(mats)
    eps = rng.normal(0.0, spec.noise_std, size=(total, n))
    n_conf = len(spec.confounders)
    drive_noise = rng.normal(0.0, 1.0, size=(total, n_conf))

    load = np.zeros((n_conf, n))
    load_post = np.zeros((n_conf, n))
    for k, c in enumerate(spec.confounders):
        (i, j), (li, lj) = c.nodes, c.loadings
        load[k, i] += li
        load[k, j] += lj
        load_post[k, i] += li
        load_post[k, j] += lj
    persistence = np.array([c.persistence for c in spec.confounders])
    # unit stationary variance for every driver
    innovation_scale = np.sqrt(1.0 - persistence**2)
    shift_at = None if spec.shift is None else burn + spec.shift.at
    if spec.shift is not None and spec.shift.kind == "coefficient_rescale":
        for k, c in enumerate(spec.confounders):
            j = c.nodes[1]
            load_post[k, j] = c.loadings[1] * spec.shift.magnitude

    x = np.zeros((total, n))
    h = np.zeros(n_conf)
    for t in range(total):
        h = persistence * h + innovation_scale * drive_noise[t]
        xt = eps[t].copy()
        for lag in range(1, min(p, t) + 1):
            xt += mats[lag - 1] @ x[t - lag]
        if n_conf:
            xt += h @ (load_post if shift_at is not None and t >= shift_at else load)
        x[t] = xt

    obs = x[burn:].copy()
    if spec.shift is not None and spec.shift.kind == "mean_shift":
        obs[spec.shift.at :, shifted_nodes(spec)] += spec.shift.magnitude

    truth = np.zeros((n, n))
    for src, dst, _, _ in spec.true_edges:
        truth[int(src), int(dst)] = 1.0
    panel = TimeSeriesPanel(
        node_ids=node_names(n),
        values=obs.T[:, :, None],
        target_channel=0,
        time_step="step",
        channel_names=("value",),
        time_labels=tuple(str(t) for t in range(spec.T)),
    )
    return panel, GroundTruth(truth, [tuple(int(v) for v in c.nodes) for c in spec.confounders])


def shifted_nodes(spec: SynthSpec) -> list:
    """Nodes offset by a ``mean_shift``: every confounded node, else all nodes."""
    nodes = sorted({v for c in spec.confounders for v in c.nodes})
    return nodes or list(range(spec.n_nodes))


def default_spec(
    seed: int = 0,
    n_nodes: int = 20,
    T: int = 300,
    n_edges: int = 25,
    n_confounded: int = 5,
    shift_at: Optional[int] = 240,
    shift_kind: str = "coefficient_rescale",
    magnitude: float = 0.5,
    noise_std: float = 0.3,
    self_coef: float = 0.5,
    coef_range: tuple = (0.3, 0.5),
    loading: float = 0.4,
    persistence: float = 0.0,
    k_neighbors: int = 3,
) -> SynthSpec:
    """Random spatial benchmark spec.

    Nodes are scattered in the unit square. Causal edges (lag 1, positive
    spillover coefficients) link each node to some of its ``k_neighbors``
    nearest neighbours. Confounded pairs are disjoint node pairs that are not
    spatial neighbours; their nodes may send edges but never receive one.
    Draws whose process would be non-stationary are rejected and redrawn.
    """
    rng = np.random.default_rng([seed, 7919])
    for _ in range(1000):
        coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
        d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
        near = set()
        for i in range(n_nodes):
            for j in np.argsort(d[i])[1 : k_neighbors + 1]:
                near.add((min(i, int(j)), max(i, int(j))))
        near = sorted(near)
        far = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if (i, j) not in set(near)]
        confs, used = [], set()
        for k in rng.permutation(len(far)):
            i, j = far[k]
            if i in used or j in used:
                continue
            confs.append(Confounder((i, j), (loading, loading), persistence))
            used.update((i, j))
            if len(confs) == n_confounded:
                break
        if len(confs) < n_confounded:
            continue
        # confounded nodes only send edges, so the hidden shock never sits
        # on top of a causal effect that has to be detected
        allowed = [(a, b) for a, b in near if not (a in used and b in used)]
        if len(allowed) < n_edges:
            continue
        pick = rng.choice(len(allowed), size=n_edges, replace=False)
        edges = []
        for k in sorted(pick):
            a, b = allowed[k]
            if b in used:
                src, dst = b, a
            elif a in used:
                src, dst = a, b
            else:
                src, dst = (a, b) if rng.random() < 0.5 else (b, a)
            edges.append((src, dst, 1, float(rng.uniform(*coef_range))))
        spec = SynthSpec(
            n_nodes=n_nodes,
            T=T,
            true_edges=tuple(edges),
            noise_std=noise_std,
            confounders=tuple(confs),
            shift=None if shift_at is None else Shift(shift_at, shift_kind, magnitude),
            seed=seed,
            self_coef=self_coef,
            coords=tuple(tuple(float(v) for v in c) for c in coords),
        )
        if spec.spectral_radius() < 0.95:
            return spec
    raise UnstableSpec("could not draw a stationary default spec")


def edge_metrics(estimated, truth) -> dict:
    """Precision / recall / F1 over directed off-diagonal edges.

    Conventions: precision is 1 when nothing is estimated, recall is 1 when
    the truth is empty, and F1 is 0 when precision + recall is 0.
    """
    est = estimated.matrix if isinstance(estimated, Adjacency) else np.asarray(estimated)
    tru = truth.causal_adjacency if isinstance(truth, GroundTruth) else np.asarray(truth)
    if est.shape != tru.shape:
        raise SizeMismatch(f"estimated {est.shape} vs truth {tru.shape}")
    off = ~np.eye(est.shape[0], dtype=bool)
    e = (est != 0) & off
    g = (tru != 0) & off
    tp = int(np.sum(e & g))
    n_est, n_true = int(e.sum()), int(g.sum())
    precision = tp / n_est if n_est else 1.0
    recall = tp / n_true if n_true else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "n_estimated": n_est, "n_true": n_true}


def save_truth(truth: GroundTruth, path) -> None:
    Path(path).write_text(json.dumps(truth.to_dict(), indent=2))


def load_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))
