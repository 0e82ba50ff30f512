"""Adjacency container plus the distance and correlation baselines.

Distance adjacency applies a Gaussian decay ``exp(-d^2 / sigma^2)`` with a
connectivity cutoff. Correlation adjacency keeps a pair when ``|r|`` and
the two-sided Pearson t-test p-value both pass their thresholds.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import AsymmetricInput, BadInput, MissingFile, NegativeDistance, NonNumericCell, RaggedRow, ShapeMismatch
from .panel import TimeSeriesPanel

logger = logging.getLogger(__name__)

KINDS = ("distance", "correlation", "causal")
SYMMETRY_TOL = 1e-12


@dataclass
class Adjacency:
    matrix: np.ndarray
    kind: str
    directed: bool
    node_ids: tuple
    # optional per-edge weights (src, dst) -> weight, used by the JSON edge list
    edge_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.node_ids = tuple(str(n) for n in self.node_ids)
        n = len(self.node_ids)
        if self.matrix.shape != (n, n):
            raise ShapeMismatch(f"matrix shape {self.matrix.shape} does not match {n} node ids")
        if self.kind not in KINDS:
            raise BadInput(f"unknown adjacency kind {self.kind!r}")

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def edge_count(self) -> int:
        """Nonzero off-diagonal entries; undirected pairs count once."""
        nz = self.matrix != 0
        np.fill_diagonal(nz, False)
        if self.directed:
            return int(nz.sum())
        return int(np.triu(nz, 1).sum())

    def edges(self):
        """Yield ``(src, dst, weight)``; undirected kinds yield ``src < dst`` only."""
        n = self.n_nodes
        for i in range(n):
            for j in range(n):
                w = self.matrix[i, j]
                if i == j or w == 0 or (not self.directed and j < i):
                    continue
                yield i, j, float(w)

    def check(self) -> None:
        """Raise if the kind's invariants are violated."""
        m = self.matrix
        if np.any(np.diag(m) != 0):
            raise BadInput("adjacency diagonal must be zero")
        if np.any(m < 0):
            raise BadInput("adjacency entries must be nonnegative")
        if self.kind in ("distance", "causal") and np.any(m > 1):
            raise BadInput(f"{self.kind} adjacency entries must lie in [0, 1]")
        if self.kind == "correlation" and not np.all((m == 0) | (m == 1)):
            raise BadInput("thresholded correlation adjacency must be binary")
        if not self.directed and np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
            raise BadInput("undirected adjacency must be symmetric")


# -- distance ------------------------------------------------------------------


@dataclass(frozen=True)
class DistanceConfig:
    sigma: Optional[float] = None  # None -> mean off-diagonal distance
    epsilon: float = float(np.exp(-1.0))

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise BadInput("sigma must be > 0")
        if not 0 <= self.epsilon <= 1:
            raise BadInput("epsilon must lie in [0, 1]")


def distance_adjacency(dist, cfg: DistanceConfig = DistanceConfig(), node_ids=None) -> Adjacency:
    """Thresholded Gaussian-decay adjacency from a pairwise distance matrix."""
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeMismatch(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0):
        raise NegativeDistance("distance matrix has negative entries")
    if np.max(np.abs(d - d.T), initial=0.0) > 1e-9 * max(1.0, float(np.max(d, initial=0.0))):
        raise AsymmetricInput("distance matrix is not symmetric")
    n = d.shape[0]
    sigma = cfg.sigma
    if sigma is None:
        off = d[~np.eye(n, dtype=bool)]
        sigma = float(off.mean()) if off.size and off.mean() > 0 else 1.0
    d = 0.5 * (d + d.T)
    w = np.exp(-(d**2) / sigma**2)
    w[w < cfg.epsilon] = 0.0
    np.fill_diagonal(w, 0.0)
    ids = node_ids if node_ids is not None else tuple(str(i) for i in range(n))
    return Adjacency(w, "distance", False, ids)


# -- correlation ---------------------------------------------------------------


def correlation_matrix(panel, stop: Optional[int] = None) -> np.ndarray:
    """Pearson correlation between nodes over time on the target channel.

    ``panel`` may also be a raw ``(N, T)`` array. Constant series get
    correlation 0 with every other node.
    """
    x = panel.target if isinstance(panel, TimeSeriesPanel) else np.asarray(panel, dtype=np.float64)
    x = x[:, :stop]
    xc = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(xc * xc, axis=1))
    constant = ~(norm > 0)
    if constant.any():
        logger.warning("%d constant series; correlation set to 0", int(constant.sum()))
    norm = np.where(constant, 1.0, norm)
    xn = xc / norm[:, None]
    r = np.clip(xn @ xn.T, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    np.fill_diagonal(r, 1.0)
    return r


def pearson_pvalue(r, n_samples: int):
    """Two-sided p-value of Pearson ``r`` via the t test with ``n - 2`` dof.

    Uses the identity ``P(|t| > t0) = I_{dof / (dof + t0^2)}(dof / 2, 1 / 2)``.
    """
    r = np.asarray(r, dtype=np.float64)
    dof = n_samples - 2
    if dof < 1:
        raise BadInput("need at least 3 samples for a correlation p-value")
    r2 = np.clip(r * r, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = np.where(r2 < 1.0, r2 * dof / (1.0 - r2), np.inf)
        xarg = np.where(np.isinf(t2), 0.0, dof / (dof + t2))
    return special.betainc(0.5 * dof, 0.5, xarg)


@dataclass(frozen=True)
class CorrelationConfig:
    r_threshold: float = 0.75
    p_threshold: float = 0.05

    def __post_init__(self):
        if not 0 <= self.r_threshold <= 1:
            raise BadInput("r_threshold must lie in [0, 1]")
        if not 0 < self.p_threshold < 1:
            raise BadInput("p_threshold must lie in (0, 1)")


def correlation_adjacency(corr, n_samples: int, cfg: CorrelationConfig = CorrelationConfig(), node_ids=None) -> Adjacency:
    """Binary symmetric adjacency: edge iff ``|r| >= r_threshold`` and ``p <= p_threshold``."""
    r = np.asarray(corr, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ShapeMismatch(f"correlation matrix must be square, got {r.shape}")
    if np.any(np.abs(r) > 1 + 1e-12):
        raise BadInput("correlation entries must lie in [-1, 1]")
    if n_samples < 4:
        raise BadInput("correlation adjacency needs T >= 4")
    p = pearson_pvalue(r, n_samples)
    a = ((np.abs(r) >= cfg.r_threshold) & (p <= cfg.p_threshold)).astype(np.float64)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    ids = node_ids if node_ids is not None else tuple(str(i) for i in range(r.shape[0]))
    return Adjacency(a, "correlation", False, ids)


# -- serialization -------------------------------------------------------------


def save_adjacency(adj: Adjacency, stem) -> list:
    """Write ``<stem>.csv`` (dense), ``<stem>.edges.json`` and ``<stem>.meta.json``."""
    stem = Path(stem)
    if stem.suffix in (".csv", ".json"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *adj.node_ids])
        for nid, row in zip(adj.node_ids, adj.matrix):
            w.writerow([nid, *(repr(float(v)) for v in row)])
    edges = []
    for i in range(adj.n_nodes):
        for j in range(adj.n_nodes):
            if adj.matrix[i, j] != 0:
                e = {"src": adj.node_ids[i], "dst": adj.node_ids[j], "weight": float(adj.matrix[i, j])}
                if (i, j) in adj.edge_weights:
                    e["score"] = float(adj.edge_weights[(i, j)])
                edges.append(e)
    edges_path = Path(f"{stem}.edges.json")
    edges_path.write_text(json.dumps(edges, indent=1))
    meta_path = Path(f"{stem}.meta.json")
    meta_path.write_text(
        json.dumps(
            {"kind": adj.kind, "directed": adj.directed, "node_ids": list(adj.node_ids), "edge_count": adj.edge_count},
            indent=2,
        )
    )
    return [csv_path, edges_path, meta_path]


def _read_square_csv(path: Path):
    if not path.exists():
        raise MissingFile(f"file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header = rows[0][1:]
    mat = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(header) + 1:
            raise RaggedRow(i, path)
        vals = []
        for j, cell in enumerate(row[1:], start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise NonNumericCell(i, j, cell, path) from None
        mat.append(vals)
    m = np.asarray(mat, dtype=np.float64)
    if m.shape != (len(header), len(header)):
        raise ShapeMismatch(f"{path}: expected {len(header)}x{len(header)} matrix, got {m.shape}")
    return tuple(h.strip() for h in header), m


def load_adjacency(path) -> Adjacency:
    """Load from the dense CSV, or from an edge-list JSON (sidecar required)."""
    path = Path(path)
    if path.name.endswith(".edges.json"):
        stem = Path(str(path)[: -len(".edges.json")])
    else:
        stem = path.with_suffix("")
    meta_path = Path(f"{stem}.meta.json")
    if not meta_path.exists():
        raise MissingFile(f"adjacency sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    ids = tuple(meta["node_ids"])
    if path.name.endswith(".edges.json"):
        if not path.exists():
            raise MissingFile(f"file not found: {path}")
        index = {nid: i for i, nid in enumerate(ids)}
        m = np.zeros((len(ids), len(ids)))
        for e in json.loads(path.read_text()):
            m[index[e["src"]], index[e["dst"]]] = e["weight"]
    else:
        csv_ids, m = _read_square_csv(path.with_suffix(".csv") if path.suffix != ".csv" else path)
        if csv_ids != ids:
            raise ShapeMismatch(f"{path}: header does not match sidecar node ids")
    return Adjacency(m, meta["kind"], bool(meta["directed"]), ids)


def load_distance_matrix(path, node_ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """Read an ``N x N`` distance CSV whose header lists node ids.

    When ``node_ids`` is given, rows/columns are reordered to match it.
    """
    ids, m = _read_square_csv(Path(path))
    if node_ids is not None:
        node_ids = tuple(str(n) for n in node_ids)
        if set(node_ids) != set(ids):
            raise ShapeMismatch(f"{path}: node ids do not match the panel")
        order = [ids.index(n) for n in node_ids]
        m = m[np.ix_(order, order)]
    return m
