"""Causal parent selection with a two-test CI cascade and spatial pre-selection.

For a target ``Y`` and a candidate ``X^i`` at lag ``w_i``, with ``S_i``
holding every other candidate at its own lag plus ``Y_{t-1}``:

1. ``X^i_{t-w_i}`` must be dependent on ``Y_t`` given ``S_i``
   (``p1 < threshold1``);
2. ``X^i_{t-w_i-1}`` must be independent of ``Y_t`` given
   ``S_i + X^i_{t-w_i}`` (``p2 > threshold2``).

Test 2 screens out candidates whose link to the target runs through a
persistent hidden driver. Candidates per target are the ``M`` nodes with
the largest absolute Pearson correlation, which bounds the number of CI
tests by ``2 M N``.
"""

from __future__ import annotations

import csv
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baseline_adjacency import Adjacency, correlation_matrix
from .errors import BadInput, InsufficientSamples, MTooLarge
from .kernel_cit import CitConfig, kcit
from .panel import TimeSeriesPanel

logger = logging.getLogger(__name__)

MIN_CIT_SAMPLES = 20


@dataclass(frozen=True)
class SypiConfig:
    threshold1: float = 0.1
    threshold2: float = 0.08
    max_lag: int = 3
    fixed_lag: Optional[int] = 1
    preselect_M: int = 10
    series_length: int = 50
    var_window: int = 1
    seed: int = 0
    cit: CitConfig = field(default_factory=CitConfig)

    def __post_init__(self):
        if not (0 < self.threshold1 < 1 and 0 < self.threshold2 < 1):
            raise BadInput("thresholds must lie in (0, 1)")
        if self.threshold2 > self.threshold1:
            warnings.warn("threshold2 > threshold1; the usual setting has threshold2 <= threshold1")
        if self.max_lag < 1 or self.preselect_M < 1 or self.var_window < 1:
            raise BadInput("max_lag, preselect_M and var_window must be >= 1")
        if self.fixed_lag is not None and self.fixed_lag < 1:
            raise BadInput("fixed_lag must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SypiConfig":
        d = dict(d)
        cit = d.pop("cit", {})
        fields = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(cit=cit if isinstance(cit, CitConfig) else CitConfig.from_dict(cit), **fields)


@dataclass(frozen=True)
class CausalEdge:
    src: int
    dst: int
    lag: int
    p_dependence: float
    p_independence: float


@dataclass(frozen=True)
class TestRecord:
    target: int
    candidate: int
    lag: int
    p1: float
    p2: float  # NaN when test 2 was skipped
    decision: bool


@dataclass
class CausalDiscovery:
    adjacency: Adjacency
    edges: list
    tests: list
    n_cit_calls: int
    candidates: dict = field(default_factory=dict)


def _series(panel) -> np.ndarray:
    return panel.target if isinstance(panel, TimeSeriesPanel) else np.asarray(panel, dtype=np.float64)


def preselect_candidates(corr, target: int, M: int) -> list:
    """The ``M`` nodes with the largest ``|corr[target, j]|``, ties to lower index."""
    corr = np.asarray(corr)
    n = corr.shape[0]
    if M > n - 1:
        raise MTooLarge(f"M={M} exceeds N-1={n - 1}")
    if M < 1:
        raise BadInput("M must be >= 1")
    others = [j for j in range(n) if j != target]
    # stable sort on -|r| keeps index order among ties
    others.sort(key=lambda j: -abs(corr[target, j]))
    return others[:M]


def estimate_min_lag(panel, src: int, dst: int, max_lag: int, fixed_lag: Optional[int] = None) -> int:
    """Lag in ``[1, max_lag]`` maximizing ``|corr(src_{t-l}, dst_t)|``; ties to the smallest."""
    if fixed_lag is not None:
        return int(fixed_lag)
    x = _series(panel)
    T = x.shape[1]
    if max_lag < 1:
        raise BadInput("max_lag must be >= 1")
    if max_lag >= T / 4:
        raise BadInput(f"max_lag={max_lag} must be < T/4 = {T / 4}")
    best, best_lag = -1.0, 1
    for lag in range(1, max_lag + 1):
        a, b = x[src, : T - lag], x[dst, lag:]
        sa, sb = a.std(), b.std()
        r = 0.0 if sa == 0 or sb == 0 else abs(float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb)))
        if r > best + 1e-12:
            best, best_lag = r, lag
    return best_lag


def _lagged(series: np.ndarray, node: int, lag: int, t_idx: np.ndarray, window: int) -> np.ndarray:
    cols = [series[node, t_idx - lag - k] for k in range(window - 1, -1, -1)]
    return np.column_stack(cols)


def _call_seed(seed: int, target: int, candidate: int, test: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, target, candidate, test]))


def sypi_causes(panel, target: int, candidates: Sequence[int], cfg: SypiConfig = SypiConfig(), lags=None, _counter=None):
    """Run the two-test cascade for one target.

    Returns ``(edges, records)``: the accepted :class:`CausalEdge` list and a
    :class:`TestRecord` per candidate. ``lags`` maps candidate -> lag and
    defaults to :func:`estimate_min_lag` on the analysed segment.
    """
    candidates = list(candidates)
    if not candidates:
        raise BadInput("candidates must be nonempty")
    if target in candidates:
        raise BadInput("target cannot be its own candidate")
    x = _series(panel)
    L = min(cfg.series_length, x.shape[1])
    seg = x[:, x.shape[1] - L :]
    if lags is None:
        lags = {c: estimate_min_lag(seg, c, target, cfg.max_lag, cfg.fixed_lag) for c in candidates}
    W = cfg.var_window
    reach = max(max(lags[c] for c in candidates) + 1, 1) + W - 1
    t_idx = np.arange(reach, L)
    if t_idx.size < MIN_CIT_SAMPLES:
        raise InsufficientSamples(f"only {t_idx.size} usable time points for target {target} (need {MIN_CIT_SAMPLES})")

    y = _lagged(seg, target, 0, t_idx, W)
    y_past = _lagged(seg, target, 1, t_idx, W)
    current = {c: _lagged(seg, c, lags[c], t_idx, W) for c in candidates}

    edges, records = [], []
    for c in candidates:
        S = [current[o] for o in candidates if o != c] + [y_past]
        z1 = np.hstack(S)
        r1 = kcit(current[c], y, z1, cfg.cit, seed=_call_seed(cfg.seed, target, c, 1))
        if _counter is not None:
            _counter.append(1)
        p2 = float("nan")
        keep = False
        if r1.p_value < cfg.threshold1:
            earlier = _lagged(seg, c, lags[c] + 1, t_idx, W)
            z2 = np.hstack(S + [current[c]])
            r2 = kcit(earlier, y, z2, cfg.cit, seed=_call_seed(cfg.seed, target, c, 2))
            if _counter is not None:
                _counter.append(1)
            p2 = r2.p_value
            keep = p2 > cfg.threshold2
        records.append(TestRecord(target, c, int(lags[c]), r1.p_value, p2, keep))
        if keep:
            edges.append(CausalEdge(c, target, int(lags[c]), r1.p_value, p2))
    return edges, records


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("CAUSAL_ADJ_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def learn_causal_graph(panel: TimeSeriesPanel, cfg: SypiConfig = SypiConfig(), workers: Optional[int] = None) -> CausalDiscovery:
    """Pre-select candidates for every node and run :func:`sypi_causes`.

    Targets are independent and may run in a thread pool; results merge in
    target order, so the output does not depend on ``workers``.
    """
    x = _series(panel)
    n = x.shape[0]
    node_ids = panel.node_ids if isinstance(panel, TimeSeriesPanel) else tuple(str(i) for i in range(n))
    if cfg.series_length > x.shape[1]:
        raise BadInput(f"series_length={cfg.series_length} exceeds T={x.shape[1]}")
    M = cfg.preselect_M
    if M > n - 1:
        logger.warning("preselect_M=%d > N-1=%d; using all other nodes", M, n - 1)
        M = n - 1
    corr = correlation_matrix(x)

    def run(target):
        counter = []
        cands = preselect_candidates(corr, target, M)
        edges, records = sypi_causes(x, target, cands, cfg, _counter=counter)
        return cands, edges, records, len(counter)

    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n)))
    else:
        results = [run(t) for t in range(n)]

    A = np.zeros((n, n))
    weights, all_edges, all_tests, calls, cand_map = {}, [], [], 0, {}
    for target, (cands, edges, records, k) in enumerate(results):
        cand_map[target] = cands
        calls += k
        all_tests.extend(records)
        for e in edges:
            A[e.src, e.dst] = 1.0
            weights[(e.src, e.dst)] = 1.0 - e.p_dependence
            all_edges.append(e)
    adj = Adjacency(A, "causal", True, node_ids, edge_weights=weights)
    return CausalDiscovery(adj, all_edges, all_tests, calls, cand_map)


def causal_adjacency(panel: TimeSeriesPanel, cfg: SypiConfig = SypiConfig(), workers: Optional[int] = None) -> Adjacency:
    return learn_causal_graph(panel, cfg, workers).adjacency


def write_test_log(tests: Sequence[TestRecord], path, node_ids=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "candidate", "lag", "p1", "p2", "decision"])
        for r in tests:
            tgt = node_ids[r.target] if node_ids else r.target
            cand = node_ids[r.candidate] if node_ids else r.candidate
            p2 = "" if np.isnan(r.p2) else repr(r.p2)
            w.writerow([tgt, cand, r.lag, repr(r.p1), p2, int(r.decision)])
