"""End-to-end runs: data -> adjacencies -> one model per adjacency -> tables.

Every stochastic stage gets its own seed derived from the global seed and
the stage name, so adding a stage never perturbs another. All kinds are
trained with the same seed and hyperparameters.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baseline_adjacency import (
    Adjacency,
    CorrelationConfig,
    DistanceConfig,
    correlation_adjacency,
    correlation_matrix,
    distance_adjacency,
    load_adjacency,
    load_distance_matrix,
    save_adjacency,
)
from .errors import BadInput, CausalAdjError, MissingFile, SizeMismatch
from .kernel_cit import CitConfig
from .panel import (
    SplitSpec,
    TimeSeriesPanel,
    apply_zscore,
    fit_zscore,
    load_panel,
    make_windows,
    stack_windows,
    write_panel,
)
from .stgcn import StgcnModel, TrainConfig, evaluate, horizon_labels, laplacian_pair, train
from .synth import SynthSpec, edge_metrics, generate, save_truth
from .sypi import SypiConfig, learn_causal_graph, write_test_log

logger = logging.getLogger(__name__)

ADJACENCY_KINDS = ("distance", "correlation", "causal")

# CIT settings used for SyPI on the synthetic benchmark: the conditioning sets
# there hold ~20 lagged series, where the small default ridge over-fits.
SYNTHETIC_CIT = CitConfig(ridge_epsilon=1.0, width_rule="median_heuristic")


class StageError(CausalAdjError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def stage_seed(seed: int, stage: str) -> int:
    """Stable 32-bit seed for ``stage`` (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- small analyses --------------------------------------------------------------


def aggregate_adjacency(adj) -> dict:
    """Row sums (impact sent by each node) and column sums (impact received)."""
    m = adj.matrix if isinstance(adj, Adjacency) else np.asarray(adj, dtype=np.float64)
    return {"row_sums": m.sum(axis=1), "col_sums": m.sum(axis=0)}


def write_aggregate(adj: Adjacency, path) -> None:
    agg = aggregate_adjacency(adj)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "row_sum", "col_sum"])
        for nid, r, c in zip(adj.node_ids, agg["row_sums"], agg["col_sums"]):
            w.writerow([nid, repr(float(r)), repr(float(c))])


def matrix_edges(adj) -> int:
    """Nonzero off-diagonal matrix entries; a symmetric pair counts twice."""
    m = adj.matrix if isinstance(adj, Adjacency) else np.asarray(adj)
    nz = m != 0
    return int(nz.sum() - np.trace(nz))


def undirected_pairs(adj) -> int:
    m = adj.matrix if isinstance(adj, Adjacency) else np.asarray(adj)
    nz = (m != 0) | (m.T != 0)
    return int(np.triu(nz, 1).sum())


def compare_edge_counts(adjacencies: Sequence[Adjacency], labels: Optional[Sequence[str]] = None) -> list:
    """Edge counts and percent reduction of each adjacency relative to every other.

    Counts are matrix entries (see :func:`matrix_edges`); undirected pair
    counts are reported alongside. ``reduction_pct`` is
    ``100 * (reference - edges) / reference``.
    """
    if len(adjacencies) < 2:
        raise BadInput("compare_edge_counts needs at least two adjacencies")
    n = adjacencies[0].matrix.shape[0]
    for a in adjacencies:
        if a.matrix.shape[0] != n:
            raise SizeMismatch("adjacencies have different node counts")
    labels = list(labels) if labels is not None else [a.kind for a in adjacencies]
    rows = []
    for i, a in enumerate(adjacencies):
        for j, b in enumerate(adjacencies):
            if i == j:
                continue
            ea, eb = matrix_edges(a), matrix_edges(b)
            red = 100.0 * (eb - ea) / eb if eb else 0.0
            rows.append(
                {
                    "kind": labels[i],
                    "reference": labels[j],
                    "edges": ea,
                    "reference_edges": eb,
                    "pairs": undirected_pairs(a),
                    "reference_pairs": undirected_pairs(b),
                    "reduction_pct": round(red, 6),
                }
            )
    return rows


def write_rows(rows: list, path) -> None:
    if not rows:
        raise BadInput("nothing to write")
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def metrics_table(results: dict, tau_prime: int) -> list:
    """Table rows: ``kind`` then ``T+1 .. T+tau'`` and ``Avg`` cells ``"rmse/mae"``."""
    labels = horizon_labels(tau_prime)
    rows = []
    for kind, metrics in results.items():
        row = {"kind": kind}
        for lab in labels:
            row[lab] = f"{_fmt(metrics[lab]['rmse'])}/{_fmt(metrics[lab]['mae'])}"
        rows.append(row)
    return rows


def metrics_long(results: dict, tau_prime: int, scale: str) -> list:
    rows = []
    for kind, metrics in results.items():
        for lab in horizon_labels(tau_prime):
            for name in ("rmse", "mae"):
                rows.append({"kind": kind, "scale": scale, "horizon": lab, "metric": name, "value": _fmt(metrics[lab][name])})
    return rows


# -- manifests and partial outputs -------------------------------------------------


@dataclass
class RunManifest:
    subcommand: str
    seed: Optional[int] = None
    config_paths: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)

    def write(self, path) -> Path:
        path = Path(path)
        body = {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "config_paths": [str(p) for p in self.config_paths],
            "inputs": [str(p) for p in self.inputs],
            "outputs": [str(p) for p in self.outputs],
            "toolkit_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "wall_clock_seconds": round(time.time() - self.started, 3),
            **self.extra,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2))
        return path


@contextlib.contextmanager
def partial_on_interrupt(directory):
    """On Ctrl-C, rename files created inside ``directory`` to ``*.partial``."""
    directory = Path(directory)
    before = set(directory.iterdir()) if directory.exists() else set()
    try:
        yield
    except KeyboardInterrupt:
        if directory.exists():
            for p in sorted(set(directory.iterdir()) - before):
                if p.is_file() and not p.name.endswith(".partial"):
                    p.rename(p.with_name(p.name + ".partial"))
        raise


@contextlib.contextmanager
def stage(name: str):
    logger.info("stage %s", name)
    try:
        yield
    except (KeyboardInterrupt, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- pipeline config -----------------------------------------------------------------


@dataclass
class PipelineConfig:
    seed: int = 0
    kinds: tuple = ("correlation", "causal")
    # data: exactly one of synthetic / panel
    synthetic: Optional[dict] = None
    panel: Optional[str] = None
    distance: Optional[str] = None
    adjacency_files: dict = field(default_factory=dict)
    tau: int = 4
    tau_prime: int = 4
    split: dict = field(default_factory=lambda: {"weeks": "74:16", "val_weeks": 8})
    correlation: dict = field(default_factory=dict)
    distance_cfg: dict = field(default_factory=dict)
    sypi: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"K": 3, "hidden": 16})
    base_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        if "distance_config" in d:
            d["distance_cfg"] = d.pop("distance_config")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BadInput(f"unknown pipeline config keys: {sorted(unknown)}")
        if "kinds" in d:
            d["kinds"] = tuple(d["kinds"])
        cfg = cls(**d)
        if base_dir is not None and cfg.base_dir is None:
            cfg.base_dir = str(base_dir)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"config not found: {path}")
        try:
            body = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise BadInput(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(body, base_dir=path.parent)

    def check(self) -> None:
        if (self.synthetic is None) == (self.panel is None):
            raise BadInput("pipeline config needs exactly one of 'synthetic' or 'panel'")
        for k in self.kinds:
            if k not in ADJACENCY_KINDS:
                raise BadInput(f"unknown adjacency kind {k!r}")
        if len(self.kinds) < 1:
            raise BadInput("pipeline config needs at least one adjacency kind")
        if self.tau < 1 or self.tau_prime < 1:
            raise BadInput("tau and tau_prime must be >= 1")

    def resolve(self, p) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p


def default_synthetic_config(seed: int = 0) -> PipelineConfig:
    """Benchmark run on the default regime-shift spec.

    Train ``[0, 200)``, validation ``[200, 240)``, test after the shift at
    240. The correlation cutoff 0.3 matches the confounded-pair strength the
    generator guarantees.
    """
    return PipelineConfig(
        seed=seed,
        kinds=("correlation", "causal"),
        synthetic={"default": True, "seed": seed},
        split={"train_end": 200, "val_end": 240},
        correlation={"r_threshold": 0.3, "p_threshold": 0.05},
        sypi={
            "preselect_M": 19,
            "series_length": 240,
            "cit": {"ridge_epsilon": SYNTHETIC_CIT.ridge_epsilon, "width_rule": SYNTHETIC_CIT.width_rule},
        },
        train={"learning_rate": 3e-3, "max_epochs": 1000, "patience": 50},
    )


def resolve_split(split: dict, n_steps: int) -> SplitSpec:
    if "train_end" in split:
        return SplitSpec(int(split["train_end"]), int(split["val_end"]), n_steps)
    return parse_split(split.get("weeks", "74:16"), n_steps, int(split.get("val_weeks", 8)))


def parse_split(text: str, n_steps: int, val_weeks: int = 8) -> SplitSpec:
    try:
        a, b = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise BadInput(f"split must look like TRAIN:TEST, got {text!r}") from None
    if a < 1 or b < 1:
        raise BadInput("split parts must be positive")
    return SplitSpec.from_weeks(n_steps, a, b, val_weeks)


# -- stages -------------------------------------------------------------------------


def build_adjacency(kind: str, panel: TimeSeriesPanel, fit_stop: int, cfg: PipelineConfig, dist=None, seed: int = 0):
    """Return ``(adjacency, extras)``; adjacencies only see ``[0, fit_stop)``."""
    fit = panel.slice_time(0, fit_stop)
    if kind == "distance":
        if dist is None:
            raise BadInput("distance adjacency needs a distance matrix")
        return distance_adjacency(dist, DistanceConfig(**cfg.distance_cfg), panel.node_ids), {}
    if kind == "correlation":
        ccfg = CorrelationConfig(**cfg.correlation)
        return correlation_adjacency(correlation_matrix(fit), fit.n_steps, ccfg, panel.node_ids), {}
    scfg = SypiConfig.from_dict({**cfg.sypi, "seed": seed})
    if scfg.series_length > fit.n_steps:
        raise BadInput(f"series_length={scfg.series_length} exceeds the {fit.n_steps} fitting steps")
    res = learn_causal_graph(fit, scfg)
    return res.adjacency, {"discovery": res}


def _prediction_rows(times, node_ids, truth, preds: dict) -> list:
    """Long table of one-step-ahead forecasts: time, node, truth, one column per kind."""
    rows = []
    for b, t in enumerate(times):
        for n, nid in enumerate(node_ids):
            row = {"time": t, "node": nid, "truth": _fmt(truth[b, n, 0])}
            for kind, y_hat in preds.items():
                row[kind] = _fmt(y_hat[b, n, 0])
            rows.append(row)
    return rows


def run_pipeline(cfg: PipelineConfig, out_dir, manifest: Optional[RunManifest] = None) -> dict:
    """Execute the full run and write its artifacts under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or RunManifest("pipeline", seed=cfg.seed)
    written = manifest.outputs
    summary = {"kinds": list(cfg.kinds)}

    with partial_on_interrupt(out):
        with stage("load"):
            truth, dist = None, None
            if cfg.synthetic is not None:
                spec = SynthSpec.from_dict({"seed": stage_seed(cfg.seed, "synth"), **cfg.synthetic})
                panel, truth = generate(spec)
                written += write_panel(panel, out / "panel.csv")
                save_truth(truth, out / "truth.json")
                written.append(out / "truth.json")
                if spec.coords:
                    dist = spec.distance_matrix()
            else:
                src = cfg.resolve(cfg.panel)
                panel = load_panel(src)
                manifest.inputs.append(src)
                if cfg.distance:
                    dpath = cfg.resolve(cfg.distance)
                    dist = load_distance_matrix(dpath, panel.node_ids)
                    manifest.inputs.append(dpath)
            split = resolve_split(cfg.split, panel.n_steps)

        with stage("normalize"):
            stats = fit_zscore(panel, stop=split.train_end)
            z = apply_zscore(panel, stats)

        adjs = {}
        for kind in cfg.kinds:
            with stage(f"adjacency:{kind}"):
                if kind in cfg.adjacency_files:
                    path = cfg.resolve(cfg.adjacency_files[kind])
                    if not path.exists():
                        raise MissingFile(f"adjacency file not found: {path}")
                    adj = load_adjacency(path)
                    manifest.inputs.append(path)
                    if adj.node_ids != panel.node_ids:
                        raise SizeMismatch(f"{path}: node ids do not match the panel")
                else:
                    adj, extras = build_adjacency(kind, z, split.val_end, cfg, dist, stage_seed(cfg.seed, "sypi"))
                    if "discovery" in extras:
                        write_test_log(extras["discovery"].tests, out / "causal_tests.csv", panel.node_ids)
                        written.append(out / "causal_tests.csv")
                written += save_adjacency(adj, out / f"adjacency_{kind}")
                adjs[kind] = adj

        with stage("compare"):
            if len(adjs) >= 2:
                rows = compare_edge_counts(list(adjs.values()), list(adjs))
                write_rows(rows, out / "edge_counts.csv")
                written.append(out / "edge_counts.csv")
                summary["edge_counts"] = {k: matrix_edges(a) for k, a in adjs.items()}
            for kind, adj in adjs.items():
                write_aggregate(adj, out / f"aggregate_{kind}.csv")
                written.append(out / f"aggregate_{kind}.csv")
            if truth is not None and "causal" in adjs:
                summary["causal_recovery"] = edge_metrics(adjs["causal"], truth)

        with stage("windows"):
            sets = {
                name: stack_windows(make_windows(z, cfg.tau, cfg.tau_prime, split.region(name)))
                for name in ("train", "val", "test")
            }
            test_windows = make_windows(z, cfg.tau, cfg.tau_prime, split.region("test"))

        results, raw_results, preds = {}, {}, {}
        tcfg = TrainConfig.from_dict({**cfg.train, "seed": stage_seed(cfg.seed, "train")})
        for kind, adj in adjs.items():
            with stage(f"train:{kind}"):
                pair = laplacian_pair(adj)
                model = StgcnModel.init(
                    cfg.tau, cfg.tau_prime, panel.n_channels,
                    K=int(cfg.model.get("K", 3)), hidden=int(cfg.model.get("hidden", 16)), seed=tcfg.seed,
                )
                model, hist = train(model, sets["train"], sets["val"], pair, tcfg)
                model.save(out / f"model_{kind}.json")
                hist.write_csv(out / f"history_{kind}.csv")
                written += [out / f"model_{kind}.json", out / f"history_{kind}.csv"]
            with stage(f"evaluate:{kind}"):
                ev = evaluate(model, sets["test"], pair, stats, panel.target_channel)
                results[kind] = ev["normalized"]
                raw_results[kind] = ev["denormalized"]
                preds[kind] = ev["predictions"]

        with stage("report"):
            write_rows(metrics_table(results, cfg.tau_prime), out / "comparison.csv")
            write_rows(metrics_table(raw_results, cfg.tau_prime), out / "comparison_denormalized.csv")
            write_rows(
                metrics_long(results, cfg.tau_prime, "normalized") + metrics_long(raw_results, cfg.tau_prime, "denormalized"),
                out / "metrics_long.csv",
            )
            labels = panel.time_labels or tuple(str(t) for t in range(panel.n_steps))
            times = [labels[w.t_origin + 1] for w in test_windows]
            write_rows(_prediction_rows(times, panel.node_ids, sets["test"][1], preds), out / "predictions.csv")
            written += [out / n for n in ("comparison.csv", "comparison_denormalized.csv", "metrics_long.csv", "predictions.csv")]

    summary["metrics"] = results
    summary["metrics_denormalized"] = raw_results
    manifest.extra["summary"] = _jsonable({k: v for k, v in summary.items() if k != "metrics_denormalized"})
    manifest.write(out / "manifest.json")
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
