"""Command-line entry point: ``causal-adj <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baseline_adjacency import (
    CorrelationConfig,
    DistanceConfig,
    correlation_adjacency,
    correlation_matrix,
    distance_adjacency,
    load_adjacency,
    load_distance_matrix,
    save_adjacency,
)
from .errors import BadInput, CausalAdjError, MissingFile
from .kernel_cit import CitConfig, kcit
from .panel import NormStats, apply_zscore, fit_zscore, load_panel, make_windows, stack_windows, write_panel
from .pipeline import (
    PipelineConfig,
    RunManifest,
    StageError,
    compare_edge_counts,
    default_synthetic_config,
    matrix_edges,
    metrics_table,
    parse_split,
    run_pipeline,
    write_aggregate,
    write_rows,
)
from .stgcn import StgcnModel, TrainConfig, evaluate, laplacian_pair, train
from .synth import SynthSpec, default_spec, generate, save_truth
from .sypi import SypiConfig, learn_causal_graph, write_test_log

logger = logging.getLogger("causal_adj")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT = 0, 1, 2


def _read_json(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"config not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadInput(f"{path}: invalid JSON ({exc})") from None


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- subcommands -----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    m = RunManifest("gen-synth", seed=args.seed)
    if args.spec:
        body = _read_json(args.spec)
        m.config_paths.append(args.spec)
        if args.seed is not None:
            body["seed"] = args.seed
        spec = SynthSpec.from_dict(body)
    else:
        spec = default_spec(seed=args.seed or 0)
    panel, truth = generate(spec)
    Path(args.out_panel).parent.mkdir(parents=True, exist_ok=True)
    m.outputs += write_panel(panel, args.out_panel)
    save_truth(truth, args.out_truth)
    m.outputs.append(args.out_truth)
    if args.out_distance and spec.coords:
        _write_matrix(spec.distance_matrix(), panel.node_ids, args.out_distance)
        m.outputs.append(args.out_distance)
    if args.out_spec:
        Path(args.out_spec).write_text(json.dumps(spec.to_dict(), indent=2))
        m.outputs.append(args.out_spec)
    m.write(_manifest_path(args.out_panel))
    return EXIT_OK


def _write_matrix(mat, ids, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *ids])
        for nid, row in zip(ids, mat):
            w.writerow([nid, *(repr(float(v)) for v in row)])


def _fit_stop(panel, args):
    if getattr(args, "fit_steps", None) is None:
        return panel.n_steps
    if not 0 < args.fit_steps <= panel.n_steps:
        raise BadInput(f"--fit-steps must lie in [1, {panel.n_steps}]")
    return args.fit_steps


def cmd_build_adjacency(args) -> int:
    m = RunManifest("build-adjacency", seed=args.seed, inputs=[args.panel])
    cfg = _read_json(args.config)
    if args.config:
        m.config_paths.append(args.config)
    panel = load_panel(args.panel)
    stop = _fit_stop(panel, args)
    if args.kind == "distance":
        if not args.distance:
            raise BadInput("--kind distance requires --distance")
        dist = load_distance_matrix(args.distance, panel.node_ids)
        m.inputs.append(args.distance)
        adj = distance_adjacency(dist, DistanceConfig(**cfg), panel.node_ids)
    elif args.kind == "correlation":
        adj = correlation_adjacency(correlation_matrix(panel, stop=stop), stop, CorrelationConfig(**cfg), panel.node_ids)
    else:
        scfg = SypiConfig.from_dict({**cfg, "seed": args.seed if args.seed is not None else cfg.get("seed", 0)})
        adj = learn_causal_graph(panel.slice_time(0, stop), scfg).adjacency
    m.outputs += save_adjacency(adj, args.out)
    m.extra["edge_count"] = adj.edge_count
    m.write(_manifest_path(Path(args.out).with_suffix(".csv")))
    print(f"{adj.kind}: {adj.edge_count} {'directed' if adj.directed else 'undirected'} edges ({matrix_edges(adj)} matrix entries)")
    return EXIT_OK


def cmd_learn_causal(args) -> int:
    m = RunManifest("learn-causal", seed=args.seed, inputs=[args.panel])
    cfg = _read_json(args.config)
    if args.config:
        m.config_paths.append(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    scfg = SypiConfig.from_dict(cfg)
    panel = load_panel(args.panel)
    res = learn_causal_graph(panel.slice_time(0, _fit_stop(panel, args)), scfg)
    m.outputs += save_adjacency(res.adjacency, args.out_adjacency)
    if args.log_pvalues:
        write_test_log(res.tests, args.log_pvalues, panel.node_ids)
        m.outputs.append(args.log_pvalues)
    m.extra.update(edge_count=res.adjacency.edge_count, cit_calls=res.n_cit_calls)
    m.write(_manifest_path(Path(args.out_adjacency).with_suffix(".csv")))
    print(f"causal: {res.adjacency.edge_count} edges from {res.n_cit_calls} CI tests")
    return EXIT_OK


def _prepare(panel_path, split_text, val_weeks, tau, tau_prime):
    panel = load_panel(panel_path)
    split = parse_split(split_text, panel.n_steps, val_weeks)
    stats = fit_zscore(panel, stop=split.train_end)
    z = apply_zscore(panel, stats)
    sets = {name: stack_windows(make_windows(z, tau, tau_prime, split.region(name))) for name in ("train", "val", "test")}
    return panel, stats, sets


def cmd_train(args) -> int:
    m = RunManifest("train", seed=args.seed, inputs=[args.panel, args.adjacency])
    body = _read_json(args.config)
    if args.config:
        m.config_paths.append(args.config)
    seed = args.seed if args.seed is not None else body.get("seed", 0)
    tcfg = TrainConfig.from_dict({**body, "seed": seed})
    panel, stats, sets = _prepare(args.panel, args.split, args.val_weeks, args.tau, args.tau_prime)
    adj = load_adjacency(args.adjacency)
    if adj.node_ids != panel.node_ids:
        raise BadInput("adjacency node ids do not match the panel")
    pair = laplacian_pair(adj)
    model = StgcnModel.init(
        args.tau, args.tau_prime, panel.n_channels, K=int(body.get("K", 3)), hidden=int(body.get("hidden", 16)), seed=seed
    )
    model, hist = train(model, sets["train"], sets["val"], pair, tcfg)
    dump = model.to_dict()
    # the evaluate subcommand needs the training-region normalization
    dump["normalization"] = {"mean": stats.mean.tolist(), "std": stats.std.tolist(), "target_channel": panel.target_channel}
    dump["adjacency_kind"] = adj.kind
    Path(args.out_model).write_text(json.dumps(dump))
    m.outputs.append(args.out_model)
    if args.history:
        hist.write_csv(args.history)
        m.outputs.append(args.history)
    m.extra.update(best_epoch=hist.best_epoch, epochs=len(hist.epochs))
    m.write(_manifest_path(args.out_model))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if len(args.model) != len(args.adjacency):
        raise BadInput("give one --adjacency per --model")
    m = RunManifest("evaluate", inputs=[args.panel, *args.model, *args.adjacency])
    results, raw = {}, {}
    for model_path, adj_path in zip(args.model, args.adjacency):
        body = _read_json(model_path)
        model = StgcnModel.from_dict(body)
        panel, _, sets = _prepare(args.panel, args.split, args.val_weeks, model.tau, model.tau_prime)
        norm = body.get("normalization")
        stats = None
        if norm:
            stats = NormStats(np.asarray(norm["mean"]), np.asarray(norm["std"]))
        adj = load_adjacency(adj_path)
        kind = adj.kind if adj.kind not in results else f"{adj.kind}:{Path(adj_path).stem}"
        ev = evaluate(model, sets["test"], laplacian_pair(adj), stats, panel.target_channel)
        results[kind] = ev["normalized"]
        raw[kind] = ev["denormalized"]
    tau_prime = next(iter(results.values())).__len__() - 1
    rows = metrics_table(results, tau_prime)
    write_rows(rows, args.out)
    m.outputs.append(args.out)
    if args.out_denormalized and all(v is not None for v in raw.values()):
        write_rows(metrics_table(raw, tau_prime), args.out_denormalized)
        m.outputs.append(args.out_denormalized)
    m.write(_manifest_path(args.out))
    for row in rows:
        print(",".join(str(v) for v in row.values()))
    return EXIT_OK


def cmd_compare(args) -> int:
    adjs = [load_adjacency(p) for p in args.adjacency]
    labels = [Path(p).name.split(".")[0] if args.label_by_file else a.kind for p, a in zip(args.adjacency, adjs)]
    rows = compare_edge_counts(adjs, labels)
    write_rows(rows, args.out)
    RunManifest("compare", inputs=list(args.adjacency), outputs=[args.out]).write(_manifest_path(args.out))
    for r in rows:
        print(f"{r['kind']} vs {r['reference']}: {r['edges']} vs {r['reference_edges']} edges, reduction {r['reduction_pct']:.2f}%")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    adj = load_adjacency(args.adjacency)
    write_aggregate(adj, args.out)
    RunManifest("aggregate", inputs=[args.adjacency], outputs=[args.out]).write(_manifest_path(args.out))
    return EXIT_OK


def cmd_cit_selftest(args) -> int:
    """Calibration run on i.i.d. normal (x, y, z); writes ``trial,statistic,p``."""
    cfg = CitConfig.from_dict(_read_json(args.config))
    seed = args.seed if args.seed is not None else 0
    rows, rejected = [], 0
    for trial in range(args.trials):
        rng = np.random.default_rng([seed, trial])
        x, y, z = rng.standard_normal((3, args.n))
        r = kcit(x, y, z if args.conditional else None, cfg, seed=rng)
        rejected += r.p_value < args.alpha
        rows.append({"trial": trial, "statistic": repr(r.statistic), "p": repr(r.p_value)})
    write_rows(rows, args.out)
    RunManifest("cit-selftest", seed=seed, outputs=[args.out], extra={"rejection_rate": rejected / args.trials}).write(
        _manifest_path(args.out)
    )
    print(f"rejection rate at alpha={args.alpha}: {rejected / args.trials:.4f} over {args.trials} trials")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = default_synthetic_config(args.seed or 0)
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.synthetic is not None and args.config is None:
            cfg.synthetic = {**cfg.synthetic, "seed": args.seed}
    m = RunManifest("pipeline", seed=cfg.seed, config_paths=[args.config] if args.config else [])
    summary = run_pipeline(cfg, args.out_dir, m)
    for kind, met in summary["metrics"].items():
        print(f"{kind}: avg RMSE {met['Avg']['rmse']:.4f}  MAE {met['Avg']['mae']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-adj", description="Causal adjacency discovery and graph forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    g = sub.add_parser("gen-synth", help="simulate a synthetic panel with known causal graph")
    g.add_argument("--spec", help="SynthSpec JSON; omitted -> default benchmark spec")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-panel", required=True)
    g.add_argument("--out-truth", required=True)
    g.add_argument("--out-distance", help="also write the node distance matrix")
    g.add_argument("--out-spec", help="also write the resolved spec JSON")
    g.set_defaults(func=cmd_gen_synth)

    b = sub.add_parser("build-adjacency", help="build a distance, correlation or causal adjacency")
    b.add_argument("--kind", required=True, choices=["distance", "correlation", "causal"])
    b.add_argument("--panel", required=True)
    b.add_argument("--distance", help="distance matrix CSV (kind=distance)")
    b.add_argument("--config", help="JSON with the kind's settings")
    b.add_argument("--fit-steps", type=int, help="use only the first N steps")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="output stem; writes .csv, .edges.json, .meta.json")
    b.set_defaults(func=cmd_build_adjacency)

    lc = sub.add_parser("learn-causal", help="run causal parent selection for every node")
    lc.add_argument("--panel", required=True)
    lc.add_argument("--config", help="SypiConfig JSON")
    lc.add_argument("--fit-steps", type=int)
    lc.add_argument("--seed", type=int)
    lc.add_argument("--out-adjacency", required=True)
    lc.add_argument("--log-pvalues", help="CSV of every CI test")
    lc.set_defaults(func=cmd_learn_causal)

    def window_args(sp, with_tau=True):
        if with_tau:
            sp.add_argument("--tau", type=int, default=4)
            sp.add_argument("--tau-prime", type=int, default=4)
        sp.add_argument("--split", default="74:16", help="TRAIN:TEST steps (default 74:16)")
        sp.add_argument("--val-weeks", type=int, default=8, help="validation tail of the training part")

    t = sub.add_parser("train", help="train the graph forecaster on one adjacency")
    t.add_argument("--panel", required=True)
    t.add_argument("--adjacency", required=True)
    t.add_argument("--config", help="TrainConfig JSON (may also hold K, hidden)")
    t.add_argument("--seed", type=int)
    window_args(t)
    t.add_argument("--out-model", required=True)
    t.add_argument("--history")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-horizon RMSE/MAE table for trained models")
    e.add_argument("--panel", required=True)
    e.add_argument("--model", action="append", required=True, help="model JSON (repeatable)")
    e.add_argument("--adjacency", action="append", required=True, help="adjacency for each --model, in order")
    window_args(e, with_tau=False)
    e.add_argument("--out", required=True)
    e.add_argument("--out-denormalized")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="edge counts and percent reductions")
    c.add_argument("--adjacency", action="append", required=True, help="adjacency file (repeat >= 2 times)")
    c.add_argument("--label-by-file", action="store_true", help="label rows by file name instead of kind")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("aggregate", help="row/column sums of an adjacency")
    a.add_argument("--adjacency", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("cit-selftest", help="calibration trials of the kernel CI test")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--unconditional", dest="conditional", action="store_false")
    s.add_argument("--config", help="CitConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cit_selftest)

    pl = sub.add_parser("pipeline", help="end-to-end run; default is the synthetic benchmark")
    pl.add_argument("--config", help="pipeline JSON")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out-dir", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        code = EXIT_BAD_INPUT if isinstance(exc.cause, (BadInput, ValueError)) else EXIT_INTERNAL
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return code
    except (BadInput, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except CausalAdjError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
