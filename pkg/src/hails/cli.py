"""Command-line entry point.

Subcommands: synth-gen, classify, pretrain, train, forecast, evaluate.
Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from hails import __version__
from hails.distributions import ForecastDist, forecast_quantile
from hails.forecaster import HailsModel, ModelConfig, forward_all, load_checkpoint, save_checkpoint
from hails.hierarchy import (
    build_hierarchy,
    compute_phi,
    normalize_panel,
    read_edges_csv,
    read_panel_csv,
    write_edges_csv,
    write_panel_csv,
    denormalize_forecasts,
)
from hails.metrics import build_report
from hails.sparsity import classify_nodes
from hails.synth import SynthConfig, generate
from hails.training import NumericalError, TrainConfig, dce_metric, pretrain, train
import dataclasses as _dc
import hails.hierarchy as hierarchy_mod

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _sha256(path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: list):
    manifest = {
        "tool_version": __version__,
        "command": command,
        "seed": getattr(args, "seed", None),
        "config_path": getattr(args, "config", None),
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def load_train_config(args) -> TrainConfig:
    """Config file values (JSON mirroring TrainConfig) overridden by CLI flags."""
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for f in fields:
        flag = getattr(args, f, None)
        if flag is not None:
            values[f] = flag
    if "seed" not in values or values["seed"] is None:
        values["seed"] = 0
    return TrainConfig(**values)


def _unit_phi(h):
    phi = {(i, j): 1.0 for i in h.internal_nodes for j in h.children[i]}
    return _dc.replace(h, phi=phi)


def _load_data(args, phi_mode: str = "leaf_proportional"):
    edges = read_edges_csv(args.edges)
    h = compute_phi(build_hierarchy(edges), phi_mode)
    panel = read_panel_csv(args.panel)
    if sorted(panel.nodes) != h.nodes:
        raise ValueError("panel nodes do not match hierarchy nodes")
    return edges, h, panel


def cmd_synth_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(
        branching=[int(b) for b in args.branching.split(",")],
        T=args.T,
        base_rate=args.base_rate,
        seasonal_amp=args.seasonal_amp,
        period=args.period,
        sparsity_scale=args.sparsity_scale,
        noise=args.noise,
        seed=args.seed or 0,
    )
    h, panel = generate(cfg)
    edges = [(h.parent[c], c) for c in sorted(h.parent)]
    write_edges_csv(out / "edges.csv", edges)
    write_panel_csv(out / "panel.csv", panel)
    write_manifest(out, "synth-gen", args, [])
    print(f"wrote {out / 'edges.csv'} and {out / 'panel.csv'} ({panel.n_nodes} nodes, T={panel.n_steps})")
    return EXIT_OK


def cmd_classify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, h, panel = _load_data(args)
    labels = classify_nodes(panel, h, alpha=args.alpha)
    rows = [
        (n, labels.p_values[n], "sparse" if labels.is_sparse(n) else "dense")
        for n in panel.nodes
    ]
    pd.DataFrame(rows, columns=["node", "p_value", "label"]).to_csv(
        out / "labels.csv", index=False
    )
    write_manifest(out, "classify", args, [args.edges, args.panel])
    print(f"wrote {out / 'labels.csv'} ({len(labels.sparse_set)} sparse / {panel.n_nodes} nodes)")
    return EXIT_OK


def _labels_from_csv(path, alpha):
    df = pd.read_csv(path)
    from hails.sparsity import SparsityLabels

    return SparsityLabels(
        sparse_set={int(n) for n, l in zip(df["node"], df["label"]) if l == "sparse"},
        p_values={int(n): float(p) for n, p in zip(df["node"], df["p_value"])},
        alpha=alpha,
    )


def _prepare_model(args, resume=None):
    edges, h, panel = _load_data(args, args.phi_mode)
    cfg = load_train_config(args)
    if resume:
        model, edges_ck, extra = load_checkpoint(resume)
        if [list(e) for e in edges_ck] != [list(e) for e in edges]:
            raise ValueError("checkpoint hierarchy does not match the edges file")
        labels = model.labels
        epoch_offset = extra.get("epochs_run", 0)
    else:
        if args.labels:
            labels = _labels_from_csv(args.labels, alpha=args.alpha)
        else:
            labels = classify_nodes(panel, h, alpha=args.alpha)
        mcfg = ModelConfig(
            horizon=args.horizon,
            window=args.window,
            hidden_size=args.hidden,
            refine_c=args.refine_c,
        )
        model = HailsModel(panel.nodes, labels, mcfg, seed=cfg.seed)
        epoch_offset = 0
    norm = normalize_panel(panel, h)
    return edges, h, norm, cfg, model, epoch_offset


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges, h, norm, cfg, model, _ = _prepare_model(args)
    pretrain(model, norm.values, cfg)
    save_checkpoint(out / "checkpoint.npz", model, edges, extra={"stage": "pretrained", "epochs_run": 0})
    write_manifest(out, "pretrain", args, [args.edges, args.panel, args.labels, args.config])
    print(f"wrote {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges, h, norm, cfg, model, epoch_offset = _prepare_model(args, resume=args.resume)
    if not args.resume and not args.skip_pretrain:
        pretrain(model, norm.values, cfg)
    result = train(model, norm.values, h, cfg)
    rows = [{**r, "epoch": r["epoch"] + epoch_offset} for r in result.log]
    pd.DataFrame(rows, columns=["epoch", "ll", "dcrs", "total", "val_total", "dce"]).to_csv(
        out / "training_log.csv", index=False
    )
    save_checkpoint(
        out / "checkpoint.npz",
        model,
        edges,
        extra={
            "stage": "trained",
            "epochs_run": epoch_offset + len(result.log),
            "best_val": result.best_val,
            "base_update_steps": result.base_update_steps,
            "refine_update_steps": result.refine_update_steps,
        },
    )
    write_manifest(out, "train", args, [args.edges, args.panel, args.labels, args.config])
    print(
        f"trained {len(result.log)} epochs (best val {result.best_val:.6f} at epoch "
        f"{result.best_epoch + epoch_offset}); wrote {out / 'checkpoint.npz'}"
    )
    return EXIT_OK


def cmd_forecast(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, edges, _ = load_checkpoint(args.checkpoint)
    if args.horizon != model.cfg.horizon:
        raise ValueError(
            f"horizon {args.horizon} does not match checkpoint head width {model.cfg.horizon}"
        )
    h = build_hierarchy(edges)
    panel = read_panel_csv(args.panel)
    if sorted(panel.nodes) != h.nodes:
        raise ValueError("panel nodes do not match checkpoint hierarchy")
    norm = normalize_panel(panel, h)
    dists = forward_all(model, norm.values)
    raw = denormalize_forecasts(dists, h)
    rows = []
    for node in panel.nodes:
        for step, d in enumerate(raw[node]):
            qs = [forecast_quantile(d, q) for q in QUANTILES]
            if d.is_gaussian:
                tag, param, scale = "gaussian", d.gaussian.sigma, 1.0
            else:
                tag, param, scale = "poisson", d.poisson.lam, d.poisson.scale
            rows.append((node, step, tag, d.mean, param, scale, *qs))
    cols = ["node", "step", "tag", "mean", "sigma_or_lambda", "scale"] + [
        f"q{q:g}".replace("0.", "") for q in QUANTILES
    ]
    pd.DataFrame(rows, columns=cols).to_csv(out / "forecasts.csv", index=False)
    write_manifest(out, "forecast", args, [args.checkpoint, args.panel])
    print(f"wrote {out / 'forecasts.csv'} ({len(rows)} rows)")
    return EXIT_OK


def read_forecasts_csv(path) -> dict[int, list[ForecastDist]]:
    df = pd.read_csv(path)
    dists: dict[int, list[ForecastDist]] = {}
    for node, group in df.groupby("node"):
        group = group.sort_values("step")
        per_step = []
        for _, row in group.iterrows():
            if row["tag"] == "gaussian":
                per_step.append(ForecastDist.gaussian_dist(row["mean"], row["sigma_or_lambda"]))
            else:
                per_step.append(
                    ForecastDist.poisson_dist(row["sigma_or_lambda"], scale=row["scale"])
                )
        dists[int(node)] = per_step
    return dists


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = read_edges_csv(args.edges)
    h = build_hierarchy(edges)
    panel = read_panel_csv(args.panel)
    dists = read_forecasts_csv(args.forecasts)
    if sorted(dists) != panel.nodes or sorted(dists) != h.nodes:
        raise ValueError("forecasts, panel and hierarchy node sets do not align")
    horizon = len(next(iter(dists.values())))
    if any(len(v) != horizon for v in dists.values()):
        raise ValueError("forecast steps differ across nodes")
    if panel.n_steps <= horizon + 1:
        raise ValueError("truth panel too short for the forecast horizon")
    train_vals = panel.values[:, :-horizon]
    truth = panel.values[:, -horizon:]
    # Raw scale is plain-additive, so DCE uses unit weights.
    dce = dce_metric(dists, _unit_phi(h))
    report = build_report(h, panel.nodes, train_vals, truth, dists, dce=dce)
    (out / "report.json").write_text(report.to_json())
    report.to_flat_csv(out / "report.csv")
    write_manifest(out, "evaluate", args, [args.edges, args.panel, args.forecasts])
    print(f"wrote {out / 'report.json'} (total: {report.total})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hails", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config mirroring TrainConfig fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("synth-gen", help="generate a synthetic hierarchical panel")
    add_common(p)
    p.add_argument("--branching", default="3,3", help="comma-separated children per level")
    p.add_argument("--T", type=int, default=120)
    p.add_argument("--base-rate", type=float, default=5.0)
    p.add_argument("--seasonal-amp", type=float, default=0.5)
    p.add_argument("--period", type=int, default=12)
    p.add_argument("--sparsity-scale", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("classify", help="sparse/dense classification per node")
    add_common(p)
    p.add_argument("--edges", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_classify)

    def add_train_args(p):
        add_common(p)
        p.add_argument("--edges", required=True)
        p.add_argument("--panel", required=True)
        p.add_argument("--labels", default=None, help="labels CSV; computed inline if absent")
        p.add_argument("--alpha", type=float, default=0.1)
        p.add_argument("--horizon", type=int, default=6)
        p.add_argument("--window", type=int, default=24)
        p.add_argument("--hidden", type=int, default=60)
        p.add_argument("--refine-c", type=float, default=2.0)
        p.add_argument("--phi-mode", default="leaf_proportional",
                       choices=["leaf_proportional", "paper_uniform"])
        for f in dataclasses.fields(TrainConfig):
            if f.name == "seed":
                continue
            p.add_argument(
                f"--{f.name.replace('_', '-')}", type=type(f.default), default=None
            )

    p = sub.add_parser("pretrain", help="pretrain per-node encoders only")
    add_train_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="full training run")
    add_train_args(p)
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="emit forecasts from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score forecasts against a truth panel")
    add_common(p)
    p.add_argument("--forecasts", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--edges", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("HAILS_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
