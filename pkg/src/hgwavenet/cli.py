"""Command line entry point: ``hgwavenet {train,eval,stats,gradcheck}``.

Output files (all under ``--out``):

* ``resolved-config.txt``: every config key, defaults filled in.
* ``trace.jsonl``: one record per epoch: seed, epoch, loss, ce, htc.
* ``checkpoint.npz`` (``checkpoint-seed<N>.npz`` when several seeds run).
* ``eval.jsonl``: per-snapshot records (kind, task, t, auc, ap, positives)
  followed by per-task averages, each tagged with the sweep point and seed.
* ``sweep.csv``: one row per sweep point, columns :data:`SWEEP_COLUMNS`.
* ``stats.jsonl``: nodes, edges, snapshots, delta_estimate.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .graph_data import EdgeParseError, graph_stats, load_dataset
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import (TrainingDivergedError, evaluate, grad_check, gradcheck_config, train)

log = logging.getLogger("hgwavenet")

SWEEP_COLUMNS = ["param", "value", "seeds",
                 "link_auc_mean", "link_auc_std", "link_ap_mean", "link_ap_std",
                 "new_link_auc_mean", "new_link_auc_std", "new_link_ap_mean", "new_link_ap_std"]

# flag -> config key
FLAGS = {
    "data": "data", "format": "format", "snapshots": "snapshots", "split": "split",
    "dim": "dim", "K": "K", "L": "L", "S": "S", "D": "D", "layers": "layers",
    "r": "r", "s": "s", "lambda": "lam", "lr": "lr", "epochs": "epochs", "patience": "patience",
    "seed_init": "seed_init", "seed_neg_train": "seed_neg_train", "seed_neg_eval": "seed_neg_eval",
    "no_hdgc": "no_hdgc", "no_hdcc": "no_hdcc", "euclidean": "euclidean",
    "padding": "padding", "task": "task", "seeds": "seeds", "step_per_snapshot": "step_per_snapshot",
}


class UsageError(Exception):
    pass


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--data", default=S)
    p.add_argument("--format", choices=["tsv", "snapshots"], default=S)
    p.add_argument("--snapshots", type=int, default=S, help="number of equal-width time buckets")
    p.add_argument("--split", default=S, help="train snapshots: index, fraction, or ratio like 8:3")
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--K", type=int, default=S, help="truncated diffusion step")
    p.add_argument("--L", type=int, default=S, help="HDGC layers")
    p.add_argument("--S", type=int, default=S, help="HDCC kernel size")
    p.add_argument("--D", type=int, default=S, help="dilation cycle length")
    p.add_argument("--layers", type=int, default=S, help="gated HDCC layers")
    p.add_argument("--r", type=float, default=S)
    p.add_argument("--s", type=float, default=S)
    p.add_argument("--lambda", dest="lambda", type=float, default=S, help="HTC weight")
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--patience", type=int, default=S, help="early-stop epochs (0 disables)")
    p.add_argument("--seed-init", dest="seed_init", type=int, default=S)
    p.add_argument("--seed-neg-train", dest="seed_neg_train", type=int, default=S)
    p.add_argument("--seed-neg-eval", dest="seed_neg_eval", type=int, default=S)
    p.add_argument("--seeds", default=S, help="comma list of init seeds, one run each")
    p.add_argument("--no-hdgc", dest="no_hdgc", action="store_true", default=S)
    p.add_argument("--no-hdcc", dest="no_hdcc", action="store_true", default=S)
    p.add_argument("--euclidean", action="store_true", default=S)
    p.add_argument("--step-per-snapshot", dest="step_per_snapshot", action="store_true", default=S)
    p.add_argument("--padding", choices=["origin", "random"], default=S)
    p.add_argument("--task", choices=["link", "new_link", "both"], default=S)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    ap = argparse.ArgumentParser(prog="hgwavenet", description="Hyperbolic temporal link prediction")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[parent], help="train and write checkpoint + trace")
    ev = sub.add_parser("eval", parents=[parent], help="evaluate a checkpoint, or train+evaluate per seed")
    ev.add_argument("--checkpoint")
    ev.add_argument("--sweep", action="append", default=[], metavar="PARAM=V1,V2,...")
    st = sub.add_parser("stats", parents=[parent], help="dataset statistics")
    st.add_argument("--quadruples", type=int, default=1_000_000)
    gc = sub.add_parser("gradcheck", parents=[parent], help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--corrupt", metavar="PRIMITIVE", help=argparse.SUPPRESS)
    return ap


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    overrides = {FLAGS[k]: v for k, v in vars(args).items() if k in FLAGS}
    if "split" in overrides:
        overrides["split"] = str(overrides["split"])
    if args.config:
        return RunConfig.from_file(args.config, **{k: _text(v) for k, v in overrides.items()})
    cfg = base or RunConfig()
    values = {k: _text(getattr(cfg, k)) for k in vars(cfg)}
    values.update({k: _text(v) for k, v in overrides.items()})
    return RunConfig.from_mapping(values)


def _text(v):
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def parse_sweep(items) -> list[tuple[str, list[str]]]:
    out = []
    keys = set(FLAGS.values())
    for item in items:
        if "=" not in item:
            raise UsageError(f"--sweep {item!r}: expected param=v1,v2")
        k, vals = item.split("=", 1)
        k = FLAGS.get(k.strip().lstrip("-").replace("-", "_"), k.strip())
        if k not in keys or k in ("seeds", "data"):
            raise UsageError(f"--sweep: cannot sweep {k!r}")
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise UsageError(f"--sweep {k}: no values")
        out.append((k, values))
    return out


def _load(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("data: --data is required")
    return load_dataset(cfg.data, cfg.format, cfg.snapshots, cfg.split)


def _write_jsonl(path: Path, records, mode="w"):
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _ckpt_name(seed, many):
    return f"checkpoint-seed{seed}.npz" if many else "checkpoint.npz"


def _train_one(graph, cfg, out: Path, many: bool, trace_fh):
    def cb(rec):
        trace_fh.write(json.dumps({"seed": cfg.seed_init, **rec}, sort_keys=True) + "\n")
        trace_fh.flush()

    try:
        res = train(graph, cfg, callback=cb)
    except TrainingDivergedError as e:
        if e.state is not None:
            from .model import HGWaveNet
            m = HGWaveNet(graph.num_nodes, cfg)
            m.load_state_dict(e.state)
            path = save_checkpoint(m, out / f"last-good-seed{cfg.seed_init}.npz")
            log.error("training diverged (%s); last good parameters in %s", e, path)
        raise
    save_checkpoint(res.model, out / _ckpt_name(cfg.seed_init, many))
    return res


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = _load(cfg)
    (out / "resolved-config.txt").write_text(cfg.to_text())
    many = len(cfg.seeds) > 1
    with open(out / "trace.jsonl", "w") as fh:
        for seed in cfg.seeds:
            run_cfg = cfg.replace(seed_init=seed) if many else cfg
            res = _train_one(graph, run_cfg, out, many, fh)
            log.info("seed %d: %d epochs, best loss %.6f at epoch %s", seed, len(res.trace),
                     res.best_loss or float("nan"), res.best_epoch)
    return 0


def _summary_row(param, value, reports) -> dict:
    row = {"param": param, "value": value, "seeds": ";".join(str(r.seed_init) for r in reports)}
    for task in ("link", "new_link"):
        for metric in ("auc", "ap"):
            vals = [r.averages[task][metric] for r in reports if task in r.averages]
            row[f"{task}_{metric}_mean"] = float(np.mean(vals)) if vals else ""
            row[f"{task}_{metric}_std"] = float(np.std(vals)) if vals else ""
    return row


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = parse_sweep(args.sweep)
    if args.checkpoint and sweep:
        raise UsageError("sweep: --sweep trains one model per point and cannot reuse --checkpoint")
    graph = _load(cfg)
    (out / "resolved-config.txt").write_text(cfg.to_text())
    rows, records = [], []
    if args.checkpoint:
        try:
            model = load_checkpoint(args.checkpoint, cfg)
        except CheckpointError as e:
            raise UsageError(f"checkpoint: {e}") from None
        if model.num_nodes != graph.num_nodes:
            raise UsageError(f"checkpoint: {model.num_nodes} nodes, dataset has {graph.num_nodes}")
        rep = evaluate(model, graph, cfg.replace(seed_init=model.config.seed_init))
        records += [{"param": "", "value": "", **r} for r in rep.records()]
        rows.append(_summary_row("", "", [rep]))
    else:
        points = [("", "", cfg)]
        if sweep:
            points = [(k, v, cfg.replace(**{k: getattr(RunConfig.from_mapping({k: v}), k)}))
                      for k, vals in sweep for v in vals]
        with open(out / "trace.jsonl", "w") as trace_fh:
            for param, value, pcfg in points:
                reports = []
                for seed in pcfg.seeds:
                    scfg = pcfg.replace(seed_init=seed)
                    res = train(graph, scfg, callback=lambda rec, p=param, v=value, s=seed: trace_fh.write(
                        json.dumps({"param": p, "value": v, "seed": s, **rec}, sort_keys=True) + "\n"))
                    rep = evaluate(res.model, graph, scfg)
                    reports.append(rep)
                    records += [{"param": param, "value": value, **r} for r in rep.records()]
                    log.info("%s=%s seed %d: %s", param or "-", value or "-", seed,
                             {k: round(m["auc"], 4) for k, m in rep.averages.items()})
                rows.append(_summary_row(param, value, reports))
    _write_jsonl(out / "eval.jsonl", records)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_stats(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = _load(cfg)
    rec = graph_stats(graph, args.quadruples, seed=cfg.seed_init)
    _write_jsonl(out / "stats.jsonl", [rec])
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    base = gradcheck_config()
    cfg = resolve_config(args, base)
    rep = grad_check(cfg, tolerance=args.tolerance, corrupt=args.corrupt)
    for group, err in sorted(rep.errors.items()):
        flag = "ok" if err < rep.tolerance else "FAIL"
        print(f"{group:16s} {err:.3e} {flag}")
    print(f"max relative error {rep.max_error:.3e} ({rep.seconds:.1f}s): {'PASS' if rep.ok else 'FAIL'}")
    if not rep.ok:
        print("offending groups: " + ", ".join(rep.failures), file=sys.stderr)
    return 0 if rep.ok else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "stats": cmd_stats, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        parser.error(str(e))
    except (EdgeParseError, FileNotFoundError, ValueError) as e:
        print(f"hgwavenet: error: {e}", file=sys.stderr)
        return 1
    except TrainingDivergedError as e:
        print(f"hgwavenet: training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
