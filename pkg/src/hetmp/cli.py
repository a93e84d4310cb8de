"""The ``hetmp`` command line."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from . import kernels
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig, coerce_overrides, load_config, parse_entries
from .data import (MAG_RELATIONS, PRESETS, GraphFormatError, best_epoch_record, convert_ogb_mag,
                   emit_report, generate_synthetic, load_graph, read_runs, save_graph, summarize,
                   write_runs)
from .graph import HeteroSchema, SchemaError, add_reverse_relations, reverse_schema
from .layers import build_model_config, param_count
from .train import evaluate, fit, init_state

log = logging.getLogger("hetmp")

# node counts of the full academic graph; only paper nodes carry features
MAG_COUNTS = {"paper": 736_389, "author": 1_134_649, "field": 59_965, "institution": 8_740}
MAG_DIMS = dict(in_dim=128, hidden=64, num_classes=349)

ABLATION_ROWS = (
    ("R-GCN", dict(sim_attn=False, sim=False, norm=False, ft=False, flag=False)),
    ("R-GCN(1+)", dict(sim_attn=False, sim=False, norm=True, ft=False, flag=False)),
    ("R-GCN(2+)", dict(sim_attn=False, sim=False, norm=True, ft=True, flag=False)),
    ("R-GCN(3+)", dict(sim_attn=False, sim=False, norm=True, ft=True, flag=True)),
    ("R-GSN(1+)", dict(sim_attn=True, sim=True, norm=True, ft=False, flag=False)),
    ("R-GSN(2+)", dict(sim_attn=True, sim=True, norm=True, ft=True, flag=False)),
    ("R-GSN(3+)", dict(sim_attn=True, sim=True, norm=True, ft=True, flag=True)),
)
# each pair should not lose validation accuracy going left to right
LADDER = (
    ("R-GCN", "R-GCN(1+)"), ("R-GCN(1+)", "R-GCN(2+)"), ("R-GCN(2+)", "R-GCN(3+)"),
    ("R-GSN(1+)", "R-GSN(2+)"), ("R-GSN(2+)", "R-GSN(3+)"),
    ("R-GCN(1+)", "R-GSN(1+)"), ("R-GCN(2+)", "R-GSN(2+)"), ("R-GCN(3+)", "R-GSN(3+)"),
)

_USER_ERRORS = (ConfigError, CheckpointError, GraphFormatError, SchemaError, ValueError,
                OSError, KeyError)


# ------------------------------------------------------------------ helpers


def load_dataset(run: RunConfig):
    if run.data.startswith("synthetic:"):
        name = run.data.split(":", 1)[1]
        if name not in PRESETS:
            raise ConfigError(f"unknown synthetic preset {name!r}; choose from {sorted(PRESETS)}")
        graph = generate_synthetic(replace(PRESETS[name](), seed=run.synth_seed))
    else:
        graph = load_graph(run.data)
    return add_reverse_relations(graph) if run.reverse_relations else graph


def mag_schema() -> HeteroSchema:
    return reverse_schema(HeteroSchema(list(MAG_COUNTS), list(MAG_RELATIONS)))


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    simple = {"seed": args.seed, "out": args.out, "fanout": args.fanout,
              "flag_steps": args.flag_steps, "flag_alpha": args.flag_alpha,
              "data": args.data, "max_epochs": args.max_epochs}
    out.update({k: v for k, v in simple.items() if v is not None})
    if args.no_norm:
        out["norm"] = False
    if args.no_ft:
        out["ft"] = False
    if args.no_flag:
        out["flag"] = False
    if args.intra is not None:
        out["sim_attn"] = args.intra == "simattn"
    if args.inter is not None:
        out["sim"] = args.inter == "sim"
    return out


def _run_config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _publish(staging: Path, out: Path, force: bool) -> None:
    if out.exists():
        if not force:
            raise ConfigError(f"{out} already exists (pass --force to replace it)")
        shutil.rmtree(out)
    os.replace(staging, out)


def _staging_dir(out: Path, force: bool) -> Path:
    if out.exists() and not force:
        raise ConfigError(f"{out} already exists (pass --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))


def train_run(run: RunConfig, graph, directory: Path | None = None, state=None):
    """Train one configuration; optionally stream artifacts into ``directory``."""
    model_cfg = run.model_config(graph.feature_dim(graph.labeled_type()), graph.num_classes)
    cfg = run.train_config()
    if state is None:
        state = init_state(graph, model_cfg, cfg)
    # where the run is written is not part of what was trained
    state.config_text = run.to_text(skip=("out",))
    hist_lines = [json.dumps(r, sort_keys=True) for r in state.meta.get("history", [])]

    def on_epoch(st, record):
        if directory is None:
            return
        hist_lines.append(json.dumps(record, sort_keys=True))
        _write_atomic(directory / "history.jsonl", ("\n".join(hist_lines) + "\n").encode())
        checkpoint_save(st, directory / "checkpoint.hgck.tmp")
        os.replace(directory / "checkpoint.hgck.tmp", directory / "checkpoint.hgck")

    state, history = fit(graph, model_cfg, cfg, state=state, on_epoch=on_epoch)
    return state, history, model_cfg


def _counts(run: RunConfig, graph) -> dict:
    model_cfg = run.model_config(graph.feature_dim(graph.labeled_type()), graph.num_classes)
    dim = model_cfg.in_dim
    emb = {t: (graph.node_counts[t], dim) for t in graph.schema.node_types if t not in graph.features}
    return param_count(model_cfg, graph.schema, emb)


def _mag_counts(knobs: dict, layout: str) -> dict:
    cfg = build_model_config(MAG_DIMS["in_dim"], MAG_DIMS["num_classes"], MAG_DIMS["hidden"], 2,
                             sim_attn=knobs["sim_attn"], sim=knobs["sim"], norm=knobs["norm"],
                             layout=layout)
    emb = {t: (n, MAG_DIMS["in_dim"]) for t, n in MAG_COUNTS.items() if t != "paper"}
    return param_count(cfg, mag_schema(), emb)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = _run_config(args)
    state = None
    if args.resume:
        ck = Path(args.resume)
        state = checkpoint_load(ck / "checkpoint.hgck" if ck.is_dir() else ck)
        saved = parse_entries(state.config_text, str(ck))
        saved.update(coerce_overrides(_overrides(args)))
        run = RunConfig(**saved)
    graph = load_dataset(run)
    out = Path(run.out)
    staging = _staging_dir(out, args.force)
    try:
        (staging / "config.txt").write_text(run.to_text())
        state, history, model_cfg = train_run(run, graph, staging, state)
        if not history:
            checkpoint_save(state, staging / "checkpoint.hgck")
            (staging / "history.jsonl").write_text("")
        best = best_epoch_record(history) if history else None
        report = {
            "backend": kernels.BACKEND,
            "best": best,
            "epochs_run": len(history),
            "knobs": run.knobs,
            "params": _counts(run, graph),
            "seed": run.seed,
            "train_acc": evaluate(state, graph, model_cfg, "train"),
        }
        (staging / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _publish(staging, out, args.force)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if best is not None:
        print(f"best epoch {best['epoch']}: valid {best['valid_acc']:.4f} test {best['test_acc']:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    ck = Path(args.checkpoint)
    state = checkpoint_load(ck / "checkpoint.hgck" if ck.is_dir() else ck)
    values = parse_entries(state.config_text, str(ck))
    if args.data:
        values["data"] = args.data
    run = RunConfig(**values)
    graph = load_dataset(run)
    if state.best_snapshot is not None:
        state.restore(state.best_snapshot)
    model_cfg = run.model_config(graph.feature_dim(graph.labeled_type()), graph.num_classes)
    result = {s: evaluate(state, graph, model_cfg, s) for s in args.split}
    print(json.dumps(result, sort_keys=True))
    return 0


def ladder_checks(rows: list[dict]) -> list[dict]:
    means = {r["name"]: r["valid_mean"] for r in rows}
    checks = []
    for lo, hi in LADDER:
        if lo in means and hi in means:
            delta = means[hi] - means[lo]
            checks.append({"from": lo, "to": hi, "delta": delta, "ok": delta >= 0})
    return checks


def ablation_report(runs: list[dict], out: Path, layout: str) -> dict:
    rows = summarize(runs)
    checks = ladder_checks(rows)
    violations = [f"{c['from']} -> {c['to']}" for c in checks if not c["ok"]]
    mag = {name: _mag_counts(knobs, layout)["total"] for name, knobs in ABLATION_ROWS}
    extra = {
        "ladder": checks,
        "monotone": not violations,
        "violations": violations,
        "note": ("synthetic effect sizes differ from the full-scale benchmark; violating rungs are "
                 "listed rather than hidden") if violations else "",
        "params_mag_dims": mag,
    }
    report = emit_report(runs, out / "report.json", extra)
    with open(out / "accuracies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "seed", "best_epoch", "valid_acc", "test_acc"])
        for r in runs:
            b = best_epoch_record(r["history"])
            w.writerow([r["name"], r["seed"], b["epoch"], repr(b["valid_acc"]), repr(b["test_acc"])])
    return report


def cmd_ablate(args) -> int:
    out = Path(args.out or "runs/ablation")
    if args.from_runs:
        runs = read_runs(args.from_runs)
        base_layout = args.layout or "default"
    else:
        base = _run_config(args)
        base_layout = args.layout or base.layout
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
        wanted = [n for n, _ in ABLATION_ROWS]
        if args.rows:
            wanted = [n.strip() for n in args.rows.split(",")]
            unknown = set(wanted) - {n for n, _ in ABLATION_ROWS}
            if unknown:
                raise ConfigError(f"unknown ablation rows {sorted(unknown)}")
        if len(wanted) < 2:
            raise ConfigError("an ablation needs at least two rows")
        graph = load_dataset(base)
        runs = []
        for name, knobs in ABLATION_ROWS:
            if name not in wanted:
                continue
            for seed in seeds:
                run = replace(base, seed=seed, **knobs)
                started = time.perf_counter()
                _, history, _ = train_run(run, graph)
                b = best_epoch_record(history)
                print(f"{name:10s} seed {seed}: valid {b['valid_acc']:.4f} test {b['test_acc']:.4f} "
                      f"({time.perf_counter() - started:.1f}s)", flush=True)
                runs.append({"name": name, "seed": seed, "knobs": knobs,
                             "params": _counts(run, graph)["total"], "history": history})
    staging = _staging_dir(out, args.force)
    try:
        write_runs(runs, staging / "runs.jsonl")
        report = ablation_report(runs, staging, base_layout)
        _publish(staging, out, args.force)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    for row in report["rows"]:
        print(f"{row['name']:10s} valid {100 * row['valid_mean']:6.2f} ± {100 * row['valid_std']:.2f}  "
              f"test {100 * row['test_mean']:6.2f} ± {100 * row['test_std']:.2f}")
    print("ladder monotone" if report["monotone"] else
          "ladder violations: " + ", ".join(report["violations"]))
    return 0


def cmd_params(args) -> int:
    if args.mag_dims:
        run = _run_config(args)
        layout = args.layout or run.layout
        rows = ABLATION_ROWS if args.rows else [("config", run.knobs)]
        table = [(name, _mag_counts(knobs, layout)) for name, knobs in rows]
    else:
        run = _run_config(args)
        if args.layout:
            run = replace(run, layout=args.layout)
        graph = load_dataset(run)
        rows = ABLATION_ROWS if args.rows else [("config", run.knobs)]
        table = [(name, _counts(replace(run, **knobs), graph)) for name, knobs in rows]
    groups = [g for g in table[0][1] if g != "total"]
    print("\t".join(["row"] + groups + ["total"]))
    for name, counts in table:
        print("\t".join([name] + [str(counts[g]) for g in groups] + [str(counts["total"])]))
    return 0


def cmd_gen_synth(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    spec = replace(PRESETS[args.preset](), seed=args.seed or 0)
    if args.class_signal is not None:
        spec = replace(spec, class_signal=args.class_signal)
    graph = generate_synthetic(spec)
    out = Path(args.out or f"data/{args.preset}")
    staging = _staging_dir(out, args.force)
    try:
        save_graph(graph, staging)
        _publish(staging, out, args.force)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(f"{graph.total_nodes} nodes, {sum(a.num_edges for a in graph.adjacency)} edges -> {out}")
    return 0


def cmd_convert_mag(args) -> int:
    out = Path(args.out or "data/ogbn-mag")
    staging = _staging_dir(out, args.force)
    try:
        graph = convert_ogb_mag(args.root, staging)
        _publish(staging, out, args.force)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(f"{graph.total_nodes} nodes, {sum(a.num_edges for a in graph.adjacency)} edges -> {out}")
    return 0


def cmd_check_grad(args) -> int:
    from .gradcheck import check_gradients

    corrupt = tuple(s for s in (args.corrupt or "").split(",") if s)
    worst = check_gradients(args.mode, seed=args.seed or 0, layout=args.layout or "default",
                            corrupt=corrupt)
    ok = True
    for group, err in worst.items():
        passed = err <= args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {group:12s} worst relative error {err:.3e}")
    return 0 if ok else 1


# --------------------------------------------------------------------- main


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data", help="synthetic:<preset> or a graph directory")
    p.add_argument("--fanout", help="per-relation fanout, or a comma list per hop")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--flag-steps", type=int)
    p.add_argument("--flag-alpha", type=float)
    p.add_argument("--no-norm", action="store_true")
    p.add_argument("--no-ft", action="store_true")
    p.add_argument("--no-flag", action="store_true")
    p.add_argument("--intra", choices=("mean", "simattn"))
    p.add_argument("--inter", choices=("sum", "sim"))
    p.add_argument("--force", action="store_true", help="replace an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetmp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    p.add_argument("--resume", help="checkpoint file or run directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", nargs="+", default=["valid", "test"],
                   choices=("train", "valid", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the seven-row knob ablation")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--rows", help="comma-separated subset of rows")
    p.add_argument("--layout", choices=("default", "ogb"))
    p.add_argument("--from-runs", help="rebuild the report from a stored runs.jsonl")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="parameter counts per group")
    _common(p)
    p.add_argument("--mag-dims", action="store_true",
                   help="count under the full academic-graph dimensions without allocating")
    p.add_argument("--rows", action="store_true", help="all seven ablation rows")
    p.add_argument("--layout", choices=("default", "ogb"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gen-synth", help="write a synthetic graph to disk")
    p.add_argument("--preset", default="small")
    p.add_argument("--seed", type=int)
    p.add_argument("--class-signal", type=float)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("convert-mag", help="convert an unpacked ogbn-mag release")
    p.add_argument("root", help="dataset folder containing raw/ and split/")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_convert_mag)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--mode", choices=("rgsn", "rgcn", "rgcn_norm"), default="rgsn")
    p.add_argument("--layout", choices=("default", "ogb"))
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"hetmp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
