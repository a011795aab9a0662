"""Command-line entry point: ``bridgeseg {gen-data,train,eval,report}``.

Exit codes: 0 success, 2 usage/config/data error, 3 non-finite loss abort.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from collections import defaultdict
from pathlib import Path

from .config import ConfigError, RunConfig, parse_assignment, read_kv_file, split_prefixed
from .data import BenchmarkSpec, DatasetFormatError, generate_benchmark, read_dataset, write_dataset
from .metrics import bound_report, evaluate_branch
from .nets import params_from_records, read_checkpoint
from .trainer import NonFiniteLoss, run, write_run

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_SIGNATURE_PREFIXES = ("loss.", "ablation.")


class UsageError(Exception):
    pass


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_flat(path: str | None) -> dict:
    return read_kv_file(path) if path else {}


# --- gen-data -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    flat = _load_flat(args.config)
    bench, rest = split_prefixed(flat)
    if rest:
        raise ConfigError(f"gen-data config accepts only bench.* keys, got {sorted(rest)}")
    if args.seed is not None:
        bench["seed"] = args.seed
    spec = BenchmarkSpec.from_dict(bench)
    ds = generate_benchmark(spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.splits)} splits to {args.out} (C={spec.num_classes}, d1={spec.d1}, "
          f"d2={spec.d2}, N={spec.points_per_scene}, seed={spec.seed})")
    for (dom, split), spl in ds.splits.items():
        print(f"  {dom}_{split}: {len(spl)} scenes")
    return EXIT_OK


# --- train ----------------------------------------------------------------

def build_config(config_path: str | None, method: str | None, sets: list[str]) -> RunConfig:
    flat = _load_flat(config_path)
    bench, flat = split_prefixed(flat)
    overrides = dict(flat)
    for item in sets or []:
        key, value = parse_assignment(item)
        overrides[key] = value
    if method is not None:
        overrides["train.method"] = method
    return RunConfig().with_overrides(overrides)


def run_id(cfg: RunConfig) -> str:
    """Unique name from method, seed and every non-default ablation-relevant key."""
    default = RunConfig().to_flat()
    flat = cfg.to_flat()
    sig = [f"{k}={flat[k]}" for k in sorted(flat)
           if k.startswith(_SIGNATURE_PREFIXES) and flat[k] != default[k]]
    name = f"{cfg.method}_seed{cfg.seed}"
    return name + ("_" + "_".join(sig).replace("/", "-") if sig else "")


def cmd_train(args) -> int:
    cfg = build_config(args.config, args.method, args.set)
    dataset = read_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = Path(args.out)
    runs = [(cfg, out)] if seeds is None else [
        (cfg.with_overrides({"train.seed": s}), out / run_id(cfg.with_overrides({"train.seed": s})))
        for s in seeds
    ]
    for run_cfg, run_dir in runs:
        try:
            result = run(dataset, run_cfg)
        except NonFiniteLoss as exc:
            print(f"numeric abort at step {exc.step}; per-term values:", file=sys.stderr)
            for k, v in exc.terms.items():
                print(f"  {k} = {v}", file=sys.stderr)
            return EXIT_NUMERIC
        result.summary["data_dir"] = str(Path(args.data))
        result.summary["run_id"] = run_id(run_cfg)
        write_run(result, run_dir)
        print(f"{run_id(run_cfg)}: test mIoU {result.summary['test_miou']:.2f} "
              f"(best step {result.best_step}) -> {run_dir}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def _branch(records, prefix: str, activation: str):
    try:
        return params_from_records(records, prefix, activation)
    except KeyError:
        raise UsageError(f"checkpoint has no {prefix} branch")


def cmd_eval(args) -> int:
    records = read_checkpoint(args.checkpoint)
    code = records.get("meta.activation")
    activation = "relu" if code is not None and code[0, 0] == 1.0 else "tanh"
    dataset = read_dataset(args.data)
    prefix, modality, dim = ("source", "m1", dataset.spec.d1) if args.domain == "S" \
        else ("target", "m2", dataset.spec.d2)
    params = _branch(records, prefix, activation)
    if params.spec.input_dim != dim:
        return _fail(f"checkpoint {prefix} branch expects input dim {params.spec.input_dim} "
                     f"but {args.domain} data has dim {dim} (weight shape "
                     f"{records[prefix + '.extractor.0.weight'].shape}, data shape (N, {dim}))")
    if params.spec.num_classes != dataset.num_classes:
        return _fail(f"checkpoint has {params.spec.num_classes} classes, dataset has {dataset.num_classes}")
    res = evaluate_branch(params, dataset[(args.domain, args.split)], modality)
    out = {"checkpoint": str(args.checkpoint), "domain": args.domain, "split": args.split, **res}
    if args.bound:
        source = _branch(records, "source", activation)
        target = _branch(records, "target", activation)
        rep = bound_report(source, target, dataset, split=args.split)
        out["bound"] = rep.to_dict()
    for c, v in enumerate(res["per_class_iou"]):
        print(f"class {c}: " + ("n/a" if v is None else f"{v:.2f}"))
    print(f"mIoU: {res['miou']:.2f}")
    if args.bound:
        print(rep.to_markdown())
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# --- report ---------------------------------------------------------------

REQUIRED_SUMMARY_KEYS = ("method", "seed", "config", "benchmark", "test_miou")


def load_summaries(dirs: list[str]) -> list[dict]:
    out = []
    for d in dirs:
        root = Path(d)
        paths = [root] if root.is_file() else sorted(root.rglob("summary.json"))
        for p in paths:
            data = json.loads(p.read_text())
            missing = [k for k in REQUIRED_SUMMARY_KEYS if k not in data]
            if missing:
                raise DatasetFormatError(f"{p}: summary missing {missing}")
            data["_path"] = str(p)
            out.append(data)
    return out


def row_label(summary: dict) -> str:
    cfg = RunConfig.from_flat(summary["config"])
    default = RunConfig().to_flat()
    flat = cfg.to_flat()
    sig = [f"{k}={flat[k]}" for k in sorted(flat)
           if k.startswith(_SIGNATURE_PREFIXES) and flat[k] != default[k]]
    return cfg.method + (f" ({', '.join(sig)})" if sig else "")


def column_label(summary: dict) -> str:
    b = summary["benchmark"]
    return f"bench seed {b['seed']}"


def _mean_std(xs: list[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def markdown_table(summaries: list[dict]) -> str:
    """Methods x benchmarks, mean +- std over seeds; best non-oracle cell per column in bold."""
    cells: dict[tuple[str, str], list[float]] = defaultdict(list)
    for s in summaries:
        cells[(row_label(s), column_label(s))].append(s["test_miou"])
    rows = sorted({r for r, _ in cells})
    cols = sorted({c for _, c in cells})
    best = {}
    for c in cols:
        cands = [(statistics.fmean(cells[(r, c)]), r) for r in rows
                 if (r, c) in cells and not r.startswith("oracle")]
        if cands:
            best[c] = max(cands)[1]
    lines = ["| Method | " + " | ".join(cols) + " |", "|---|" + "---|" * len(cols)]
    for r in rows:
        vals = []
        for c in cols:
            if (r, c) not in cells:
                vals.append("-")
                continue
            m, sd = _mean_std(cells[(r, c)])
            txt = f"{m:.2f} ± {sd:.2f}"
            vals.append(f"**{txt}**" if best.get(c) == r else txt)
        lines.append(f"| {r} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def sweep_csv(summaries: list[dict], key: str) -> str:
    """One row per value of ``key``: mean/std test mIoU over seeds."""
    groups: dict[float, list[float]] = defaultdict(list)
    for s in summaries:
        if key not in s["config"]:
            raise ConfigError(f"{s['_path']}: config has no key {key!r}")
        groups[s["config"][key]].append(s["test_miou"])
    lines = [f"{key},mean_miou,std_miou,n_seeds"]
    for v in sorted(groups):
        m, sd = _mean_std(groups[v])
        lines.append(f"{v},{m!r},{sd!r},{len(groups[v])}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    summaries = load_summaries(args.runs)
    if not summaries:
        return _fail(f"no summary.json found under {args.runs}")
    if args.sweep:
        text = sweep_csv(summaries, args.sweep)
    else:
        text = markdown_table(summaries)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# --- entry ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgeseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="key = value file with bench.* keys")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--method", choices=("lsb", "oracle", "source_only", "pl"))
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seeds", help="comma-separated seeds; runs sequentially into per-run subdirectories")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--domain", choices=("S", "T"), default="T")
    e.add_argument("--bound", action="store_true", help="add the bound-term diagnostics")
    e.add_argument("--out", help="write the result JSON here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate run summaries")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--sweep", metavar="KEY", help="emit a CSV over values of KEY instead of a table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except (ConfigError, DatasetFormatError, UsageError, ValueError, KeyError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
