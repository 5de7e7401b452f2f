"""Experiment orchestration: corrupt, train, evaluate, compare, bench.

Configuration lives in flat key = value files (a TOML-compatible subset);
every key can be overridden from the command line, and flags win. Results are
append-only JSON lines plus per-run directories keyed by a hash of the
semantic configuration, so re-running a finished grid cell is a no-op for
`bench`. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime as _dt
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, evaluate, noise
from .nn import build_model, save_checkpoint, load_checkpoint
from .recordio import write_records
from .tensor import Rng
from .train import LossFlags, ScheduleParams, TrainingDiverged, predict, train


class ConfigError(ValueError):
    pass


# -- flat config files -----------------------------------------------------------

CONFIG_DEFAULTS = {
    "dataset": "",
    "generator": "",
    "n": 930,
    "length": 128,
    "days": 60,
    "p_max": 100.0,
    "window_len": 36,
    "window_stride": 1,
    "resample_factor": 10,
    "levels": 5,
    "split_ratio": 0.8,
    "noise_type": "none",
    "noise_ratio": 0.0,
    "lambda_init": 0,
    "delta_start": 25,
    "delta_end": 30,
    "use_ae": True,
    "use_cc": True,
    "use_prior": True,
    "halve_pseudo_sum": False,
    "coupled_weight_decay": False,
    "epochs": 100,
    "seeds": [0],
    "data_seed": 0,
    "algorithm": "srea",
}
# fields that do not change run semantics and stay out of the config hash
NON_SEMANTIC = {"out", "save_model"}

_INT_KEYS = {"n", "length", "days", "window_len", "window_stride", "resample_factor",
             "levels", "lambda_init", "delta_start", "delta_end", "epochs", "data_seed"}
_FLOAT_KEYS = {"p_max", "split_ratio", "noise_ratio"}
_BOOL_KEYS = {"use_ae", "use_cc", "use_prior", "halve_pseudo_sum", "coupled_weight_decay"}


def _parse_value(raw, where):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part, where) for part in inner.split(",")]
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from None


def parse_config_text(text, where="<config>"):
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}:{ln}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = _parse_value(raw, f"{where}:{ln}")
    return out


def load_config(path=None, overrides=None):
    cfg = dict(CONFIG_DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        parsed = parse_config_text(p.read_text(encoding="utf-8"), str(path))
        for key in parsed:
            if key not in CONFIG_DEFAULTS and key not in NON_SEMANTIC:
                raise ConfigError(f"{path}: unknown key {key!r}")
        cfg.update(parsed)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return canonical_config(cfg)


def canonical_config(cfg):
    out = {}
    for key, default in CONFIG_DEFAULTS.items():
        value = cfg.get(key, default)
        try:
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
            elif key in _BOOL_KEYS:
                value = bool(value)
            elif key == "seeds":
                value = [int(s) for s in (value if isinstance(value, (list, tuple)) else [value])]
            else:
                value = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: bad value {value!r}") from None
        out[key] = value
    if not out["seeds"]:
        raise ConfigError("seeds must be nonempty")
    if len(set(out["seeds"])) != len(out["seeds"]):
        raise ConfigError("seeds must be distinct")
    if not 0.0 <= out["noise_ratio"] < 1.0:
        raise ConfigError(f"noise_ratio must be in [0, 1), got {out['noise_ratio']}")
    if out["noise_type"] not in ("none", "symmetric", "asymmetric", "flip"):
        raise ConfigError(f"unknown noise_type {out['noise_type']!r}")
    if out["algorithm"] not in ("srea", "ce"):
        raise ConfigError(f"unknown algorithm {out['algorithm']!r}")
    if not out["dataset"] and out["generator"] not in ("cbf", "chp"):
        raise ConfigError("either dataset (a file path) or generator = cbf|chp is required")
    ScheduleParams(out["lambda_init"], out["delta_start"], out["delta_end"])  # validates
    return out


def config_hash(cfg):
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- single experiment ------------------------------------------------------------


def _prepare_data(cfg, rng):
    """Build the (train, test) pair for one run.

    The benchmark data itself (generation and split) is driven by the
    config's data_seed so that repeated runs with different seeds see the
    same dataset, the way repetition-with-random-initialization protocols
    expect; the per-run rng drives only the label corruption draw.
    """
    data_rng = Rng(cfg["data_seed"])
    if cfg["dataset"]:
        path = Path(cfg["dataset"])
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}")
        if path.suffix == ".tsv":
            ds = data.load_tsv(path)
        else:
            ds = data.load_dataset(path)
    elif cfg["generator"] == "cbf":
        ds = data.generate_cbf(cfg["n"], cfg["length"], data_rng)
    else:
        series = data.generate_chp_like(cfg["days"], data_rng, p_max=cfg["p_max"])
        wcfg = data.WindowingConfig(cfg["window_len"], cfg["window_stride"],
                                    cfg["resample_factor"], cfg["levels"], cfg["p_max"])
        ds = data.windowize(series, wcfg)
    train_ds, test_ds = data.split(ds, cfg["split_ratio"], data_rng)
    train_ds, test_ds = data.znormalize(train_ds, test_ds)
    if cfg["noise_type"] != "none" and cfg["noise_ratio"] > 0:
        tm = noise.build(cfg["noise_type"], ds.k, cfg["noise_ratio"])
        res = noise.corrupt(train_ds.labels, tm, rng.stream("noise"))
        train_ds = train_ds.with_labels(res.noisy_labels, res.oracle, res.flipped_mask)
    return train_ds, test_ds


def run_experiment(cfg, seed, run_dir=None, save_model=False):
    """Train once with the given seed; returns the result record (a dict)."""
    rng = Rng(seed)
    train_ds, test_ds = _prepare_data(cfg, rng)
    model = build_model(train_ds.channels, train_ds.length, train_ds.k, rng=rng)
    schedule = ScheduleParams(cfg["lambda_init"], cfg["delta_start"], cfg["delta_end"])
    flags = LossFlags(cfg["use_ae"], cfg["use_cc"], cfg["use_prior"])
    trace_path = None
    if run_dir:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        trace_path = Path(run_dir) / "trace.jsonl"
    started = time.monotonic()
    outcome = train(
        train_ds, model, schedule, flags, rng,
        epochs=cfg["epochs"], algorithm=cfg["algorithm"],
        halve_pseudo_sum=cfg["halve_pseudo_sum"],
        coupled_weight_decay=cfg["coupled_weight_decay"],
        trace_path=trace_path,
    )
    wall = time.monotonic() - started
    pred = predict(model, test_ds.samples)
    f1 = evaluate.macro_f1(pred, test_ds.labels, test_ds.k)
    counts, pct = evaluate.confusion_matrix(pred, test_ds.labels, test_ds.k)
    record = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "algorithm": cfg["algorithm"],
        "dataset_name": train_ds.name.rsplit("/", 1)[0],
        "noise_type": cfg["noise_type"],
        "noise_ratio": cfg["noise_ratio"],
        "epochs": cfg["epochs"],
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "k": train_ds.k,
        "test_macro_f1": f1,
        "confusion": counts.tolist(),
        "relabel_fraction": outcome.relabel_fraction,
        "corrected_label_accuracy": outcome.corrected_label_accuracy,
        "restored_fraction": outcome.restored_fraction,
        "collapse_warnings": outcome.collapse_warnings,
        "code_version": __version__,
    }
    if run_dir:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "result.json").write_text(
            json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        meta = {"wall_clock_s": wall, "finished_at": _dt.datetime.now().isoformat()}
        (run_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
        if save_model:
            save_checkpoint(model, run_dir / "model.ckpt")
        (run_dir / "done").write_text("ok\n", encoding="utf-8")
    record["wall_clock_s"] = wall
    return record


def _run_id(cfg, seed):
    return f"{config_hash(cfg)[:10]}-s{seed}"


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_config(args.config, _overrides_from(args))
    rng = Rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["generator"] == "cbf":
        ds = data.generate_cbf(cfg["n"], cfg["length"], rng)
        data.save_dataset(ds, out)
        print(f"wrote {out}: {len(ds)} samples, k={ds.k}")
    elif cfg["generator"] == "chp":
        series = data.generate_chp_like(cfg["days"], rng, p_max=cfg["p_max"])
        csv_path = out.with_suffix(".csv")
        data.save_series_csv(series, csv_path)
        wcfg = data.WindowingConfig(cfg["window_len"], cfg["window_stride"],
                                    cfg["resample_factor"], cfg["levels"], cfg["p_max"])
        ds = data.windowize(series, wcfg)
        data.save_dataset(ds, out)
        print(f"wrote {csv_path} (raw) and {out}: {len(ds)} windows, k={ds.k}")
    else:
        raise ConfigError("gen-data needs generator = cbf|chp")
    return 0


def cmd_corrupt(args):
    if not Path(args.dataset).exists():
        raise ConfigError(f"dataset not found: {args.dataset}")
    ds = data.load_dataset(args.dataset)
    tm = noise.build(args.noise_type, ds.k, args.noise_ratio)
    res = noise.corrupt(ds.labels, tm, Rng(args.seed).stream("noise"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corrupted = ds.with_labels(res.noisy_labels)
    data.save_dataset(corrupted, out)
    oracle_path = out.with_suffix(out.suffix + ".oracle")
    write_records(oracle_path, {
        "clean_labels": res.oracle.reveal().astype(np.float32),
        "flipped_mask": res.flipped_mask.astype(np.float32),
    })
    changed = int(res.flipped_mask.sum())
    print(f"wrote {out} ({changed}/{len(ds)} labels changed) and {oracle_path}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _overrides_from(args))
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "results.jsonl"
    for seed in cfg["seeds"]:
        run_dir = out / "runs" / _run_id(cfg, seed)
        record = run_experiment(cfg, seed, run_dir, save_model=args.save_model)
        line = {k: v for k, v in record.items() if k != "wall_clock_s"}
        line["run_dir"] = str(run_dir)
        with open(manifest, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        print(f"seed {seed}: test macro-F1 {record['test_macro_f1']:.4f} "
              f"(relabelled {record['relabel_fraction']:.1%})")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.dataset)
    pred = predict(model, ds.samples)
    f1 = evaluate.macro_f1(pred, ds.labels, ds.k)
    counts, pct = evaluate.confusion_matrix(pred, ds.labels, ds.k)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"macro_f1": f1, "n": len(ds), "k": ds.k,
               "confusion": counts.tolist(), "confusion_pct": pct.tolist()}
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n",
                                      encoding="utf-8")
    with open(out / "confusion.csv", "w", encoding="utf-8") as fh:
        fh.write("truth\\pred," + ",".join(str(j) for j in range(ds.k)) + "\n")
        for i in range(ds.k):
            fh.write(str(i) + "," + ",".join(str(int(v)) for v in counts[i]) + "\n")
    print(f"macro-F1 {f1:.4f} over {len(ds)} samples -> {out / 'metrics.json'}")
    return 0


def _load_result_records(result_dir):
    manifest = Path(result_dir) / "results.jsonl"
    if not manifest.exists():
        raise ConfigError(f"no results.jsonl in {result_dir}")
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    if not records:
        raise ConfigError(f"{manifest} is empty")
    return records


def cmd_compare(args):
    names = []
    per_algo = {}
    for spec in args.results:
        name, _, path = spec.rpartition("=") if "=" in spec else ("", "", spec)
        name = name or Path(path).name
        if name in per_algo:
            raise ConfigError(f"duplicate algorithm name {name!r}")
        names.append(name)
        per_algo[name] = _load_result_records(path)

    def condition_key(rec):
        return f"{rec['dataset_name']}|{rec['noise_type']}|{rec['noise_ratio']:g}"

    conditions = sorted({condition_key(r) for recs in per_algo.values() for r in recs})
    samples = {}
    for name, recs in per_algo.items():
        for cond in conditions:
            vals = [r["test_macro_f1"] for r in recs if condition_key(r) == cond]
            if not vals:
                raise ConfigError(f"algorithm {name!r} has no runs for condition {cond}")
            samples[(name, cond)] = vals
    scores = evaluate.ScoreMatrix(
        algorithms=names,
        conditions=conditions,
        scores=np.array([[float(np.mean(samples[(n, c)])) for c in conditions] for n in names]),
    )

    reference = args.reference or names[0]
    if reference not in names:
        raise ConfigError(f"reference {reference!r} is not among {names}")
    mwu_table = {}
    for cond in conditions:
        row = {}
        for name in names:
            if name == reference:
                continue
            res = evaluate.mann_whitney_u(samples[(reference, cond)], samples[(name, cond)],
                                          alpha=args.alpha, one_sided=args.one_sided)
            row[name] = {"p": res.p, "verdict": res.verdict, "u": res.u}
        mwu_table[cond] = row

    out = Path(args.out or "compare")
    out.mkdir(parents=True, exist_ok=True)
    (out / "score_matrix.json").write_text(json.dumps({
        "algorithms": names, "conditions": conditions, "scores": scores.scores.tolist(),
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "mwu.json").write_text(json.dumps(
        {"reference": reference, "alpha": args.alpha, "table": mwu_table},
        sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    friedman_payload = None
    if len(names) >= 3:
        fr = evaluate.friedman_test(scores)
        cd = evaluate.nemenyi_cd(len(names), len(conditions), alpha=0.05)
        layout = evaluate.cd_diagram_layout(fr.mean_ranks, cd)
        friedman_payload = {"chi2": fr.chi2, "f_stat": fr.f_stat, "p": fr.p,
                            "mean_ranks": fr.mean_ranks, "cd": cd}
        evaluate.save_layout_json(layout, out / "cd_diagram.json")
        evaluate.write_cd_diagram_svg(layout, out / "cd_diagram.svg")
    (out / "friedman.json").write_text(json.dumps(friedman_payload, sort_keys=True, indent=2)
                                       + "\n", encoding="utf-8")

    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(f"reference: {reference}; alpha={args.alpha}\n")
        header = ["condition"] + names
        fh.write("\t".join(header) + "\n")
        for ci, cond in enumerate(conditions):
            cells = []
            for name in names:
                mean = scores.scores[names.index(name), ci]
                if name == reference:
                    cells.append(f"{mean:.3f}")
                else:
                    cells.append(f"{mean:.3f} ({mwu_table[cond][name]['verdict']})")
            fh.write("\t".join([cond] + cells) + "\n")
        if friedman_payload:
            fh.write(f"\nFriedman chi2={friedman_payload['chi2']:.4f} "
                     f"F={friedman_payload['f_stat']:.4f} p={friedman_payload['p']:.4g} "
                     f"CD={friedman_payload['cd']:.3f}\n")
    print(f"wrote comparison for {len(names)} algorithms x {len(conditions)} conditions to {out}")
    return 0


def cmd_bench(args):
    cfg = load_config(args.config, _overrides_from(args))
    noise_types = args.noise_types or [cfg["noise_type"]]
    ratios = [float(r) for r in (args.noise_ratios or [cfg["noise_ratio"]])]
    out = Path(args.out or "bench")
    out.mkdir(parents=True, exist_ok=True)
    grid = []
    for ntype in noise_types:
        for ratio in ratios:
            cell = dict(cfg)
            cell["noise_type"] = ntype
            cell["noise_ratio"] = ratio
            cell = canonical_config(cell)
            for seed in cfg["seeds"]:
                grid.append((cell, seed))
    workers = int(os.environ.get("SREA_THREADS", "0")) or os.cpu_count() or 1
    workers = max(1, min(workers, len(grid)))
    print(f"{len(grid)} runs scheduled over {workers} worker(s)")

    def task(cell, seed):
        run_dir = out / "runs" / _run_id(cell, seed)
        if (run_dir / "done").exists():
            return json.loads((run_dir / "result.json").read_text(encoding="utf-8")), True
        return run_experiment(cell, seed, run_dir, save_model=args.save_model), False

    manifest = out / "results.jsonl"
    completed = skipped = 0
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task, cell, seed) for cell, seed in grid]
        # single writer: append in grid order as results arrive
        with open(manifest, "a", encoding="utf-8") as fh:
            for (cell, seed), fut in zip(grid, futures):
                record, was_skipped = fut.result()
                line = {k: v for k, v in record.items() if k != "wall_clock_s"}
                line["run_dir"] = str(out / "runs" / _run_id(cell, seed))
                if not was_skipped:
                    fh.write(json.dumps(line, sort_keys=True) + "\n")
                    completed += 1
                else:
                    skipped += 1
    print(f"bench finished: {completed} run(s), {skipped} skipped (already done)")
    return 0


# -- argument plumbing ----------------------------------------------------------------


def _overrides_from(args):
    keys = ("dataset", "generator", "n", "length", "days", "noise_type", "noise_ratio",
            "lambda_init", "delta_start", "delta_end", "epochs", "algorithm", "seeds",
            "use_ae", "use_cc", "use_prior", "halve_pseudo_sum", "coupled_weight_decay",
            "split_ratio", "window_stride", "levels", "p_max", "data_seed")
    return {k: getattr(args, k, None) for k in keys}


def _add_config_flags(p, with_seeds=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="dataset cache or .tsv path")
    p.add_argument("--generator", choices=["cbf", "chp"])
    p.add_argument("--n", type=int, help="samples for the cbf generator")
    p.add_argument("--length", type=int, help="series length for the cbf generator")
    p.add_argument("--days", type=int, help="days for the chp generator")
    p.add_argument("--p-max", dest="p_max", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.add_argument("--noise-type", dest="noise_type",
                   choices=["none", "symmetric", "asymmetric", "flip"])
    p.add_argument("--noise-ratio", dest="noise_ratio", type=float)
    p.add_argument("--lambda-init", dest="lambda_init", type=int)
    p.add_argument("--delta-start", dest="delta_start", type=int)
    p.add_argument("--delta-end", dest="delta_end", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--algorithm", choices=["srea", "ce"])
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--data-seed", dest="data_seed", type=int,
                   help="seed for dataset generation and splitting (fixed across run seeds)")
    for flag, key in (("--no-ae", "use_ae"), ("--no-cc", "use_cc"), ("--no-prior", "use_prior")):
        p.add_argument(flag, dest=key, action="store_const", const=False, default=None)
    p.add_argument("--halve-pseudo-sum", dest="halve_pseudo_sum",
                   action="store_const", const=True, default=None)
    p.add_argument("--coupled-weight-decay", dest="coupled_weight_decay",
                   action="store_const", const=True, default=None)
    if with_seeds:
        p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")],
                       help="comma-separated seed list")


def build_parser():
    parser = argparse.ArgumentParser(prog="srea", description=__doc__)
    parser.add_argument("--version", action="version", version=f"srea {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_flags(p, with_seeds=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("corrupt", help="corrupt a dataset's labels; writes a sealed oracle")
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise-type", dest="noise_type", required=True,
                   choices=["symmetric", "asymmetric", "flip"])
    p.add_argument("--noise-ratio", dest="noise_ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="run training for every configured seed")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("--save-model", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="statistical comparison of result directories")
    p.add_argument("results", nargs="+", help="result dirs, optionally name=dir")
    p.add_argument("--reference", help="reference algorithm name (default: first)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--one-sided", dest="one_sided", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="expand a noise grid and schedule runs")
    _add_config_flags(p)
    p.add_argument("--noise-types", dest="noise_types",
                   type=lambda s: s.split(","), help="comma-separated noise types")
    p.add_argument("--noise-ratios", dest="noise_ratios",
                   type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--out")
    p.add_argument("--save-model", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data.DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
