"""Command-line entry point.

Subcommands: space enumerate, oracle build, train, sweep,
report effects|correlations, metrics skdt, bench backends.
Exit codes: 0 success, 2 config error, 3 training failure,
4 oracle missing.  SNB_WORKERS bounds the oracle worker pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from snbench.errors import (
    DivergedTraining,
    InvalidSpace,
    NotFound,
    ParseError,
    SchemaError,
    TooLarge,
)

EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_ORACLE = 4


def _cmd_space_enumerate(args) -> int:
    from snbench.config import load_config
    from snbench.space import build_index

    config = load_config(args.config)
    index = build_index(config.space)
    print(f"family={config.space.family.value} encodings={index.n_encodings} "
          f"classes={index.n_classes}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(f"# config_hash={config.digest()}\n")
            w = csv.writer(f)
            w.writerow(["canon_id", "multiplicity", "representative"])
            for canon in index.class_ids:
                w.writerow([canon, index.multiplicity(canon),
                            index.representative(canon).dumps()])
        print(f"wrote {args.out}")
    return 0


def _cmd_oracle_build(args) -> int:
    from snbench.config import load_config
    from snbench.dataset import generate_dataset
    from snbench.oracle import build_table, worker_count
    from snbench.optim import TrainProtocol

    config = load_config(args.config)
    dataset = generate_dataset(config.dataset.seed, config.dataset.n_train,
                               config.dataset.n_test, config.dataset.noise)
    protocol = TrainProtocol.from_json(json.loads(args.protocol)) if args.protocol else _default_proxy_protocol()
    t0 = time.time()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = build_table(
        config.space, dataset, protocol,
        init_channels=args.init_channels, layers=args.layers,
        journal_path=out.with_suffix(".journal"),
        workers=args.workers or worker_count(),
        progress=lambda done, total: print(f"  {done}/{total} classes", flush=True),
    )
    table.save_jsonl(out)
    if args.csv:
        table.write_csv(args.csv, comment=f"config_hash={config.digest()}")
    print(f"built {table.n_records()} records in {time.time() - t0:.0f}s -> {out}")
    return 0


def _default_proxy_protocol():
    from snbench.optim import TrainProtocol

    return TrainProtocol(lr0=0.05, epochs=30, weight_decay=1e-4, batch_size=64,
                         train_portion=0.2, seed=0)


def _cmd_train(args) -> int:
    from snbench.config import load_config
    from snbench.experiment import run_experiment

    config = load_config(args.config)
    t0 = time.time()
    art = run_experiment(config)
    r = art.report
    print(f"name={config.name} skdt={r.skdt:.4f} p_surpass={r.p_surpass:.4f} "
          f"final={r.final_perf_mean:.4f}+-{r.final_perf_std:.4f} "
          f"acc={r.supernet_acc_mean:.4f} ({time.time() - t0:.0f}s)")
    print(f"artifacts in {art.output_dir}")
    return 0


def _cmd_sweep(args) -> int:
    from snbench.config import load_sweep
    from snbench.experiment import run_sweep

    sweep = load_sweep(args.config)
    t0 = time.time()
    result = run_sweep(
        sweep,
        progress=lambda path, value: print(f"validating {path} = {value}", flush=True),
    )
    for path, value in result.best_choices.items():
        print(f"frozen {path} = {value}")
    for path, value in result.failed:
        print(f"failed {path} = {value} (training diverged twice)")
    print(f"best config -> {Path(sweep.baseline.output_dir) / 'best_config.json'} "
          f"({time.time() - t0:.0f}s)")
    return 0


def _load_reports(directory: str):
    from snbench.metrics import MetricReport

    reports = []
    for path in sorted(Path(directory).rglob("report.json")):
        reports.append(MetricReport.from_json(json.loads(path.read_text())))
    return reports


def _cmd_report_effects(args) -> int:
    from snbench.errors import MismatchedArchSet
    from snbench.experiment import effect_report, write_effect_csv

    reports = _load_reports(args.in_dir)
    if not reports:
        raise NotFound(f"no report.json files under {args.in_dir}")
    baseline = next(
        (r for r in reports if r.factor == args.baseline or f"{r.factor}/{r.setting}" == args.baseline),
        None,
    )
    if baseline is None:
        raise NotFound(f"no baseline report labelled {args.baseline!r}")
    rows = effect_report(reports, baseline)
    out = args.out or str(Path(args.in_dir) / "effects.csv")
    write_effect_csv(rows, out, comment=f"baseline={baseline.factor}/{baseline.setting}")
    for row in rows:
        print(f"{row['factor']}/{row['setting']}: {row['delta_final_perf']:+.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_report_correlations(args) -> int:
    from snbench.experiment import correlation_report, write_correlation_csv

    reports = _load_reports(args.in_dir)
    rep = correlation_report(reports)
    out = args.out or str(Path(args.in_dir) / "correlations.csv")
    write_correlation_csv(rep, out, comment=f"n_reports={len(reports)}")
    print(f"acc-final={rep.rho_acc_final:.3f} skdt-final={rep.rho_skdt_final:.3f} "
          f"acc-skdt={rep.rho_acc_skdt:.3f}")
    print(f"wrote {out}")
    return 0


def _cmd_metrics_skdt(args) -> int:
    from snbench.metrics import sparse_kdt
    from snbench.oracle import GroundTruthTable

    table = GroundTruthTable.load_jsonl(args.gt)
    canons, accs = [], []
    with open(args.supernet) as f:
        for row in csv.reader(line for line in f if not line.startswith("#")):
            if not row or row[0] == "canon_id":
                continue
            canons.append(row[0])
            accs.append(float(row[1]))
    gt = [table.mean_acc(c) for c in canons]
    value = sparse_kdt(accs, gt, args.threshold)
    print(f"skdt={value:.6f} n={len(canons)} threshold={args.threshold}")
    return 0


def _cmd_bench(args) -> int:
    import runpy

    bench = Path(__file__).resolve().parents[2] / "benchmarks" / "bench_backends.py"
    if not bench.exists():
        raise NotFound(f"benchmark script not found at {bench}")
    sys.argv = [str(bench)] + (["--quick"] if args.quick else [])
    runpy.run_path(str(bench), run_name="__main__")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snbench",
                                description="Desk-scale weight-sharing NAS benchmark kit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("space", help="search-space utilities")
    ssub = sp.add_subparsers(dest="subcommand", required=True)
    enum = ssub.add_parser("enumerate", help="enumerate a space and its classes")
    enum.add_argument("--config", required=True)
    enum.add_argument("--out", help="CSV path for per-class rows")
    enum.set_defaults(fn=_cmd_space_enumerate)

    op = sub.add_parser("oracle", help="ground-truth table utilities")
    osub = op.add_subparsers(dest="subcommand", required=True)
    ob = osub.add_parser("build", help="train every class and persist the table")
    ob.add_argument("--config", required=True)
    ob.add_argument("--out", required=True, help="output .jsonl path")
    ob.add_argument("--csv", help="also export a CSV view")
    ob.add_argument("--protocol", help="JSON override of the stand-alone protocol")
    ob.add_argument("--init-channels", type=int, default=8)
    ob.add_argument("--layers", type=int, default=1)
    ob.add_argument("--workers", type=int, default=0)
    ob.set_defaults(fn=_cmd_oracle_build)

    tr = sub.add_parser("train", help="run one experiment config")
    tr.add_argument("--config", required=True)
    tr.set_defaults(fn=_cmd_train)

    sw = sub.add_parser("sweep", help="one-factor-at-a-time validation")
    sw.add_argument("--config", required=True)
    sw.set_defaults(fn=_cmd_sweep)

    rp = sub.add_parser("report", help="aggregate experiment reports")
    rsub = rp.add_subparsers(dest="subcommand", required=True)
    ef = rsub.add_parser("effects", help="per-factor final-performance deltas")
    ef.add_argument("--in", dest="in_dir", required=True)
    ef.add_argument("--baseline", default="baseline")
    ef.add_argument("--out")
    ef.set_defaults(fn=_cmd_report_effects)
    co = rsub.add_parser("correlations", help="pairwise Spearman between metrics")
    co.add_argument("--in", dest="in_dir", required=True)
    co.add_argument("--out")
    co.set_defaults(fn=_cmd_report_correlations)

    mt = sub.add_parser("metrics", help="standalone metric computations")
    msub = mt.add_subparsers(dest="subcommand", required=True)
    sk = msub.add_parser("skdt", help="sparse Kendall-Tau from CSV + table")
    sk.add_argument("--supernet", required=True, help="CSV with canon_id,acc rows")
    sk.add_argument("--gt", required=True, help="ground-truth .jsonl table")
    sk.add_argument("--threshold", type=float, default=0.001)
    sk.set_defaults(fn=_cmd_metrics_skdt)

    be = sub.add_parser("bench", help="compare kernel backends")
    bsub = be.add_subparsers(dest="subcommand", required=True)
    bb = bsub.add_parser("backends")
    bb.add_argument("--quick", action="store_true")
    bb.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, ParseError, InvalidSpace, TooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedTraining as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except NotFound as exc:
        print(f"oracle missing: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
