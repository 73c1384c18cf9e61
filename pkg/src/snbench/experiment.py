"""Experiment orchestration.

run_experiment trains n super-nets from one config, evaluates the fixed
architecture set on each, and reduces everything to a MetricReport plus
on-disk artifacts.  run_sweep validates factors one at a time in config
order, freezing the best value before moving on.
"""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from snbench import checkpoint
from snbench.canon import canonical_hash
from snbench.config import ExperimentConfig, FactorSweep, set_field
from snbench.dataset import generate_dataset
from snbench.errors import DivergedTraining, MismatchedArchSet, NotFound, TooFewPoints
from snbench.metrics import (
    CSV_COLUMNS,
    MetricReport,
    final_search_perf,
    prob_surpass_random,
    rank_for_surpass,
    sparse_kdt,
    spearman,
)
from snbench.oracle import GroundTruthTable, surrogate_table
from snbench.sampling import SamplerKind, make_sampler, random_nas_next
from snbench.space import ArchEncoding, build_index, prune_to_cell, space_digest
from snbench.supernet import build_supernet
from snbench.training import eval_subnet_accuracy, train_supernet


def git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _stream(base_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, *key]))


def load_oracle(config: ExperimentConfig) -> GroundTruthTable:
    if config.oracle.kind == "surrogate":
        return surrogate_table(config.space)
    table = GroundTruthTable.load_jsonl(config.oracle.path)
    want = space_digest(config.space)
    got = table.metadata.get("space_digest")
    if got != want:
        raise NotFound(
            f"oracle table at {config.oracle.path} was built for space {got}, config wants {want}"
        )
    return table


def sample_arch_set(config: ExperimentConfig) -> list[tuple[ArchEncoding, str]]:
    """The fixed evaluation set: n_archs distinct canonical classes,
    drawn once from the base seed and reused across every experiment
    that shares it."""
    rng = _stream(config.base_seed, 101)
    want = config.metrics.n_archs
    seen: dict[str, ArchEncoding] = {}
    attempts = 0
    while len(seen) < want:
        attempts += 1
        if attempts > 1000 * want:
            raise NotFound(
                f"space yielded only {len(seen)} distinct classes for the "
                f"{want}-architecture evaluation set"
            )
        enc = random_nas_next(config.space, rng)
        canon = canonical_hash(prune_to_cell(config.space, enc))
        if canon not in seen:
            seen[canon] = enc
    return [(enc, canon) for canon, enc in seen.items()]


def arch_set_digest(canons: list[str]) -> str:
    return hashlib.sha256("".join(canons).encode()).hexdigest()[:16]


@dataclass
class ExperimentArtifacts:
    report: MetricReport
    per_arch_accs: np.ndarray  # (n_seeds, n_archs)
    gt_accs: np.ndarray
    canons: list[str]
    histories: list[list[dict]]
    output_dir: Path | None


def _train_one_seed(config: ExperimentConfig, index, seed_idx: int):
    """Build and train one super-net; one retry with a fresh stream."""
    for attempt in (0, 1):
        supernet = build_supernet(
            config.space, config.mapping, 4,
            seed=int(_stream(config.base_seed, 201, seed_idx, attempt).integers(2**31)),
        )
        sampler = make_sampler(
            config.sampler,
            config.space,
            np.random.SeedSequence([config.base_seed, 301, seed_idx, attempt]),
            index=index,
        )
        protocol = replace(
            config.protocol,
            seed=int(_stream(config.base_seed, 401, seed_idx, attempt).integers(2**31)),
        )
        dataset = generate_dataset(
            config.dataset.seed, config.dataset.n_train, config.dataset.n_test,
            config.dataset.noise,
        )
        try:
            history = train_supernet(supernet, sampler, dataset, protocol)
            return supernet, history, dataset
        except DivergedTraining:
            if attempt == 1:
                raise
    raise AssertionError("unreachable")


def run_experiment(config: ExperimentConfig, *, write_artifacts: bool = True) -> ExperimentArtifacts:
    arch_pairs = sample_arch_set(config)
    canons = [c for _, c in arch_pairs]
    table = load_oracle(config)
    gt = np.array([table.mean_acc(c) for c in canons])
    index = (
        build_index(config.space)
        if config.sampler is SamplerKind.RANDOM_A
        else None
    )

    n_seeds = config.metrics.n_supernet_seeds
    accs = np.zeros((n_seeds, len(canons)))
    histories = []
    supernets = []
    for i in range(n_seeds):
        supernet, history, dataset = _train_one_seed(config, index, i)
        eval_rng = _stream(config.base_seed, 501, i)
        for j, (enc, _) in enumerate(arch_pairs):
            accs[i, j] = eval_subnet_accuracy(
                supernet, enc, dataset.x_val, dataset.y_val,
                batch_size=config.protocol.batch_size, rng=eval_rng,
            )
        histories.append(history)
        supernets.append(supernet)

    mean_accs = accs.mean(axis=0)
    skdt = sparse_kdt(mean_accs, gt, config.metrics.threshold)

    # best architecture over the n runs: each run proposes its top scorer,
    # the proposal with the best ground truth is "the architecture found"
    proposals = []
    for i in range(n_seeds):
        order = sorted(range(len(canons)), key=lambda j: (-accs[i, j], canons[j]))
        proposals.append(canons[order[0]])
    best_canon = max(proposals, key=lambda c: (table.mean_acc(c), c))
    r, r_max = rank_for_surpass(table, best_canon)
    p = prob_surpass_random(r, r_max, n_seeds)

    finals = np.array([
        final_search_perf(accs[i], table, canons, config.metrics.top_k)[0]
        for i in range(n_seeds)
    ])

    report = MetricReport(
        factor=config.factor,
        setting=config.setting,
        supernet_acc_mean=float(mean_accs.mean()),
        supernet_acc_std=float(mean_accs.std()),
        skdt=float(skdt),
        p_surpass=float(p),
        final_perf_mean=float(finals.mean()),
        final_perf_std=float(finals.std()),
        n_archs=len(canons),
        threshold=config.metrics.threshold,
        n_supernet_seeds=n_seeds,
        arch_set_digest=arch_set_digest(canons),
        config_digest=config.digest(),
        extra={"best_canon": best_canon, "r": r, "r_max": r_max,
               "final_per_seed": finals.tolist()},
    )
    out_dir = None
    if write_artifacts:
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_artifacts(config, report, accs, gt, canons, histories, supernets, out_dir)
    return ExperimentArtifacts(report, accs, gt, canons, histories, out_dir)


def _comment(config: ExperimentConfig) -> str:
    return f"# config_hash={config.digest()} git_rev={git_revision()}"


def _write_artifacts(config, report, accs, gt, canons, histories, supernets, out_dir: Path):
    (out_dir / "config.json").write_text(config.dumps())
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "per_arch.csv", "w", newline="") as f:
        f.write(_comment(config) + "\n")
        w = csv.writer(f)
        n_seeds = accs.shape[0]
        w.writerow(["canon_id", "gt_mean_acc", *[f"supernet_acc_seed{i}" for i in range(n_seeds)], "supernet_acc_mean"])
        for j, canon in enumerate(canons):
            w.writerow([canon, f"{gt[j]:.6f}",
                        *[f"{accs[i, j]:.6f}" for i in range(n_seeds)],
                        f"{accs[:, j].mean():.6f}"])
    with open(out_dir / "report.csv", "w", newline="") as f:
        f.write(_comment(config) + "\n")
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        w.writerow(report.csv_row())
    for i, history in enumerate(histories):
        (out_dir / f"history_seed{i}.json").write_text(json.dumps(history, indent=2) + "\n")
    for i, sn in enumerate(supernets):
        checkpoint.save_arrays(out_dir / f"supernet_seed{i}.snb", sn.state_arrays())
        checkpoint.save_sidecar(out_dir / f"supernet_seed{i}.json", {
            "mapping": config.mapping.to_json(),
            "protocol": config.protocol.to_json(),
            "space": config.space.to_json(),
            "seed_index": i,
        })


# ---------------------------------------------------------------------------
# One-factor-at-a-time sweep


@dataclass
class SweepResult:
    reports: list[MetricReport]
    failed: list[tuple[str, str]]
    best_config: ExperimentConfig
    best_choices: dict[str, object]


def _changed_paths(a: dict, b: dict, prefix: str = "") -> set[str]:
    keys = set(a) | set(b)
    out = set()
    for k in keys:
        pa, pb = a.get(k), b.get(k)
        path = f"{prefix}{k}"
        if isinstance(pa, dict) and isinstance(pb, dict):
            out |= _changed_paths(pa, pb, f"{path}.")
        elif pa != pb:
            out.add(path)
    return out


def run_sweep(sweep: FactorSweep, *, write_artifacts: bool = True,
              progress=None) -> SweepResult:
    """Sequential factor validation: vary one factor, freeze the best
    value by final search performance (sparse Kendall-Tau breaks ties),
    move to the next factor."""
    best = sweep.baseline
    reports: list[MetricReport] = []
    failed: list[tuple[str, str]] = []
    choices: dict[str, object] = {}
    for path, values in sweep.factors:
        candidates = []
        for value in values:
            cfg = set_field(best, path, value)
            changed = _changed_paths(best.to_json(), cfg.to_json())
            if not changed <= {path, "factor", "setting", "output_dir"}:
                raise MismatchedArchSet(
                    f"candidate for {path} changed extra fields: {sorted(changed)}"
                )
            cfg = replace(
                cfg,
                factor=path,
                setting=json.dumps(value),
                output_dir=str(Path(best.output_dir) / "sweep" / _slug(path) / _slug(str(value))),
            )
            if progress:
                progress(path, value)
            try:
                art = run_experiment(cfg, write_artifacts=write_artifacts)
            except DivergedTraining:
                failed.append((path, json.dumps(value)))
                continue
            reports.append(art.report)
            candidates.append((art.report, value))
        if not candidates:
            continue
        best_report, best_value = max(
            candidates, key=lambda rv: (rv[0].final_perf_mean, rv[0].skdt)
        )
        choices[path] = best_value
        best = set_field(best, path, best_value)
    if write_artifacts:
        out = Path(sweep.baseline.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "best_config.json").write_text(best.dumps())
        with open(out / "sweep_reports.csv", "w", newline="") as f:
            f.write(_comment(sweep.baseline) + "\n")
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in reports:
                w.writerow(r.csv_row())
            for path, value in failed:
                w.writerow([path, value, "failed", "", "", "", "", ""])
    return SweepResult(reports, failed, best, choices)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in s)


# ---------------------------------------------------------------------------
# Cross-experiment reports


def effect_report(reports: list[MetricReport], baseline: MetricReport) -> list[dict]:
    """Final-performance delta of every report against the baseline."""
    rows = []
    for r in reports:
        if r.arch_set_digest != baseline.arch_set_digest:
            raise MismatchedArchSet(
                f"report {r.factor}/{r.setting} used a different evaluation set"
            )
        rows.append({
            "factor": r.factor,
            "setting": r.setting,
            "delta_final_perf": r.final_perf_mean - baseline.final_perf_mean,
            "final_perf_std": r.final_perf_std,
            "baseline_std": baseline.final_perf_std,
        })
    return rows


def write_effect_csv(rows: list[dict], path, comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f)
        w.writerow(["factor", "setting", "delta_final_perf", "final_perf_std", "baseline_std"])
        for row in rows:
            w.writerow([row["factor"], row["setting"], f"{row['delta_final_perf']:.6f}",
                        f"{row['final_perf_std']:.6f}", f"{row['baseline_std']:.6f}"])


@dataclass
class CorrelationReport:
    rho_acc_final: float
    rho_skdt_final: float
    rho_acc_skdt: float
    points: list[dict]

    def rows(self) -> list[list[str]]:
        return [[
            f"{self.rho_acc_final:.6f}",
            f"{self.rho_skdt_final:.6f}",
            f"{self.rho_acc_skdt:.6f}",
        ]]


def correlation_report(reports: list[MetricReport]) -> CorrelationReport:
    """Pairwise Spearman between accuracy, sparse Kendall-Tau and final
    performance across experiments."""
    if len(reports) < 3:
        raise TooFewPoints(f"need at least 3 reports, got {len(reports)}")
    acc = [r.supernet_acc_mean for r in reports]
    skdt = [r.skdt for r in reports]
    final = [r.final_perf_mean for r in reports]
    points = [
        {"factor": r.factor, "setting": r.setting, "supernet_acc": a, "skdt": s, "final_perf": fp}
        for r, a, s, fp in zip(reports, acc, skdt, final)
    ]
    return CorrelationReport(
        rho_acc_final=spearman(acc, final),
        rho_skdt_final=spearman(skdt, final),
        rho_acc_skdt=spearman(acc, skdt),
        points=points,
    )


def write_correlation_csv(report: CorrelationReport, path, comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f)
        w.writerow(["acc_vs_final", "skdt_vs_final", "acc_vs_skdt"])
        w.writerows(report.rows())
        w.writerow([])
        w.writerow(["factor", "setting", "supernet_acc", "skdt", "final_perf"])
        for p in report.points:
            w.writerow([p["factor"], p["setting"], f"{p['supernet_acc']:.6f}",
                        f"{p['skdt']:.6f}", f"{p['final_perf']:.6f}"])
