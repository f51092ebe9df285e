"""Bench scenarios: timed uploads, query runs, failover, report emission.

Each scenario generates a seeded fixture, uploads it with a sweep of index
counts (or replication factors), runs its query list under both splitting
policies, and optionally repeats one query with a node kill mid-job.  The
report is a CSV plus gnuplot-style .dat files and rendered PNG figures; a
mismatch between index-scan and full-scan result hashes fails the scenario.
"""

from __future__ import annotations

import csv
import shutil
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cluster import Cluster, ClusterConfig, ReplicaConfig, upload_file
from .datagen import (
    BOB_QUERIES,
    SYN_QUERIES,
    SYNTHETIC_SCHEMA,
    USERVISITS_SCHEMA,
    generate_synthetic,
    generate_uservisits,
)
from .errors import HailError, ScenarioFailed
from .query import JobOptions, compute_slowdown, run_job
from .schema import Schema

CSV_COLUMNS = [
    "scenario", "phase", "label", "splitting", "indexes", "replication",
    "repetitions", "t_end_to_end_s", "t_ideal_s", "t_overhead_s", "rr_mean_s",
    "map_tasks", "slowdown_pct", "result_hash", "equivalence_ok",
]


@dataclass
class BenchScenario:
    name: str
    dataset: str  # "uservisits" | "synthetic"
    rows: int
    replica_config: ReplicaConfig
    queries: list  # (name, annotation text)
    repetitions: int = 3
    failover_fraction: float | None = None
    datanodes: int = 3
    map_slots: int = 2
    block_size: int = 512 * 1024
    partition_size: int = 1024
    seed: int = 7
    replication_sweep: tuple = ()  # non-empty: time upload at each factor

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.failover_fraction is not None and not 0 < self.failover_fraction < 1:
            raise ValueError("failover fraction must be in (0, 1)")

    @property
    def schema(self) -> Schema:
        return USERVISITS_SCHEMA if self.dataset == "uservisits" else SYNTHETIC_SCHEMA


def preset(name: str, rows: int | None = None, seed: int = 7) -> BenchScenario:
    """Canned scenarios runnable from the CLI."""
    if name == "bob":
        return BenchScenario(
            "bob", "uservisits", rows or 100_000,
            ReplicaConfig(3, (3, 1, 4)),  # visitDate, sourceIP, adRevenue
            list(BOB_QUERIES.items()), seed=seed,
        )
    if name == "synthetic":
        return BenchScenario(
            "synthetic", "synthetic", rows or 50_000,
            ReplicaConfig(3, (1, 2, 3)),
            list(SYN_QUERIES.items()), seed=seed,
        )
    if name == "failover":
        # one index on the same attribute for every replica, kill at 50%
        return BenchScenario(
            "failover", "uservisits", rows or 50_000,
            ReplicaConfig(3, (3, 3, 3)),
            [("Bob-Q1", BOB_QUERIES["Bob-Q1"])],
            repetitions=1, failover_fraction=0.5, datanodes=5, seed=seed,
        )
    if name == "upload-scaling":
        return BenchScenario(
            "upload-scaling", "synthetic", rows or 50_000,
            ReplicaConfig(3, (1, 2, 3)),
            [], repetitions=1, datanodes=6, seed=seed,
            replication_sweep=(3, 4, 5, 6),
        )
    raise ScenarioFailed(f"unknown scenario preset {name!r}")


@dataclass
class BenchReport:
    scenario: str
    rows: list = field(default_factory=list)  # dicts with CSV_COLUMNS keys
    csv_path: Path | None = None
    dat_paths: list = field(default_factory=list)
    figure_paths: list = field(default_factory=list)

    def add(self, **kw):
        row = {c: "" for c in CSV_COLUMNS}
        row["scenario"] = self.scenario
        row.update(kw)
        self.rows.append(row)


def _cluster_config(s: BenchScenario, replication: int) -> ClusterConfig:
    return ClusterConfig(
        datanodes=s.datanodes, map_slots=s.map_slots, replication=replication,
        block_size=s.block_size, partition_size=s.partition_size,
        expiry_interval=0.5, ack_timeout=60.0,
    )


def _fresh_cluster(s: BenchScenario, workdir: Path, tag: str, replication: int) -> Cluster:
    root = workdir / f"store-{tag}"
    if root.exists():
        shutil.rmtree(root)
    return Cluster(_cluster_config(s, replication), root).start()


def _timed_upload(s: BenchScenario, workdir: Path, tag: str, cfg: ReplicaConfig,
                  data_path: Path):
    times = []
    cluster = None
    for rep in range(s.repetitions):
        cluster = _fresh_cluster(s, workdir, tag, cfg.replication_factor)
        report = upload_file(cluster, data_path, s.schema, cfg, file_id="bench")
        times.append(report.wall_time_s)
    return statistics.mean(times), cluster


def run_scenario(s: BenchScenario, workdir: str | Path) -> BenchReport:
    """Run every step of the scenario; raises ScenarioFailed naming the
    first failing step."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    report = BenchReport(s.name)
    step = "generate"
    try:
        data_path = workdir / f"{s.dataset}-{s.rows}-{s.seed}.csv"
        if s.dataset == "uservisits":
            generate_uservisits(s.rows, s.seed, data_path)
        else:
            generate_synthetic(s.rows, s.seed, data_path)

        step = "upload"
        cluster = _run_uploads(s, workdir, data_path, report)

        step = "queries"
        _run_queries(s, cluster, report)

        if s.failover_fraction is not None:
            step = "failover"
            _run_failover(s, cluster, report)

        step = "report"
        report.csv_path = _write_csv(report, workdir)
        report.dat_paths = _write_dat_files(report, workdir)
        from .report import render_figures

        report.figure_paths = render_figures(report, workdir)
    except HailError as e:
        raise ScenarioFailed(f"step {step!r} failed: {e}") from e
    return report


def _run_uploads(s: BenchScenario, workdir: Path, data_path: Path, report: BenchReport):
    cluster = None
    if s.replication_sweep:
        for r in s.replication_sweep:
            if s.datanodes < r:
                raise ScenarioFailed(f"{r} replicas need {r} datanodes, have {s.datanodes}")
            sweep_keys = _distinct_keys(s, r)
            t, cluster = _timed_upload(s, workdir, f"r{r}", ReplicaConfig(r, sweep_keys), data_path)
            report.add(phase="upload", label=f"r={r}", indexes=r, replication=r,
                       repetitions=s.repetitions, t_end_to_end_s=f"{t:.4f}")
        return cluster
    r = s.replica_config.replication_factor
    for k in range(r + 1):
        cfg = ReplicaConfig(r, s.replica_config.sort_keys[:k] + (None,) * (r - k))
        t, cluster = _timed_upload(s, workdir, f"{k}idx", cfg, data_path)
        report.add(phase="upload", label=f"{k}-idx", indexes=k, replication=r,
                   repetitions=s.repetitions, t_end_to_end_s=f"{t:.4f}")
    # leave the fully indexed cluster in place for the query phase
    return cluster


def _distinct_keys(s: BenchScenario, r: int) -> tuple:
    width = len(s.schema)
    base = [k for k in s.replica_config.sort_keys if k is not None]
    keys = list(dict.fromkeys(base))
    for pos in range(1, width + 1):
        if len(keys) >= r:
            break
        if pos not in keys and s.schema.attribute(pos).type.fixed_size is not None:
            keys.append(pos)
    if len(keys) < r:
        raise ScenarioFailed(f"cannot pick {r} distinct fixed-size sort keys")
    return tuple(keys[:r])


def _avg_job(s, cluster, annotation, options_factory):
    times, rr, metrics = [], [], None
    results = None
    for _ in range(s.repetitions):
        results, metrics = run_job(
            annotation, None, "bench", cluster, s.schema, options_factory()
        )
        times.append(metrics.t_end_to_end_s)
        rr.extend(metrics.record_reader_times_s)
    return results, metrics, statistics.mean(times), statistics.mean(rr) if rr else 0.0


def _run_queries(s: BenchScenario, cluster, report: BenchReport):
    for qname, annotation in s.queries:
        _, m_full, t_full, rr_full = _avg_job(
            s, cluster, annotation, lambda: JobOptions(force_full_scan=True)
        )
        for splitting in ("default", "hail"):
            _, m, t, rr_mean = _avg_job(
                s, cluster, annotation, lambda sp=splitting: JobOptions(splitting=sp)
            )
            ok = m.result_hash == m_full.result_hash
            report.add(
                phase="query", label=qname, splitting=splitting,
                indexes=s.replica_config.replication_factor,
                replication=s.replica_config.replication_factor,
                repetitions=s.repetitions,
                t_end_to_end_s=f"{t:.4f}", t_ideal_s=f"{m.t_ideal_s:.4f}",
                t_overhead_s=f"{m.t_overhead_s:.4f}", rr_mean_s=f"{rr_mean:.6f}",
                map_tasks=m.map_task_count, result_hash=m.result_hash,
                equivalence_ok=str(ok),
            )
            if not ok:
                raise ScenarioFailed(
                    f"query {qname} ({splitting}): index-scan hash != full-scan hash"
                )
        report.add(
            phase="query", label=qname, splitting="full-scan",
            indexes=0, replication=s.replica_config.replication_factor,
            repetitions=s.repetitions, t_end_to_end_s=f"{t_full:.4f}",
            t_ideal_s=f"{m_full.t_ideal_s:.4f}", t_overhead_s=f"{m_full.t_overhead_s:.4f}",
            rr_mean_s=f"{rr_full:.6f}", map_tasks=m_full.map_task_count,
            result_hash=m_full.result_hash, equivalence_ok="True",
        )


def _run_failover(s: BenchScenario, cluster, report: BenchReport):
    qname, annotation = s.queries[0]
    baseline, m_base = run_job(
        annotation, None, "bench", cluster, s.schema, JobOptions(splitting="default")
    )
    victim = max(cluster.alive_datanodes())

    def killer(completed, total):
        if completed >= s.failover_fraction * total and cluster.datanodes[victim].is_alive():
            cluster.kill_node(victim)

    t0 = time.perf_counter()
    failed_run, m_fail = run_job(
        annotation, None, "bench", cluster, s.schema,
        JobOptions(splitting="default", on_progress=killer),
    )
    t_fail = time.perf_counter() - t0
    cluster.revive_node(victim)
    slowdown = compute_slowdown(t_fail, m_base.t_end_to_end_s)
    ok = m_fail.result_hash == m_base.result_hash
    report.add(
        phase="failover", label=qname, splitting="default",
        indexes=s.replica_config.replication_factor,
        replication=s.replica_config.replication_factor, repetitions=1,
        t_end_to_end_s=f"{t_fail:.4f}", rr_mean_s="",
        map_tasks=m_fail.map_task_count, slowdown_pct=f"{slowdown:.2f}",
        result_hash=m_fail.result_hash, equivalence_ok=str(ok),
    )
    if not ok:
        raise ScenarioFailed(f"failover run of {qname} changed the result set")


def _write_csv(report: BenchReport, workdir: Path) -> Path:
    path = workdir / f"{report.scenario}-report.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(report.rows)
    return path


def _write_dat_files(report: BenchReport, workdir: Path) -> list[Path]:
    """Gnuplot-style companions: whitespace-separated, '#' header line."""
    paths = []
    uploads = [r for r in report.rows if r["phase"] == "upload"]
    if uploads:
        p = workdir / f"{report.scenario}-upload.dat"
        with open(p, "w") as f:
            f.write("# label indexes time_s\n")
            for r in uploads:
                f.write(f"{r['label']} {r['indexes']} {r['t_end_to_end_s']}\n")
        paths.append(p)
    queries = [r for r in report.rows if r["phase"] == "query"]
    if queries:
        p = workdir / f"{report.scenario}-queries.dat"
        by_label: dict[str, dict] = {}
        for r in queries:
            by_label.setdefault(r["label"], {})[r["splitting"]] = r
        with open(p, "w") as f:
            f.write("# query t_fullscan_s t_default_s t_hail_s rr_fullscan_s rr_default_s\n")
            for label, entry in by_label.items():
                full = entry.get("full-scan", {})
                dflt = entry.get("default", {})
                hail = entry.get("hail", {})
                f.write(
                    f"{label} {full.get('t_end_to_end_s', 'nan')} "
                    f"{dflt.get('t_end_to_end_s', 'nan')} {hail.get('t_end_to_end_s', 'nan')} "
                    f"{full.get('rr_mean_s', 'nan')} {dflt.get('rr_mean_s', 'nan')}\n"
                )
        paths.append(p)
    return paths
