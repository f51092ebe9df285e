"""Query annotations, input splits, scheduling, and the record reader.

A job is map-only: an annotation binds a conjunctive filter and a projection
to attribute positions; splitting either packs many blocks per split routed
to index-matching replicas, or falls back to one split per block; the record
reader index-scans when the opened replica's index matches the filter and
full-scans otherwise.  Bad records always reach the map function, flagged.
"""

from __future__ import annotations

import hashlib
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .cluster import Cluster
from .errors import (
    AnnotationSyntaxError,
    DeadNodeError,
    JobFailed,
    ReadFailed,
    UnknownAttribute,
    UnknownBlock,
)
from .index import ReadStats, lookup_range, read_partitions, reconstruct
from .pax import deserialize, varchar_values
from .schema import Schema, format_value, parse_field
from .storage import FileColumnSource
from .transport import BlockId

_FILTER_RE = re.compile(r'filter\s*=\s*"([^"]*)"')
_PROJ_RE = re.compile(r"projection\s*=\s*\{([^}]*)\}")
_COND_RE = re.compile(r"^@(\d+)\s+(between|>=|<=|=)\s*\(([^)]*)\)$")
_PROJ_ITEM_RE = re.compile(r"^@(\d+)$")


@dataclass(frozen=True)
class Condition:
    position: int
    op: str  # '=', '>=', '<=', 'between'
    args: tuple[str, ...]


@dataclass(frozen=True)
class QueryAnnotation:
    """Parsed but untyped annotation; binding types it against a schema."""

    conditions: tuple[Condition, ...]
    projection: tuple[int, ...]  # empty = all attributes

    def bind(self, schema: Schema) -> "BoundQuery":
        bound = []
        for cond in self.conditions:
            if not 1 <= cond.position <= len(schema):
                raise UnknownAttribute(f"@{cond.position} not in 1..{len(schema)}")
            attr_type = schema.attribute(cond.position).type
            vals = []
            for a in cond.args:
                v = parse_field(a.encode("utf-8"), attr_type)
                if v is None:
                    raise AnnotationSyntaxError(
                        f"literal {a!r} does not parse as {attr_type.value} for @{cond.position}"
                    )
                vals.append(v)
            if cond.op == "=":
                lo = hi = vals[0]
            elif cond.op == ">=":
                lo, hi = vals[0], None
            elif cond.op == "<=":
                lo, hi = None, vals[0]
            else:
                lo, hi = vals
                if lo > hi:
                    raise AnnotationSyntaxError(f"between({cond.args[0]},{cond.args[1]}): lo > hi")
            bound.append(BoundCondition(cond.position, lo, hi))
        for p in self.projection:
            if not 1 <= p <= len(schema):
                raise UnknownAttribute(f"@{p} not in 1..{len(schema)}")
        projection = self.projection or tuple(range(1, len(schema) + 1))
        return BoundQuery(tuple(bound), projection, schema)


@dataclass(frozen=True)
class BoundCondition:
    """lo <= value <= hi with None as an open end."""

    position: int
    lo: object
    hi: object

    def matches(self, value) -> bool:
        if self.lo is not None and value < self.lo:
            return False
        if self.hi is not None and value > self.hi:
            return False
        return True


@dataclass(frozen=True)
class BoundQuery:
    conditions: tuple[BoundCondition, ...]
    projection: tuple[int, ...]
    schema: Schema


def parse_annotation(text: str) -> QueryAnnotation:
    """Parse `filter="@p op(args) [and ...]", projection={@p,...}`.

    Both clauses are optional; clauses may be separated by ',' or ';'.
    """
    rest = text
    m = _FILTER_RE.search(rest)
    conditions = []
    if m:
        filter_text = m.group(1).strip()
        rest = rest[: m.start()] + rest[m.end():]
        if filter_text:
            for part in filter_text.split(" and "):
                cm = _COND_RE.match(part.strip())
                if not cm:
                    raise AnnotationSyntaxError(f"bad filter condition {part.strip()!r}")
                position, op, args_text = int(cm.group(1)), cm.group(2), cm.group(3)
                args = tuple(a.strip() for a in args_text.split(","))
                if op == "between":
                    if len(args) != 2:
                        raise AnnotationSyntaxError("between takes two arguments")
                elif len(args) != 1 or args[0] == "":
                    raise AnnotationSyntaxError(f"{op} takes one argument")
                conditions.append(Condition(position, op, args))
    m = _PROJ_RE.search(rest)
    projection = []
    if m:
        proj_text = m.group(1).strip()
        rest = rest[: m.start()] + rest[m.end():]
        if proj_text:
            for item in proj_text.split(","):
                pm = _PROJ_ITEM_RE.match(item.strip())
                if not pm:
                    raise AnnotationSyntaxError(f"bad projection item {item.strip()!r}")
                projection.append(int(pm.group(1)))
    if rest.strip(" ,;\t\n"):
        raise AnnotationSyntaxError(f"unparsed annotation text {rest.strip()!r}")
    return QueryAnnotation(tuple(conditions), tuple(projection))


class ScanMode(Enum):
    INDEX_SCAN = "INDEX_SCAN"
    FULL_SCAN = "FULL_SCAN"


@dataclass
class InputSplit:
    split_id: int
    block_refs: list[tuple[BlockId, int]]  # (block, target datanode)
    scan_mode: ScanMode

    @property
    def target(self) -> int:
        return self.block_refs[0][1]


@dataclass(frozen=True)
class TaskRecord:
    """What the map function receives: projected values, or a flagged bad row."""

    values: tuple | None
    bad: bool = False
    raw: bytes | None = None


def _alive_hosts(namenode, block_id) -> list[int]:
    hosts = sorted(namenode.get_hosts(block_id))
    if not hosts:
        raise JobFailed(f"{block_id}: no alive replica")
    return hosts


def _first_indexed_condition(namenode, blocks, bound: BoundQuery):
    """First conjunct whose attribute has a matching alive replica somewhere."""
    for cond in bound.conditions:
        for b in blocks:
            hosts = namenode.get_hosts_with_index(b, cond.position)
            if hosts and namenode.replica_info(b, hosts[0]).indexed_attribute == cond.position:
                return cond
    return None


def hail_splitting(blocks, namenode, bound: BoundQuery, map_slots_per_node: int) -> list[InputSplit]:
    """Pack blocks into at most map_slots splits per hosting datanode when an
    index serves the filter; otherwise one full-scan split per block."""
    cond = _first_indexed_condition(namenode, blocks, bound)
    if cond is None:
        return _default_full_splits(blocks, namenode)
    groups: dict[int, list[BlockId]] = {}
    for b in blocks:
        hosts = namenode.get_hosts_with_index(b, cond.position)
        if not hosts:
            raise JobFailed(f"{b}: no alive replica")
        groups.setdefault(hosts[0], []).append(b)
    splits = []
    for dn in sorted(groups):
        group = groups[dn]
        k = min(map_slots_per_node, len(group))
        buckets = [group[i::k] for i in range(k)]  # round-robin
        for bucket in buckets:
            splits.append(
                InputSplit(len(splits), [(b, dn) for b in bucket], ScanMode.INDEX_SCAN)
            )
    return splits


def _default_full_splits(blocks, namenode) -> list[InputSplit]:
    splits = []
    for b in blocks:
        target = _alive_hosts(namenode, b)[0]
        splits.append(InputSplit(len(splits), [(b, target)], ScanMode.FULL_SCAN))
    return splits


def default_splitting(blocks, namenode, bound: BoundQuery) -> list[InputSplit]:
    """Standard per-block splits; each split still targets a replica whose
    index can serve the filter, when one exists."""
    splits = []
    for b in blocks:
        mode = ScanMode.FULL_SCAN
        target = None
        for cond in bound.conditions:
            hosts = namenode.get_hosts_with_index(b, cond.position)
            if hosts and namenode.replica_info(b, hosts[0]).indexed_attribute == cond.position:
                mode, target = ScanMode.INDEX_SCAN, hosts[0]
                break
        if target is None:
            target = _alive_hosts(namenode, b)[0]
        splits.append(InputSplit(len(splits), [(b, target)], mode))
    return splits


def _candidate_replicas(cluster, block_id, bound, running_node):
    """Replica order to try: index-matching first, local before remote."""
    nn = cluster.namenode
    for cond in bound.conditions:
        hosts = nn.get_hosts_with_index(block_id, cond.position)
        if hosts and nn.replica_info(block_id, hosts[0]).indexed_attribute == cond.position:
            matching = [
                h for h in hosts
                if nn.replica_info(block_id, h).indexed_attribute == cond.position
            ]
            rest = [h for h in hosts if h not in matching]
            key = lambda h: (0 if h == running_node else 1, h)
            return sorted(matching, key=key) + sorted(rest, key=key)
    hosts = sorted(nn.get_hosts(block_id), key=lambda h: (0 if h == running_node else 1, h))
    return hosts


@dataclass
class BlockReadTrace:
    block_id: BlockId
    datanode: int
    mode: ScanMode
    rows_emitted: int
    stats: ReadStats


def record_reader(split: InputSplit, bound: BoundQuery, cluster: Cluster,
                  running_node: int | None = None, force_full_scan: bool = False,
                  traces: list | None = None):
    """Yield TaskRecords for every block of the split.

    Index scan loads the root directory into memory, maps the driving
    conjunct to a partition range, post-filters boundary partitions, and
    reconstructs only qualifying rows; full scan reads the whole replica.
    Raises ReadFailed when a block cannot be served, for the scheduler to retry.
    """
    for block_id, target in split.block_refs:
        candidates = _candidate_replicas(cluster, block_id, bound, running_node)
        if target in candidates:
            candidates = [target] + [c for c in candidates if c != target]
        src = None
        errors = []
        for dn_id in candidates:
            try:
                bf = cluster.datanodes[dn_id].read_block(block_id)
                src = FileColumnSource(bf)
                break
            except (ReadFailed, DeadNodeError, OSError) as e:
                errors.append(e)
        if src is None:
            raise ReadFailed(f"{block_id}: no readable replica ({errors[-1] if errors else 'none'})")

        driving = None
        if not force_full_scan and src.index is not None:
            for cond in bound.conditions:
                if cond.position == src.index.key_position:
                    driving = cond
                    break
        mode = ScanMode.INDEX_SCAN if driving is not None else ScanMode.FULL_SCAN
        emitted = 0
        if driving is not None:
            rows = _index_scan(src, bound, driving)
        else:
            rows = _full_scan(src, bound)
        for values in rows:
            emitted += 1
            yield TaskRecord(values)
        for raw in src.read_bad_rows():
            yield TaskRecord(None, bad=True, raw=raw)
        if traces is not None:
            traces.append(BlockReadTrace(block_id, dn_id, mode, emitted, src.stats))
        src.bf.close()


def _index_scan(src: FileColumnSource, bound: BoundQuery, driving: BoundCondition):
    index = src.index
    if index.max_key is None:  # empty block
        return []
    lo = driving.lo if driving.lo is not None else index.root_directory[0].item()
    hi = driving.hi if driving.hi is not None else index.max_key
    if lo > hi:
        return []
    pr = lookup_range(index, lo, hi)
    if pr is None:
        return []
    row_ids, _ = read_partitions(src, index, pr[0], pr[1], lo, hi)
    if len(row_ids) == 0:
        return []
    residual = [c for c in bound.conditions if c is not driving]
    needed = list(bound.projection)
    for c in residual:
        if c.position not in needed:
            needed.append(c.position)
    rows = reconstruct(src, row_ids, needed)
    proj_idx = [needed.index(p) for p in bound.projection]
    res_idx = [(needed.index(c.position), c) for c in residual]
    out = []
    for row in rows:
        if all(cond.matches(row[i]) for i, cond in res_idx):
            out.append(tuple(row[i] for i in proj_idx))
    return out


def _full_scan(src: FileColumnSource, bound: BoundQuery):
    """Read the entire replica, then filter and reconstruct in memory."""
    block = deserialize(src.bf.read_all())
    src.stats.bytes_read += src.bf.size
    mask = np.ones(block.row_count, dtype=bool)
    decoded: dict[int, list] = {}

    def column_values(pos):
        if pos not in decoded:
            col = block.columns[pos]
            decoded[pos] = varchar_values(col) if isinstance(col, bytes) else col
        return decoded[pos]

    for cond in bound.conditions:
        col = column_values(cond.position)
        if isinstance(col, list):
            lo = cond.lo.encode() if cond.lo is not None else None
            hi = cond.hi.encode() if cond.hi is not None else None
            cmask = np.fromiter(
                (
                    (lo is None or v >= lo) and (hi is None or v <= hi)
                    for v in col
                ),
                dtype=bool,
                count=block.row_count,
            )
        else:
            cmask = np.ones(block.row_count, dtype=bool)
            if cond.lo is not None:
                cmask &= col >= cond.lo
            if cond.hi is not None:
                cmask &= col <= cond.hi
        mask &= cmask
    row_ids = np.flatnonzero(mask)
    proj_cols = []
    for pos in bound.projection:
        col = column_values(pos)
        if isinstance(col, list):
            proj_cols.append([col[i].decode("utf-8") for i in row_ids])
        else:
            proj_cols.append([v.item() for v in col[row_ids]])
    return [tuple(c[i] for c in proj_cols) for i in range(len(row_ids))]


@dataclass
class JobMetrics:
    t_end_to_end_s: float
    record_reader_times_s: list[float]
    t_ideal_s: float
    t_overhead_s: float
    map_task_count: int
    parallel_map_tasks: int
    splitting: str
    scan_mode_counts: dict = field(default_factory=dict)
    rescheduled_tasks: int = 0
    rescheduled_index_scan_tasks: int = 0
    result_hash: str = ""
    slowdown_pct: float | None = None


def compute_slowdown(t_fail: float, t_base: float) -> float:
    """Percent slowdown of a run with a failure over the baseline run."""
    return (t_fail - t_base) / t_base * 100.0


def result_hash(results: list) -> str:
    """Order-insensitive hash of a result multiset."""
    h = hashlib.sha256()
    for line in sorted(repr(r) for r in results):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class JobOptions:
    splitting: str = "hail"  # "hail" | "default"
    force_full_scan: bool = False
    output_path: Path | None = None
    max_attempts: int = 6
    on_progress: object = None  # callable(completed, total)
    map_fn: object = None  # filled by run_job


def default_map_fn(rec: TaskRecord):
    return None if rec.bad else rec.values


@dataclass
class _Task:
    split: InputSplit
    attempts: int = 0
    rescheduled: bool = False
    rr_time: float = 0.0
    traces: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


class _Scheduler:
    """Single owner of the task queue; assigns tasks to per-node map slots,
    preferring each task's target node, and requeues failed tasks."""

    def __init__(self, cluster: Cluster, tasks: list[_Task], bound: BoundQuery,
                 options: JobOptions):
        self.cluster = cluster
        self.tasks = tasks
        self.bound = bound
        self.options = options
        self.pending = deque(tasks)
        self.free = {dn: cluster.config.map_slots for dn in cluster.alive_datanodes()}
        self.cond = threading.Condition()
        self.inflight = 0
        self.completed = 0
        self.error: Exception | None = None

    def _pick(self):
        """(task, node) to run next, or None when nothing is assignable now."""
        alive = set(self.cluster.alive_datanodes())
        for node in list(self.free):
            if node not in alive:
                del self.free[node]
        for node, free in self.free.items():
            if free <= 0:
                continue
            for i, task in enumerate(self.pending):
                if task.split.target == node:
                    del self.pending[i]
                    return task, node
        open_nodes = sorted(n for n, free in self.free.items() if free > 0)
        if open_nodes and self.pending:
            return self.pending.popleft(), open_nodes[0]
        return None

    def run(self):
        while True:
            with self.cond:
                while True:
                    if self.error:
                        raise self.error
                    if self.completed == len(self.tasks):
                        return
                    if self.pending:
                        if not self.free and self.inflight == 0:
                            raise JobFailed("no alive datanodes with free slots")
                        pick = self._pick()
                        if pick is not None:
                            break
                    self.cond.wait(timeout=0.1)
                task, node = pick
                self.free[node] = self.free.get(node, 1) - 1
                self.inflight += 1
            threading.Thread(target=self._run_task, args=(task, node), daemon=True).start()

    def _run_task(self, task: _Task, node: int):
        failed = None
        outputs = []
        traces = []
        t0 = time.perf_counter()
        try:
            map_fn = self.options.map_fn
            for rec in record_reader(
                task.split, self.bound, self.cluster, running_node=node,
                force_full_scan=self.options.force_full_scan, traces=traces,
            ):
                if not self.cluster.datanodes[node].is_alive():
                    raise ReadFailed(f"node {node} died while running task {task.split.split_id}")
                out = map_fn(rec)
                if out is not None:
                    outputs.append(out)
        except (ReadFailed, DeadNodeError, UnknownBlock) as e:
            failed = e
        rr_time = time.perf_counter() - t0
        with self.cond:
            self.inflight -= 1
            if node in self.free:
                self.free[node] += 1
            if failed is None:
                task.outputs = outputs
                task.traces = traces
                task.rr_time = rr_time
                self.completed += 1
                if self.options.on_progress is not None:
                    self.options.on_progress(self.completed, len(self.tasks))
            else:
                task.attempts += 1
                task.rescheduled = True
                if task.attempts >= self.options.max_attempts:
                    self.error = JobFailed(
                        f"task {task.split.split_id} failed {task.attempts} times: {failed}"
                    )
                else:
                    self.pending.append(task)
            self.cond.notify_all()


def run_job(query, map_fn, file_id: str, cluster: Cluster, schema: Schema,
            options: JobOptions | None = None):
    """Split, schedule, read, and map; returns (results, JobMetrics)."""
    options = options or JobOptions()
    if isinstance(query, str):
        query = parse_annotation(query)
    bound = query.bind(schema) if isinstance(query, QueryAnnotation) else query
    map_fn = map_fn or default_map_fn
    options.map_fn = map_fn

    t0 = time.perf_counter()
    blocks = cluster.namenode.blocks_of_file(file_id)
    if not blocks:
        raise JobFailed(f"no blocks stored for file id {file_id!r}")
    if options.splitting == "hail" and not options.force_full_scan:
        splits = hail_splitting(blocks, cluster.namenode, bound, cluster.config.map_slots)
    else:
        splits = default_splitting(blocks, cluster.namenode, bound)
        if options.force_full_scan:
            splits = [InputSplit(s.split_id, s.block_refs, ScanMode.FULL_SCAN) for s in splits]

    parallel = len(cluster.alive_datanodes()) * cluster.config.map_slots
    tasks = [_Task(s) for s in splits]
    _Scheduler(cluster, tasks, bound, options).run()

    results = []
    for task in tasks:
        results.extend(task.outputs)
    t_end = time.perf_counter() - t0

    rr_times = [t.rr_time for t in tasks]
    avg_rr = sum(rr_times) / len(rr_times) if rr_times else 0.0
    t_ideal = (len(tasks) / parallel) * avg_rr if parallel else 0.0
    mode_counts: dict[str, int] = {}
    for t in tasks:
        for trace in t.traces:
            mode_counts[trace.mode.value] = mode_counts.get(trace.mode.value, 0) + 1
    rescheduled = [t for t in tasks if t.rescheduled]
    rescheduled_index = [
        t for t in rescheduled
        if t.traces and all(tr.mode is ScanMode.INDEX_SCAN for tr in t.traces)
    ]
    metrics = JobMetrics(
        t_end_to_end_s=t_end,
        record_reader_times_s=rr_times,
        t_ideal_s=t_ideal,
        t_overhead_s=t_end - t_ideal,
        map_task_count=len(tasks),
        parallel_map_tasks=parallel,
        splitting=options.splitting if not options.force_full_scan else "default",
        scan_mode_counts=mode_counts,
        rescheduled_tasks=len(rescheduled),
        rescheduled_index_scan_tasks=len(rescheduled_index),
        result_hash=result_hash(results),
    )
    if options.output_path is not None:
        _write_results(options.output_path, results, bound)
    return results, metrics


def _write_results(path: Path, results: list, bound: BoundQuery):
    """Results as delimited text; tuple outputs are formatted per schema."""
    types = [bound.schema.attribute(p).type for p in bound.projection]
    delim = chr(bound.schema.delimiter)
    with open(path, "w") as f:
        for r in results:
            if isinstance(r, tuple) and len(r) == len(types):
                f.write(delim.join(format_value(v, t) for v, t in zip(r, types)))
            else:
                f.write(str(r))
            f.write("\n")
