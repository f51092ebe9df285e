"""Annotations, splitting policies, the record reader, and job execution."""

import threading
import time

import numpy as np
import pytest

from conftest import make_cluster
from minihail.cluster import ReplicaConfig, upload_file
from minihail.datagen import BOB_QUERIES, USERVISITS_SCHEMA, generate_uservisits
from minihail.errors import AnnotationSyntaxError, JobFailed, UnknownAttribute
from minihail.query import (
    InputSplit,
    JobOptions,
    ScanMode,
    compute_slowdown,
    default_splitting,
    hail_splitting,
    parse_annotation,
    record_reader,
    run_job,
)
from minihail.schema import Attribute, AttrType, Schema, parse_line
from minihail.transport import BlockId

SMALL_SCHEMA = Schema(
    (Attribute("k", 1, AttrType.INT32), Attribute("v", 2, AttrType.INT32))
)


def int_data(n=2000, keyspace=97):
    return ("\n".join(f"{(i * 13) % keyspace},{i}" for i in range(n)) + "\n").encode()


class TestParseAnnotation:
    def test_bob_q1_shape(self):
        q = parse_annotation('filter="@3 between(1999-01-01,2000-01-01)", projection={@1}')
        assert len(q.conditions) == 1
        cond = q.conditions[0]
        assert (cond.position, cond.op) == (3, "between")
        assert cond.args == ("1999-01-01", "2000-01-01")
        assert q.projection == (1,)

    def test_projection_only(self):
        q = parse_annotation("projection={@1,@2}")
        assert q.conditions == ()
        assert q.projection == (1, 2)

    def test_conjunction(self):
        q = parse_annotation('filter="@1 =(5) and @2 >=(10)"')
        assert [c.op for c in q.conditions] == ["=", ">="]

    def test_unknown_attribute_at_bind(self):
        q = parse_annotation('filter="@99 =(5)"')
        schema = Schema(tuple(Attribute(f"c{i}", i, AttrType.INT32) for i in range(1, 20)))
        with pytest.raises(UnknownAttribute):
            q.bind(schema)

    def test_syntax_errors(self):
        for text in [
            'filter="@1 ??(5)"',
            'filter="@1 between(1)"',
            "projection={@1,bogus}",
            'filter="@1 =(5)" trailing garbage',
            'filter="@1 =()"',
        ]:
            with pytest.raises(AnnotationSyntaxError):
                parse_annotation(text)

    def test_between_lo_gt_hi_rejected_at_bind(self):
        q = parse_annotation('filter="@1 between(9,1)"')
        with pytest.raises(AnnotationSyntaxError):
            q.bind(SMALL_SCHEMA)

    def test_bad_literal_type(self):
        q = parse_annotation('filter="@1 =(notanint)"')
        with pytest.raises(AnnotationSyntaxError):
            q.bind(SMALL_SCHEMA)

    def test_empty_projection_means_all(self):
        q = parse_annotation('filter="@1 =(3)"')
        bound = q.bind(SMALL_SCHEMA)
        assert bound.projection == (1, 2)


class TestSplitting:
    def _cluster_with_blocks(self, tmp_path, n_datanodes, n_blocks, keys=(1, 2, None)):
        # one tiny block per line group: block_size chosen so each block ~2 rows
        cluster = make_cluster(tmp_path, datanodes=n_datanodes, block_size=24)
        data = ("\n".join(f"{i},{i}" for i in range(n_blocks * 2)) + "\n").encode()
        upload_file(cluster, data, SMALL_SCHEMA, ReplicaConfig(3, keys), file_id="s")
        return cluster, cluster.namenode.blocks_of_file("s")

    def test_indexed_filter_caps_splits_at_slots(self, tmp_path):
        cluster, blocks = self._cluster_with_blocks(tmp_path, 4, 16)
        bound = parse_annotation('filter="@1 >=(0)"').bind(SMALL_SCHEMA)
        splits = hail_splitting(blocks, cluster.namenode, bound, cluster.config.map_slots)
        assert len(splits) <= 4 * 2
        assert all(s.scan_mode is ScanMode.INDEX_SCAN for s in splits)
        covered = sorted(b for s in splits for b, _ in s.block_refs)
        assert covered == sorted(blocks)
        # grouped by target: every split's refs share one datanode
        for s in splits:
            assert len({dn for _, dn in s.block_refs}) == 1

    def test_unindexed_filter_one_split_per_block(self, tmp_path):
        cluster, blocks = self._cluster_with_blocks(tmp_path, 4, 10, keys=(None, None, None))
        bound = parse_annotation('filter="@1 >=(0)"').bind(SMALL_SCHEMA)
        splits = hail_splitting(blocks, cluster.namenode, bound, cluster.config.map_slots)
        assert len(splits) == len(blocks)
        assert all(s.scan_mode is ScanMode.FULL_SCAN for s in splits)
        assert all(len(s.block_refs) == 1 for s in splits)

    def test_no_filter_full_scan_per_block(self, tmp_path):
        cluster, blocks = self._cluster_with_blocks(tmp_path, 4, 6)
        bound = parse_annotation("projection={@1}").bind(SMALL_SCHEMA)
        splits = hail_splitting(blocks, cluster.namenode, bound, cluster.config.map_slots)
        assert len(splits) == len(blocks)
        assert all(s.scan_mode is ScanMode.FULL_SCAN for s in splits)

    def test_default_splitting_always_per_block(self, tmp_path):
        cluster, blocks = self._cluster_with_blocks(tmp_path, 4, 12)
        bound = parse_annotation('filter="@1 >=(0)"').bind(SMALL_SCHEMA)
        splits = default_splitting(blocks, cluster.namenode, bound)
        assert len(splits) == len(blocks)
        assert all(s.scan_mode is ScanMode.INDEX_SCAN for s in splits)

    def test_concentrated_placement_two_splits(self, tmp_path):
        # every indexed replica on one datanode, 2 slots -> 2 splits cover all
        cluster = make_cluster(tmp_path, datanodes=3, block_size=24, replication=1)
        data = ("\n".join(f"{i},{i}" for i in range(12)) + "\n").encode()
        upload_file(cluster, data, SMALL_SCHEMA, ReplicaConfig(1, (1,)), file_id="c")
        blocks = cluster.namenode.blocks_of_file("c")
        # replication 1 with rotation spreads blocks; re-check grouping count
        bound = parse_annotation('filter="@1 >=(0)"').bind(SMALL_SCHEMA)
        splits = hail_splitting(blocks, cluster.namenode, bound, 2)
        groups = {}
        for b in blocks:
            first = cluster.namenode.get_hosts_with_index(b, 1)[0]
            groups.setdefault(first, []).append(b)
        expected = sum(min(2, len(g)) for g in groups.values())
        assert len(splits) == expected


class TestRecordReader:
    def _indexed_cluster(self, tmp_path, rows=3000):
        cluster = make_cluster(tmp_path, block_size=8 * 1024)
        path = tmp_path / "uv.csv"
        generate_uservisits(rows, 11, path)
        upload_file(cluster, path, USERVISITS_SCHEMA, ReplicaConfig(3, (3, 1, 4)))
        return cluster, path

    def test_date_range_matches_line_oracle(self, tmp_path):
        cluster, path = self._indexed_cluster(tmp_path)
        annotation = parse_annotation(BOB_QUERIES["Bob-Q1"])
        bound = annotation.bind(USERVISITS_SCHEMA)
        # oracle: parse the raw file line by line
        lo = bound.conditions[0].lo
        hi = bound.conditions[0].hi
        expected = []
        for line in path.read_bytes().splitlines():
            rec = parse_line(line, USERVISITS_SCHEMA)
            if lo <= rec.values[2] <= hi:
                expected.append((rec.values[0],))
        results, metrics = run_job(annotation, None, "uv", cluster, USERVISITS_SCHEMA,
                                   JobOptions(splitting="default"))
        assert sorted(results) == sorted(expected)
        assert metrics.scan_mode_counts.get("INDEX_SCAN", 0) > 0
        assert metrics.scan_mode_counts.get("FULL_SCAN", 0) == 0

    def test_empty_predicate_reads_nothing_beyond_root(self, tmp_path):
        cluster, _ = self._indexed_cluster(tmp_path, rows=500)
        bound = parse_annotation('filter="@3 between(2050-01-01,2051-01-01)"').bind(
            USERVISITS_SCHEMA
        )
        blocks = cluster.namenode.blocks_of_file("uv")
        split = InputSplit(0, [(blocks[0], min(cluster.namenode.get_hosts(blocks[0])))],
                           ScanMode.INDEX_SCAN)
        traces = []
        out = [r for r in record_reader(split, bound, cluster, traces=traces) if not r.bad]
        assert out == []
        assert traces[0].mode is ScanMode.INDEX_SCAN
        assert traces[0].stats.fixed_ranges == []
        assert traces[0].stats.varchar_partitions == []

    def test_full_scan_equals_index_scan(self, tmp_path):
        cluster, _ = self._indexed_cluster(tmp_path)
        for name in ("Bob-Q1", "Bob-Q2", "Bob-Q3", "Bob-Q4", "Bob-Q5"):
            r_idx, m_idx = run_job(BOB_QUERIES[name], None, "uv", cluster,
                                   USERVISITS_SCHEMA, JobOptions(splitting="hail"))
            r_full, m_full = run_job(BOB_QUERIES[name], None, "uv", cluster,
                                     USERVISITS_SCHEMA, JobOptions(force_full_scan=True))
            assert sorted(r_idx) == sorted(r_full), name
            assert m_idx.result_hash == m_full.result_hash

    def test_bad_records_flagged_through_both_paths(self, tmp_path):
        cluster = make_cluster(tmp_path)
        data = b"1,2\ngarbage line\n5,6\n"
        upload_file(cluster, data, SMALL_SCHEMA, ReplicaConfig(3, (1, None, None)),
                    file_id="bad")

        def collect_bad(rec):
            return rec.raw if rec.bad else None

        bads, _ = run_job("projection={@1}", collect_bad, "bad", cluster, SMALL_SCHEMA,
                          JobOptions(splitting="default"))
        assert bads == [b"garbage line"]
        bads_full, _ = run_job("projection={@1}", collect_bad, "bad", cluster, SMALL_SCHEMA,
                               JobOptions(force_full_scan=True))
        assert bads_full == [b"garbage line"]

    def test_never_index_scans_wrong_replica(self, tmp_path):
        cluster = make_cluster(tmp_path)
        upload_file(cluster, int_data(), SMALL_SCHEMA, ReplicaConfig(3, (2, 2, 2)),
                    file_id="only2")
        # filter on attribute 1: nobody indexes it -> all tasks full-scan
        _, metrics = run_job('filter="@1 =(5)"', None, "only2", cluster, SMALL_SCHEMA,
                             JobOptions(splitting="hail"))
        assert metrics.scan_mode_counts.get("INDEX_SCAN", 0) == 0
        assert metrics.scan_mode_counts["FULL_SCAN"] > 0


class TestRunJob:
    def test_identity_counts_all_rows(self, tmp_path):
        cluster = make_cluster(tmp_path, block_size=4 * 1024)
        n = 2500
        upload_file(cluster, int_data(n), SMALL_SCHEMA, ReplicaConfig(3, (1, 2, None)),
                    file_id="all")
        results, metrics = run_job("projection={@1,@2}", None, "all", cluster, SMALL_SCHEMA)
        assert len(results) == n
        assert metrics.t_overhead_s == pytest.approx(
            metrics.t_end_to_end_s - metrics.t_ideal_s
        )
        assert metrics.parallel_map_tasks == 3 * cluster.config.map_slots

    def test_hail_vs_default_task_counts(self, tmp_path):
        cluster = make_cluster(tmp_path, block_size=2 * 1024)
        upload_file(cluster, int_data(4000), SMALL_SCHEMA, ReplicaConfig(3, (1, 2, None)),
                    file_id="tc")
        blocks = cluster.namenode.blocks_of_file("tc")
        _, m_default = run_job('filter="@1 between(10,40)"', None, "tc", cluster,
                               SMALL_SCHEMA, JobOptions(splitting="default"))
        _, m_hail = run_job('filter="@1 between(10,40)"', None, "tc", cluster,
                            SMALL_SCHEMA, JobOptions(splitting="hail"))
        assert m_default.map_task_count == len(blocks)
        assert m_hail.map_task_count <= 3 * cluster.config.map_slots
        assert m_hail.map_task_count < m_default.map_task_count

    def test_job_failed_when_no_replica_alive(self, tmp_path):
        cluster = make_cluster(tmp_path, expiry_interval=0.02, ack_timeout=2.0)
        upload_file(cluster, int_data(200), SMALL_SCHEMA, ReplicaConfig(3, (1, None, None)),
                    file_id="gone")
        for dn in list(cluster.datanodes):
            cluster.kill_node(dn)
        time.sleep(0.05)
        with pytest.raises(JobFailed):
            run_job("projection={@1}", None, "gone", cluster, SMALL_SCHEMA,
                    JobOptions(max_attempts=2))

    def test_kill_during_job_reschedules_and_completes(self, tmp_path):
        cluster = make_cluster(tmp_path, datanodes=5, block_size=2 * 1024,
                               expiry_interval=0.05)
        upload_file(cluster, int_data(6000), SMALL_SCHEMA, ReplicaConfig(3, (1, 1, 1)),
                    file_id="fo")
        baseline, m_base = run_job('filter="@1 between(5,60)"', None, "fo", cluster,
                                   SMALL_SCHEMA, JobOptions(splitting="default"))
        victim = 4
        killed = threading.Event()

        def killer(completed, total):
            if completed >= total // 2 and not killed.is_set():
                killed.set()
                cluster.kill_node(victim)

        results, metrics = run_job('filter="@1 between(5,60)"', None, "fo", cluster,
                                   SMALL_SCHEMA,
                                   JobOptions(splitting="default", on_progress=killer))
        assert killed.is_set()
        assert sorted(results) == sorted(baseline)
        # uniform index on all replicas: rescheduled tasks still index-scan
        assert metrics.rescheduled_tasks == metrics.rescheduled_index_scan_tasks
        assert metrics.scan_mode_counts.get("FULL_SCAN", 0) == 0
        slowdown = compute_slowdown(metrics.t_end_to_end_s, m_base.t_end_to_end_s)
        assert slowdown == pytest.approx(
            (metrics.t_end_to_end_s - m_base.t_end_to_end_s) / m_base.t_end_to_end_s * 100
        )
        cluster.revive_node(victim)

    def test_output_file_formatting(self, tmp_path):
        cluster = make_cluster(tmp_path)
        path = tmp_path / "uv.csv"
        generate_uservisits(200, 2, path)
        upload_file(cluster, path, USERVISITS_SCHEMA, ReplicaConfig(3, (3, None, None)))
        out = tmp_path / "result.csv"
        results, _ = run_job('filter="@3 >=(1990-01-01)", projection={@1,@3}', None, "uv",
                             cluster, USERVISITS_SCHEMA, JobOptions(output_path=out))
        lines = out.read_text().strip().splitlines()
        assert len(lines) == len(results)
        ip, date = lines[0].split(",")
        assert ip.count(".") == 3
        assert len(date.split("-")) == 3
