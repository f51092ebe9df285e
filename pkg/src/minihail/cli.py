"""Command-line interface: gen, upload, query, bench, kill, inspect."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import datagen
from .bench import preset, run_scenario
from .cluster import (
    Cluster,
    ClusterConfig,
    ReplicaConfig,
    load_cluster_config,
    parse_sort_keys,
    upload_file,
)
from .errors import HailError, ScenarioFailed
from .pax import parse_header, parse_index_section
from .query import JobOptions, parse_annotation, run_job
from .schema import load_schema_config
from .storage import ChecksummedBlockFile
from .transport import CHUNK_SIZE


def _load_schema(spec: str):
    if spec == "uservisits":
        return datagen.USERVISITS_SCHEMA
    if spec == "synthetic":
        return datagen.SYNTHETIC_SCHEMA
    return load_schema_config(spec)


def _build_cluster(args) -> Cluster:
    cfg = load_cluster_config(args.cluster_config) if args.cluster_config else ClusterConfig()
    if args.replication:
        cfg.replication = args.replication
    if args.sort_keys:
        cfg.sort_keys = parse_sort_keys(args.sort_keys)
    return Cluster(cfg, args.root).start()


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--cluster-config", help="line-based cluster config file")
    common.add_argument("--schema", help="schema config file, or 'uservisits'/'synthetic'")
    common.add_argument("--seed", type=int, default=7)
    common.add_argument("--splitting", choices=["hail", "default"], default="hail")
    common.add_argument("--filter", dest="filter_text", help='e.g. "@3 between(a,b) and @1 =(x)"')
    common.add_argument("--projection", help="e.g. @1,@4")
    common.add_argument("--replication", type=int)
    common.add_argument("--sort-keys", help="comma list of positions; 'none' for unsorted")
    common.add_argument("--root", default="hailstore", help="cluster storage root directory")

    parser = argparse.ArgumentParser(prog="minihail", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a fixture dataset")
    p.add_argument("dataset", choices=["uservisits", "synthetic"])
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("upload", parents=[common], help="upload a delimited text file")
    p.add_argument("data", help="input text file")
    p.add_argument("--file-id", help="store name (default: input file stem)")

    p = sub.add_parser("query", parents=[common], help="run a map-only selection/projection job")
    p.add_argument("file_id", help="stored file id")
    p.add_argument("--annotation", help="full annotation text (overrides --filter/--projection)")
    p.add_argument("--force-full-scan", action="store_true")
    p.add_argument("-o", "--output", help="result file (delimited text)")

    p = sub.add_parser("bench", parents=[common], help="run a bench scenario")
    p.add_argument("scenario", choices=["bob", "synthetic", "failover", "upload-scaling"])
    p.add_argument("--rows", type=int)
    p.add_argument("--workdir", default="bench-out")

    p = sub.add_parser("kill", parents=[common], help="mark a datanode dead (persistent)")
    p.add_argument("datanode", type=int)
    p.add_argument("--revive", action="store_true")

    p = sub.add_parser("inspect", parents=[common], help="dump a block file's metadata")
    p.add_argument("blockfile")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ScenarioFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except HailError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen":
        out = Path(args.output)
        if args.dataset == "uservisits":
            datagen.generate_uservisits(args.rows, args.seed, out)
        else:
            datagen.generate_synthetic(args.rows, args.seed, out)
        print(f"wrote {args.rows} rows to {out}")
        return 0

    if args.command == "upload":
        if not args.schema:
            print("error: upload needs --schema", file=sys.stderr)
            return 2
        schema = _load_schema(args.schema)
        cluster = _build_cluster(args)
        cfg = cluster.config.replica_config()
        report = upload_file(cluster, Path(args.data), schema, cfg, file_id=args.file_id)
        print(
            f"uploaded {report.file_id}: {report.block_count} blocks, "
            f"{report.record_count} records ({report.bad_record_count} bad), "
            f"{report.wall_time_s:.2f}s (convert {report.convert_s:.2f}s, "
            f"transfer {report.transfer_s:.2f}s)"
        )
        return 0

    if args.command == "query":
        if not args.schema:
            print("error: query needs --schema", file=sys.stderr)
            return 2
        schema = _load_schema(args.schema)
        cluster = _build_cluster(args)
        if args.annotation:
            annotation = parse_annotation(args.annotation)
        else:
            parts = []
            if args.filter_text:
                parts.append(f'filter="{args.filter_text}"')
            if args.projection:
                parts.append(f"projection={{{args.projection}}}")
            annotation = parse_annotation(", ".join(parts))
        options = JobOptions(
            splitting=args.splitting,
            force_full_scan=args.force_full_scan,
            output_path=Path(args.output) if args.output else None,
        )
        results, metrics = run_job(annotation, None, args.file_id, cluster, schema, options)
        print(
            f"{len(results)} rows | {metrics.map_task_count} map tasks "
            f"({metrics.scan_mode_counts}) | end-to-end {metrics.t_end_to_end_s:.3f}s, "
            f"ideal {metrics.t_ideal_s:.3f}s, overhead {metrics.t_overhead_s:.3f}s"
        )
        if args.output:
            print(f"results written to {args.output}")
        return 0

    if args.command == "bench":
        scenario = preset(args.scenario, rows=args.rows, seed=args.seed)
        report = run_scenario(scenario, args.workdir)
        print(f"scenario {scenario.name}: {len(report.rows)} report rows")
        print(f"csv: {report.csv_path}")
        for p in report.dat_paths + report.figure_paths:
            print(f"     {p}")
        return 0

    if args.command == "kill":
        cluster = _build_cluster(args)
        if args.revive:
            cluster.revive_node(args.datanode)
            print(f"datanode {args.datanode} revived")
        else:
            cluster.kill_node(args.datanode, persist=True)
            print(f"datanode {args.datanode} marked dead")
        return 0

    if args.command == "inspect":
        return _inspect(Path(args.blockfile))

    raise AssertionError(args.command)


def _inspect(path: Path) -> int:
    crc = path.with_suffix(".crc")
    if crc.exists():
        bf = ChecksummedBlockFile(path, crc)
        data = bf.read_all()
        print(f"{path}: {bf.size} bytes, checksums OK ({CHUNK_SIZE}B chunks)")
    else:
        data = path.read_bytes()
        print(f"{path}: {len(data)} bytes (no .crc sibling found)")
    schema, row_count, col_table, regions = parse_header(data)
    (bad_off, bad_len), (idx_off, idx_len), header_len = regions
    print(f"rows: {row_count}   header: {header_len}B   delimiter: {chr(schema.delimiter)!r}")
    for attr in schema.attributes:
        off, length = col_table[attr.position]
        print(f"  @{attr.position} {attr.name} {attr.type.value}: offset {off}, {length}B")
    print(f"bad region: offset {bad_off}, {bad_len}B")
    if idx_len:
        index, var_lists = parse_index_section(
            data[idx_off:idx_off + idx_len], idx_off, schema, row_count
        )
        print(
            f"index: SPARSE_CLUSTERED on @{index.key_position}, n={index.partition_size}, "
            f"rootDirectory entries: {index.partition_count}, "
            f"leaf bytes: {index.leaf_byte_size}, max key: {index.max_key}"
        )
        for pos, vl in sorted(var_lists.items()):
            print(f"  offset list @{pos}: {len(vl.offsets)} entries")
    else:
        print("index: none")
    return 0


if __name__ == "__main__":
    sys.exit(main())
