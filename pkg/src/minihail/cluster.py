"""Simulated namenode and datanodes, and the replica upload pipeline.

Datanodes are in-process actors: each client or upstream connection gets a
handler thread, frames flow through queues as serialized bytes (the same
frames a TCP deployment would carry).  During upload each pipeline position
sorts its copy of the block by its own key, builds the index, recomputes its
checksums, flushes data + crc files, and registers with the namenode —
last pipeline position first.
"""

from __future__ import annotations

import queue
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DeadNodeError,
    FormatError,
    HailError,
    InsufficientDatanodes,
    ReadFailed,
    UnknownBlock,
    UploadFailed,
)
from .index import build_index, sort_block
from .pax import block_from_text, deserialize, serialize
from .schema import AttrType, Schema, cut_block_spans
from .storage import ChecksummedBlockFile, write_file_once
from .transport import (
    FRAME_ACK,
    FRAME_BLOCK_OPEN,
    FRAME_PACKET,
    Ack,
    AckKind,
    BlockId,
    BlockOpen,
    checksum_file,
    decode_frame,
    encode_ack_frame,
    encode_block_open,
    encode_packet_frame,
    packetize,
    verify_packet,
)

_CLOSE = object()


@dataclass(frozen=True)
class ReplicaInfo:
    """What the namenode knows about one (block, datanode) replica."""

    sort_key_position: int | None
    indexed_attribute: int | None
    index_type: str | None  # "SPARSE_CLUSTERED" or None
    hail_block_size: int
    index_offset: int
    index_length: int
    partition_size: int | None


@dataclass(frozen=True)
class ReplicaConfig:
    """Replication factor and the sort key for each pipeline position
    (None = keep that replica unsorted and unindexed)."""

    replication_factor: int
    sort_keys: tuple

    def __post_init__(self):
        if len(self.sort_keys) != self.replication_factor:
            raise ValueError("sort_keys must have one entry per replica")

    def validate(self, schema: Schema):
        for key in self.sort_keys:
            if key is None:
                continue
            if not 1 <= key <= len(schema):
                raise ValueError(f"sort key position {key} not in schema")
            if schema.attribute(key).type.fixed_size is None:
                raise ValueError(f"sort key {key} is {AttrType.VARCHAR.value}; keys must be fixed-size")


@dataclass
class ClusterConfig:
    datanodes: int = 3
    map_slots: int = 2
    replication: int = 3
    sort_keys: tuple = (None, None, None)
    block_size: int = 4 * 1024 * 1024
    partition_size: int = 1024
    expiry_interval: float = 2.0
    ack_timeout: float = 15.0
    upload_window: int = 3

    def replica_config(self) -> ReplicaConfig:
        keys = tuple(self.sort_keys)
        if len(keys) < self.replication:
            keys = keys + (None,) * (self.replication - len(keys))
        return ReplicaConfig(self.replication, keys[: self.replication])


def load_cluster_config(path: str | Path) -> ClusterConfig:
    """Line-based config: `<key> <value>` pairs, '#' comments."""
    cfg = ClusterConfig()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        try:
            if key == "datanodes":
                cfg.datanodes = int(value)
            elif key == "map_slots":
                cfg.map_slots = int(value)
            elif key == "replication":
                cfg.replication = int(value)
            elif key == "sort_keys":
                cfg.sort_keys = parse_sort_keys(value)
            elif key == "block_size":
                cfg.block_size = int(value)
            elif key == "partition_size":
                cfg.partition_size = int(value)
            elif key == "expiry_interval":
                cfg.expiry_interval = float(value)
            elif key == "ack_timeout":
                cfg.ack_timeout = float(value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return cfg


def parse_sort_keys(text: str) -> tuple:
    """Comma list of attribute positions; 'none' marks an unsorted replica."""
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        out.append(None if part in ("none", "-") else int(part))
    return tuple(out)


class Connection:
    """One directed frame pipe to a datanode plus its ack return path."""

    def __init__(self, dn: "Datanode"):
        self.dn = dn
        self._frames = queue.Queue()
        self._acks = queue.Queue()
        self.tamper = None  # test hook: fn(frame bytes) -> frame bytes

    def send_frame(self, frame: bytes):
        if not self.dn.is_alive():
            raise DeadNodeError(f"datanode {self.dn.id} is down")
        if self.tamper is not None:
            frame = self.tamper(frame)
        self._frames.put(frame)

    def close(self):
        self._frames.put(_CLOSE)

    def send_ack(self, frame: bytes):
        self._acks.put(frame)

    def recv_ack(self, timeout: float):
        return self._acks.get(timeout=timeout)

    def _next_frame(self):
        """Handler side; returns _CLOSE when the peer closed or the node died."""
        while True:
            if not self.dn.is_alive():
                return _CLOSE
            try:
                return self._frames.get(timeout=0.05)
            except queue.Empty:
                continue


@dataclass
class _BlockState:
    open_msg: BlockOpen
    my_key: int | None
    is_last: bool
    downstream: Connection | None
    chunks: list = field(default_factory=list)
    next_seq: int = 0
    flush_result: "queue.Queue" = field(default_factory=queue.Queue)
    failed: bool = False


class Datanode:
    """One storage node: a directory of replicas plus per-connection workers."""

    def __init__(self, dn_id: int, root: Path, map_slots: int, cluster: "Cluster"):
        self.id = dn_id
        self.root = root
        self.map_slots = map_slots
        self.cluster = cluster
        self._lock = threading.Lock()
        self.alive = not (root / ".dead").exists()
        self.killed_at = time.monotonic() - 1e9 if not self.alive else None

    def is_alive(self) -> bool:
        with self._lock:
            return self.alive

    def kill(self, persist: bool = False):
        with self._lock:
            if not self.alive:
                return
            self.alive = False
            self.killed_at = time.monotonic()
        if persist:
            (self.root / ".dead").touch()

    def revive(self):
        with self._lock:
            self.alive = True
            self.killed_at = None
        marker = self.root / ".dead"
        if marker.exists():
            marker.unlink()

    # -- storage paths

    def block_path(self, block_id: BlockId) -> Path:
        return self.root / f"{block_id.file_id}_{block_id.index}.hail"

    def crc_path(self, block_id: BlockId) -> Path:
        return self.root / f"{block_id.file_id}_{block_id.index}.crc"

    def read_block(self, block_id: BlockId) -> ChecksummedBlockFile:
        if not self.is_alive():
            raise ReadFailed(f"datanode {self.id} is down")
        return ChecksummedBlockFile(
            self.block_path(block_id), self.crc_path(block_id), alive_check=self.is_alive
        )

    # -- upload pipeline

    def open_connection(self) -> Connection:
        if not self.is_alive():
            raise DeadNodeError(f"datanode {self.id} is down")
        conn = Connection(self)
        threading.Thread(target=self._serve, args=(conn,), daemon=True).start()
        return conn

    def _serve(self, conn: Connection):
        state: _BlockState | None = None
        try:
            while True:
                frame = conn._next_frame()
                if frame is _CLOSE:
                    return
                try:
                    ftype, msg = decode_frame(frame)
                except ValueError:
                    if state is not None:
                        self._fail(conn, state.open_msg.block_id, state.next_seq)
                        state.failed = True
                    return
                if ftype == FRAME_BLOCK_OPEN:
                    state = self._open_block(conn, frame, msg)
                    if state is None:
                        return
                elif ftype == FRAME_PACKET:
                    if state is None or state.failed:
                        continue
                    if not self._handle_packet(conn, state, frame, msg):
                        state.failed = True
                elif ftype == FRAME_ACK:
                    continue  # acks never arrive on the downstream pipe
        finally:
            if state is not None and state.downstream is not None:
                state.downstream.close()

    def _open_block(self, conn: Connection, frame: bytes, bo: BlockOpen) -> _BlockState | None:
        my_pos = bo.pipeline.index(self.id)
        is_last = my_pos == len(bo.pipeline) - 1
        downstream = None
        if not is_last:
            try:
                downstream = self.cluster.datanodes[bo.pipeline[my_pos + 1]].open_connection()
                downstream.send_frame(frame)
            except DeadNodeError:
                self._fail(conn, bo.block_id, 0)
                return None
        state = _BlockState(bo, bo.sort_keys[my_pos], is_last, downstream)
        if downstream is not None:
            threading.Thread(
                target=self._pump_acks, args=(conn, state), daemon=True
            ).start()
        return state

    def _handle_packet(self, conn: Connection, state: _BlockState, frame: bytes, p) -> bool:
        bo = state.open_msg
        if p.block_id != bo.block_id or p.seq != state.next_seq:
            self._fail(conn, bo.block_id, p.seq)
            return False
        state.next_seq += 1
        if state.downstream is not None:
            try:
                state.downstream.send_frame(frame)
            except DeadNodeError:
                self._fail(conn, bo.block_id, p.seq)
                return False
        if state.is_last:
            corrupt = verify_packet(p)
            if corrupt is not None:
                self._fail(conn, bo.block_id, p.seq)
                return False
        state.chunks.append(p.data)
        if not p.last:
            if state.is_last:
                conn.send_ack(
                    encode_ack_frame(Ack(bo.block_id, p.seq, AckKind.PACKET_VALIDATED, [self.id]))
                )
            return True
        # final packet: sort, index, flush, then ack/register
        info = self._process_block(bo, state.my_key, b"".join(state.chunks))
        if state.is_last:
            if info is None or not self.is_alive():
                self._fail(conn, bo.block_id, p.seq)
                return False
            self.cluster.namenode.register_replica(bo.block_id, self.id, info, bo.replication)
            conn.send_ack(
                encode_ack_frame(Ack(bo.block_id, p.seq, AckKind.BLOCK_FLUSHED, [self.id]))
            )
        else:
            state.flush_result.put(info)
        return True

    def _pump_acks(self, upstream: Connection, state: _BlockState):
        """Forward acks from downstream to upstream, appending our id; the
        final (BLOCK_FLUSHED) ack waits for the local flush and registration."""
        bo = state.open_msg
        while True:
            try:
                frame = state.downstream.recv_ack(self.cluster.config.ack_timeout)
            except queue.Empty:
                self._fail(upstream, bo.block_id, state.next_seq)
                return
            try:
                _, ack = decode_frame(frame)
            except ValueError:
                self._fail(upstream, bo.block_id, state.next_seq)
                return
            if ack.kind is AckKind.FAILED:
                ack.datanode_ids.append(self.id)
                upstream.send_ack(encode_ack_frame(ack))
                return
            if ack.kind is AckKind.BLOCK_FLUSHED:
                try:
                    info = state.flush_result.get(timeout=self.cluster.config.ack_timeout)
                except queue.Empty:
                    info = None
                if info is None or not self.is_alive():
                    self._fail(upstream, bo.block_id, ack.seq)
                    return
                self.cluster.namenode.register_replica(bo.block_id, self.id, info, bo.replication)
                ack.datanode_ids.append(self.id)
                upstream.send_ack(encode_ack_frame(ack))
                return
            ack.datanode_ids.append(self.id)
            upstream.send_ack(encode_ack_frame(ack))

    def _fail(self, conn: Connection, block_id: BlockId, seq: int):
        conn.send_ack(encode_ack_frame(Ack(block_id, seq, AckKind.FAILED, [self.id])))

    def _process_block(self, bo: BlockOpen, key: int | None, block_bytes: bytes) -> ReplicaInfo | None:
        """Sort by our key, index, recompute checksums, flush both files."""
        if not self.is_alive():
            return None
        try:
            if key is not None:
                block = deserialize(block_bytes)
                ordered, _ = sort_block(block, key)
                indexed = build_index(ordered, key, bo.partition_size)
                out = serialize(indexed)
            else:
                out = block_bytes  # stored byte-identically, no re-serialization
        except (FormatError, HailError, ValueError):
            return None
        crc = checksum_file(out)
        if not self.is_alive():
            return None
        write_file_once(self.block_path(bo.block_id), out)
        write_file_once(self.crc_path(bo.block_id), crc)
        idx_off, idx_len = struct.unpack_from("<QQ", out, 40)
        return ReplicaInfo(
            sort_key_position=key,
            indexed_attribute=key,
            index_type="SPARSE_CLUSTERED" if key is not None else None,
            hail_block_size=len(out),
            index_offset=idx_off,
            index_length=idx_len,
            partition_size=bo.partition_size if key is not None else None,
        )

    # -- recovery

    def scan_replicas(self):
        """Yield (block_id, ReplicaInfo) for every readable replica on disk."""
        from .storage import FileColumnSource

        for path in sorted(self.root.glob("*.hail")):
            stem = path.stem
            file_id, _, idx = stem.rpartition("_")
            if not file_id or not idx.isdigit():
                continue
            block_id = BlockId(file_id, int(idx))
            try:
                src = FileColumnSource(ChecksummedBlockFile(path, path.with_suffix(".crc")))
            except (ReadFailed, FormatError):
                continue
            if src.index is not None:
                idx_off, idx_len = struct.unpack_from("<QQ", src.bf.read_range(40, 16), 0)
                info = ReplicaInfo(
                    src.index.key_position, src.index.key_position, "SPARSE_CLUSTERED",
                    src.bf.size, idx_off, idx_len, src.index.partition_size,
                )
            else:
                info = ReplicaInfo(None, None, None, src.bf.size, 0, 0, None)
            src.bf.close()
            yield block_id, info


class Namenode:
    """Block and replica directories; aliveness view honours the expiry
    interval (a killed node stays listed until the interval elapses)."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self._lock = threading.Lock()
        self.dir_block: dict[BlockId, set[int]] = {}
        self.dir_rep: dict[tuple[BlockId, int], ReplicaInfo] = {}
        self._expected: dict[BlockId, int] = {}
        self._alloc_counter = 0

    def node_listed_alive(self, dn_id: int) -> bool:
        dn = self.cluster.datanodes[dn_id]
        with dn._lock:
            if dn.alive:
                return True
            return (time.monotonic() - dn.killed_at) < self.cluster.config.expiry_interval

    def _listed_alive_ids(self) -> list[int]:
        return [d.id for d in self.cluster.datanodes.values() if self.node_listed_alive(d.id)]

    def register_replica(self, block_id: BlockId, dn_id: int, info: ReplicaInfo, expected: int):
        with self._lock:
            self.dir_block.setdefault(block_id, set()).add(dn_id)
            self.dir_rep[(block_id, dn_id)] = info
            self._expected[block_id] = expected

    def _complete(self, block_id: BlockId) -> bool:
        return len(self.dir_block.get(block_id, ())) >= self._expected.get(block_id, 1)

    def allocate_pipeline(self, block_id: BlockId, r: int) -> list[int]:
        """r distinct listed-alive datanodes, round-robin rotated per block."""
        with self._lock:
            alive = sorted(self._listed_alive_ids())
            if len(alive) < r:
                raise InsufficientDatanodes(f"need {r} datanodes, {len(alive)} alive")
            start = self._alloc_counter % len(alive)
            self._alloc_counter += 1
            return [alive[(start + i) % len(alive)] for i in range(r)]

    def get_hosts(self, block_id: BlockId) -> set[int]:
        with self._lock:
            if block_id not in self.dir_block or not self._complete(block_id):
                raise UnknownBlock(str(block_id))
            return {d for d in self.dir_block[block_id] if self.node_listed_alive(d)}

    def get_hosts_with_index(self, block_id: BlockId, attribute_position: int) -> list[int]:
        """Alive replicas indexed on the attribute first, then the rest."""
        with self._lock:
            if block_id not in self.dir_block or not self._complete(block_id):
                raise UnknownBlock(str(block_id))
            alive = sorted(
                d for d in self.dir_block[block_id] if self.node_listed_alive(d)
            )
        matching = [
            d for d in alive
            if self.dir_rep[(block_id, d)].indexed_attribute == attribute_position
        ]
        rest = [d for d in alive if d not in matching]
        return matching + rest

    def replica_info(self, block_id: BlockId, dn_id: int) -> ReplicaInfo:
        with self._lock:
            return self.dir_rep[(block_id, dn_id)]

    def blocks_of_file(self, file_id: str) -> list[BlockId]:
        with self._lock:
            blocks = [
                b for b in self.dir_block
                if b.file_id == file_id and self._complete(b)
            ]
        return sorted(blocks, key=lambda b: b.index)

    def file_exists(self, file_id: str) -> bool:
        with self._lock:
            return any(b.file_id == file_id for b in self.dir_block)


class Cluster:
    """A set of in-process datanodes plus a namenode over a storage root."""

    def __init__(self, config: ClusterConfig, root: str | Path):
        self.config = config
        self.root = Path(root)
        self.datanodes: dict[int, Datanode] = {}
        for i in range(config.datanodes):
            dn_root = self.root / f"dn{i}"
            dn_root.mkdir(parents=True, exist_ok=True)
            self.datanodes[i] = Datanode(i, dn_root, config.map_slots, self)
        self.namenode = Namenode(self)

    def start(self):
        """Rebuild the namenode directories from what datanodes hold on disk.

        Rescanned blocks are visible with however many replicas survive; the
        all-replicas-registered gate only applies to in-flight uploads.
        """
        for dn in self.datanodes.values():
            if not dn.is_alive():
                continue
            for block_id, info in dn.scan_replicas():
                self.namenode.register_replica(block_id, dn.id, info, expected=1)
        return self

    def kill_node(self, dn_id: int, persist: bool = False):
        self.datanodes[dn_id].kill(persist=persist)

    def revive_node(self, dn_id: int):
        self.datanodes[dn_id].revive()

    def alive_datanodes(self) -> list[int]:
        return sorted(d.id for d in self.datanodes.values() if d.is_alive())


@dataclass
class UploadReport:
    file_id: str
    wall_time_s: float
    convert_s: float  # parsing + PAX conversion + serialization
    transfer_s: float  # packetize, pipeline transfer, ack waiting
    block_count: int
    record_count: int
    bad_record_count: int
    input_bytes: int


def upload_file(
    cluster: Cluster,
    data: bytes | str | Path,
    schema: Schema,
    cfg: ReplicaConfig | None = None,
    file_id: str | None = None,
    packet_hook=None,
) -> UploadReport:
    """Cut, convert, and push every block through the replica pipeline.

    `data` may be raw bytes or a path.  Raises UploadFailed on corruption,
    a dead pipeline node, or out-of-order ACKs; the store is append-only,
    so re-using a file id is an error.
    """
    if isinstance(data, (str, Path)):
        path = Path(data)
        if file_id is None:
            file_id = path.stem
        data = path.read_bytes()
    if file_id is None:
        raise ValueError("file_id required when uploading raw bytes")
    if cfg is None:
        cfg = cluster.config.replica_config()
    cfg.validate(schema)
    if cluster.namenode.file_exists(file_id):
        raise UploadFailed(f"file id {file_id!r} already stored (append-only store)")

    spans = cut_block_spans(data, cluster.config.block_size)
    t0 = time.perf_counter()
    timings_lock = threading.Lock()
    totals = {"convert": 0.0, "transfer": 0.0, "records": 0, "bad": 0}

    def push_block(block_index: int, span: tuple[int, int]):
        block_id = BlockId(file_id, block_index)
        t_conv = time.perf_counter()
        block = block_from_text(data[span[0]:span[1]], schema, cluster.config.block_size)
        raw = serialize(block)
        t_send = time.perf_counter()
        pipeline = cluster.namenode.allocate_pipeline(block_id, cfg.replication_factor)
        _send_block(cluster, block_id, raw, pipeline, cfg, packet_hook)
        done = time.perf_counter()
        with timings_lock:
            totals["convert"] += t_send - t_conv
            totals["transfer"] += done - t_send
            totals["records"] += block.row_count
            totals["bad"] += len(block.bad_rows)

    window = max(1, cluster.config.upload_window)
    with ThreadPoolExecutor(max_workers=window) as pool:
        futures = [pool.submit(push_block, i, span) for i, span in enumerate(spans)]
        errors = []
        for f in futures:
            try:
                f.result()
            except HailError as e:
                errors.append(e)
    if errors:
        raise UploadFailed(f"{len(errors)} block(s) failed: {errors[0]}") from errors[0]

    return UploadReport(
        file_id=file_id,
        wall_time_s=time.perf_counter() - t0,
        convert_s=totals["convert"],
        transfer_s=totals["transfer"],
        block_count=len(spans),
        record_count=totals["records"],
        bad_record_count=totals["bad"],
        input_bytes=len(data),
    )


def _send_block(cluster, block_id, raw, pipeline, cfg, packet_hook=None):
    bo = BlockOpen(
        block_id, pipeline, list(cfg.sort_keys), cluster.config.partition_size,
        cfg.replication_factor,
    )
    packets = packetize(raw, block_id)
    first = cluster.datanodes[pipeline[0]]
    try:
        conn = first.open_connection()
    except DeadNodeError as e:
        raise UploadFailed(str(e)) from e
    try:
        conn.send_frame(encode_block_open(bo))
        for p in packets:
            if packet_hook is not None:
                packet_hook(block_id, p.seq)
            conn.send_frame(encode_packet_frame(p))
    except DeadNodeError as e:
        raise UploadFailed(f"{block_id}: pipeline node died: {e}") from e

    expected_ids = list(reversed(pipeline))
    for expected_seq, p in enumerate(packets):
        try:
            frame = conn.recv_ack(cluster.config.ack_timeout)
        except queue.Empty:
            raise UploadFailed(f"{block_id}: ACK timeout at seq {expected_seq}")
        try:
            _, ack = decode_frame(frame)
        except ValueError as e:
            raise UploadFailed(f"{block_id}: undecodable ACK: {e}") from e
        if ack.kind is AckKind.FAILED:
            raise UploadFailed(f"{block_id}: pipeline reported failure at seq {ack.seq}")
        if ack.seq != expected_seq:
            raise UploadFailed(
                f"{block_id}: out-of-order ACK (got {ack.seq}, expected {expected_seq})"
            )
        if p.last:
            if ack.kind is not AckKind.BLOCK_FLUSHED:
                raise UploadFailed(f"{block_id}: final packet not acknowledged as flushed")
            if ack.datanode_ids != expected_ids:
                raise UploadFailed(
                    f"{block_id}: ack chain {ack.datanode_ids} != reverse pipeline {expected_ids}"
                )
        elif ack.kind is not AckKind.PACKET_VALIDATED:
            raise UploadFailed(f"{block_id}: unexpected ack kind {ack.kind}")
    conn.close()
