"""Checksummed chunks, packets, ACKs, and their wire frames.

Block bytes are cut into 512B chunks, each carrying a 4-byte CRC; chunks are
grouped into packets of at most 64 KB with the checksums kept apart from the
chunk data.  The same length-prefixed frames travel the in-process pipeline
and would go over TCP unchanged.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

CHUNK_SIZE = 512
CHUNKS_PER_PACKET = 126  # keeps data + checksums + metadata under 64 KB
MAX_PACKET_SIZE = 64 * 1024

CRC_MAGIC = b"HCRC"
CRC_ALGO_CRC32 = 2  # zlib CRC-32; tag 1 reserved for CRC-32C


def chunk_checksum(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


class BlockId(NamedTuple):
    file_id: str
    index: int

    def __str__(self) -> str:
        return f"{self.file_id}_{self.index}"


class AckKind(Enum):
    PACKET_VALIDATED = 0  # packet received and validated (non-final packets)
    BLOCK_FLUSHED = 1  # final packet: data + checksums flushed, replica registered
    FAILED = 2


@dataclass
class Packet:
    block_id: BlockId
    seq: int
    data: bytes  # chunk payloads, concatenated
    checksums: bytes  # 4 bytes per chunk, grouped apart from the data
    last: bool

    @property
    def chunk_count(self) -> int:
        return len(self.checksums) // 4


@dataclass
class Ack:
    block_id: BlockId
    seq: int
    kind: AckKind
    datanode_ids: list[int] = field(default_factory=list)  # reverse pipeline order


def packetize(block_bytes: bytes, block_id: BlockId) -> list[Packet]:
    """Cut block bytes into checksummed packets, sequence numbers from 0."""
    if not block_bytes:
        raise ValueError("cannot packetize an empty block")
    packets = []
    span = CHUNK_SIZE * CHUNKS_PER_PACKET
    for seq, start in enumerate(range(0, len(block_bytes), span)):
        data = block_bytes[start:start + span]
        sums = b"".join(
            struct.pack("<I", chunk_checksum(data[i:i + CHUNK_SIZE]))
            for i in range(0, len(data), CHUNK_SIZE)
        )
        packets.append(Packet(block_id, seq, data, sums, start + span >= len(block_bytes)))
    return packets


def verify_packet(packet: Packet) -> int | None:
    """Recompute every chunk checksum; None if all match, else the index of
    the first failing chunk."""
    for i in range(packet.chunk_count):
        data = packet.data[i * CHUNK_SIZE:(i + 1) * CHUNK_SIZE]
        (expected,) = struct.unpack_from("<I", packet.checksums, i * 4)
        if chunk_checksum(data) != expected:
            return i
    return None


def depacketize(packets: list[Packet]) -> bytes:
    """Reassemble a block from its packets; validates sequence contiguity."""
    for i, p in enumerate(packets):
        if p.seq != i:
            raise ValueError(f"packet sequence {p.seq} at position {i}")
        if p.last != (i == len(packets) - 1):
            raise ValueError("last-packet flag on wrong packet")
    return b"".join(p.data for p in packets)


def checksum_file(block_bytes: bytes) -> bytes:
    """The .crc sibling of a block file: header + one CRC per 512B chunk."""
    header = CRC_MAGIC + struct.pack("<BI", CRC_ALGO_CRC32, CHUNK_SIZE)
    sums = b"".join(
        struct.pack("<I", chunk_checksum(block_bytes[i:i + CHUNK_SIZE]))
        for i in range(0, len(block_bytes), CHUNK_SIZE)
    )
    return header + sums


CRC_HEADER_SIZE = len(CRC_MAGIC) + 5


def parse_checksum_file(crc_bytes: bytes) -> tuple[int, bytes]:
    """Returns (chunk_size, checksum bytes); raises ValueError on a bad header."""
    if crc_bytes[:4] != CRC_MAGIC:
        raise ValueError("bad checksum file magic")
    algo, chunk_size = struct.unpack_from("<BI", crc_bytes, 4)
    if algo != CRC_ALGO_CRC32:
        raise ValueError(f"unsupported checksum algorithm {algo}")
    return chunk_size, crc_bytes[CRC_HEADER_SIZE:]


# --- wire frames ------------------------------------------------------------
#
# frame := u32 payload_len | u8 frame_type | payload

FRAME_BLOCK_OPEN = 1
FRAME_PACKET = 2
FRAME_ACK = 3


def _pack_block_id(block_id: BlockId) -> bytes:
    fid = block_id.file_id.encode("utf-8")
    return struct.pack("<H", len(fid)) + fid + struct.pack("<I", block_id.index)


def _unpack_block_id(buf: bytes, off: int) -> tuple[BlockId, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    fid = buf[off:off + n].decode("utf-8")
    off += n
    (index,) = struct.unpack_from("<I", buf, off)
    return BlockId(fid, index), off + 4


def encode_packet_frame(p: Packet) -> bytes:
    payload = (
        _pack_block_id(p.block_id)
        + struct.pack("<IBHI", p.seq, 1 if p.last else 0, p.chunk_count, len(p.data))
        + p.data
        + p.checksums
    )
    return struct.pack("<IB", len(payload), FRAME_PACKET) + payload


def encode_ack_frame(a: Ack) -> bytes:
    payload = _pack_block_id(a.block_id) + struct.pack(
        "<IBH", a.seq, a.kind.value, len(a.datanode_ids)
    )
    payload += b"".join(struct.pack("<I", d) for d in a.datanode_ids)
    return struct.pack("<IB", len(payload), FRAME_ACK) + payload


@dataclass
class BlockOpen:
    """Block-level metadata frame sent before the first packet: the pipeline
    and each position's sort key (None = store unsorted)."""

    block_id: BlockId
    pipeline: list[int]  # datanode ids, upload order
    sort_keys: list[int | None]  # aligned with pipeline positions
    partition_size: int
    replication: int


def encode_block_open(bo: BlockOpen) -> bytes:
    payload = _pack_block_id(bo.block_id) + struct.pack(
        "<HIH", len(bo.pipeline), bo.partition_size, bo.replication
    )
    for dn in bo.pipeline:
        payload += struct.pack("<I", dn)
    for key in bo.sort_keys:
        payload += struct.pack("<h", -1 if key is None else key)
    return struct.pack("<IB", len(payload), FRAME_BLOCK_OPEN) + payload


def decode_frame(frame: bytes):
    """Decode one frame into (type, message); raises ValueError when malformed."""
    if len(frame) < 5:
        raise ValueError("short frame")
    length, ftype = struct.unpack_from("<IB", frame, 0)
    if length != len(frame) - 5:
        raise ValueError("frame length mismatch")
    buf = frame[5:]
    if ftype == FRAME_PACKET:
        block_id, off = _unpack_block_id(buf, 0)
        seq, last, chunk_count, data_len = struct.unpack_from("<IBHI", buf, off)
        off += 11
        data = buf[off:off + data_len]
        sums = buf[off + data_len:]
        if len(data) != data_len or len(sums) != chunk_count * 4:
            raise ValueError("packet frame length mismatch")
        if last not in (0, 1):
            raise ValueError("bad last-packet flag")
        expected_chunks = -(-data_len // CHUNK_SIZE) if data_len else 0
        if chunk_count != expected_chunks:
            raise ValueError("chunk count inconsistent with data length")
        return FRAME_PACKET, Packet(block_id, seq, data, sums, bool(last))
    if ftype == FRAME_ACK:
        block_id, off = _unpack_block_id(buf, 0)
        seq, kind, n_ids = struct.unpack_from("<IBH", buf, off)
        off += 7
        ids = [struct.unpack_from("<I", buf, off + 4 * i)[0] for i in range(n_ids)]
        if off + 4 * n_ids != len(buf):
            raise ValueError("ack frame length mismatch")
        return FRAME_ACK, Ack(block_id, seq, AckKind(kind), ids)
    if ftype == FRAME_BLOCK_OPEN:
        block_id, off = _unpack_block_id(buf, 0)
        n_pipe, partition_size, replication = struct.unpack_from("<HIH", buf, off)
        off += 8
        pipeline = [struct.unpack_from("<I", buf, off + 4 * i)[0] for i in range(n_pipe)]
        off += 4 * n_pipe
        keys = []
        for i in range(n_pipe):
            (k,) = struct.unpack_from("<h", buf, off + 2 * i)
            keys.append(None if k == -1 else k)
        if off + 2 * n_pipe != len(buf):
            raise ValueError("block-open frame length mismatch")
        return FRAME_BLOCK_OPEN, BlockOpen(block_id, pipeline, keys, partition_size, replication)
    raise ValueError(f"unknown frame type {ftype}")
