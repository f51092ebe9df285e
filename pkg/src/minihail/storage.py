"""On-disk replica access: checksummed reads, instrumented I/O counters.

Every stored replica is a `.hail` file plus a `.crc` sibling.  Reads go
through ChecksummedBlockFile, which verifies the CRC of every chunk it
touches, so a flipped bit in either file surfaces as ReadFailed.  All disk
traffic is counted, which lets tests assert properties like "each replica
is written exactly once".
"""

from __future__ import annotations

import struct
import threading
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ReadFailed
from .index import ReadStats
from .pax import FIXED_HEADER_SIZE, parse_header, parse_index_section
from .transport import CHUNK_SIZE, chunk_checksum, parse_checksum_file


class IoCounters:
    """Thread-safe per-path write/read accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self.write_calls = defaultdict(int)
        self.bytes_written = defaultdict(int)
        self.read_calls = defaultdict(int)
        self.bytes_read = defaultdict(int)

    def record_write(self, path: str, nbytes: int):
        with self._lock:
            self.write_calls[path] += 1
            self.bytes_written[path] += nbytes

    def record_read(self, path: str, nbytes: int):
        with self._lock:
            self.read_calls[path] += 1
            self.bytes_read[path] += nbytes

    def reset(self):
        with self._lock:
            self.write_calls.clear()
            self.bytes_written.clear()
            self.read_calls.clear()
            self.bytes_read.clear()

    def writes_for(self, suffix: str) -> dict[str, int]:
        with self._lock:
            return {p: n for p, n in self.write_calls.items() if p.endswith(suffix)}


IO = IoCounters()


def write_file_once(path: Path, data: bytes):
    """Write a whole file in a single call (counted once)."""
    with open(path, "wb") as f:
        f.write(data)
    IO.record_write(str(path), len(data))


class ChecksummedBlockFile:
    """Reads byte ranges of a block file, verifying the touched chunks
    against the .crc sibling."""

    def __init__(self, path: str | Path, crc_path: str | Path | None = None,
                 alive_check=None):
        self.path = Path(path)
        self.crc_path = Path(crc_path) if crc_path else self.path.with_suffix(".crc")
        self._alive_check = alive_check
        try:
            crc_bytes = self.crc_path.read_bytes()
            self.chunk_size, self._sums = parse_checksum_file(crc_bytes)
            self._fh = open(self.path, "rb")
        except (OSError, ValueError) as e:
            raise ReadFailed(f"{self.path}: {e}") from e
        self._fh.seek(0, 2)
        self.size = self._fh.tell()
        if len(self._sums) != 4 * (-(-self.size // self.chunk_size)):
            raise ReadFailed(f"{self.path}: checksum count does not match file size")
        self._lock = threading.Lock()

    def close(self):
        self._fh.close()

    def _check_alive(self):
        if self._alive_check is not None and not self._alive_check():
            raise ReadFailed(f"{self.path}: datanode is down")

    def read_range(self, offset: int, length: int) -> bytes:
        """Read [offset, offset+length); verifies every overlapped chunk."""
        self._check_alive()
        if length <= 0:
            return b""
        if offset < 0 or offset + length > self.size:
            raise ReadFailed(f"{self.path}: range [{offset}, {offset + length}) out of bounds")
        c0 = offset // self.chunk_size
        c1 = -(-(offset + length) // self.chunk_size)
        with self._lock:
            self._fh.seek(c0 * self.chunk_size)
            raw = self._fh.read(min(c1 * self.chunk_size, self.size) - c0 * self.chunk_size)
        IO.record_read(str(self.path), len(raw))
        for c in range(c0, c1):
            data = raw[(c - c0) * self.chunk_size:(c - c0 + 1) * self.chunk_size]
            (expected,) = struct.unpack_from("<I", self._sums, c * 4)
            if chunk_checksum(data) != expected:
                raise ReadFailed(f"{self.path}: checksum mismatch in chunk {c}")
        start = offset - c0 * self.chunk_size
        return raw[start:start + length]

    def read_all(self) -> bytes:
        return self.read_range(0, self.size)


class FileColumnSource:
    """ColumnSource over an on-disk replica: header and index are loaded up
    front, column data lazily by row range or partition."""

    def __init__(self, block_file: ChecksummedBlockFile, stats: ReadStats | None = None):
        self.bf = block_file
        self.stats = stats if stats is not None else ReadStats()
        head = block_file.read_range(0, min(FIXED_HEADER_SIZE, block_file.size))
        if len(head) < FIXED_HEADER_SIZE:
            raise ReadFailed(f"{block_file.path}: too short for a block header")
        (header_len,) = struct.unpack_from("<Q", head, 8)
        if header_len > block_file.size:
            raise ReadFailed(f"{block_file.path}: header length out of bounds")
        header = block_file.read_range(0, header_len)
        self.schema, self.row_count, self.col_table, regions = parse_header(header)
        (self.bad_off, self.bad_len), (idx_off, idx_len), _ = regions
        self.index = None
        self.var_offset_lists = {}
        if idx_len:
            section = block_file.read_range(idx_off, idx_len)
            self.index, self.var_offset_lists = parse_index_section(
                section, idx_off, self.schema, self.row_count
            )
            self.stats.bytes_read += idx_len
        self.stats.bytes_read += header_len

    def read_fixed_range(self, position: int, row_lo: int, row_hi: int) -> np.ndarray:
        attr = self.schema.attribute(position)
        size = attr.type.fixed_size
        col_off, _ = self.col_table[position]
        raw = self.bf.read_range(col_off + row_lo * size, (row_hi - row_lo) * size)
        self.stats.fixed_ranges.append((position, row_lo, row_hi))
        self.stats.bytes_read += len(raw)
        return np.frombuffer(raw, dtype=attr.type.dtype)

    def read_varchar_partition(self, position: int, p: int) -> list[bytes]:
        offs = self.var_offset_lists[position].offsets
        col_off, col_len = self.col_table[position]
        start = int(offs[p])
        end = int(offs[p + 1]) if p + 1 < len(offs) else col_len
        raw = self.bf.read_range(col_off + start, end - start)
        self.stats.varchar_partitions.append((position, p))
        self.stats.bytes_read += len(raw)
        return raw.split(b"\0")[:-1]

    def read_varchar_all(self, position: int) -> list[bytes]:
        col_off, col_len = self.col_table[position]
        raw = self.bf.read_range(col_off, col_len)
        self.stats.bytes_read += len(raw)
        return raw.split(b"\0")[:-1]

    def read_bad_rows(self) -> list[bytes]:
        raw = self.bf.read_range(self.bad_off, self.bad_len)
        self.stats.bytes_read += len(raw)
        out = []
        off = 0
        while off < len(raw):
            (n,) = struct.unpack_from("<I", raw, off)
            out.append(raw[off + 4:off + 4 + n])
            off += 4 + n
        return out
