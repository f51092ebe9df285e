"""Per-block sorting and the sparse clustered index.

The index is a single root directory holding the first key of every
partition of n consecutive sorted values.  Partition p of the key column
starts at byte p * leaf_byte_size, so range lookups need no stored child
pointers; variable-size attributes get one stored offset per partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotSorted, UnsupportedKeyType
from .pax import PaxBlock, SparseClusteredIndex, VarOffsetList, varchar_values
from .schema import AttrType

DEFAULT_PARTITION_SIZE = 1024


@dataclass(frozen=True)
class SortPermutation:
    """Maps new row position -> original row position (a bijection)."""

    perm: np.ndarray


def root_entry_count(row_count: int, partition_size: int) -> int:
    """Number of root directory entries: one per partition."""
    return -(-row_count // partition_size)


def root_directory_bytes(row_count: int, partition_size: int, key_size: int) -> int:
    return root_entry_count(row_count, partition_size) * key_size


def sort_block(block: PaxBlock, key_position: int) -> tuple[PaxBlock, SortPermutation]:
    """Stable-sort every column by the key attribute; bad region untouched."""
    attr = block.schema.attribute(key_position)
    if attr.type.fixed_size is None:
        raise UnsupportedKeyType(f"attribute {key_position} ({attr.type.value}) cannot be a sort key")
    key = block.columns[key_position]
    perm = np.argsort(key, kind="stable")
    columns = {}
    for a in block.schema.attributes:
        col = block.columns[a.position]
        if isinstance(col, bytes):
            vals = varchar_values(col)
            columns[a.position] = b"".join(vals[i] + b"\0" for i in perm)
        else:
            columns[a.position] = col[perm]
    sorted_block = PaxBlock(block.schema, block.row_count, columns, list(block.bad_rows))
    return sorted_block, SortPermutation(perm)


def _varchar_value_starts(blob: bytes) -> np.ndarray:
    """Byte offset of the start of every value in a VARCHAR blob."""
    if not blob:
        return np.zeros(0, dtype=np.int64)
    # value i starts right after terminator i-1
    ends = np.frombuffer(blob, dtype=np.uint8) == 0
    starts = np.concatenate(([0], np.flatnonzero(ends)[:-1] + 1))
    return starts.astype(np.int64)


def build_index(block: PaxBlock, key_position: int, partition_size: int = DEFAULT_PARTITION_SIZE) -> PaxBlock:
    """Attach a sparse clustered index to an already-sorted block.

    Returns a new PaxBlock whose index section will be serialized with it.
    Raises NotSorted if any adjacent key pair descends (defensive check).
    """
    if partition_size < 1:
        raise ValueError("partition size must be >= 1")
    attr = block.schema.attribute(key_position)
    if attr.type.fixed_size is None:
        raise UnsupportedKeyType(f"attribute {key_position} ({attr.type.value}) cannot be indexed")
    key = block.columns[key_position]
    if len(key) > 1 and np.any(key[1:] < key[:-1]):
        raise NotSorted(f"key column {key_position} has a descending pair")
    root = np.ascontiguousarray(key[::partition_size], dtype=attr.type.dtype)
    max_key = key[-1].item() if len(key) else None
    index = SparseClusteredIndex(
        key_position,
        partition_size,
        root,
        partition_size * attr.type.fixed_size,
        max_key,
    )
    var_lists = {}
    for pos in block.schema.varchar_positions:
        starts = _varchar_value_starts(block.columns[pos])
        var_lists[pos] = VarOffsetList(pos, starts[::partition_size].astype("<u8"))
    return PaxBlock(
        block.schema, block.row_count, dict(block.columns), list(block.bad_rows), index, var_lists
    )


def lookup_range(index: SparseClusteredIndex, lo, hi):
    """Partition range (first, last) that can hold keys in [lo, hi]; None if
    the index proves the range empty.

    The first partition steps back over root entries equal to lo because a
    run of duplicates may begin in an earlier partition; boundary partitions
    are post-filtered by read_partitions.
    """
    if lo > hi:
        raise ValueError("lo > hi")
    root = index.root_directory
    if len(root) == 0:
        return None
    if hi < root[0]:
        return None
    if index.max_key is not None and lo > index.max_key:
        return None
    first = int(np.searchsorted(root, lo, side="right")) - 1
    if first < 0:
        first = 0
    while first > 0 and root[first] == lo:
        first -= 1
    last = int(np.searchsorted(root, hi, side="right")) - 1
    return first, max(first, last)


@dataclass
class ReadStats:
    """What a read path touched; used by tests and the bench report."""

    bytes_read: int = 0
    varchar_partitions: list = field(default_factory=list)  # (position, partition)
    fixed_ranges: list = field(default_factory=list)  # (position, row_lo, row_hi)


class MemoryColumnSource:
    """ColumnSource over an in-memory PaxBlock."""

    def __init__(self, block: PaxBlock, stats: ReadStats | None = None):
        self.block = block
        self.schema = block.schema
        self.row_count = block.row_count
        self.index = block.index
        self.var_offset_lists = block.var_offset_lists
        self.stats = stats if stats is not None else ReadStats()
        self._varchar_cache: dict[int, list[bytes]] = {}

    def read_fixed_range(self, position: int, row_lo: int, row_hi: int) -> np.ndarray:
        size = self.schema.attribute(position).type.fixed_size
        self.stats.fixed_ranges.append((position, row_lo, row_hi))
        self.stats.bytes_read += (row_hi - row_lo) * size
        return self.block.columns[position][row_lo:row_hi]

    def _values(self, position: int) -> list[bytes]:
        if position not in self._varchar_cache:
            self._varchar_cache[position] = varchar_values(self.block.columns[position])
        return self._varchar_cache[position]

    def read_varchar_partition(self, position: int, p: int) -> list[bytes]:
        if self.index is None:
            raise ValueError("partitioned VARCHAR access needs an index")
        lo, hi = self.index.partition_rows(p, self.row_count)
        self.stats.varchar_partitions.append((position, p))
        vals = self._values(position)[lo:hi]
        self.stats.bytes_read += sum(len(v) + 1 for v in vals)
        return vals

    def read_varchar_all(self, position: int) -> list[bytes]:
        vals = self._values(position)
        self.stats.bytes_read += len(self.block.columns[position])
        return vals

    def read_bad_rows(self) -> list[bytes]:
        return self.block.bad_rows


def read_partitions(source, index: SparseClusteredIndex, first: int, last: int, lo, hi):
    """Row IDs and key values with key in [lo, hi] within partitions
    [first, last]; interior partitions are accepted without comparison."""
    n = index.partition_size
    row_count = source.row_count
    f_lo, f_hi = index.partition_rows(first, row_count)
    l_lo, l_hi = index.partition_rows(last, row_count)

    if first == last:
        keys = source.read_fixed_range(index.key_position, f_lo, f_hi)
        mask = (keys >= lo) & (keys <= hi)
        ids = np.arange(f_lo, f_hi, dtype=np.int64)[mask]
        return ids, keys[mask]

    first_keys = source.read_fixed_range(index.key_position, f_lo, f_hi)
    first_mask = (first_keys >= lo) & (first_keys <= hi)
    last_keys = source.read_fixed_range(index.key_position, l_lo, l_hi)
    last_mask = (last_keys >= lo) & (last_keys <= hi)
    interior_ids = np.arange(f_hi, l_lo, dtype=np.int64)
    interior_keys = source.read_fixed_range(index.key_position, f_hi, l_lo)
    ids = np.concatenate([
        np.arange(f_lo, f_hi, dtype=np.int64)[first_mask],
        interior_ids,
        np.arange(l_lo, l_hi, dtype=np.int64)[last_mask],
    ])
    keys = np.concatenate([first_keys[first_mask], interior_keys, last_keys[last_mask]])
    return ids, keys


def _contiguous_runs(row_ids: np.ndarray):
    if len(row_ids) == 0:
        return
    breaks = np.flatnonzero(np.diff(row_ids) != 1)
    start = 0
    for b in breaks:
        yield int(row_ids[start]), int(row_ids[b]) + 1
        start = b + 1
    yield int(row_ids[start]), int(row_ids[-1]) + 1


def reconstruct(source, row_ids: np.ndarray, projection: list[int]) -> list[tuple]:
    """Fetch the projected attributes of the given rows, in row order.

    Fixed-size attributes read by direct row offset (contiguous runs are
    fetched in one read); each VARCHAR attribute loads only the partitions
    floor(rowID / n) that contain requested rows and post-filters in memory.
    """
    row_ids = np.asarray(row_ids, dtype=np.int64)
    out_cols = {}
    for pos in projection:
        attr = source.schema.attribute(pos)
        if attr.type.fixed_size is not None:
            parts = [
                source.read_fixed_range(pos, run_lo, run_hi)
                for run_lo, run_hi in _contiguous_runs(row_ids)
            ]
            col = np.concatenate(parts) if parts else np.zeros(0, dtype=attr.type.dtype)
            out_cols[pos] = [v.item() for v in col]
        else:
            out_cols[pos] = _reconstruct_varchar(source, pos, row_ids)
    return [tuple(out_cols[pos][i] for pos in projection) for i in range(len(row_ids))]


def _reconstruct_varchar(source, position: int, row_ids: np.ndarray) -> list[str]:
    if source.index is None:
        vals = source.read_varchar_all(position)
        return [vals[i].decode("utf-8") for i in row_ids]
    n = source.index.partition_size
    partitions = row_ids // n
    cache = {}
    out = []
    for rid, p in zip(row_ids, partitions):
        p = int(p)
        if p not in cache:
            cache[p] = source.read_varchar_partition(position, p)
        out.append(cache[p][int(rid) - p * n].decode("utf-8"))
    return out
