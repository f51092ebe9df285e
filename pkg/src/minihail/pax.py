"""Binary PAX block: columnar layout, header metadata, bad-record region.

On disk a block is [header | fixed columns in position order | VARCHAR
columns | bad region | index section].  The header records the schema and
the exact offset/length of every region, so a reader needs nothing but the
bytes.  See FORMAT.md for the bit-level layout.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import FormatError, PositionOutOfRange
from .schema import AttrType, BadRecord, LogicalBlock, Record, Schema, parse_span

MAGIC = b"HAIL"
VERSION = 1

INDEX_TYPE_SPARSE_CLUSTERED = 1

_TYPE_TAGS = {
    AttrType.INT32: 1,
    AttrType.INT64: 2,
    AttrType.FLOAT64: 3,
    AttrType.DATE: 4,
    AttrType.VARCHAR: 5,
    AttrType.IPV4: 6,
}
_TAG_TYPES = {v: k for k, v in _TYPE_TAGS.items()}

_FIXED_HEADER = struct.Struct("<4sIQQQQQQBH")  # magic .. attr_count
FIXED_HEADER_SIZE = _FIXED_HEADER.size  # 59


@dataclass(frozen=True)
class SparseClusteredIndex:
    """Single-root sparse directory over the sorted key column.

    ``root_directory[p]`` is the key value at row ``p * partition_size``;
    partition p's bytes start at ``p * leaf_byte_size`` inside the key
    column, so no child pointers are stored beyond the first.
    """

    key_position: int
    partition_size: int
    root_directory: np.ndarray
    leaf_byte_size: int
    max_key: object = None  # largest key in the block; None for empty blocks

    @property
    def partition_count(self) -> int:
        return len(self.root_directory)

    def partition_rows(self, p: int, row_count: int) -> tuple[int, int]:
        """Row range [start, end) of partition p."""
        start = p * self.partition_size
        return start, min(start + self.partition_size, row_count)

    def __eq__(self, other):
        if not isinstance(other, SparseClusteredIndex):
            return NotImplemented
        return (
            self.key_position == other.key_position
            and self.partition_size == other.partition_size
            and self.leaf_byte_size == other.leaf_byte_size
            and self.max_key == other.max_key
            and np.array_equal(self.root_directory, other.root_directory)
        )


@dataclass(frozen=True)
class VarOffsetList:
    """Byte offset (within the VARCHAR column) of every n-th value."""

    attribute_position: int
    offsets: np.ndarray  # uint64, one per partition, strictly increasing

    def __eq__(self, other):
        if not isinstance(other, VarOffsetList):
            return NotImplemented
        return self.attribute_position == other.attribute_position and np.array_equal(
            self.offsets, other.offsets
        )


def physical_positions(schema: Schema) -> list[int]:
    """Column order in the file: fixed-size attributes first, then VARCHAR."""
    return schema.fixed_positions + schema.varchar_positions


@dataclass
class PaxBlock:
    """In-memory PAX block; immutable by convention after construction."""

    schema: Schema
    row_count: int
    columns: dict  # position -> np.ndarray (fixed) | bytes (VARCHAR blob)
    bad_rows: list[bytes]
    index: SparseClusteredIndex | None = None
    var_offset_lists: dict[int, VarOffsetList] = field(default_factory=dict)

    def column(self, position: int):
        if not 1 <= position <= len(self.schema):
            raise PositionOutOfRange(f"position {position} not in 1..{len(self.schema)}")
        return self.columns[position]

    def __eq__(self, other):
        if not isinstance(other, PaxBlock):
            return NotImplemented
        if (
            self.schema != other.schema
            or self.row_count != other.row_count
            or self.bad_rows != other.bad_rows
            or self.index != other.index
            or self.var_offset_lists != other.var_offset_lists
        ):
            return False
        for pos in range(1, len(self.schema) + 1):
            a, b = self.columns[pos], other.columns[pos]
            if isinstance(a, bytes):
                if a != b:
                    return False
            elif not np.array_equal(a, b):
                return False
        return True


def varchar_values(blob: bytes) -> list[bytes]:
    """Split a VARCHAR column blob into its zero-terminated values."""
    return blob.split(b"\0")[:-1] if blob else []


def read_column(block: PaxBlock, position: int):
    """All rowCount values of one attribute, in row order.

    Fixed-size types come back as a numpy array, VARCHAR as a list of str.
    """
    col = block.column(position)
    if isinstance(col, bytes):
        return [v.decode("utf-8") for v in varchar_values(col)]
    return col


def to_pax(block: LogicalBlock, schema: Schema) -> PaxBlock:
    """Pivot a parsed logical block into columnar form."""
    records = block.records
    return _records_to_pax(records, [b.raw for b in block.bad_records], schema)


def _records_to_pax(records: list[Record], bad_rows: list[bytes], schema: Schema) -> PaxBlock:
    columns = {}
    for attr in schema.attributes:
        i = attr.position - 1
        if attr.type.fixed_size is None:
            columns[attr.position] = b"".join(
                r.values[i].encode("utf-8") + b"\0" for r in records
            )
        else:
            columns[attr.position] = np.fromiter(
                (r.values[i] for r in records), dtype=attr.type.dtype, count=len(records)
            )
    return PaxBlock(schema, len(records), columns, list(bad_rows))


def _fast_int32_block(span: bytes, schema: Schema) -> PaxBlock | None:
    """Bulk text->PAX for all-INT32 schemas; None when the span needs the
    line-by-line path.

    Only bytes that parse identically under both paths pass the prescan
    (digits, '-', the delimiter, '\\n'), and any pandas parse problem or
    out-of-range value falls back, so the two paths cannot diverge.
    """
    if any(a.type is not AttrType.INT32 for a in schema.attributes):
        return None
    delim = schema.delimiter
    if delim in b"0123456789-\n":
        return None
    allowed = bytes((*range(ord("0"), ord("9") + 1), ord("-"), delim, ord("\n")))
    if span.translate(None, delete=allowed):
        return None
    try:
        df = pd.read_csv(
            io.BytesIO(span),
            sep=chr(delim),
            header=None,
            dtype=np.int64,
            engine="c",
            na_filter=False,
            skip_blank_lines=False,
            quoting=csv.QUOTE_NONE,
        )
    except Exception:
        return None
    if df.shape[1] != len(schema):
        return None
    values = df.to_numpy()
    if values.size and (values.min() < -(2**31) or values.max() >= 2**31):
        return None
    columns = {
        attr.position: np.ascontiguousarray(values[:, attr.position - 1], dtype="<i4")
        for attr in schema.attributes
    }
    return PaxBlock(schema, len(values), columns, [])


def block_from_text(span: bytes, schema: Schema, byte_budget: int) -> PaxBlock:
    """Convert one block's text bytes straight to a PaxBlock."""
    fast = _fast_int32_block(span, schema)
    if fast is not None:
        return fast
    return to_pax(parse_span(span, schema, byte_budget), schema)


def _column_bytes(block: PaxBlock, position: int) -> bytes:
    col = block.columns[position]
    if isinstance(col, bytes):
        return col
    return np.ascontiguousarray(col, dtype=block.schema.attribute(position).type.dtype).tobytes()


def _key_to_bytes(value, attr_type: AttrType) -> bytes:
    return np.array([value], dtype=attr_type.dtype).tobytes()


def _key_from_bytes(raw: bytes, attr_type: AttrType):
    return np.frombuffer(raw, dtype=attr_type.dtype)[0].item()


def serialize(block: PaxBlock) -> bytes:
    """Encode a PaxBlock into the on-disk HAIL block format."""
    schema = block.schema
    attr_entries = b"".join(
        struct.pack("<HBH", a.position, _TYPE_TAGS[a.type], len(a.name.encode()))
        + a.name.encode()
        for a in schema.attributes
    )
    header_len = FIXED_HEADER_SIZE + len(attr_entries) + 16 * len(schema)

    col_bytes = {pos: _column_bytes(block, pos) for pos in range(1, len(schema) + 1)}
    col_table = {}
    off = header_len
    for pos in physical_positions(schema):
        col_table[pos] = (off, len(col_bytes[pos]))
        off += len(col_bytes[pos])

    bad_region = b"".join(struct.pack("<I", len(r)) + r for r in block.bad_rows)
    bad_off, bad_len = off, len(bad_region)
    off += bad_len

    index_section = b""
    idx_off = idx_len = 0
    if block.index is not None:
        index_section = _serialize_index(block, off)
        idx_off, idx_len = off, len(index_section)
        off += idx_len

    header = _FIXED_HEADER.pack(
        MAGIC, VERSION, header_len, block.row_count,
        bad_off, bad_len, idx_off, idx_len,
        schema.delimiter, len(schema),
    )
    parts = [header, attr_entries]
    for pos in range(1, len(schema) + 1):
        parts.append(struct.pack("<QQ", *col_table[pos]))
    for pos in physical_positions(schema):
        parts.append(col_bytes[pos])
    parts.append(bad_region)
    parts.append(index_section)
    return b"".join(parts)


def _serialize_index(block: PaxBlock, section_off: int) -> bytes:
    idx = block.index
    key_type = block.schema.attribute(idx.key_position).type
    key_size = key_type.fixed_size
    root_bytes = np.ascontiguousarray(idx.root_directory, dtype=key_type.dtype).tobytes()
    var_lists = [block.var_offset_lists[p] for p in sorted(block.var_offset_lists)]

    meta_len = 2 + 1 + 4 + 1 + 1 + key_size + 8 + 8 + 2 + 18 * len(var_lists)
    root_off = section_off + meta_len
    if idx.max_key is None:
        max_key_bytes = b"\0" * key_size
        has_max = 0
    else:
        max_key_bytes = _key_to_bytes(idx.max_key, key_type)
        has_max = 1
    parts = [
        struct.pack("<HBIBB", idx.key_position, INDEX_TYPE_SPARSE_CLUSTERED,
                    idx.partition_size, key_size, has_max),
        max_key_bytes,
        struct.pack("<QQ", root_off, len(root_bytes)),
        struct.pack("<H", len(var_lists)),
    ]
    var_off = root_off + len(root_bytes)
    var_payloads = []
    for vl in var_lists:
        payload = np.ascontiguousarray(vl.offsets, dtype="<u8").tobytes()
        parts.append(struct.pack("<HQQ", vl.attribute_position, var_off, len(payload)))
        var_payloads.append(payload)
        var_off += len(payload)
    parts.append(root_bytes)
    parts.extend(var_payloads)
    return b"".join(parts)


class _Cursor:
    """Bounds-checked sequential reads over a bytes region."""

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError("truncated block")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_header(data: bytes):
    """Decode the header; returns (schema, row_count, column table, regions).

    The column table maps position -> (offset, length); regions is
    ((bad_off, bad_len), (idx_off, idx_len), header_len).
    """
    if len(data) < FIXED_HEADER_SIZE:
        raise FormatError("shorter than fixed header")
    (magic, version, header_len, row_count, bad_off, bad_len,
     idx_off, idx_len, delimiter, attr_count) = _FIXED_HEADER.unpack(
        data[:FIXED_HEADER_SIZE]
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if header_len > len(data):
        raise FormatError("header extends past data")
    cur = _Cursor(data, FIXED_HEADER_SIZE, header_len)
    attrs = []
    for _ in range(attr_count):
        position, tag, name_len = cur.unpack("<HBH")
        name = cur.take(name_len).decode("utf-8")
        if tag not in _TAG_TYPES:
            raise FormatError(f"unknown type tag {tag}")
        attrs.append((name, position, _TAG_TYPES[tag]))
    try:
        from .schema import Attribute

        schema = Schema(tuple(Attribute(*a) for a in attrs), delimiter)
    except ValueError as e:
        raise FormatError(str(e)) from e
    col_table = {}
    for position in range(1, attr_count + 1):
        col_off, col_len = cur.unpack("<QQ")
        col_table[position] = (col_off, col_len)
    if cur.pos != header_len:
        raise FormatError("header length does not match contents")
    return schema, row_count, col_table, ((bad_off, bad_len), (idx_off, idx_len), header_len)


def _check_tiling(data_len, schema, row_count, col_table, regions):
    (bad_off, bad_len), (idx_off, idx_len), header_len = regions
    off = header_len
    for pos in physical_positions(schema):
        col_off, col_len = col_table[pos]
        if col_off != off:
            raise FormatError(f"column {pos} offset {col_off} breaks tiling (expected {off})")
        size = schema.attribute(pos).type.fixed_size
        if size is not None and col_len != row_count * size:
            raise FormatError(f"column {pos} length {col_len} != rowCount*{size}")
        off += col_len
    if bad_off != off:
        raise FormatError("bad region offset breaks tiling")
    off += bad_len
    if idx_len:
        if idx_off != off:
            raise FormatError("index section offset breaks tiling")
        off += idx_len
    elif idx_off != 0:
        raise FormatError("index offset set but length is zero")
    if off != data_len:
        raise FormatError(f"regions tile {off} bytes, block has {data_len}")


def parse_index_section(section: bytes, idx_off: int, schema: Schema, row_count: int):
    """Decode an index section into (SparseClusteredIndex, {pos: VarOffsetList}).

    `section` holds exactly the index section bytes; `idx_off` is its
    absolute offset inside the block (stored offsets are absolute).
    """
    idx_len = len(section)
    cur = _Cursor(section)
    key_position, index_type, partition_size, key_size, has_max = cur.unpack("<HBIBB")
    if index_type != INDEX_TYPE_SPARSE_CLUSTERED:
        raise FormatError(f"unknown index type {index_type}")
    if not 1 <= key_position <= len(schema):
        raise FormatError(f"index key position {key_position} out of range")
    key_type = schema.attribute(key_position).type
    if key_type.fixed_size != key_size:
        raise FormatError("index key size does not match schema type")
    if partition_size < 1:
        raise FormatError("partition size must be >= 1")
    max_key_raw = cur.take(key_size)
    root_off, root_len = cur.unpack("<QQ")
    (n_var,) = cur.unpack("<H")
    var_locs = [cur.unpack("<HQQ") for _ in range(n_var)]

    n_partitions = -(-row_count // partition_size)
    if root_len != n_partitions * key_size:
        raise FormatError("root directory length inconsistent with rowCount")
    rel_root = root_off - idx_off
    if not 0 <= rel_root <= rel_root + root_len <= idx_len:
        raise FormatError("root directory outside index section")
    root = np.frombuffer(section[rel_root:rel_root + root_len], dtype=key_type.dtype)
    if len(root) > 1 and np.any(root[1:] < root[:-1]):
        raise FormatError("root directory not non-decreasing")
    max_key = _key_from_bytes(max_key_raw, key_type) if has_max else None
    index = SparseClusteredIndex(
        key_position, partition_size, root, partition_size * key_size, max_key
    )
    var_lists = {}
    varchar_positions = set(schema.varchar_positions)
    for attr_pos, off, length in var_locs:
        if attr_pos not in varchar_positions:
            raise FormatError(f"offset list for non-VARCHAR attribute {attr_pos}")
        rel = off - idx_off
        if length != n_partitions * 8 or not 0 <= rel <= rel + length <= idx_len:
            raise FormatError("offset list length inconsistent")
        offsets = np.frombuffer(section[rel:rel + length], dtype="<u8")
        if len(offsets) > 1 and np.any(offsets[1:] <= offsets[:-1]):
            raise FormatError("offset list not strictly increasing")
        var_lists[attr_pos] = VarOffsetList(attr_pos, offsets)
    return index, var_lists


def deserialize(data: bytes) -> PaxBlock:
    """Decode block bytes; FormatError on any structural violation."""
    schema, row_count, col_table, regions = parse_header(data)
    (bad_off, bad_len), (idx_off, idx_len), _ = regions
    _check_tiling(len(data), schema, row_count, col_table, regions)

    columns = {}
    for attr in schema.attributes:
        col_off, col_len = col_table[attr.position]
        raw = data[col_off:col_off + col_len]
        if attr.type.fixed_size is None:
            terminators = raw.count(b"\0")
            if terminators != row_count:
                raise FormatError(
                    f"VARCHAR column {attr.position} has {terminators} terminators, "
                    f"expected {row_count}"
                )
            if raw and not raw.endswith(b"\0"):
                raise FormatError(f"VARCHAR column {attr.position} not zero-terminated")
            columns[attr.position] = raw
        else:
            columns[attr.position] = np.frombuffer(raw, dtype=attr.type.dtype)

    bad_rows = []
    cur = _Cursor(data, bad_off, bad_off + bad_len)
    while cur.pos < cur.end:
        (length,) = cur.unpack("<I")
        bad_rows.append(cur.take(length))

    index = None
    var_lists = {}
    if idx_len:
        index, var_lists = parse_index_section(
            data[idx_off:idx_off + idx_len], idx_off, schema, row_count
        )
    return PaxBlock(schema, row_count, columns, bad_rows, index, var_lists)
