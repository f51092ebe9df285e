"""Typed schemas, line parsing, bad-record segregation, and content-aware blocking.

A schema assigns a type to each 1-based attribute position of a delimited
text file.  Lines that do not match the schema are never errors: they become
``BadRecord``s and travel with their block verbatim.  Blocking cuts a file
into byte-budgeted logical blocks without ever splitting a line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date, timedelta
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError

_EPOCH = date(1970, 1, 1)

_INT_RE = re.compile(rb"^[+-]?[0-9]+$")
_FLOAT_RE = re.compile(rb"^[+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?$")
_DATE_RE = re.compile(rb"^([0-9]{4})-([0-9]{2})-([0-9]{2})$")
_IPV4_RE = re.compile(rb"^([0-9]{1,3})\.([0-9]{1,3})\.([0-9]{1,3})\.([0-9]{1,3})$")


class AttrType(Enum):
    INT32 = "INT32"
    INT64 = "INT64"
    FLOAT64 = "FLOAT64"
    DATE = "DATE"
    VARCHAR = "VARCHAR"
    IPV4 = "IPV4"

    @property
    def fixed_size(self) -> int | None:
        """Bytes per value in columnar storage; None for variable-size types."""
        return _TYPE_SIZES[self]

    @property
    def dtype(self) -> np.dtype | None:
        return _TYPE_DTYPES[self]


_TYPE_SIZES = {
    AttrType.INT32: 4,
    AttrType.INT64: 8,
    AttrType.FLOAT64: 8,
    AttrType.DATE: 4,
    AttrType.VARCHAR: None,
    AttrType.IPV4: 4,
}

_TYPE_DTYPES = {
    AttrType.INT32: np.dtype("<i4"),
    AttrType.INT64: np.dtype("<i8"),
    AttrType.FLOAT64: np.dtype("<f8"),
    AttrType.DATE: np.dtype("<i4"),
    AttrType.VARCHAR: None,
    AttrType.IPV4: np.dtype("<u4"),
}


class BadReason(Enum):
    FIELD_COUNT_MISMATCH = "FIELD_COUNT_MISMATCH"
    TYPE_PARSE_FAILURE = "TYPE_PARSE_FAILURE"
    OVERSIZED_LINE = "OVERSIZED_LINE"


@dataclass(frozen=True, slots=True)
class Attribute:
    name: str
    position: int  # 1-based
    type: AttrType


@dataclass(frozen=True)
class Schema:
    """Ordered attribute list plus the field delimiter (a single byte)."""

    attributes: tuple[Attribute, ...]
    delimiter: int = ord(",")

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("schema needs at least one attribute")
        positions = sorted(a.position for a in self.attributes)
        if positions != list(range(1, len(self.attributes) + 1)):
            raise ValueError(f"attribute positions must be contiguous 1..k, got {positions}")
        if not 0 <= self.delimiter < 256:
            raise ValueError("delimiter must be a single byte")
        # keep attributes sorted by position regardless of construction order
        object.__setattr__(
            self, "attributes", tuple(sorted(self.attributes, key=lambda a: a.position))
        )

    def __len__(self) -> int:
        return len(self.attributes)

    def attribute(self, position: int) -> Attribute:
        return self.attributes[position - 1]

    @property
    def delimiter_byte(self) -> bytes:
        return bytes([self.delimiter])

    @property
    def fixed_positions(self) -> list[int]:
        return [a.position for a in self.attributes if a.type.fixed_size is not None]

    @property
    def varchar_positions(self) -> list[int]:
        return [a.position for a in self.attributes if a.type.fixed_size is None]


@dataclass(frozen=True, slots=True)
class Record:
    """One parsed row; values align with schema positions (index 0 = position 1)."""

    values: tuple


@dataclass(frozen=True, slots=True)
class BadRecord:
    """A line that did not match the schema, kept verbatim."""

    raw: bytes
    reason: BadReason


def parse_field(field: bytes, attr_type: AttrType):
    """Parse one delimited field; returns the typed value or None on failure.

    DATE values become days since 1970-01-01, IPV4 values the packed
    32-bit integer.  Numeric overflow counts as a parse failure.
    """
    if attr_type is AttrType.VARCHAR:
        try:
            return field.decode("utf-8")
        except UnicodeDecodeError:
            return None
    if attr_type is AttrType.INT32:
        if not _INT_RE.match(field):
            return None
        v = int(field)
        return v if -(2**31) <= v < 2**31 else None
    if attr_type is AttrType.INT64:
        if not _INT_RE.match(field):
            return None
        v = int(field)
        return v if -(2**63) <= v < 2**63 else None
    if attr_type is AttrType.FLOAT64:
        if not _FLOAT_RE.match(field):
            return None
        v = float(field)
        return None if v != v else v  # NaN cannot occur via the regex; keep the guard
    if attr_type is AttrType.DATE:
        m = _DATE_RE.match(field)
        if not m:
            return None
        try:
            d = date(int(m.group(1)), int(m.group(2)), int(m.group(3)))
        except ValueError:
            return None
        return (d - _EPOCH).days
    if attr_type is AttrType.IPV4:
        m = _IPV4_RE.match(field)
        if not m:
            return None
        octets = [int(m.group(i)) for i in range(1, 5)]
        if any(o > 255 for o in octets):
            return None
        return (octets[0] << 24) | (octets[1] << 16) | (octets[2] << 8) | octets[3]
    raise AssertionError(attr_type)


def format_value(value, attr_type: AttrType) -> str:
    """Inverse of parse_field for output formatting."""
    if attr_type is AttrType.DATE:
        return (_EPOCH + timedelta(days=int(value))).isoformat()
    if attr_type is AttrType.IPV4:
        v = int(value)
        return f"{(v >> 24) & 255}.{(v >> 16) & 255}.{(v >> 8) & 255}.{v & 255}"
    if attr_type is AttrType.FLOAT64:
        return repr(float(value))
    if attr_type is AttrType.VARCHAR:
        return str(value)
    return str(int(value))


def parse_line(line: bytes, schema: Schema) -> Record | BadRecord:
    """Parse one line (no newline byte) into a Record, or a BadRecord.

    An empty line is a field-count mismatch.  A trailing '\\r' is stripped
    before parsing.  Any NUL byte demotes the row (NUL terminates VARCHAR
    values in block storage, so it may not appear in data).
    """
    if line == b"":
        return BadRecord(line, BadReason.FIELD_COUNT_MISMATCH)
    content = line[:-1] if line.endswith(b"\r") else line
    if b"\0" in content:
        return BadRecord(line, BadReason.TYPE_PARSE_FAILURE)
    fields = content.split(schema.delimiter_byte)
    if len(fields) != len(schema):
        return BadRecord(line, BadReason.FIELD_COUNT_MISMATCH)
    values = []
    for field, attr in zip(fields, schema.attributes):
        v = parse_field(field, attr.type)
        if v is None:
            return BadRecord(line, BadReason.TYPE_PARSE_FAILURE)
        values.append(v)
    return Record(tuple(values))


@dataclass
class LogicalBlock:
    """A run of consecutive lines: parsed records plus verbatim bad records."""

    entries: list  # Record | BadRecord, in input order
    raw_lines: list[bytes]  # original bytes incl. terminator, aligned with entries
    byte_budget: int

    @property
    def records(self) -> list[Record]:
        return [e for e in self.entries if isinstance(e, Record)]

    @property
    def bad_records(self) -> list[BadRecord]:
        return [e for e in self.entries if isinstance(e, BadRecord)]

    @property
    def text_size(self) -> int:
        return sum(len(r) for r in self.raw_lines)


def split_lines(data: bytes) -> list[bytes]:
    """Split on '\\n' only, keeping terminators; a final unterminated line is kept."""
    if not data:
        return []
    parts = data.split(b"\n")
    lines = [p + b"\n" for p in parts[:-1]]
    if parts[-1]:
        lines.append(parts[-1])
    return lines


def cut_block_spans(data: bytes, byte_budget: int) -> list[tuple[int, int]]:
    """Byte ranges of the logical blocks of `data`, cut at line boundaries.

    Greedy: a block takes lines while its size stays within the budget; a
    line that alone exceeds the budget gets a block of its own.  Both the
    reference parser and the bulk upload path consume these spans, so block
    boundaries are identical by construction.
    """
    if byte_budget < 1:
        raise ValueError("byte budget must be positive")
    lines = split_lines(data)
    if not lines:
        return []
    sizes = np.fromiter((len(ln) for ln in lines), dtype=np.int64, count=len(lines))
    cum = np.concatenate(([0], np.cumsum(sizes)))
    spans = []
    j = 0
    n = len(lines)
    while j < n:
        m = int(np.searchsorted(cum, cum[j] + byte_budget, side="right")) - 1
        if m <= j:
            m = j + 1  # single line over budget still forms a block
        spans.append((int(cum[j]), int(cum[m])))
        j = m
    return spans


def parse_span(span: bytes, schema: Schema, byte_budget: int) -> LogicalBlock:
    """Parse one block's bytes line by line."""
    raw_lines = split_lines(span)
    entries = []
    for raw in raw_lines:
        content = raw[:-1] if raw.endswith(b"\n") else raw
        if len(raw) > byte_budget:
            entries.append(BadRecord(content, BadReason.OVERSIZED_LINE))
        else:
            entries.append(parse_line(content, schema))
    return LogicalBlock(entries, raw_lines, byte_budget)


def cut_blocks(data: bytes, schema: Schema, byte_budget: int):
    """Cut input bytes into LogicalBlocks; yields lazily, in file order."""
    for start, end in cut_block_spans(data, byte_budget):
        yield parse_span(data[start:end], schema, byte_budget)


def load_schema_config(path: str | Path) -> Schema:
    """Read a line-based schema file: `attr <position> <name> <type>` and
    `delimiter <char>` lines; '#' starts a comment."""
    attrs = []
    delimiter = ord(",")
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "delimiter":
            if len(parts) != 2 or len(parts[1]) != 1:
                raise FormatError(f"{path}:{lineno}: delimiter takes one character")
            delimiter = ord(parts[1])
        elif parts[0] == "attr":
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected `attr <position> <name> <type>`")
            try:
                position = int(parts[1])
                attr_type = AttrType(parts[3])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
            attrs.append(Attribute(parts[2], position, attr_type))
        else:
            raise FormatError(f"{path}:{lineno}: unknown directive {parts[0]!r}")
    if not attrs:
        raise FormatError(f"{path}: no attributes declared")
    try:
        return Schema(tuple(attrs), delimiter)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
