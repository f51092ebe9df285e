"""PAX conversion, the binary block format, and golden files."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MIXED_SCHEMA, TWO_INT_SCHEMA, block_of_records, random_rows
from minihail.errors import FormatError, PositionOutOfRange
from minihail.index import build_index, sort_block
from minihail.pax import (
    PaxBlock,
    block_from_text,
    deserialize,
    parse_header,
    read_column,
    serialize,
    to_pax,
)
from minihail.schema import (
    Attribute,
    AttrType,
    BadReason,
    BadRecord,
    LogicalBlock,
    Record,
    Schema,
    cut_blocks,
    parse_span,
)

GOLDEN = Path(__file__).parent / "golden"


class TestToPax:
    def test_fixed_packing(self):
        records = [Record((1, 10)), Record((2, 20)), Record((3, 30))]
        block = block_of_records(records, TWO_INT_SCHEMA)
        raw1 = block.columns[1].tobytes()
        raw2 = block.columns[2].tobytes()
        assert len(raw1) == len(raw2) == 12
        assert np.array_equal(block.columns[1], [1, 2, 3])

    def test_varchar_layout_hand_built(self):
        schema = Schema((Attribute("s", 1, AttrType.VARCHAR),))
        block = block_of_records([Record(("ab",)), Record(("",)), Record(("c",))], schema)
        assert block.columns[1] == b"ab\x00\x00c\x00"

    def test_degenerate_block_keeps_bad_rows(self):
        bad = [
            BadRecord(b"x,y,z", BadReason.FIELD_COUNT_MISMATCH),
            BadRecord(b"", BadReason.FIELD_COUNT_MISMATCH),
        ]
        block = block_of_records([], TWO_INT_SCHEMA, bad=bad)
        assert block.row_count == 0
        assert block.bad_rows == [b"x,y,z", b""]

    def test_row_column_equivalence(self, rng):
        records = random_rows(rng, MIXED_SCHEMA, 200)
        block = block_of_records(records, MIXED_SCHEMA)
        for pos in range(1, len(MIXED_SCHEMA) + 1):
            col = read_column(block, pos)
            expected = [r.values[pos - 1] for r in records]
            if isinstance(col, list):
                assert col == expected
            else:
                assert col.tolist() == pytest.approx(expected)


class TestReadColumn:
    def test_position_out_of_range(self):
        block = block_of_records([Record((1, 2))], TWO_INT_SCHEMA)
        with pytest.raises(PositionOutOfRange):
            read_column(block, 3)
        with pytest.raises(PositionOutOfRange):
            read_column(block, 0)

    def test_empty_block(self):
        block = block_of_records([], TWO_INT_SCHEMA)
        assert len(read_column(block, 1)) == 0


class TestSerialization:
    def test_round_trip_random(self, rng):
        for n in (0, 1, 7, 300):
            records = random_rows(rng, MIXED_SCHEMA, n)
            bad = [BadRecord(b"junk line", BadReason.TYPE_PARSE_FAILURE)] if n % 2 else []
            block = block_of_records(records, MIXED_SCHEMA, bad=bad)
            assert deserialize(serialize(block)) == block

    def test_round_trip_indexed(self, rng):
        records = random_rows(rng, MIXED_SCHEMA, 500)
        block = block_of_records(records, MIXED_SCHEMA)
        ordered, _ = sort_block(block, 1)
        indexed = build_index(ordered, 1, 64)
        again = deserialize(serialize(indexed))
        assert again == indexed
        assert again.index is not None
        assert again.index.partition_size == 64
        assert set(again.var_offset_lists) == {2, 7}

    def test_truncated_raises(self, rng):
        raw = serialize(block_of_records(random_rows(rng, TWO_INT_SCHEMA, 10), TWO_INT_SCHEMA))
        for cut in (0, 3, len(raw) // 2, len(raw) - 1):
            with pytest.raises(FormatError):
                deserialize(raw[:cut])

    def test_bad_magic_and_version(self, rng):
        raw = bytearray(serialize(block_of_records([Record((1, 2))], TWO_INT_SCHEMA)))
        bad_magic = b"XAIL" + bytes(raw[4:])
        with pytest.raises(FormatError):
            deserialize(bad_magic)
        raw[4] = 99  # version
        with pytest.raises(FormatError):
            deserialize(bytes(raw))

    def test_tiling_violation_detected(self, rng):
        raw = bytearray(serialize(block_of_records([Record((1, 2))], TWO_INT_SCHEMA)))
        schema, _, col_table, (_, _, header_len) = parse_header(bytes(raw))
        # nudge the first column offset: tiling check must reject it
        first_table_entry = header_len - 16 * len(schema)
        raw[first_table_entry] ^= 0x01
        with pytest.raises(FormatError):
            deserialize(bytes(raw))

    def test_binary_size_all_fixed(self, rng):
        records = random_rows(rng, TWO_INT_SCHEMA, 123)
        block = block_of_records(records, TWO_INT_SCHEMA)
        raw = serialize(block)
        _, row_count, col_table, regions = parse_header(raw)
        col_bytes = sum(length for _, length in col_table.values())
        assert col_bytes == row_count * (4 + 4)

    def test_header_locates_everything(self, rng):
        records = random_rows(rng, MIXED_SCHEMA, 64)
        block = block_of_records(records, MIXED_SCHEMA, bad=[BadRecord(b"!", BadReason.TYPE_PARSE_FAILURE)])
        indexed = build_index(sort_block(block, 1)[0], 1, 16)
        raw = serialize(indexed)
        schema, row_count, col_table, ((bad_off, bad_len), (idx_off, idx_len), header_len) = parse_header(raw)
        # regions tile the file exactly
        spans = sorted(list(col_table.values()) + [(bad_off, bad_len), (idx_off, idx_len)])
        pos = header_len
        for off, length in spans:
            assert off == pos
            pos += length
        assert pos == len(raw)


@st.composite
def small_blocks(draw):
    n = draw(st.integers(min_value=0, max_value=40))
    seed = draw(st.integers(min_value=0, max_value=2**31))
    rng = np.random.default_rng(seed)
    return block_of_records(random_rows(rng, MIXED_SCHEMA, n), MIXED_SCHEMA)


class TestRoundTripProperty:
    @given(block=small_blocks())
    @settings(max_examples=60, deadline=None)
    def test_serialize_deserialize_identity(self, block):
        assert deserialize(serialize(block)) == block


class TestFastTextPath:
    """The bulk all-INT32 converter must agree with the line-by-line path."""

    def test_agrees_on_clean_and_dirty_spans(self, rng):
        schema = Schema(tuple(Attribute(f"c{i}", i, AttrType.INT32) for i in range(1, 6)))
        spans = [
            b"1,2,3,4,5\n6,7,8,9,10\n",
            b"1,2,3,4,5\nbad line\n6,7,8,9,-10\n",
            b"1,2,3,4\n",  # short row
            b"1,2,3,4,2147483648\n",  # overflow
            b"\n1,2,3,4,5\n",  # empty line
            b"01,+2,3,4,5\n",  # plus sign forces fallback
            b"9,8,7,6,5",  # no trailing newline
            b"1,2,3,4,5\r\n",  # CR forces fallback
        ]
        for _ in range(30):
            vals = rng.integers(-(2**31), 2**31, size=(20, 5))
            spans.append(
                b"\n".join(b",".join(b"%d" % v for v in row) for row in vals) + b"\n"
            )
        for span in spans:
            fast = block_from_text(span, schema, 1 << 20)
            slow = to_pax(parse_span(span, schema, 1 << 20), schema)
            assert fast == slow, span


class TestGoldenFiles:
    """Frozen on-disk blocks: decoding them must keep working bit-for-bit."""

    def test_plain_block(self):
        raw = (GOLDEN / "plain.hail").read_bytes()
        assert hashlib.sha256(raw).hexdigest() == (
            "80ada814b2cc69eb4a69a7c8313e08e6ec75ec504ad52b3d664ee23f7e6b004a"
        )
        block = deserialize(raw)
        assert block.row_count == 3
        assert read_column(block, 1).tolist() == [7, 3, 5]
        assert read_column(block, 2) == ["gamma", "", "alpha"]
        assert read_column(block, 3).tolist() == [10957, 0, -365]
        assert block.bad_rows == [b"not,parsable"]
        assert serialize(block) == raw

    def test_indexed_block(self):
        raw = (GOLDEN / "indexed.hail").read_bytes()
        assert hashlib.sha256(raw).hexdigest() == (
            "b52fb51b2c5b18dc68eed3f9eaf71fc0c0c76b200d3d563e1de7e22af5cfc0c9"
        )
        block = deserialize(raw)
        assert read_column(block, 1).tolist() == [3, 5, 7]
        assert read_column(block, 2) == ["", "alpha", "gamma"]
        assert block.index.partition_size == 2
        assert block.index.root_directory.tolist() == [3, 7]
        assert block.index.max_key == 7
        assert block.var_offset_lists[2].offsets.tolist() == [0, 7]
        assert serialize(block) == raw
