"""Shared fixtures: toy schemas, random block builders, and the row-major
brute-force oracle that the index path is checked against."""

import numpy as np
import pytest

from minihail.datagen import USERVISITS_SCHEMA
from minihail.pax import PaxBlock, to_pax
from minihail.schema import Attribute, AttrType, LogicalBlock, Record, Schema

TWO_INT_SCHEMA = Schema(
    (Attribute("a", 1, AttrType.INT32), Attribute("b", 2, AttrType.INT32))
)

MIXED_SCHEMA = Schema(
    (
        Attribute("id", 1, AttrType.INT32),
        Attribute("name", 2, AttrType.VARCHAR),
        Attribute("when", 3, AttrType.DATE),
        Attribute("score", 4, AttrType.FLOAT64),
        Attribute("big", 5, AttrType.INT64),
        Attribute("addr", 6, AttrType.IPV4),
        Attribute("tag", 7, AttrType.VARCHAR),
    )
)


def block_of_records(records, schema, bad=()):
    """PaxBlock plus the row-major shadow the oracle uses."""
    lb = LogicalBlock(list(records) + list(bad), [], 1 << 30)
    return to_pax(lb, schema)


def random_rows(rng: np.random.Generator, schema: Schema, n: int,
                key_dup_rate: float = 0.0):
    """Random typed rows; with key_dup_rate, values repeat to create runs."""
    words = ["", "a", "ab", "xyz", "hello world", "zz9", "été", "long-" * 8]
    rows = []
    for _ in range(n):
        values = []
        for attr in schema.attributes:
            t = attr.type
            if t is AttrType.INT32:
                v = int(rng.integers(-50, 50)) if rng.random() < key_dup_rate else int(
                    rng.integers(-(2**31), 2**31)
                )
            elif t is AttrType.INT64:
                v = int(rng.integers(-(2**62), 2**62))
            elif t is AttrType.FLOAT64:
                v = round(float(rng.uniform(-1e6, 1e6)), 3)
            elif t is AttrType.DATE:
                v = int(rng.integers(-20000, 40000))
            elif t is AttrType.IPV4:
                v = int(rng.integers(0, 2**32))
            else:
                v = words[int(rng.integers(0, len(words)))] + str(int(rng.integers(0, 100)))
            values.append(v)
        rows.append(Record(tuple(values)))
    return rows


def brute_force_filter(records, conditions, projection):
    """Row-by-row reference: every condition ANDed, then project."""
    out = []
    for r in records:
        ok = True
        for cond in conditions:
            v = r.values[cond.position - 1]
            if cond.lo is not None and v < cond.lo:
                ok = False
                break
            if cond.hi is not None and v > cond.hi:
                ok = False
                break
        if ok:
            out.append(tuple(r.values[p - 1] for p in projection))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def uservisits_schema():
    return USERVISITS_SCHEMA


def make_cluster(tmp_path, **overrides):
    from minihail.cluster import Cluster, ClusterConfig

    defaults = dict(
        datanodes=3, map_slots=2, replication=3, block_size=64 * 1024,
        expiry_interval=0.15, ack_timeout=5.0,
    )
    defaults.update(overrides)
    return Cluster(ClusterConfig(**defaults), tmp_path / "store").start()
