"""Deterministic dataset generators for the bench fixtures.

Two shapes: a web-log style table (IPs, dates, revenue, words, URLs) and a
19-integer-column table.  Same seed, same bytes.  Constants below are tuned
so the canned query workloads select non-empty subsets of distinct sizes;
tests never assume a selectivity, they recompute it by brute force.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .schema import Attribute, AttrType, Schema

USERVISITS_SCHEMA = Schema(
    (
        Attribute("sourceIP", 1, AttrType.IPV4),
        Attribute("destURL", 2, AttrType.VARCHAR),
        Attribute("visitDate", 3, AttrType.DATE),
        Attribute("adRevenue", 4, AttrType.FLOAT64),
        Attribute("userAgent", 5, AttrType.VARCHAR),
        Attribute("countryCode", 6, AttrType.VARCHAR),
        Attribute("languageCode", 7, AttrType.VARCHAR),
        Attribute("searchWord", 8, AttrType.VARCHAR),
        Attribute("duration", 9, AttrType.INT32),
    )
)

SYNTHETIC_SCHEMA = Schema(
    tuple(Attribute(f"col{i}", i, AttrType.INT32) for i in range(1, 20))
)

# Planted needle for the point-lookup queries: appears at row 13 and then
# every 50,000 rows; half of those occurrences also get the planted date.
NEEDLE_IP = "172.101.11.46"
NEEDLE_DATE = "1992-12-22"

_WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
]
_AGENTS = ["Mozilla/5.0", "Opera/9.80", "curl/7.81", "Wget/1.21", "Safari/605"]
_COUNTRIES = ["DE", "US", "FR", "BR", "IN", "JP", "MX", "PL"]
_LANGS = ["de", "en", "fr", "pt", "hi", "ja", "es", "pl"]

# Bob's workload over the web-log table (position grammar: @3 = visitDate).
BOB_QUERIES = {
    "Bob-Q1": 'filter="@3 between(1999-01-01,2000-01-01)", projection={@1}',
    "Bob-Q2": f'filter="@1 =({NEEDLE_IP})", projection={{@8,@9,@4}}',
    "Bob-Q3": f'filter="@1 =({NEEDLE_IP}) and @3 =({NEEDLE_DATE})", projection={{@8,@9,@4}}',
    "Bob-Q4": 'filter="@4 between(1,10)", projection={@8,@9,@4}',
    "Bob-Q5": 'filter="@4 between(1,100)", projection={@8,@9,@4}',
}

# Synthetic workload: all queries filter on @1 (selectivity 0.10 / 0.01 over
# uniform [0, 2^31)); projections of 19, 9, and 1 attributes.
_SYN_SEL_10 = int(0.10 * 2**31) - 1
_SYN_SEL_01 = int(0.01 * 2**31) - 1
SYN_QUERIES = {
    "Syn-Q1a": f'filter="@1 between(0,{_SYN_SEL_10})"',
    "Syn-Q1b": f'filter="@1 between(0,{_SYN_SEL_10})", projection={{{",".join(f"@{i}" for i in range(1, 10))}}}',
    "Syn-Q1c": f'filter="@1 between(0,{_SYN_SEL_10})", projection={{@1}}',
    "Syn-Q2a": f'filter="@1 between(0,{_SYN_SEL_01})"',
    "Syn-Q2b": f'filter="@1 between(0,{_SYN_SEL_01})", projection={{{",".join(f"@{i}" for i in range(1, 10))}}}',
    "Syn-Q2c": f'filter="@1 between(0,{_SYN_SEL_01})", projection={{@1}}',
}


def generate_uservisits(rows: int, seed: int, out_path: str | Path) -> Path:
    """Write `rows` web-log rows; dates span 1990-2012, revenue [0, 500)."""
    out_path = Path(out_path)
    rng = np.random.default_rng(seed)
    if rows == 0:
        out_path.write_bytes(b"")
        return out_path

    octets = rng.integers(0, 256, size=(rows, 4))
    day0 = np.datetime64("1990-01-01")
    day_span = int((np.datetime64("2012-12-31") - day0).astype(int)) + 1
    days = rng.integers(0, day_span, size=rows)
    revenue = np.round(rng.uniform(0, 500, size=rows), 2)
    duration = rng.integers(1, 10_000, size=rows)
    words = rng.integers(0, len(_WORDS), size=rows)
    agents = rng.integers(0, len(_AGENTS), size=rows)
    countries = rng.integers(0, len(_COUNTRIES), size=rows)
    langs = rng.integers(0, len(_LANGS), size=rows)
    urls = rng.integers(0, 10_000_000, size=rows)

    idx = np.arange(rows)
    needle = (idx % 50_000 == 13) | (idx == min(13, rows - 1))
    needle_date = needle & ((idx // 50_000) % 2 == 0)

    dates = np.datetime_as_string(day0 + days, unit="D")
    rev_str = np.char.mod("%.2f", revenue)
    lines = []
    for i in range(rows):
        ip = (
            NEEDLE_IP
            if needle[i]
            else f"{octets[i, 0]}.{octets[i, 1]}.{octets[i, 2]}.{octets[i, 3]}"
        )
        d = NEEDLE_DATE if needle_date[i] else dates[i]
        lines.append(
            f"{ip},http://example.com/page{urls[i]},{d},{rev_str[i]},"
            f"{_AGENTS[agents[i]]},{_COUNTRIES[countries[i]]},{_LANGS[langs[i]]},"
            f"{_WORDS[words[i]]},{duration[i]}"
        )
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def generate_synthetic(rows: int, seed: int, out_path: str | Path) -> Path:
    """Write `rows` lines of 19 uniform random INT32 attributes."""
    out_path = Path(out_path)
    rng = np.random.default_rng(seed)
    if rows == 0:
        out_path.write_bytes(b"")
        return out_path
    values = rng.integers(0, 2**31, size=(rows, 19), dtype=np.int64)
    pd.DataFrame(values).to_csv(out_path, header=False, index=False)
    return out_path
