"""minihail: a miniature replicated block store where every replica of a
block is sorted differently and carries its own sparse clustered index,
plus an index-aware map-job runner over it."""

__version__ = "0.1.0"
