"""Exception types shared across the package.

Each error name mirrors the failure it reports; callers catch `HailError`
for anything raised by this package.
"""


class HailError(Exception):
    """Base class for all minihail errors."""


class FormatError(HailError):
    """Block bytes do not form a valid HAIL block (bad magic, version, or layout)."""


class PositionOutOfRange(HailError):
    """Attribute position outside 1..k."""


class UnsupportedKeyType(HailError):
    """Sort/index key requested on a type that cannot be a clustered key."""


class NotSorted(HailError):
    """Index build found a descending adjacent key pair."""


class InsufficientDatanodes(HailError):
    """Fewer alive datanodes than the requested replication factor."""


class UnknownBlock(HailError):
    """Block is not registered (or not yet fully replicated) at the namenode."""


class DeadNodeError(HailError):
    """Operation attempted against a killed datanode."""


class UploadFailed(HailError):
    """Upload aborted: corruption, dead pipeline node, or out-of-order ACK."""


class ReadFailed(HailError):
    """Block read failed (dead node, missing file, or checksum mismatch)."""


class JobFailed(HailError):
    """Job could not complete; some block has no alive replica."""


class AnnotationSyntaxError(HailError):
    """Query annotation text does not match the grammar."""


class UnknownAttribute(HailError):
    """Annotation references an attribute position missing from the schema."""


class NoAliveNodes(HailError):
    """Scheduler found no alive node to run a task."""


class ScenarioFailed(HailError):
    """A bench scenario step failed; the message names the step."""
