"""TurtleKV: an embedded key-value store on a level-tiered buffered B-tree."""

from .engine import KVStore
from .errors import (
    BufferFull,
    ContractViolation,
    EmptyBatch,
    InvalidArgument,
    InvalidParameter,
    IOFailure,
    OpenFailure,
    OutOfSpace,
    RecordTooLarge,
    RecoveryHalt,
    TurtleKVError,
    UseAfterFree,
)
from .model import Config, Run, StatsCounters, Update, make_batch, merge_runs

__version__ = "0.1.0"

__all__ = [
    "BufferFull",
    "Config",
    "ContractViolation",
    "EmptyBatch",
    "IOFailure",
    "InvalidArgument",
    "InvalidParameter",
    "KVStore",
    "OpenFailure",
    "OutOfSpace",
    "RecordTooLarge",
    "RecoveryHalt",
    "Run",
    "StatsCounters",
    "TurtleKVError",
    "Update",
    "UseAfterFree",
    "make_batch",
    "merge_runs",
]
