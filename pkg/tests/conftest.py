from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from turtlekv.checkpoint import Checkpointer
from turtlekv.manifest import Manifest, RootInfo
from turtlekv.model import Config, StatsCounters, Update, make_batch
from turtlekv.pagestore import PageStore

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


def K(i: int) -> bytes:
    """Fixed-width big-endian key so byte order equals numeric order."""
    return i.to_bytes(8, "big")


def ints(keys) -> list[int]:
    return [int.from_bytes(k, "big") for k in keys]


def tiny_config(**kw) -> Config:
    """Three 28-byte entries per leaf (8-byte keys, 1-byte values)."""
    base = dict(
        leaf_page_bytes=4096,
        shard_bytes=4096,
        max_key_bytes=8,
        max_value_bytes=8,
        leaf_capacity_bytes=84,
        pivot_capacity=8,
    )
    base.update(kw)
    return Config(**base)


def small_config(**kw) -> Config:
    """Multi-entry leaves and a shallow buffer: exercises splits quickly."""
    base = dict(
        leaf_page_bytes=16384,
        shard_bytes=4096,
        max_key_bytes=16,
        max_value_bytes=64,
        pivot_capacity=8,
        memory_budget_bytes=1 << 20,
        wal_flush_interval_ms=0,
    )
    base.update(kw)
    return Config(**base)


class SeqBatches:
    """Builds batches with increasing seqs."""

    def __init__(self):
        self.seq = 0

    def __call__(self, items) -> "Run":  # noqa: F821
        ups = []
        for k, v in items:
            self.seq += 1
            ups.append(Update(k, v, self.seq))
        return make_batch(ups)


@pytest.fixture
def batches() -> SeqBatches:
    return SeqBatches()


def make_checkpointer(directory: str, config: Config, chi: int = 1, cache_bytes: int = 1 << 20):
    stats = StatsCounters()
    store = PageStore(directory, config.shard_bytes, cache_bytes, stats)
    manifest = Manifest.create(os.path.join(directory, "MANIFEST"), 1 << 20, stats)
    return Checkpointer(config, store, manifest, stats, RootInfo(), chi)


def reopen_checkpointer(directory: str, config: Config, chi: int = 1):
    stats = StatsCounters()
    manifest, state = Manifest.open(os.path.join(directory, "MANIFEST"), 1 << 20, stats)
    store = PageStore(directory, config.shard_bytes, 1 << 20, stats)
    store.restore(state.refcounts, state.used)
    return Checkpointer(config, store, manifest, stats, state.root, chi)


# one "criterion N ...: PASS/FAIL" line per acceptance check, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
