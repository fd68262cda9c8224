"""Runtime multiply-accumulate tally, used to cross-check analytic MAC counts."""

from __future__ import annotations

import contextlib
from collections import Counter

_active: list[Counter] = []


def record(tag: str, macs: int) -> None:
    for counter in _active:
        counter[tag] += int(macs)


@contextlib.contextmanager
def mac_tally():
    """Collect MACs recorded by ops inside the block, keyed by op tag."""
    counter: Counter = Counter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.remove(counter)
