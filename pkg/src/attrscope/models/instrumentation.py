"""Call counters so evaluation discipline can be asserted in tests."""
from __future__ import annotations

from collections import Counter

call_counters: Counter = Counter()


def bump(name: str) -> None:
    call_counters[name] += 1


def reset_counters() -> None:
    call_counters.clear()
