"""Opt-in multiply-accumulate counters.

Kernels call :func:`add`; nothing is recorded unless a :func:`counting`
block is active, so normal runs pay one truthiness check per kernel call.
One MAC counts as one FLOP throughout the package.
"""
from collections import Counter
from contextlib import contextmanager

_active = []


def add(key, n):
    if _active:
        for c in _active:
            c[key] += int(n)


@contextmanager
def counting():
    """Collect MAC counts by kernel name for the duration of the block.

    >>> with counting() as c:
    ...     add("demo", 3)
    >>> c["demo"]
    3
    """
    c = Counter()
    _active.append(c)
    try:
        yield c
    finally:
        _active.remove(c)
