"""Instrumented operation counters.

Tracks per-element floating-point multiplies applied to binary-conv
outputs (the scaling stage of the multiplicative baseline). The
self-distribution inference path must leave this counter at zero: its
shifts are additions and its convolutions are XNOR+popcount.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

_TLS = threading.local()


def _counts() -> dict:
    if not hasattr(_TLS, "counts"):
        _TLS.counts = {"post_conv_muls": 0}
    return _TLS.counts


def add_post_conv_muls(n: int):
    _counts()["post_conv_muls"] += int(n)


def post_conv_muls() -> int:
    return _counts()["post_conv_muls"]


def reset():
    _counts()["post_conv_muls"] = 0


@contextmanager
def counting():
    """Zero the counter, yield the counts dict, leave the total readable."""
    reset()
    yield _counts()
