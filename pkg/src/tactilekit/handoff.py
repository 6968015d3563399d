"""Bounded depth-1 handoff between a producer and its consumers.

The producer never blocks: ``put`` overwrites whatever is waiting.  Each
consumer asks for anything newer than the version it last saw, so slow
consumers skip frames instead of queueing them.
"""

from __future__ import annotations

import threading


class LatestSlot:
    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._version = 0
        self._closed = False
        self.dropped = 0  # puts that replaced an untaken item
        self._taken = True

    @property
    def version(self) -> int:
        return self._version

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, item) -> int:
        with self._cond:
            if not self._taken:
                self.dropped += 1
            self._item = item
            self._version += 1
            self._taken = False
            self._cond.notify_all()
            return self._version

    def peek(self):
        """(version, item) without waiting; version 0 means nothing yet."""
        with self._cond:
            return self._version, self._item

    def wait_newer(self, after: int, timeout: float | None = None):
        """Block until the version exceeds ``after``; returns (version, item) or None."""
        with self._cond:
            ok = self._cond.wait_for(lambda: self._version > after or self._closed, timeout)
            if not ok or self._version <= after:
                return None
            return self._version, self._item

    def take(self, timeout: float | None = None):
        """Single-consumer pop: the newest item, or None on timeout/close."""
        with self._cond:
            ok = self._cond.wait_for(lambda: not self._taken or self._closed, timeout)
            if not ok or self._taken:
                return None
            self._taken = True
            return self._item

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()
