"""Logical buffer accounting.

Peak memory is measured as the running maximum of bytes registered in
"fast" memory, broken down by tag. This is deterministic and independent of
the Python allocator, which makes it usable as a test oracle.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

TAGS = ("model", "tile", "features", "maps", "work", "merge")


class AccountingError(RuntimeError):
    """Raised on unpaired register/release or an untracked buffer in audit mode."""


@dataclass(frozen=True)
class Handle:
    id: int
    tag: str
    nbytes: int


class BufferAccountant:
    """Track logical bytes per tag with a running peak.

    In audit mode, tags must come from :data:`TAGS`, and :meth:`require`
    raises when a buffer about to be consumed was never registered.
    """

    def __init__(self, audit: bool = False):
        self.audit = audit
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._live: dict[int, Handle] = {}
        self._tracked: dict[int, int] = {}  # id(array) -> handle id
        self._obj_of: dict[int, int] = {}
        self.current = 0
        self.peak = 0
        self.current_by_tag = {t: 0 for t in TAGS}
        self.peak_by_tag = {t: 0 for t in TAGS}
        self._timeline: list[tuple[str, int]] = []

    def register(self, tag: str, obj) -> Handle:
        """Register an array (or anything with ``nbytes``, or a raw int)."""
        if isinstance(obj, (int, np.integer)):
            nbytes = int(obj)
        else:
            nbytes = int(obj.nbytes)
        if tag not in self.current_by_tag:
            if self.audit:
                raise AccountingError(f"unknown tag {tag!r}")
            self.current_by_tag[tag] = 0
            self.peak_by_tag[tag] = 0
        if nbytes < 0:
            raise AccountingError("negative size")
        with self._lock:
            h = Handle(next(self._ids), tag, nbytes)
            self._live[h.id] = h
            if not isinstance(obj, (int, np.integer)):
                self._tracked[id(obj)] = h.id
                self._obj_of[h.id] = id(obj)
            self.current += nbytes
            self.current_by_tag[tag] += nbytes
            self.peak = max(self.peak, self.current)
            self.peak_by_tag[tag] = max(self.peak_by_tag[tag], self.current_by_tag[tag])
            self._timeline.append((tag, nbytes))
        return h

    def release(self, handle: Handle) -> None:
        with self._lock:
            if self._live.pop(handle.id, None) is None:
                raise AccountingError(f"double release of handle {handle.id}")
            oid = self._obj_of.pop(handle.id, None)
            if oid is not None and self._tracked.get(oid) == handle.id:
                del self._tracked[oid]
            self.current -= handle.nbytes
            self.current_by_tag[handle.tag] -= handle.nbytes
            self._timeline.append((handle.tag, -handle.nbytes))

    def require(self, obj) -> None:
        """In audit mode, fail if ``obj`` is not a currently registered buffer."""
        if self.audit and id(obj) not in self._tracked:
            raise AccountingError("buffer consumed without being registered")

    @contextmanager
    def hold(self, tag: str, obj):
        h = self.register(tag, obj)
        try:
            yield obj
        finally:
            self.release(h)

    def peak_of(self, tags) -> int:
        """Peak of the summed current bytes over a subset of tags."""
        tags = set(tags)
        cur = peak = 0
        with self._lock:
            for tag, delta in self._timeline:
                if tag in tags:
                    cur += delta
                    peak = max(peak, cur)
        return peak

    def peak_excluding(self, *tags: str) -> int:
        return self.peak_of(t for t in self.current_by_tag if t not in tags)

    @property
    def live_count(self) -> int:
        return len(self._live)

    def live_tags(self) -> list[str]:
        return sorted({h.tag for h in self._live.values()})


class NullAccountant(BufferAccountant):
    """Accountant that records nothing; used when no measurement is requested."""

    def register(self, tag, obj):
        return Handle(0, tag, 0)

    def release(self, handle):
        pass

    def require(self, obj):
        pass


def ensure(accountant: BufferAccountant | None) -> BufferAccountant:
    return NullAccountant() if accountant is None else accountant
